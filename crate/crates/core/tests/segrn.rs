mod common;

use common::*;
use ssgrn::layers::Bound;
use ssgrn::numcore::gradcheck::GradCheck;
use ssgrn::segrn::*;
use ssgrn::{Tape, Tensor, Var};

#[test]
fn downsample_examples() {
    let mut tape = Tape::<f64>::new();
    let mut r = rng(1);
    let f = tape.constant(rand_tensor(&mut r, &[2, 5, 7], -1.0, 1.0));
    assert_eq!(spectral_downsample(&mut tape, f, 1).unwrap(), f);

    let c = tape.constant(Tensor::full(&[3, 9, 7], 0.3));
    let d = spectral_downsample(&mut tape, c, 4).unwrap();
    assert_eq!(tape.shape(d), &[3, 3, 2]);
    assert!(tape.value(d).data().iter().all(|&v| v == 0.3));

    let s = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let d = spectral_downsample(&mut tape, s, 2).unwrap();
    assert_eq!(tape.value(d).data(), &[2.5]);
    assert!(spectral_downsample(&mut tape, s, 0).is_err());
}

#[test]
fn descriptor_examples() {
    let mut tape = Tape::<f64>::new();
    let fp = tape.constant(Tensor::from_f64(&[2, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap());
    let d = spectral_descriptors(&mut tape, fp, &group_bands(2, 1).unwrap()).unwrap();
    assert_eq!(tape.value(d).data(), &[3.0, 5.0]);

    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[5, 3, 3], -1.0, 1.0);
    let xv = tape.constant(x.clone());
    let d = spectral_descriptors(&mut tape, xv, &group_bands(5, 5).unwrap()).unwrap();
    assert_eq!(tape.value(d).data(), x.data());
}

#[test]
fn descriptors_match_loop_average() {
    for seed in 0..5 {
        let mut r = rng(10 + seed);
        let (c, h, w, m) = (10, 3, 4, 4);
        let x = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);
        let g = group_bands(c, m).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let d = spectral_descriptors(&mut tape, xv, &g).unwrap();
        let d = tape.value(d);
        assert_eq!(d.shape(), &[m, h * w]);
        for (gi, range) in g.ranges().iter().enumerate() {
            for p in 0..h * w {
                let mean = range.clone().map(|b| x.data()[b * h * w + p]).sum::<f64>() / range.len() as f64;
                assert!((d.at2(gi, p) - mean).abs() < 1e-6);
            }
        }
    }
}

fn bind(tape: &mut Tape<f64>, params: &[(String, Tensor<f64>)]) -> SegrnParams {
    let b = bind_params(tape, params);
    SegrnParams::bind(&b).unwrap()
}

#[test]
fn reconstruction_matches_step_by_step_oracle() {
    for seed in 0..5 {
        let (c, h, w, m, stride) = (4, 4, 4, 2, 2);
        let (hp, wp) = downsampled_extent(h, w, stride);
        let l = hp * wp;
        let params = random_params(&SegrnParams::specs(l), 20 + seed, 0.7);
        let mut r = rng(30 + seed);
        let f = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);

        let mut tape = Tape::new();
        let p = bind(&mut tape, &params);
        let fv = tape.constant(f.clone());
        let g = group_bands(c, m).unwrap();
        let out = segrn_forward(&mut tape, &p, fv, &g, stride).unwrap();
        assert_eq!(tape.shape(out.features), &[c, h, w]);

        // oracle
        let fp = Tensor::from_fn(&[c, l], |i| {
            let (ch, q) = (i / l, i % l);
            let (y, x) = (q / wp, q % wp);
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += f.at3(ch, 2 * y + dy, 2 * x + dx);
                }
            }
            s / 4.0
        });
        let d = Tensor::from_fn(&[m, l], |i| {
            let (gi, q) = (i / l, i % l);
            (fp.data()[(2 * gi) * l + q] + fp.data()[(2 * gi + 1) * l + q]) / 2.0
        });
        let lin = |x: &Tensor<f64>, n: &str| {
            linear_oracle(x, param(&params, &format!("segrn.{n}.weight")), param(&params, &format!("segrn.{n}.bias")))
        };
        let z = softmax_rows_oracle(&matmul_oracle(&lin(&d, "phi"), &transpose_oracle(&lin(&d, "psi"))));
        let gr = matmul_oracle(&matmul_oracle(&z, &lin(&d, "xi")), param(&params, "segrn.gcn.weight")).map(|v| v.max(0.0));
        let a = softmax_rows_oracle(&matmul_oracle(&lin(&gr, "rho"), &transpose_oracle(&lin(&fp, "eta"))));
        let small = matmul_oracle(&transpose_oracle(&a), &lin(&gr, "zeta"));
        assert!(tape.value(out.adjacency).max_abs_diff(&z) < 1e-10);
        assert!(tape.value(out.affinity).max_abs_diff(&a) < 1e-10);
        assert_eq!(tape.shape(out.affinity), &[m, c]);

        let mut t2 = Tape::new();
        let sv = t2.constant(small.reshape(&[c, hp, wp]).unwrap());
        let up = t2.bilinear_upsample(sv, h, w).unwrap();
        assert!(tape.value(out.features).max_abs_diff(t2.value(up)) < 1e-5);

        for row in 0..m {
            let s: f64 = (0..m).map(|j| tape.value(out.adjacency).at2(row, j)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn reconstruction_degenerate_cases() {
    let (c, h, w, m) = (4, 4, 4, 2);
    let l = h * w;
    let mut params = random_params(&SegrnParams::specs(l), 40, 0.7);
    // bands 0,1 equal bands 2,3 → identical groups
    let f = Tensor::from_fn(&[c, h, w], |i| ((i % (2 * l)) as f64 * 0.21).cos());
    let mut tape = Tape::new();
    let p = bind(&mut tape, &params);
    let fv = tape.constant(f.clone());
    let out = segrn_forward(&mut tape, &p, fv, &group_bands(c, m).unwrap(), 1).unwrap();
    assert!(tape.value(out.adjacency).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));

    for (n, t) in params.iter_mut() {
        if n.starts_with("segrn.zeta") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut tape = Tape::new();
    let p = bind(&mut tape, &params);
    let fv = tape.constant(f);
    let out = segrn_forward(&mut tape, &p, fv, &group_bands(c, m).unwrap(), 1).unwrap();
    assert!(tape.value(out.features).data().iter().all(|&v| v == 0.0));
}

#[test]
fn branch_gradient_matches_finite_differences() {
    let (c, h, w, m, stride) = (4, 6, 5, 3, 2);
    let (hp, wp) = downsampled_extent(h, w, stride);
    let params = random_params(&SegrnParams::specs(hp * wp), 50, 0.5);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut r = rng(51);
    let f = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let proj = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let mut inputs = vec![f];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let grouping = group_bands(c, m).unwrap();
    let rep = GradCheck::default()
        .run(&inputs, |tape, v| {
            let bound = Bound::new(names.iter().cloned().zip(v[1..].iter().copied()).collect());
            let p = SegrnParams::bind(&bound)?;
            let out = segrn_forward(tape, &p, v[0], &grouping, stride)?;
            let pw = tape.constant(proj.clone());
            let y = tape.mul(out.features, pw)?;
            tape.sum(y)
        })
        .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn loss_examples() {
    let classes = 5;
    let targets = [(0, 4), (2, 1)];
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::zeros(&[classes, 1, 3]));
    let l = segrn_loss(&mut tape, u, &targets).unwrap();
    assert!((tape.value(l).item() - (classes as f64).ln()).abs() < 1e-12);

    let sharp = tape.constant(Tensor::from_fn(&[classes, 1, 3], |i| {
        let (ch, p) = (i / 3, i % 3);
        if targets.iter().any(|&(tp, tc)| tp == p && tc == ch) {
            80.0
        } else {
            0.0
        }
    }));
    let l = segrn_loss(&mut tape, sharp, &targets).unwrap();
    assert!(tape.value(l).item() < 1e-20);

    let mut r = rng(60);
    let x = rand_tensor(&mut r, &[classes, 1, 3], -3.0, 3.0);
    let xv: Var = tape.constant(x.clone());
    let l = segrn_loss(&mut tape, xv, &targets).unwrap();
    assert!((tape.value(l).item() - cross_entropy_oracle(&x, &targets)).abs() < 1e-6);
    assert!(segrn_loss(&mut tape, xv, &[]).is_err());
}
