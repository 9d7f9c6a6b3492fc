mod common;

use common::*;
use indexmap::IndexMap;
use ssgrn::layers::Bound;
use ssgrn::network::*;
use ssgrn::numcore::gradcheck::GradCheck;
use ssgrn::numcore::{inner_products, reset_inner_products};
use ssgrn::{Tape, Tensor, Var};

fn desk(variant: Variant, bands: usize, h: usize, w: usize, widths: [usize; 3], k: usize, m: usize) -> ModelConfig {
    let mut c = ModelConfig::new(bands, h, w, 3, variant).with_widths(widths);
    c.slic.k = k;
    c.spectral_descriptors = m;
    c
}

/// Binds a state with the named parameters replaced by tape variables.
fn bind_with(tape: &mut Tape<f64>, state: &ModelState<f64>, names: &[String], vars: &[Var]) -> Bound {
    let mut map = IndexMap::new();
    for (n, t) in &state.params {
        let v = match names.iter().position(|x| x == n) {
            Some(i) => vars[i],
            None => tape.constant(t.clone()),
        };
        map.insert(n.clone(), v);
    }
    Bound::new(map)
}

#[test]
fn backbone_shapes() {
    let c = desk(Variant::Fcn, 8, 16, 16, [8, 16, 32], 4, 4);
    let s = ModelState::<f64>::init(c, 0).unwrap();
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let mut r = rng(1);
    let x = tape.constant(rand_tensor(&mut r, &[8, 16, 16], -1.0, 1.0));
    let f = backbone_forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(f), &[32, 8, 8]);
    let odd = tape.constant(Tensor::zeros(&[8, 15, 16]));
    assert!(backbone_forward(&mut tape, &p, odd).is_err());

    let full = ModelConfig::new(200, 144, 144, 16, Variant::Ssgrn);
    assert_eq!(full.feature_extent(), (72, 72));
    assert_eq!(full.widths[2], 256);
}

#[test]
fn backbone_gradient_matches_finite_differences() {
    let c = desk(Variant::Fcn, 3, 6, 6, [4, 4, 8], 4, 4);
    let s = ModelState::<f64>::init(c, 2).unwrap();
    let mut r = rng(3);
    let img = rand_tensor(&mut r, &[3, 6, 6], -1.0, 1.0);
    let names = vec!["backbone.block1.conv.weight".to_string(), "backbone.block1.conv.bias".to_string()];
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| s.params[n].clone()).collect();
    let rep = GradCheck::default()
        .run(&inputs, |tape, v| {
            let p = bind_with(tape, &s, &names, v);
            let x = tape.constant(img.clone());
            let f = backbone_forward(tape, &p, x)?;
            tape.mean(f)
        })
        .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn fuse_examples() {
    let mut r = rng(4);
    let f = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let (fv, av, bv) = (tape.constant(f.clone()), tape.constant(a.clone()), tape.constant(b.clone()));
    let z = tape.constant(Tensor::zeros(&[2, 3, 3]));
    let out = fuse(&mut tape, z, z, fv).unwrap();
    assert_eq!(tape.value(out), &f);
    let out = fuse(&mut tape, av, bv, z).unwrap();
    assert_eq!(tape.value(out), &a.add(&b).unwrap());
    let out = fuse(&mut tape, av, bv, fv).unwrap();
    let expected: Vec<f64> = (0..18).map(|i| a.data()[i] + b.data()[i] + f.data()[i]).collect();
    assert_eq!(tape.value(out).data(), expected.as_slice());
    let bad = tape.constant(Tensor::zeros(&[2, 3, 2]));
    assert!(fuse(&mut tape, av, bad, fv).is_err());
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let c = |tape: &mut Tape<f64>, v: f64| Some(tape.constant(Tensor::scalar(v)));
    let zeros = Losses {
        fcn: c(&mut tape, 0.0),
        spatial: c(&mut tape, 0.0),
        spectral: c(&mut tape, 0.0),
        fused: c(&mut tape, 0.0),
    };
    for v in Variant::ALL {
        let l = total_loss(&mut tape, v, &zeros).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
    let l = Losses {
        fcn: None,
        spatial: c(&mut tape, 1.0),
        spectral: c(&mut tape, 2.0),
        fused: c(&mut tape, 3.0),
    };
    let t = total_loss(&mut tape, Variant::Ssgrn, &l).unwrap();
    assert_eq!(tape.value(t).item(), 6.0);
    assert!(total_loss(&mut tape, Variant::Fcn, &l).is_err());
    assert!(total_loss(&mut tape, Variant::Ssgrn, &Losses::default()).is_err());
}

#[test]
fn ssgrn_total_is_four_cross_entropies() {
    let mut c = desk(Variant::Ssgrn, 4, 8, 8, [4, 8, 8], 4, 4);
    c.classes = 2;
    let s = ModelState::<f64>::init(c.clone(), 5).unwrap();
    let mut r = rng(6);
    let img = rand_tensor(&mut r, &[4, 8, 8], -1.0, 1.0);
    let targets: Vec<(usize, usize)> = (0..10).map(|i| (i * 6, i % 2)).collect();
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let x = tape.constant(img);
    let out = forward(&mut tape, &c, &p, x, ForwardOptions::default()).unwrap();
    let losses = Losses::compute(&mut tape, &out.logits, &targets).unwrap();
    let total = total_loss(&mut tape, Variant::Ssgrn, &losses).unwrap();
    let lg = out.logits;
    let expected: f64 = [lg.sa_main, lg.sa_aux, lg.se, lg.fused]
        .iter()
        .map(|v| cross_entropy_oracle(tape.value(v.unwrap()), &targets))
        .sum();
    assert!((tape.value(total).item() - expected).abs() < 1e-6);
    assert!(lg.fcn.is_none());
    assert_eq!(tape.shape(out.prediction), &[2, 8, 8]);
}

#[test]
fn variants_build_their_heads_and_are_deterministic() {
    let mut r = rng(7);
    let img = rand_tensor(&mut r, &[3, 9, 11], -1.0, 1.0);
    for v in Variant::ALL {
        let c = desk(v, 3, 9, 11, [4, 8, 8], 6, 4);
        let s = ModelState::<f64>::init(c.clone(), 8).unwrap();
        let a = predict(&s, &img, ForwardOptions::default()).unwrap();
        let b = predict(&s, &img, ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9 * 11);
        assert!(a.iter().all(|&k| k < 3));
        let names: Vec<&String> = s.params.keys().collect();
        assert_eq!(names.iter().any(|n| n.starts_with("sagrn.")), v.has_spatial());
        assert_eq!(names.iter().any(|n| n.starts_with("segrn.")), v.has_spectral());
        assert_eq!(names.iter().any(|n| n.starts_with("head.fused")), v == Variant::Ssgrn);
    }
}

#[test]
fn padding_keeps_original_pixels() {
    let mut r = rng(9);
    let img = rand_tensor(&mut r, &[2, 3, 5], -1.0, 1.0);
    let p = pad_even(&img).unwrap();
    assert_eq!(p.shape(), &[2, 4, 6]);
    for c in 0..2 {
        for y in 0..4 {
            for x in 0..6 {
                let expected = if y < 3 && x < 5 { img.at3(c, y, x) } else { 0.0 };
                assert_eq!(p.at3(c, y, x), expected);
            }
        }
    }
}

#[test]
fn parameter_and_attention_counts() {
    assert_eq!(count_attention_ops(2, 4), 12);
    assert_eq!(count_attention_ops(0, 100), 0);
    let c = desk(Variant::Fcn, 8, 16, 16, [8, 16, 32], 4, 4);
    let s = ModelState::<f32>::init(c, 0).unwrap();
    let expected = (8 * 8 * 9 + 8 + 16)
        + (16 * 8 * 9 + 16 + 32)
        + (32 * 16 * 9 + 32 + 64)
        + (16 * 32 * 9 + 16 + 32)
        + (3 * 16 + 3);
    assert_eq!(count_params(&s), expected);

    for (k, hw) in [(4, 8), (16, 16)] {
        let c = desk(Variant::Sagrn, 2, 2 * hw, 2 * hw, [4, 4, 8], k, 4);
        let s = ModelState::<f64>::init(c.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(&[2, 2 * hw, 2 * hw], |i| (i as f64 * 0.1).sin()));
        reset_inner_products();
        forward(&mut tape, &c, &p, x, ForwardOptions::default()).unwrap();
        assert_eq!(inner_products() as usize, count_attention_ops(k, hw * hw));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = desk(Variant::Ssgrn, 5, 10, 7, [4, 8, 8], 6, 3);
    c.slic.temperature = 0.3;
    let mut s = ModelState::<f32>::init(c, 11).unwrap();
    s.iteration = 42;
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&s, &a).unwrap();
    let back: ModelState<f32> = load_checkpoint(&a).unwrap();
    assert_eq!(back, s);
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read(&a).unwrap().starts_with(b"SSGRNCKPT 1\n"));

    let bytes = std::fs::read(&a).unwrap();
    assert!(read_checkpoint::<f32, _>(&bytes[..bytes.len() - 2]).is_err());
    assert!(read_checkpoint::<f32, _>(&b"SSGRNCKPT 2\n"[..]).is_err());
}
