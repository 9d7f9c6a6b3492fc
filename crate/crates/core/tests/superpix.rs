mod common;

use common::*;
use rand::Rng;
use ssgrn::numcore::gradcheck::GradCheck;
use ssgrn::superpix::{
    assign, grid_seeds, hard_map, init_centroids_grid, pixel_positions, soft_assign_iterate, superpixels, SlicConfig,
};
use ssgrn::{Tape, Tensor};

fn row_sums(q: &Tensor<f64>) -> Vec<f64> {
    let (n, k) = q.dims2().unwrap();
    (0..n).map(|i| q.data()[i * k..(i + 1) * k].iter().sum()).collect()
}

#[test]
fn grid_spacing_oracle() {
    // 30 / 3 = 10 pixels between neighboring seeds on both axes.
    let seeds = grid_seeds(30, 30, 9).unwrap();
    for (i, a) in seeds.iter().enumerate() {
        for b in &seeds[i + 1..] {
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            let nearest_multiple = (d / 10.0).round().max(1.0) * 10.0;
            if (a.0 == b.0) || (a.1 == b.1) {
                assert!((d - nearest_multiple).abs() <= 1.0, "{a:?} {b:?}");
            }
        }
    }
    assert!(init_centroids_grid(&Tensor::<f64>::zeros(&[1, 2, 2]), 5).is_err());
}

/// Lloyd iterations on features only, from the same seeding.
fn kmeans_oracle(f: &Tensor<f64>, k: usize, iters: usize) -> Vec<usize> {
    let (c, h, w) = f.dims3().unwrap();
    let init = init_centroids_grid(f, k).unwrap();
    let mut cent: Vec<Vec<f64>> = (0..k).map(|i| (0..c).map(|j| init.at2(i, j)).collect()).collect();
    let n = h * w;
    let feat = |p: usize| -> Vec<f64> { (0..c).map(|ch| f.data()[ch * n + p]).collect() };
    let mut labels = vec![0; n];
    for _ in 0..iters {
        for (p, label) in labels.iter_mut().enumerate() {
            let fp = feat(p);
            let mut best = (f64::INFINITY, 0);
            for (ki, ck) in cent.iter().enumerate() {
                let d: f64 = fp.iter().zip(ck).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, ki);
                }
            }
            *label = best.1;
        }
        for (ki, ck) in cent.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&p| labels[p] == ki).collect();
            if members.is_empty() {
                continue;
            }
            for ch in 0..c {
                ck[ch] = members.iter().map(|&p| f.data()[ch * n + p]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    labels
}

#[test]
fn separated_blobs_match_kmeans() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let (h, w) = (10, 12);
        let (cy, cx, rad) = (r.gen_range(2.0..4.0), r.gen_range(2.0..4.0), r.gen_range(2.5..4.0));
        let truth: Vec<usize> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                usize::from((y - cy).powi(2) + (x - cx).powi(2) > rad * rad)
            })
            .collect();
        let f = Tensor::from_fn(&[2, h, w], |i| {
            let p = i % (h * w);
            let base = if truth[p] == 0 { 0.0 } else { 3.0 };
            base + r.gen_range(-0.1..0.1)
        });
        let cfg = SlicConfig {
            k: 2,
            iters: 5,
            compactness: 0.0,
            temperature: 0.1,
        };
        let sp = superpixels(&f, &cfg).unwrap();
        let oracle = kmeans_oracle(&f, 2, 10);
        assert_eq!(sp.labels, oracle, "seed {seed}");
        // partition equals the blobs up to label permutation
        let flip = sp.labels[0] != truth[0];
        for (a, &b) in sp.labels.iter().zip(&truth) {
            assert_eq!(*a, if flip { 1 - b } else { b });
        }
    }
}

#[test]
fn rows_stochastic_and_mass_conserved() {
    let mut r = rng(7);
    let f = rand_tensor(&mut r, &[4, 9, 11], -1.0, 1.0);
    for iters in 1..=4 {
        let cfg = SlicConfig {
            k: 6,
            iters,
            ..SlicConfig::default()
        };
        let sp = superpixels(&f, &cfg).unwrap();
        assert!(sp.q.data().iter().all(|&v| v >= 0.0));
        for s in row_sums(&sp.q) {
            assert!((s - 1.0).abs() <= 1e-6);
        }
        assert!((sp.q.sum() - 99.0).abs() <= 1e-4);
        assert!(sp.centroids.is_finite());
        assert_eq!(sp.centroids.shape(), &[6, 6]);
        for (p, &l) in sp.labels.iter().enumerate() {
            assert_eq!(l, ssgrn::numcore::argmax_first(&sp.q.data()[p * 6..(p + 1) * 6]));
        }
    }
}

#[test]
fn hard_map_matches_independent_scan() {
    let mut r = rng(11);
    let q = rand_tensor(&mut r, &[40, 7], 0.0, 1.0);
    let s = hard_map(&q).unwrap();
    for (i, &l) in s.iter().enumerate() {
        let row = &q.data()[i * 7..(i + 1) * 7];
        let mut best = 0;
        for j in 0..7 {
            if row[j] > row[best] {
                best = j;
            }
        }
        assert_eq!(l, best);
    }
}

#[test]
fn gradient_reaches_features() {
    let cfg = SlicConfig {
        k: 4,
        iters: 2,
        compactness: 0.5,
        temperature: 0.5,
    };
    let fd = GradCheck::default();
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let f = rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
        let proj_q = rand_tensor(&mut r, &[16, 4], -1.0, 1.0);
        let proj_c = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);

        // sum(Q) is constant (= N); its gradient must vanish on both sides.
        let rep = fd
            .run(&[f.clone()], |tape, v| {
                let s = soft_assign_iterate(tape, v[0], &cfg)?;
                tape.sum(s.q)
            })
            .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");

        let rep = fd
            .run(&[f.clone()], |tape, v| {
                let s = soft_assign_iterate(tape, v[0], &cfg)?;
                let wq = tape.constant(proj_q.clone());
                let wc = tape.constant(proj_c.clone());
                let a = tape.mul(s.q, wq)?;
                let b = tape.mul(s.centroids, wc)?;
                let (a, b) = (tape.sum(a)?, tape.sum(b)?);
                tape.add(a, b)
            })
            .unwrap();
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn lower_temperature_hardens_assignment() {
    let mut r = rng(21);
    let (h, w) = (6, 7);
    let feats = rand_tensor(&mut r, &[h * w, 3], -1.0, 1.0);
    let cents = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let cpos = rand_tensor(&mut r, &[5, 2], 0.0, 1.0);
    let mut prev: Option<Vec<f64>> = None;
    for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05] {
        let cfg = SlicConfig {
            k: 5,
            iters: 1,
            compactness: 0.5,
            temperature: tau,
        };
        let mut tape = Tape::new();
        let fv = tape.constant(feats.clone());
        let pv = tape.constant(pixel_positions(h, w));
        let cv = tape.constant(cents.clone());
        let cp = tape.constant(cpos.clone());
        let q = assign(&mut tape, fv, pv, cv, cp, &cfg).unwrap();
        let q = tape.value(q);
        let maxes: Vec<f64> = (0..h * w)
            .map(|i| q.data()[i * 5..(i + 1) * 5].iter().cloned().fold(0.0, f64::max))
            .collect();
        if let Some(p) = &prev {
            for (a, b) in maxes.iter().zip(p) {
                assert!(a + 1e-12 >= *b);
            }
        }
        prev = Some(maxes);
    }
}

#[test]
fn invalid_temperature_is_rejected() {
    let f = Tensor::<f64>::zeros(&[1, 4, 4]);
    let cfg = SlicConfig {
        temperature: -1.0,
        k: 2,
        ..SlicConfig::default()
    };
    assert!(superpixels(&f, &cfg).is_err());
}
