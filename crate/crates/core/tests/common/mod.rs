//! Shared helpers and brute-force oracles for the integration tests.
//! Nothing here calls into the tape's backward pass.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssgrn::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Triple-loop matrix product.
pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Direct cross-correlation with explicit bounds checks.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += x.at3(ci, iy as usize, ix as usize)
                                * w.data()[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).unwrap()
}

/// Per-pixel log-softmax cross entropy, averaged over targets.
pub fn cross_entropy_oracle(logits: &Tensor<f64>, targets: &[(usize, usize)]) -> f64 {
    let c = logits.shape()[0];
    let npix = logits.len() / c;
    let mut total = 0.0;
    for &(p, cls) in targets {
        let col: Vec<f64> = (0..c).map(|ci| logits.data()[ci * npix + p]).collect();
        let denom: f64 = col.iter().map(|v| v.exp()).sum();
        total += -(col[cls].exp() / denom).ln();
    }
    total / targets.len() as f64
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..n {
            out[i * n + j] = (row[j] - mx).exp() / z;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// `x · W + b` with explicit loops.
pub fn linear_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let y = matmul_oracle(x, w);
    let n = y.shape()[1];
    Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % n])
}

pub fn transpose_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[n, m], |i| x.data()[(i % m) * n + i / m])
}

/// Random values for every spec, in spec order.
pub fn random_params(specs: &[ssgrn::layers::ParamSpec], seed: u64, scale: f64) -> Vec<(String, Tensor<f64>)> {
    let mut r = rng(seed);
    specs
        .iter()
        .map(|s| (s.name.clone(), rand_tensor(&mut r, &s.shape, -scale, scale)))
        .collect()
}

/// Places named tensors on the tape as parameters.
pub fn bind_params(tape: &mut ssgrn::Tape<f64>, params: &[(String, Tensor<f64>)]) -> ssgrn::layers::Bound {
    let vars = params
        .iter()
        .map(|(n, t)| (n.clone(), tape.param(t.clone())))
        .collect();
    ssgrn::layers::Bound::new(vars)
}

pub fn param<'a>(params: &'a [(String, Tensor<f64>)], name: &str) -> &'a Tensor<f64> {
    &params.iter().find(|(n, _)| n == name).unwrap().1
}
