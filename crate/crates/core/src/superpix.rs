//! Differentiable superpixels: soft SLIC-style clustering of a feature map.
//!
//! Pixels are softly assigned to every centroid with
//! `Q_jk ∝ exp(−(‖f_j − c_k‖² + λ‖p_j − p_k‖²) / τ)`, and centroids are
//! re-estimated as `Q`-weighted means. Both steps stay on the tape, so
//! gradients reach the feature map through the assignments and the centroids.
//! Assignment is dense over all `K` centroids (cost `N·K` per iteration).

use crate::error::{invalid, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::Scalar;

/// Clusters with soft mass at or below this keep their previous centroid.
pub const EMPTY_MASS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SlicConfig {
    /// Target superpixel count `K`.
    pub k: usize,
    pub iters: usize,
    /// Weight of squared spatial distance (positions normalized to `[0, 1]`).
    pub compactness: f64,
    /// Softness `τ` of the assignment.
    pub temperature: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k: 256,
            iters: 5,
            compactness: 0.5,
            temperature: 0.1,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return invalid("superpixel count must be at least 1");
        }
        if self.iters == 0 {
            return invalid("superpixel iterations must be at least 1");
        }
        if !(self.compactness >= 0.0) {
            return invalid(format!("compactness must be nonnegative, got {}", self.compactness));
        }
        if !(self.temperature > 0.0) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Seed positions `(row, col)` in continuous pixel coordinates (pixel `i`
/// has its center at `i`), laid out on the grid `rows × cols = k` whose
/// aspect ratio best matches the image. Falls back to evenly strided pixels
/// when no factorization fits.
pub fn grid_seeds(h: usize, w: usize, k: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 || k > h * w {
        return invalid(format!("cannot place {k} superpixel seeds on a {h}×{w} map"));
    }
    let aspect = (h as f64 / w as f64).ln();
    let grid = (1..=k)
        .filter(|r| k % r == 0)
        .map(|r| (r, k / r))
        .filter(|&(r, c)| r <= h && c <= w)
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64).ln() - aspect).abs();
            let db = ((b.0 as f64 / b.1 as f64).ln() - aspect).abs();
            da.total_cmp(&db)
        });
    Ok(match grid {
        Some((gr, gc)) => {
            let mut seeds = Vec::with_capacity(k);
            for i in 0..gr {
                for j in 0..gc {
                    let r = (i as f64 + 0.5) * h as f64 / gr as f64 - 0.5;
                    let c = (j as f64 + 0.5) * w as f64 / gc as f64 - 0.5;
                    seeds.push((r, c));
                }
            }
            seeds
        }
        None => {
            let n = h * w;
            (0..k)
                .map(|i| {
                    let p = ((i as f64 + 0.5) * n as f64 / k as f64) as usize;
                    ((p / w) as f64, (p % w) as f64)
                })
                .collect()
        }
    })
}

/// `k × (h·w)` bilinear sampling weights reading each seed from a map.
fn sampling_matrix<T: Scalar>(h: usize, w: usize, seeds: &[(f64, f64)]) -> Tensor<T> {
    let n = h * w;
    let mut s = Tensor::zeros(&[seeds.len(), n]);
    for (k, &(r, c)) in seeds.iter().enumerate() {
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        for (rr, wr) in [(r0, 1.0 - fr), (r1, fr)] {
            for (cc, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                let v = s.at2(k, rr * w + cc) + T::lit(wr * wc);
                s.set2(k, rr * w + cc, v);
            }
        }
    }
    s
}

/// Pixel positions `N×2`, normalized to `((row + 0.5)/h, (col + 0.5)/w)`.
pub fn pixel_positions<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (p, axis) = (i / 2, i % 2);
        if axis == 0 {
            T::lit(((p / w) as f64 + 0.5) / h as f64)
        } else {
            T::lit(((p % w) as f64 + 0.5) / w as f64)
        }
    })
}

fn seed_positions<T: Scalar>(h: usize, w: usize, seeds: &[(f64, f64)]) -> Tensor<T> {
    Tensor::from_fn(&[seeds.len(), 2], |i| {
        let (r, c) = seeds[i / 2];
        if i % 2 == 0 {
            T::lit((r + 0.5) / h as f64)
        } else {
            T::lit((c + 0.5) / w as f64)
        }
    })
}

/// Initial centroids `K×(C+2)`: features sampled at grid seeds, then the
/// normalized `(row, col)` seed position.
pub fn init_centroids_grid<T: Scalar>(f: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (c, h, w) = f.dims3()?;
    let seeds = grid_seeds(h, w, k)?;
    let feats = f.clone().reshape(&[c, h * w])?.transpose()?;
    let cf = sampling_matrix::<T>(h, w, &seeds).matmul(&feats)?;
    let cp = seed_positions::<T>(h, w, &seeds);
    Ok(Tensor::from_fn(&[k, c + 2], |i| {
        let (row, col) = (i / (c + 2), i % (c + 2));
        if col < c {
            cf.at2(row, col)
        } else {
            cp.at2(row, col - c)
        }
    }))
}

/// Tape handles produced by [`soft_assign_iterate`].
#[derive(Clone, Copy, Debug)]
pub struct SoftAssignment {
    /// `N×K` soft assignment, rows sum to one.
    pub q: Var,
    /// `K×C` centroid features after the last update.
    pub centroids: Var,
    /// `K×2` centroid positions after the last update.
    pub centroid_pos: Var,
}

/// One assignment step against fixed centroids: softmax over `k` of `−d/τ`.
pub fn assign<T: Scalar>(
    tape: &mut Tape<T>,
    feats: Var,
    pos: Var,
    centroids: Var,
    centroid_pos: Var,
    config: &SlicConfig,
) -> Result<Var> {
    config.validate()?;
    let df = tape.sq_dist(feats, centroids)?;
    let d = if config.compactness > 0.0 {
        let dp = tape.sq_dist(pos, centroid_pos)?;
        let dp = tape.scale(dp, T::lit(config.compactness))?;
        tape.add(df, dp)?
    } else {
        df
    };
    let logits = tape.scale(d, T::lit(-1.0 / config.temperature))?;
    tape.softmax(logits, 1)
}

/// Runs `config.iters` rounds of soft assignment and centroid update on the
/// feature map `f: C×H×W`.
pub fn soft_assign_iterate<T: Scalar>(tape: &mut Tape<T>, f: Var, config: &SlicConfig) -> Result<SoftAssignment> {
    config.validate()?;
    let (c, h, w) = tape.value(f).dims3()?;
    let seeds = grid_seeds(h, w, config.k)?;
    let flat = tape.reshape(f, &[c, h * w])?;
    let feats = tape.transpose(flat)?;
    let sampler = tape.constant(sampling_matrix(h, w, &seeds));
    let pos = tape.constant(pixel_positions(h, w));
    let mut centroids = tape.matmul(sampler, feats)?;
    let mut centroid_pos = tape.constant(seed_positions(h, w, &seeds));
    let mut q = None;
    for _ in 0..config.iters {
        let qi = assign(tape, feats, pos, centroids, centroid_pos, config)?;
        centroids = tape.region_mean(qi, feats, Some(centroids), EMPTY_MASS_EPS)?;
        centroid_pos = tape.region_mean(qi, pos, Some(centroid_pos), EMPTY_MASS_EPS)?;
        q = Some(qi);
    }
    Ok(SoftAssignment {
        q: q.expect("iters >= 1"),
        centroids,
        centroid_pos,
    })
}

/// Per-pixel argmax of `Q`, first index on ties.
pub fn hard_map<T: Scalar>(q: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = q.dims2()?;
    if n == 0 || k == 0 {
        return invalid("hard_map on an empty assignment");
    }
    q.argmax_rows()
}

/// Snapshot of a finished assignment.
#[derive(Clone, Debug)]
pub struct SuperpixelAssignment<T> {
    pub q: Tensor<T>,
    /// Hard map `S`, one cluster index per pixel.
    pub labels: Vec<usize>,
    /// `K×(C+2)` centroid features and positions.
    pub centroids: Tensor<T>,
}

impl<T: Scalar> SuperpixelAssignment<T> {
    pub fn from_tape(tape: &Tape<T>, soft: &SoftAssignment) -> Result<Self> {
        let q = tape.value(soft.q).clone();
        let labels = hard_map(&q)?;
        let cf = tape.value(soft.centroids);
        let cp = tape.value(soft.centroid_pos);
        let (k, c) = cf.dims2()?;
        let centroids = Tensor::from_fn(&[k, c + 2], |i| {
            let (row, col) = (i / (c + 2), i % (c + 2));
            if col < c {
                cf.at2(row, col)
            } else {
                cp.at2(row, col - c)
            }
        });
        Ok(Self { q, labels, centroids })
    }
}

/// Eager convenience wrapper: clusters `f` without keeping a tape.
pub fn superpixels<T: Scalar>(f: &Tensor<T>, config: &SlicConfig) -> Result<SuperpixelAssignment<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let soft = soft_assign_iterate(&mut tape, fv, config)?;
    SuperpixelAssignment::from_tape(&tape, &soft)
}
