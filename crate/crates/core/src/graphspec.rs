//! Spectral graph operators: Laplacians, Chebyshev filters, and the
//! renormalized graph convolution shared by both reasoning branches.
//!
//! Dense matrices only; node counts up to a few thousand are fine.

use crate::error::{invalid, shape_err, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::Scalar;

/// Nonnegative square adjacency matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphAdjacency<T> {
    a: Tensor<T>,
}

impl<T: Scalar> GraphAdjacency<T> {
    pub fn new(a: Tensor<T>) -> Result<Self> {
        let (m, n) = a.dims2()?;
        if m != n {
            return shape_err("GraphAdjacency", format!("adjacency must be square, got {m}×{n}"));
        }
        if a.data().iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return invalid("adjacency entries must be finite and nonnegative");
        }
        Ok(Self { a })
    }

    pub fn nodes(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn is_symmetric(&self) -> bool {
        let k = self.nodes();
        (0..k).all(|i| (0..i).all(|j| self.a.at2(i, j) == self.a.at2(j, i)))
    }

    fn degrees(&self) -> Vec<T> {
        let k = self.nodes();
        (0..k).map(|i| self.a.data()[i * k..(i + 1) * k].iter().copied().sum()).collect()
    }
}

/// `D^{-1/2} M D^{-1/2}` with zero-degree entries of `D^{-1/2}` taken as 0.
fn sym_normalize<T: Scalar>(m: &Tensor<T>, deg: &[T]) -> Tensor<T> {
    let k = deg.len();
    let inv: Vec<T> = deg
        .iter()
        .map(|&d| if d > T::zero() { T::one() / d.sqrt() } else { T::zero() })
        .collect();
    Tensor::from_fn(&[k, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        inv[i] * m.data()[idx] * inv[j]
    })
}

/// `L̃ = I − D^{-1/2} A D^{-1/2}`; isolated nodes get a diagonal of 1.
pub fn normalized_laplacian<T: Scalar>(adj: &GraphAdjacency<T>) -> Result<Tensor<T>> {
    if !adj.is_symmetric() {
        return invalid("normalized_laplacian requires a symmetric adjacency");
    }
    let mut l = sym_normalize(adj.matrix(), &adj.degrees()).scale(-T::one());
    let k = adj.nodes();
    for i in 0..k {
        let v = l.at2(i, i) + T::one();
        l.set2(i, i, v);
    }
    Ok(l)
}

/// Renormalized propagation matrix `D̂^{-1/2} (A + I) D̂^{-1/2}`.
pub fn renormalized_propagation<T: Scalar>(adj: &GraphAdjacency<T>) -> Tensor<T> {
    let k = adj.nodes();
    let a_hat = adj.matrix().add(&Tensor::eye(k)).expect("square");
    let deg: Vec<T> = (0..k).map(|i| a_hat.data()[i * k..(i + 1) * k].iter().copied().sum()).collect();
    sym_normalize(&a_hat, &deg)
}

/// Chebyshev polynomial of the first kind by the three-term recursion.
pub fn chebyshev_eval<T: Scalar>(n: usize, x: T) -> T {
    let (mut prev, mut cur) = (T::one(), x);
    match n {
        0 => prev,
        1 => cur,
        _ => {
            let two = T::lit(2.0);
            for _ in 2..=n {
                let next = two * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Chebyshev coefficients `θ'_0 … θ'_k` of a truncated spectral filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> SpectralFilter<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return invalid("a spectral filter needs at least one coefficient");
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return invalid("spectral filter coefficients must be finite");
        }
        Ok(Self { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }
}

/// How the largest Laplacian eigenvalue used for rescaling is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMax<T> {
    Fixed(T),
    PowerIteration { iters: usize },
}

impl<T: Scalar> Default for LambdaMax<T> {
    fn default() -> Self {
        LambdaMax::Fixed(T::lit(2.0))
    }
}

/// Dominant eigenvalue magnitude of a square matrix by power iteration
/// (Rayleigh quotient of the final iterate).
pub fn power_iteration<T: Scalar>(m: &Tensor<T>, iters: usize) -> Result<T> {
    let (k, k2) = m.dims2()?;
    if k != k2 {
        return shape_err("power_iteration", format!("matrix must be square, got {k}×{k2}"));
    }
    // Deterministic, non-degenerate start vector.
    let mut v = Tensor::from_fn(&[k, 1], |i| T::one() + T::lit(i as f64 / k as f64));
    let mut lambda = T::zero();
    for _ in 0..iters.max(1) {
        let w = m.matmul(&v)?;
        let norm = w.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            return Ok(T::zero());
        }
        let vv: T = v.data().iter().map(|&x| x * x).sum();
        lambda = (v.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum::<T>() / vv).abs();
        v = w.scale(T::one() / norm);
    }
    Ok(lambda)
}

/// `Σ_i θ'_i T_i(L̂) X` with `L̂ = (2/λ_max) L̃ − I`.
pub fn chebyshev_filter<T: Scalar>(
    laplacian: &Tensor<T>,
    filter: &SpectralFilter<T>,
    x: &Tensor<T>,
    lambda_max: LambdaMax<T>,
) -> Result<Tensor<T>> {
    let (k, k2) = laplacian.dims2()?;
    if k != k2 {
        return shape_err("chebyshev_filter", format!("laplacian must be square, got {k}×{k2}"));
    }
    let (rows, _) = x.dims2()?;
    if rows != k {
        return shape_err("chebyshev_filter", format!("signal has {rows} rows for {k} nodes"));
    }
    let lam = match lambda_max {
        LambdaMax::Fixed(v) => v,
        LambdaMax::PowerIteration { iters } => power_iteration(laplacian, iters)?,
    };
    if lam <= T::zero() {
        return invalid("lambda_max must be positive");
    }
    let mut scaled = laplacian.scale(T::lit(2.0) / lam);
    for i in 0..k {
        let v = scaled.at2(i, i) - T::one();
        scaled.set2(i, i, v);
    }

    let coeffs = filter.coeffs();
    let mut acc = x.scale(coeffs[0]);
    if coeffs.len() == 1 {
        return Ok(acc);
    }
    let mut prev = x.clone();
    let mut cur = scaled.matmul(x)?;
    acc = acc.add(&cur.scale(coeffs[1]))?;
    for &theta in &coeffs[2..] {
        let next = scaled.matmul(&cur)?.scale(T::lit(2.0)).add(&prev.scale(-T::one()))?;
        acc = acc.add(&next.scale(theta))?;
        prev = cur;
        cur = next;
    }
    Ok(acc)
}

/// One graph-convolution layer on the tape: `relu(Z · X · W)`.
pub fn graph_conv<T: Scalar>(tape: &mut Tape<T>, z: Var, x: Var, w: Var) -> Result<Var> {
    let zx = tape.matmul(z, x)?;
    let zxw = tape.matmul(zx, w)?;
    tape.relu(zxw)
}
