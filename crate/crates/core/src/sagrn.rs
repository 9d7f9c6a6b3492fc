//! Spatial graph reasoning over superpixel descriptors.
//!
//! Pipeline: superpixels of the backbone feature `F` → region descriptors
//! `D` (`K×C`) → attention adjacency `Z` → one graph convolution → pixel
//! reprojection `A` (`K×HW`) → `F_sa = Aᵀ ζ(G)`.

use crate::error::Result;
use crate::graphspec::graph_conv;
use crate::layers::{head, head_specs, linear_specs, matrix_spec, Bound, Linear, ParamSpec};
use crate::numcore::{Tape, Tensor, Var};
use crate::superpix::{hard_map, soft_assign_iterate, SlicConfig, SoftAssignment, EMPTY_MASS_EPS};
use crate::Scalar;

/// How pixels are pooled into region descriptors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolMode {
    /// Weights are the soft assignment `Q` (differentiable).
    #[default]
    Soft,
    /// Weights are the one-hot hard map `S`.
    Hard,
}

impl std::str::FromStr for PoolMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            _ => crate::error::invalid(format!("unknown pool mode `{s}` (expected soft or hard)")),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Soft => "soft",
            Self::Hard => "hard",
        })
    }
}

/// Width of the `φ, ψ, ρ, η` embeddings for `c` input channels.
pub fn embed_width(c: usize) -> usize {
    (c / 4).max(1)
}

/// `N×K` one-hot matrix of a hard label map.
pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (j, &l) in labels.iter().enumerate() {
        t.set2(j, l, T::one());
    }
    t
}

/// `C×H×W` map → `HW×C` node features.
pub fn pixels_as_rows<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let (c, h, w) = tape.value(f).dims3()?;
    let flat = tape.reshape(f, &[c, h * w])?;
    tape.transpose(flat)
}

/// Region means `D` (`K×C`) of `f` under assignment `q` (`N×K`). Regions
/// without mass yield zero descriptors.
pub fn pool_descriptors<T: Scalar>(tape: &mut Tape<T>, f: Var, q: Var, mode: PoolMode) -> Result<Var> {
    let rows = pixels_as_rows(tape, f)?;
    let weights = match mode {
        PoolMode::Soft => q,
        PoolMode::Hard => {
            let (_, k) = tape.value(q).dims2()?;
            let labels = hard_map(tape.value(q))?;
            tape.constant(one_hot(&labels, k))
        }
    };
    tape.region_mean(weights, rows, None, EMPTY_MASS_EPS)
}

/// `Z_ij = softmax_j(φ(d_i) · ψ(d_j))`.
pub fn attention_adjacency<T: Scalar>(tape: &mut Tape<T>, d: Var, phi: &Linear, psi: &Linear) -> Result<Var> {
    let a = phi.apply(tape, d)?;
    let b = psi.apply(tape, d)?;
    let logits = tape.matmul_nt(a, b)?;
    tape.softmax(logits, 1)
}

/// `G = relu(Z ξ(D) W)`.
pub fn reason<T: Scalar>(tape: &mut Tape<T>, z: Var, d: Var, xi: &Linear, w: Var) -> Result<Var> {
    let x = xi.apply(tape, d)?;
    graph_conv(tape, z, x, w)
}

/// Projects reasoned nodes back onto the pixels of `f` (`C×H×W`).
///
/// Returns `(A, F_sa)` where `A` is `K×HW` with rows normalized over pixels
/// and `F_sa = Aᵀ ζ(G)` has the shape of `f`.
pub fn reproject<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    f: Var,
    rho: &Linear,
    eta: &Linear,
    zeta: &Linear,
) -> Result<(Var, Var)> {
    let shape = tape.shape(f).to_vec();
    let rows = pixels_as_rows(tape, f)?;
    let a = rho.apply(tape, g)?;
    let b = eta.apply(tape, rows)?;
    let logits = tape.matmul_nt(a, b)?;
    let attn = tape.softmax(logits, 1)?;
    let zg = zeta.apply(tape, g)?;
    let zg_t = tape.transpose(zg)?;
    let out = tape.matmul(zg_t, attn)?;
    let out = tape.reshape(out, &shape)?;
    Ok((attn, out))
}

/// Learned projections of the spatial branch.
#[derive(Clone, Copy, Debug)]
pub struct SagrnParams {
    pub phi: Linear,
    pub psi: Linear,
    pub rho: Linear,
    pub eta: Linear,
    pub xi: Linear,
    pub zeta: Linear,
    pub gcn: Var,
}

impl SagrnParams {
    pub const PREFIX: &'static str = "sagrn";

    pub fn specs(channels: usize) -> Vec<ParamSpec> {
        let e = embed_width(channels);
        let p = Self::PREFIX;
        let mut s = Vec::new();
        for name in ["phi", "psi", "rho", "eta"] {
            s.extend(linear_specs(&format!("{p}.{name}"), channels, e));
        }
        s.extend(linear_specs(&format!("{p}.xi"), channels, channels));
        s.extend(linear_specs(&format!("{p}.zeta"), channels, channels));
        s.push(matrix_spec(&format!("{p}.gcn.weight"), channels, channels));
        s
    }

    pub fn bind(params: &Bound) -> Result<Self> {
        let p = Self::PREFIX;
        let lin = |n: &str| Linear::bind(params, &format!("{p}.{n}"));
        Ok(Self {
            phi: lin("phi")?,
            psi: lin("psi")?,
            rho: lin("rho")?,
            eta: lin("eta")?,
            xi: lin("xi")?,
            zeta: lin("zeta")?,
            gcn: params.get(&format!("{p}.gcn.weight"))?,
        })
    }
}

/// Intermediate handles of one spatial-branch forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SagrnOutput {
    pub assignment: SoftAssignment,
    pub descriptors: Var,
    pub adjacency: Var,
    pub reasoned: Var,
    pub reprojection: Var,
    pub features: Var,
}

pub fn sagrn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SagrnParams,
    f: Var,
    slic: &SlicConfig,
    mode: PoolMode,
) -> Result<SagrnOutput> {
    let assignment = soft_assign_iterate(tape, f, slic)?;
    let descriptors = pool_descriptors(tape, f, assignment.q, mode)?;
    let adjacency = attention_adjacency(tape, descriptors, &params.phi, &params.psi)?;
    let reasoned = reason(tape, adjacency, descriptors, &params.xi, params.gcn)?;
    let (reprojection, features) = reproject(tape, reasoned, f, &params.rho, &params.eta, &params.zeta)?;
    Ok(SagrnOutput {
        assignment,
        descriptors,
        adjacency,
        reasoned,
        reprojection,
        features,
    })
}

pub const MAIN_HEAD: &str = "head.sa_main";
pub const AUX_HEAD: &str = "head.sa_aux";

pub fn head_delta<T: Scalar>(tape: &mut Tape<T>, params: &Bound, f_sa: Var, out_h: usize, out_w: usize) -> Result<Var> {
    head(tape, params, MAIN_HEAD, f_sa, out_h, out_w)
}

pub fn aux_head<T: Scalar>(tape: &mut Tape<T>, params: &Bound, f: Var, out_h: usize, out_w: usize) -> Result<Var> {
    head(tape, params, AUX_HEAD, f, out_h, out_w)
}

pub fn head_param_specs(channels: usize, hidden: usize, classes: usize) -> Vec<ParamSpec> {
    let mut s = head_specs(MAIN_HEAD, channels, hidden, classes);
    s.extend(head_specs(AUX_HEAD, channels, hidden, classes));
    s
}

/// Sum of the masked cross entropies of both heads. `targets` holds
/// `(pixel, class index)` pairs for labeled pixels only.
pub fn sagrn_loss<T: Scalar>(tape: &mut Tape<T>, main: Var, aux: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let a = tape.cross_entropy(main, targets)?;
    let b = tape.cross_entropy(aux, targets)?;
    tape.add(a, b)
}
