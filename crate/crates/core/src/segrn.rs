//! Spectral graph reasoning over groups of channels.
//!
//! `F` is average-pooled to `F'` (`C×H'×W'`), contiguous channel groups are
//! averaged into `M` spectral descriptors of length `L = H'W'`, reasoned over
//! with the same attention/graph-convolution pattern as the spatial branch,
//! and reconstructed onto the `C` channel maps before upsampling back to
//! `F`'s extent.

use std::ops::Range;

use crate::error::{invalid, shape_err, Result};
use crate::layers::{head, head_specs, linear_specs, matrix_spec, Bound, Linear, ParamSpec};
use crate::numcore::{Tape, Tensor, Var};
use crate::sagrn::{attention_adjacency, embed_width, reason};
use crate::Scalar;

pub const DEFAULT_STRIDE: usize = 4;
pub const HEAD: &str = "head.se";

/// Average pooling with kernel = stride; partial edge windows average the
/// pixels they cover.
pub fn spectral_downsample<T: Scalar>(tape: &mut Tape<T>, f: Var, stride: usize) -> Result<Var> {
    if stride == 0 {
        return invalid("spectral stride must be at least 1");
    }
    if stride == 1 {
        return Ok(f);
    }
    tape.avg_pool2d(f, stride, stride, true)
}

/// Spatial extent after [`spectral_downsample`].
pub fn downsampled_extent(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

/// Contiguous partition of `C` bands into `M` groups; the last group takes
/// any remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpectralGrouping {
    ranges: Vec<Range<usize>>,
}

impl SpectralGrouping {
    pub fn new(bands: usize, groups: usize) -> Result<Self> {
        if groups == 0 || groups > bands {
            return invalid(format!("cannot split {bands} bands into {groups} groups"));
        }
        let size = bands / groups;
        let ranges = (0..groups)
            .map(|i| {
                let end = if i + 1 == groups { bands } else { (i + 1) * size };
                i * size..end
            })
            .collect();
        Ok(Self { ranges })
    }

    pub fn groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn bands(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// Nominal group size `⌊C/M⌋`.
    pub fn group_size(&self) -> usize {
        self.ranges[0].len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// `M×C` matrix whose rows average the bands of each group.
    pub fn averaging_matrix<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.groups(), self.bands()]);
        for (g, r) in self.ranges.iter().enumerate() {
            let wgt = T::one() / T::lit(r.len() as f64);
            for b in r.clone() {
                t.set2(g, b, wgt);
            }
        }
        t
    }
}

pub fn group_bands(bands: usize, groups: usize) -> Result<SpectralGrouping> {
    SpectralGrouping::new(bands, groups)
}

/// Group means of the band maps of `fp` (`C×H'×W'`), flattened to `M×H'W'`.
pub fn spectral_descriptors<T: Scalar>(tape: &mut Tape<T>, fp: Var, grouping: &SpectralGrouping) -> Result<Var> {
    let (c, h, w) = tape.value(fp).dims3()?;
    if c != grouping.bands() {
        return shape_err("spectral_descriptors", format!("{c} bands vs grouping over {}", grouping.bands()));
    }
    let flat = tape.reshape(fp, &[c, h * w])?;
    let avg = tape.constant(grouping.averaging_matrix());
    tape.matmul(avg, flat)
}

/// Learned projections of the spectral branch, sized by descriptor length `L`.
#[derive(Clone, Copy, Debug)]
pub struct SegrnParams {
    pub phi: Linear,
    pub psi: Linear,
    pub rho: Linear,
    pub eta: Linear,
    pub xi: Linear,
    pub zeta: Linear,
    pub gcn: Var,
}

impl SegrnParams {
    pub const PREFIX: &'static str = "segrn";

    pub fn specs(descriptor_len: usize) -> Vec<ParamSpec> {
        let l = descriptor_len;
        let e = embed_width(l);
        let p = Self::PREFIX;
        let mut s = Vec::new();
        for name in ["phi", "psi", "rho", "eta"] {
            s.extend(linear_specs(&format!("{p}.{name}"), l, e));
        }
        s.extend(linear_specs(&format!("{p}.xi"), l, l));
        s.extend(linear_specs(&format!("{p}.zeta"), l, l));
        s.push(matrix_spec(&format!("{p}.gcn.weight"), l, l));
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

#[derive(Clone, Copy, Debug)]
pub struct SegrnOutput {
    pub descriptors: Var,
    /// `M×M` spectral adjacency.
    pub adjacency: Var,
    pub reasoned: Var,
    /// `M×C` affinity between reasoned groups and channel maps.
    pub affinity: Var,
    /// `C×H×W`, same shape as the branch input.
    pub features: Var,
}

/// Adjacency, graph reasoning and reconstruction from descriptors `d`
/// (`M×L`) and the pooled map `fp` (`C×H'×W'`), upsampled to `out_h × out_w`.
pub fn spectral_reason_and_reconstruct<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SegrnParams,
    d: Var,
    fp: Var,
    out_h: usize,
    out_w: usize,
) -> Result<SegrnOutput> {
    let (c, h, w) = tape.value(fp).dims3()?;
    let (_, l) = tape.value(d).dims2()?;
    if l != h * w {
        return shape_err("spectral_reason_and_reconstruct", format!("descriptor length {l} vs map {h}×{w}"));
    }
    let adjacency = attention_adjacency(tape, d, &params.phi, &params.psi)?;
    let reasoned = reason(tape, adjacency, d, &params.xi, params.gcn)?;
    let maps = tape.reshape(fp, &[c, l])?;
    let a = params.rho.apply(tape, reasoned)?;
    let b = params.eta.apply(tape, maps)?;
    let logits = tape.matmul_nt(a, b)?;
    let affinity = tape.softmax(logits, 1)?;
    let zg = params.zeta.apply(tape, reasoned)?;
    let at = tape.transpose(affinity)?;
    let out = tape.matmul(at, zg)?;
    let out = tape.reshape(out, &[c, h, w])?;
    let features = if (h, w) == (out_h, out_w) {
        out
    } else {
        tape.bilinear_upsample(out, out_h, out_w)?
    };
    Ok(SegrnOutput {
        descriptors: d,
        adjacency,
        reasoned,
        affinity,
        features,
    })
}

pub fn segrn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SegrnParams,
    f: Var,
    grouping: &SpectralGrouping,
    stride: usize,
) -> Result<SegrnOutput> {
    let (_, h, w) = tape.value(f).dims3()?;
    let fp = spectral_downsample(tape, f, stride)?;
    let d = spectral_descriptors(tape, fp, grouping)?;
    spectral_reason_and_reconstruct(tape, params, d, fp, h, w)
}

pub fn head_delta<T: Scalar>(tape: &mut Tape<T>, params: &Bound, f_se: Var, out_h: usize, out_w: usize) -> Result<Var> {
    head(tape, params, HEAD, f_se, out_h, out_w)
}

pub fn head_param_specs(channels: usize, hidden: usize, classes: usize) -> Vec<ParamSpec> {
    head_specs(HEAD, channels, hidden, classes)
}

/// Masked cross entropy of the spectral head's logits.
pub fn segrn_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}
