//! Parameterized building blocks shared by the backbone and both reasoning
//! branches. Parameters live in a [`ModelState`](crate::network::ModelState);
//! a forward pass looks them up by name through a [`Bound`] set of tape leaves.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};
use crate::Scalar;

pub const GN_EPS: f64 = 1e-5;

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    /// Biases and normalization affines are exempt from weight decay.
    pub fn decays(name: &str) -> bool {
        !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
    }
}

pub fn linear_specs(prefix: &str, inp: usize, out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![inp, out], Init::FanIn(inp)),
        ParamSpec::new(format!("{prefix}.bias"), vec![out], Init::Zeros),
    ]
}

pub fn conv_specs(prefix: &str, inp: usize, out: usize, kernel: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.weight"),
            vec![out, inp, kernel, kernel],
            Init::FanIn(inp * kernel * kernel),
        ),
        ParamSpec::new(format!("{prefix}.bias"), vec![out], Init::Zeros),
    ]
}

pub fn gn_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), vec![channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), vec![channels], Init::Zeros),
    ]
}

pub fn matrix_spec(name: &str, inp: usize, out: usize) -> ParamSpec {
    ParamSpec::new(name.to_string(), vec![inp, out], Init::FanIn(inp))
}

/// 8 groups when the channel count allows it, else the largest divisor below 8.
pub fn gn_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Parameters placed on a tape for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn new(vars: IndexMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Row-wise affine map `x · W + b` (a 1×1 convolution over a node set).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: params.get(&format!("{prefix}.weight"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row_bias(y, self.bias)
    }
}

pub fn conv<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var, padding: usize) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, padding, 1)
}

pub fn group_norm<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let channels = tape.shape(x)[0];
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    tape.group_norm(x, gn_groups(channels), gamma, beta, GN_EPS)
}

/// 3×3 convolution (padding 1) → GN → ReLU.
pub fn conv_gn_relu<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = conv(tape, params, &format!("{prefix}.conv"), x, 1)?;
    let y = group_norm(tape, params, &format!("{prefix}.gn"), y)?;
    tape.relu(y)
}

pub fn conv_gn_relu_specs(prefix: &str, inp: usize, out: usize) -> Vec<ParamSpec> {
    let mut s = conv_specs(&format!("{prefix}.conv"), inp, out, 3);
    s.extend(gn_specs(&format!("{prefix}.gn"), out));
    s
}

/// Classification head: 3×3 conv → GN → ReLU → 1×1 conv → bilinear upsample.
/// Returns per-class logits at `out_h × out_w`.
pub fn head<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    x: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let y = conv_gn_relu(tape, params, &format!("{prefix}.hidden"), x)?;
    let y = conv(tape, params, &format!("{prefix}.classify"), y, 0)?;
    tape.bilinear_upsample(y, out_h, out_w)
}

pub fn head_specs(prefix: &str, inp: usize, hidden: usize, classes: usize) -> Vec<ParamSpec> {
    let mut s = conv_gn_relu_specs(&format!("{prefix}.hidden"), inp, hidden);
    s.extend(conv_specs(&format!("{prefix}.classify"), hidden, classes, 1));
    s
}
