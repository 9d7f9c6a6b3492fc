//! Backbone, branch wiring, fusion and the variant losses.

mod checkpoint;
mod config;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{conv_gn_relu, conv_gn_relu_specs, head, head_specs, Bound, Init, ParamSpec};
use crate::numcore::init::fan_in_uniform;
use crate::numcore::{Tape, Tensor, Var};
use crate::sagrn::{self, PoolMode, SagrnOutput, SagrnParams};
use crate::segrn::{self, SegrnOutput, SegrnParams, SpectralGrouping};
use crate::Scalar;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Variant};

pub const FCN_HEAD: &str = "head.fcn";
pub const FUSED_HEAD: &str = "head.fused";

/// Parameter layout of a model, in initialization order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let [w1, w2, w3] = config.widths;
    let mut s = conv_gn_relu_specs("backbone.block1", config.in_bands, w1);
    s.extend(conv_gn_relu_specs("backbone.block2", w1, w2));
    s.extend(conv_gn_relu_specs("backbone.block3", w2, w3));
    let (hidden, classes) = (config.head_hidden, config.classes);
    let v = config.variant;
    if v.has_spatial() {
        s.extend(SagrnParams::specs(w3));
    }
    if v.has_spectral() {
        s.extend(SegrnParams::specs(config.descriptor_len()));
    }
    match v {
        Variant::Fcn => s.extend(head_specs(FCN_HEAD, w3, hidden, classes)),
        Variant::Sagrn => s.extend(sagrn::head_param_specs(w3, hidden, classes)),
        Variant::Segrn => s.extend(segrn::head_param_specs(w3, hidden, classes)),
        Variant::Ssgrn => {
            s.extend(sagrn::head_param_specs(w3, hidden, classes));
            s.extend(segrn::head_param_specs(w3, hidden, classes));
            s.extend(head_specs(FUSED_HEAD, w3, hidden, classes));
        }
    }
    s
}

/// Configuration plus named parameters and the training iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<T>>,
    pub iteration: u64,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh parameters drawn in layout order from a seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::FanIn(fan_in) => fan_in_uniform(&spec.shape, fan_in, &mut rng),
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::ones(&spec.shape),
                };
                (spec.name, t)
            })
            .collect();
        Ok(Self {
            config,
            params,
            iteration: 0,
        })
    }

    /// Checks parameter names and shapes against the config's layout.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for spec in specs {
            match self.params.get(&spec.name) {
                None => return Err(Error::Missing(format!("parameter `{}`", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return shape_err("ModelState", format!("`{}` is {:?}, expected {:?}", spec.name, t.shape(), spec.shape))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            iteration: self.iteration,
        }
    }

    /// Places every parameter on the tape; `trainable` controls gradient tracking.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound::new(
            self.params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        )
    }
}

pub fn count_params<T: Scalar>(state: &ModelState<T>) -> usize {
    state.params.values().map(|t| t.shape().iter().product::<usize>()).sum()
}

/// Inner products spent by spatial attention: `K²` for the adjacency and
/// `N·K` for the reprojection.
pub fn count_attention_ops(k: usize, n: usize) -> usize {
    k * k + n * k
}

/// Zero-pads the bottom/right edge so both extents are even.
pub fn pad_even<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    let (ph, pw) = (h + h % 2, w + w % 2);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    Ok(Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        if y < h && x < w {
            image.at3(ch, y, x)
        } else {
            T::zero()
        }
    }))
}

/// Three conv→GN→ReLU blocks with a 2×2 max pool after the first.
pub fn backbone_forward<T: Scalar>(tape: &mut Tape<T>, params: &Bound, image: Var) -> Result<Var> {
    let (_, h, w) = tape.value(image).dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("backbone_forward", format!("input extent {h}×{w} must be even"));
    }
    let x = conv_gn_relu(tape, params, "backbone.block1", image)?;
    let x = tape.max_pool2d(x, 2, 2)?;
    let x = conv_gn_relu(tape, params, "backbone.block2", x)?;
    conv_gn_relu(tape, params, "backbone.block3", x)
}

/// Residual fusion `F_sa + F_se + F`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, f_sa: Var, f_se: Var, f: Var) -> Result<Var> {
    let s = tape.add(f_sa, f_se)?;
    tape.add(s, f)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub pool_mode: PoolMode,
}

/// Per-head logits at the padded input resolution.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadLogits {
    pub fcn: Option<Var>,
    pub sa_main: Option<Var>,
    pub sa_aux: Option<Var>,
    pub se: Option<Var>,
    pub fused: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub features: Var,
    pub spatial: Option<SagrnOutput>,
    pub spectral: Option<SegrnOutput>,
    pub logits: HeadLogits,
    /// Logits the variant predicts from.
    pub prediction: Var,
}

/// Runs the whole model on an image with even extents.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &Bound,
    image: Var,
    options: ForwardOptions,
) -> Result<Outputs> {
    let (c, h, w) = tape.value(image).dims3()?;
    if c != config.in_bands {
        return shape_err("forward", format!("image has {c} bands, model expects {}", config.in_bands));
    }
    if config.padded_extent() != (h, w) {
        return shape_err(
            "forward",
            format!("image is {h}×{w}, model was built for {:?} (padded)", config.padded_extent()),
        );
    }
    let f = backbone_forward(tape, params, image)?;
    let v = config.variant;
    let spatial = if v.has_spatial() {
        let p = SagrnParams::bind(params)?;
        Some(sagrn::sagrn_forward(tape, &p, f, &config.slic, options.pool_mode)?)
    } else {
        None
    };
    let spectral = if v.has_spectral() {
        let p = SegrnParams::bind(params)?;
        let grouping = SpectralGrouping::new(config.widths[2], config.spectral_descriptors)?;
        Some(segrn::segrn_forward(tape, &p, f, &grouping, config.spectral_stride)?)
    } else {
        None
    };

    let mut logits = HeadLogits::default();
    if v == Variant::Fcn {
        logits.fcn = Some(head(tape, params, FCN_HEAD, f, h, w)?);
    }
    if let Some(sa) = &spatial {
        logits.sa_main = Some(sagrn::head_delta(tape, params, sa.features, h, w)?);
        logits.sa_aux = Some(sagrn::aux_head(tape, params, f, h, w)?);
    }
    if let Some(se) = &spectral {
        logits.se = Some(segrn::head_delta(tape, params, se.features, h, w)?);
    }
    if let (Some(sa), Some(se)) = (&spatial, &spectral) {
        let fused = fuse(tape, sa.features, se.features, f)?;
        logits.fused = Some(head(tape, params, FUSED_HEAD, fused, h, w)?);
    }
    let prediction = match v {
        Variant::Fcn => logits.fcn,
        Variant::Sagrn => logits.sa_main,
        Variant::Segrn => logits.se,
        Variant::Ssgrn => logits.fused,
    }
    .expect("variant head is always built");
    Ok(Outputs {
        features: f,
        spatial,
        spectral,
        logits,
        prediction,
    })
}

/// Component losses of one forward pass; absent components are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Losses {
    pub fcn: Option<Var>,
    pub spatial: Option<Var>,
    pub spectral: Option<Var>,
    pub fused: Option<Var>,
}

impl Losses {
    /// Masked cross entropy of every head present in `logits`.
    pub fn compute<T: Scalar>(tape: &mut Tape<T>, logits: &HeadLogits, targets: &[(usize, usize)]) -> Result<Self> {
        let mut l = Self::default();
        if let Some(p) = logits.fcn {
            l.fcn = Some(tape.cross_entropy(p, targets)?);
        }
        if let (Some(main), Some(aux)) = (logits.sa_main, logits.sa_aux) {
            l.spatial = Some(sagrn::sagrn_loss(tape, main, aux, targets)?);
        }
        if let Some(p) = logits.se {
            l.spectral = Some(segrn::segrn_loss(tape, p, targets)?);
        }
        if let Some(p) = logits.fused {
            l.fused = Some(tape.cross_entropy(p, targets)?);
        }
        Ok(l)
    }
}

/// Objective of a variant from its component losses.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, variant: Variant, losses: &Losses) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::Missing(format!("{what} loss for variant {variant}")));
    match variant {
        Variant::Fcn => need(losses.fcn, "fcn"),
        Variant::Sagrn => need(losses.spatial, "spatial"),
        Variant::Segrn => need(losses.spectral, "spectral"),
        Variant::Ssgrn => {
            let sa = need(losses.spatial, "spatial")?;
            let se = need(losses.spectral, "spectral")?;
            let fu = need(losses.fused, "fused")?;
            let s = tape.add(sa, se)?;
            tape.add(s, fu)
        }
    }
}

/// Maps `(row, col, class)` label triples to `(pixel, class)` targets on the
/// padded grid used by [`forward`].
pub fn padded_targets(config: &ModelConfig, labels: impl IntoIterator<Item = (usize, usize, usize)>) -> Vec<(usize, usize)> {
    let (_, pw) = config.padded_extent();
    labels.into_iter().map(|(r, c, cls)| (r * pw + c, cls)).collect()
}

/// Per-pixel class indices (0-based) of the unpadded image.
pub fn predict_classes<T: Scalar>(config: &ModelConfig, logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (classes, ph, pw) = logits.dims3()?;
    if (ph, pw) != config.padded_extent() {
        return shape_err("predict_classes", format!("logits {ph}×{pw} vs model {:?}", config.padded_extent()));
    }
    let n = ph * pw;
    let mut out = Vec::with_capacity(config.height * config.width);
    let mut col = vec![T::zero(); classes];
    for y in 0..config.height {
        for x in 0..config.width {
            for (ch, v) in col.iter_mut().enumerate() {
                *v = logits.data()[ch * n + y * pw + x];
            }
            out.push(crate::numcore::argmax_first(&col));
        }
    }
    Ok(out)
}

/// Convenience: forward without gradients and return per-pixel classes.
pub fn predict<T: Scalar>(state: &ModelState<T>, image: &Tensor<T>, options: ForwardOptions) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let params = state.bind(&mut tape, false);
    let x = tape.constant(pad_even(image)?);
    let out = forward(&mut tape, &state.config, &params, x, options)?;
    predict_classes(&state.config, tape.value(out.prediction))
}
