//! Whole-image training: masked cross entropy, SGD with momentum and weight
//! decay, poly learning-rate decay and validation monitoring.

use std::fmt::Write as _;

use indexmap::IndexMap;
use log::{debug, info};

use crate::data::{LabelMap, SplitSpec, Subset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::ParamSpec;
use crate::metrics::{accumulate, ConfusionMatrix};
use crate::network::{forward, pad_even, predict_classes, total_loss, ForwardOptions, Losses, ModelState};
use crate::numcore::{Tape, Tensor, Var};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub power: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
    /// Record validation OA every this many iterations (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter: 1000,
            power: 0.9,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.base_lr) || !nonneg(self.momentum) || !nonneg(self.weight_decay) {
            return invalid("learning rate, momentum and weight decay must be finite and nonnegative");
        }
        if !(self.power > 0.0) {
            return invalid(format!("poly power must be positive, got {}", self.power));
        }
        Ok(())
    }
}

/// `(pixel, class index)` targets of the labeled pixels of `subset` on a
/// grid `grid_width` pixels wide. Class ids shift down by one.
pub fn masked_targets(labels: &LabelMap, split: &SplitSpec, subset: Subset, grid_width: usize) -> Vec<(usize, usize)> {
    split
        .pixels(subset)
        .into_iter()
        .filter(|&(r, c)| labels.at(r, c) > 0)
        .map(|(r, c)| (r * grid_width + c, labels.at(r, c) as usize - 1))
        .collect()
}

/// Mean cross entropy of `logits` (`C_n×H×W`, possibly padded beyond the
/// label map) over the labeled pixels of `subset`.
pub fn cross_entropy_masked<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    split: &SplitSpec,
    subset: Subset,
) -> Result<Var> {
    let (classes, h, w) = tape.value(logits).dims3()?;
    if labels.height > h || labels.width > w {
        return shape_err("cross_entropy_masked", format!("labels {}×{} exceed logits {h}×{w}", labels.height, labels.width));
    }
    if labels.max_label() as usize > classes {
        return invalid(format!("label {} exceeds {classes} classes", labels.max_label()));
    }
    let targets = masked_targets(labels, split, subset, w);
    if targets.is_empty() {
        return Err(Error::Missing(format!("labeled pixels in the {subset} subset")));
    }
    tape.cross_entropy(logits, &targets)
}

/// `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if iter > max_iter {
        return invalid(format!("iteration {iter} beyond schedule length {max_iter}"));
    }
    if iter == max_iter {
        return Ok(0.0);
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Momentum SGD: `v ← m·v + g + λ·w`, `w ← w − lr·v`. Biases and
/// normalization affines skip the decay term.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    pub fn step(&mut self, params: &mut IndexMap<String, Tensor<T>>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let (m, lr) = (T::lit(self.momentum), T::lit(lr));
        for (name, w) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Missing(format!("gradient for `{name}`")))?;
            if g.shape() != w.shape() {
                return shape_err("sgd_step", format!("gradient of `{name}` is {:?}, weight {:?}", g.shape(), w.shape()));
            }
            let wd = if ParamSpec::decays(name) { T::lit(self.weight_decay) } else { T::zero() };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, wi), &gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = m * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_oa: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    /// CSV `iter,lr,loss,val_oa`; `val_oa` is empty when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss,val_oa\n");
        for r in &self.records {
            let val = r.val_oa.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.loss, val);
        }
        s
    }
}

/// Trains `state` in place for `config.max_iter` full-image steps on the
/// train subset. `image` is the (standardized) `C×H×W` cube.
pub fn train<T: Scalar>(
    state: &mut ModelState<T>,
    image: &Tensor<T>,
    labels: &LabelMap,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    state.validate()?;
    let (c, h, w) = image.dims3()?;
    let mc = state.config.clone();
    if (c, h, w) != (mc.in_bands, mc.height, mc.width) {
        return shape_err("train", format!("image {c}×{h}×{w} vs model {}×{}×{}", mc.in_bands, mc.height, mc.width));
    }
    if (labels.height, labels.width) != (h, w) {
        return shape_err("train", "label map extent differs from the image".to_string());
    }
    split.check_against(labels)?;
    if labels.max_label() as usize > mc.classes {
        return invalid(format!("label {} exceeds the model's {} classes", labels.max_label(), mc.classes));
    }
    let (_, pw) = mc.padded_extent();
    let train_targets = masked_targets(labels, split, Subset::Train, pw);
    if train_targets.is_empty() {
        return Err(Error::Missing("labeled pixels in the train subset".into()));
    }
    let has_val = split.count(Subset::Val) > 0;
    let padded = pad_even(image)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut history = History::default();

    for it in 0..config.max_iter {
        let lr = poly_lr(config.base_lr, it, config.max_iter, config.power)?;
        let mut tape = Tape::new();
        let params = state.bind(&mut tape, true);
        let x = tape.constant(padded.clone());
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { iter: it, loss: f64::NAN },
            e => e,
        };
        let out = forward(&mut tape, &mc, &params, x, ForwardOptions::default()).map_err(diverged)?;
        let losses = Losses::compute(&mut tape, &out.logits, &train_targets).map_err(diverged)?;
        let loss = total_loss(&mut tape, mc.variant, &losses).map_err(diverged)?;
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { iter: it, loss: loss_value });
        }

        let eval_now = config.eval_every > 0 && (it + 1) % config.eval_every == 0;
        let val_oa = if eval_now && has_val {
            let pred = predict_classes(&mc, tape.value(out.prediction))?;
            let cm = confusion_from_classes(&pred, labels, mc.classes, split, Subset::Val)?;
            Some(crate::metrics::oa(&cm)?)
        } else {
            None
        };

        tape.backward(loss).map_err(diverged)?;
        let mut grads = IndexMap::with_capacity(state.params.len());
        for (name, v) in params.iter() {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            grads.insert(name.to_string(), g);
        }
        drop(tape);
        sgd.step(&mut state.params, &grads, lr)?;
        state.iteration += 1;

        if let Some(oa) = val_oa {
            info!("iter {}: loss {loss_value:.5}, lr {lr:.3e}, val OA {oa:.4}", it + 1);
        } else {
            debug!("iter {}: loss {loss_value:.5}, lr {lr:.3e}", it + 1);
        }
        history.records.push(HistoryRecord {
            iter: it + 1,
            lr,
            loss: loss_value,
            val_oa,
        });
    }
    Ok(history)
}

fn confusion_from_classes(
    pred: &[usize],
    labels: &LabelMap,
    classes: usize,
    split: &SplitSpec,
    subset: Subset,
) -> Result<ConfusionMatrix> {
    let map = LabelMap::new(labels.height, labels.width, pred.iter().map(|&c| c as u16 + 1).collect())?;
    accumulate(&map, labels, classes, Some((split, subset)))
}

/// Predicted class-id map (`1..=C_n`) of the whole image.
pub fn predict_map<T: Scalar>(state: &ModelState<T>, image: &Tensor<T>, options: ForwardOptions) -> Result<LabelMap> {
    let pred = crate::network::predict(state, image, options)?;
    LabelMap::new(
        state.config.height,
        state.config.width,
        pred.into_iter().map(|c| c as u16 + 1).collect(),
    )
}

/// Confusion matrix of the model's predictions on `subset`. Errors when the
/// subset holds no labeled pixel.
pub fn evaluate<T: Scalar>(
    state: &ModelState<T>,
    image: &Tensor<T>,
    labels: &LabelMap,
    split: &SplitSpec,
    subset: Subset,
    options: ForwardOptions,
) -> Result<ConfusionMatrix> {
    split.check_against(labels)?;
    if split.pixels(subset).is_empty() {
        return Err(Error::Missing(format!("pixels in the {subset} subset")));
    }
    let pred = predict_map(state, image, options)?;
    accumulate(&pred, labels, state.config.classes, Some((split, subset)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1e-3, 0, 1000, 0.9).unwrap(), 1e-3);
        assert_eq!(poly_lr(1e-3, 1000, 1000, 0.9).unwrap(), 0.0);
        assert!((poly_lr(1e-3, 500, 1000, 0.9).unwrap() - 5.359e-4).abs() < 1e-7);
        assert!(poly_lr(1e-3, 1001, 1000, 0.9).is_err());
    }

    #[test]
    fn history_csv_leaves_blank_val() {
        let h = History {
            records: vec![
                HistoryRecord { iter: 1, lr: 0.5, loss: 1.25, val_oa: None },
                HistoryRecord { iter: 2, lr: 0.25, loss: 1.0, val_oa: Some(0.75) },
            ],
        };
        assert_eq!(h.to_csv(), "iter,lr,loss,val_oa\n1,0.5,1.25,\n2,0.25,1,0.75\n");
    }
}
