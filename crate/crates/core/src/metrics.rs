//! Confusion matrix, OA / AA / Cohen's kappa and run aggregation.

use std::fmt::Write as _;

use log::warn;

use crate::data::{LabelMap, SplitSpec, Subset};
use crate::error::{invalid, Result};

/// Rows are truth, columns prediction; class `c` sits at index `c - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return invalid(format!("{classes} classes need {} counts, got {}", classes * classes, counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Records one pixel; both are 0-based class indices.
    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for j in 1..=self.classes {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.classes {
            let _ = write!(s, "{}", i + 1);
            for j in 0..self.classes {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Counts labeled pixels of `subset` (all labeled pixels when `None`).
/// `pred` holds class ids like `truth`; a prediction of 0 or above the
/// class count is an error.
pub fn accumulate(
    pred: &LabelMap,
    truth: &LabelMap,
    classes: usize,
    split: Option<(&SplitSpec, Subset)>,
) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return invalid(format!(
            "prediction is {}×{}, truth is {}×{}",
            pred.height, pred.width, truth.height, truth.width
        ));
    }
    if let Some((s, _)) = split {
        if (s.height, s.width) != (truth.height, truth.width) {
            return invalid("split extent differs from the label map");
        }
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, (&t, &y)) in truth.labels.iter().zip(&pred.labels).enumerate() {
        if t == 0 {
            continue;
        }
        if let Some((s, subset)) = split {
            if s.subsets[p] != Some(subset) {
                continue;
            }
        }
        if t as usize > classes || y == 0 || y as usize > classes {
            return invalid(format!("pixel {p}: label {t} / prediction {y} outside 1..={classes}"));
        }
        cm.add(t as usize - 1, y as usize - 1);
    }
    Ok(cm)
}

pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return invalid("overall accuracy of an empty confusion matrix");
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean per-class recall over classes with nonzero support.
pub fn aa(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..cm.classes {
        let row = cm.row_sum(i);
        if row == 0 {
            warn!("class {} has no evaluated pixels; excluded from AA", i + 1);
            continue;
        }
        sum += cm.get(i, i) as f64 / row as f64;
        n += 1;
    }
    if n == 0 {
        return invalid("average accuracy of an empty confusion matrix");
    }
    Ok(sum / n as f64)
}

pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return invalid("kappa of an empty confusion matrix");
    }
    let t = total as f64;
    let po = cm.trace() as f64 / t;
    let pe = (0..cm.classes)
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (t * t);
    if pe >= 1.0 {
        return invalid("kappa is undefined when chance agreement is 1");
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl RunMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            oa: oa(cm)?,
            aa: aa(cm)?,
            kappa: kappa(cm)?,
        })
    }
}

/// Sample mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return invalid("no runs to aggregate");
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }

    /// `mean±std` with two decimals.
    pub fn display(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<Aggregate> {
    let pick = |f: fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        oa: pick(|r| r.oa)?,
        aa: pick(|r| r.aa)?,
        kappa: pick(|r| r.kappa)?,
    })
}

/// `OA <mean> <std>` lines for OA, AA and Kappa.
pub fn report_text(agg: &Aggregate) -> String {
    format!(
        "OA {} {}\nAA {} {}\nKappa {} {}\n",
        agg.oa.mean, agg.oa.std, agg.aa.mean, agg.aa.std, agg.kappa.mean, agg.kappa.std
    )
}

/// Parses a report produced by [`report_text`] back into one run's metrics
/// (the means).
pub fn parse_report(text: &str) -> Result<RunMetrics> {
    let mut vals = [None; 3];
    for line in text.lines() {
        let f: Vec<&str> = line.split_ascii_whitespace().collect();
        let slot = match f.first() {
            Some(&"OA") => 0,
            Some(&"AA") => 1,
            Some(&"Kappa") => 2,
            _ => continue,
        };
        let v: f64 = f
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| crate::Error::Format(format!("bad report line `{line}`")))?;
        vals[slot] = Some(v);
    }
    match vals {
        [Some(oa), Some(aa), Some(kappa)] => Ok(RunMetrics { oa, aa, kappa }),
        _ => Err(crate::Error::Format("report lacks OA, AA or Kappa".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(oa(&cm).unwrap(), 0.5);
        assert_eq!(kappa(&cm).unwrap(), 0.0);
        let cm = ConfusionMatrix::from_counts(2, vec![2, 0, 1, 1]).unwrap();
        assert_eq!(aa(&cm).unwrap(), 0.75);
        assert_eq!(oa(&cm).unwrap(), 0.75);
        let perfect = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 5]).unwrap();
        assert_eq!(kappa(&perfect).unwrap(), 1.0);
        assert_eq!(aa(&perfect).unwrap(), 1.0);
        assert!(oa(&ConfusionMatrix::new(3)).is_err());
        assert!(kappa(&ConfusionMatrix::from_counts(1, vec![5]).unwrap()).is_err());
    }

    #[test]
    fn aggregation() {
        let r = |x| RunMetrics { oa: x, aa: x, kappa: x };
        let a = aggregate_runs(&[r(0.9), r(1.0)]).unwrap();
        assert!((a.oa.mean - 0.95).abs() < 1e-12);
        assert!((a.oa.std - 0.05).abs() < 1e-12);
        assert_eq!(MeanStd { mean: 97.874, std: 0.549 }.display(), "97.87±0.55");
        assert_eq!(aggregate_runs(&[r(0.8)]).unwrap().aa.std, 0.0);
        assert!(aggregate_runs(&[]).is_err());
        let back = parse_report(&report_text(&a)).unwrap();
        assert_eq!(back.oa, a.oa.mean);
    }
}
