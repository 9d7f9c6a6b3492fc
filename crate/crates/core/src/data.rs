//! Image cubes, label maps, train/val/test splits and a synthetic scene.
//!
//! File formats (all little-endian):
//!
//! ```text
//! cube    HSICUBE 1 <H> <W> <C>\n  then C·H·W f32, band-major then row-major
//! labels  LABELS 1 <H> <W>\n       then H·W u16 (0 = unlabeled)
//! split   text lines `<row> <col> <class> <train|val|test>`
//! counts  text lines `<class> <train> <val>`
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::numcore::Tensor;
use crate::Scalar;

const CUBE_MAGIC: &str = "HSICUBE";
const LABEL_MAGIC: &str = "LABELS";

/// Splits `bytes` at the first newline and checks `<magic> 1 <fields...>`.
fn parse_header<'a>(bytes: &'a [u8], magic: &str, fields: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let nl = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("missing {magic} header line")))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format(format!("{magic} header is not text")))?;
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::Format(format!("bad magic: expected `{magic}`")));
    }
    if parts.next() != Some("1") {
        return Err(Error::Format(format!("unsupported {magic} version")));
    }
    let dims: Vec<usize> = parts
        .map(|p| p.parse::<usize>().map_err(|e| Error::Format(format!("{magic} header field `{p}`: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != fields || dims.contains(&0) {
        return Err(Error::Format(format!("{magic} header needs {fields} positive extents, got `{line}`")));
    }
    Ok((dims, &bytes[nl + 1..]))
}

fn check_payload(what: &'static str, payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::Truncated {
            what,
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after {what}", payload.len() - expected)));
    }
    Ok(())
}

/// Hyperspectral image: `bands` values per pixel, stored band-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return invalid("cube extents must be positive");
        }
        if values.len() != height * width * bands {
            return invalid(format!(
                "cube {height}×{width}×{bands} needs {} values, got {}",
                height * width * bands,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("cube holds non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn at(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    /// `C×H×W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.bands, self.height, self.width], |i| T::lit(self.values[i] as f64))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CUBE_MAGIC} 1 {} {} {}\n", self.height, self.width, self.bands).into_bytes();
        out.reserve(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = parse_header(bytes, CUBE_MAGIC, 3)?;
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        check_payload("cube payload", payload, 4 * h * w * c)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(h, w, c, values)
    }
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    HsiCube::from_bytes(&fs::read(path)?)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cube.to_bytes())?;
    Ok(())
}

/// Per-pixel class labels, `0` = unlabeled, classes are `1..=C_n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return invalid(format!("label map {height}×{width} with {} entries", labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per class id (index 0 counts unlabeled pixels).
    pub fn census(&self) -> Vec<usize> {
        let mut n = vec![0; self.max_label() as usize + 1];
        for &l in &self.labels {
            n[l as usize] += 1;
        }
        n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{LABEL_MAGIC} 1 {} {}\n", self.height, self.width).into_bytes();
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = parse_header(bytes, LABEL_MAGIC, 2)?;
        let (h, w) = (dims[0], dims[1]);
        check_payload("label payload", payload, 2 * h * w)?;
        let labels = payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(h, w, labels)
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_bytes(&fs::read(path)?)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, labels.to_bytes())?;
    Ok(())
}

/// Per-band zero mean and unit (population) variance. Constant bands become zeros.
pub fn standardize(cube: &HsiCube) -> HsiCube {
    let n = cube.height * cube.width;
    let mut values = Vec::with_capacity(cube.values.len());
    for band in cube.values.chunks_exact(n) {
        let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            values.extend(std::iter::repeat(0.0).take(n));
        } else {
            values.extend(band.iter().map(|&v| ((v as f64 - mean) / std) as f32));
        }
    }
    HsiCube {
        values,
        ..cube.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Format(format!("unknown subset `{s}`"))),
        }
    }
}

/// Requested `(train, val)` pixel counts per class id.
pub type ClassCounts = BTreeMap<u16, (usize, usize)>;

/// The same `(train, val)` request for every class `1..=classes`.
pub fn uniform_counts(classes: u16, train: usize, val: usize) -> ClassCounts {
    (1..=classes).map(|c| (c, (train, val))).collect()
}

pub fn parse_counts(text: &str) -> Result<ClassCounts> {
    let mut counts = ClassCounts::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_ascii_whitespace().collect();
        let bad = || Error::Format(format!("counts line {}: expected `<class> <train> <val>`", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let class: u16 = f[0].parse().map_err(|_| bad())?;
        let train: usize = f[1].parse().map_err(|_| bad())?;
        let val: usize = f[2].parse().map_err(|_| bad())?;
        if class == 0 {
            return Err(Error::Format(format!("counts line {}: class 0 is the unlabeled id", i + 1)));
        }
        if counts.insert(class, (train, val)).is_some() {
            return Err(Error::Format(format!("counts line {}: class {class} repeated", i + 1)));
        }
    }
    Ok(counts)
}

pub fn format_counts(counts: &ClassCounts) -> String {
    counts.iter().map(|(c, (t, v))| format!("{c} {t} {v}\n")).collect()
}

/// Assignment of labeled pixels to train/val/test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub height: usize,
    pub width: usize,
    pub subsets: Vec<Option<Subset>>,
    /// Seed the split was drawn with; unknown for splits read from disk.
    pub seed: Option<u64>,
}

impl SplitSpec {
    /// `(row, col)` of every pixel in `subset`, row-major.
    pub fn pixels(&self, subset: Subset) -> Vec<(usize, usize)> {
        self.subsets
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(subset))
            .map(|(p, _)| (p / self.width, p % self.width))
            .collect()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.subsets.iter().filter(|s| **s == Some(subset)).count()
    }

    /// Per-class `(train, val, test)` counts, indexed by class id.
    pub fn class_counts(&self, labels: &LabelMap) -> BTreeMap<u16, (usize, usize, usize)> {
        let mut out: BTreeMap<u16, (usize, usize, usize)> = BTreeMap::new();
        for (p, s) in self.subsets.iter().enumerate() {
            if let Some(s) = s {
                let e = out.entry(labels.labels[p]).or_default();
                match s {
                    Subset::Train => e.0 += 1,
                    Subset::Val => e.1 += 1,
                    Subset::Test => e.2 += 1,
                }
            }
        }
        out
    }

    /// Checks extents and that only labeled pixels are assigned.
    pub fn check_against(&self, labels: &LabelMap) -> Result<()> {
        if (self.height, self.width) != (labels.height, labels.width) {
            return invalid(format!(
                "split is {}×{}, labels are {}×{}",
                self.height, self.width, labels.height, labels.width
            ));
        }
        if let Some(p) = (0..self.subsets.len()).find(|&p| self.subsets[p].is_some() && labels.labels[p] == 0) {
            return invalid(format!("split assigns unlabeled pixel ({}, {})", p / self.width, p % self.width));
        }
        Ok(())
    }

    pub fn to_text(&self, labels: &LabelMap) -> String {
        let mut s = String::new();
        for (p, sub) in self.subsets.iter().enumerate() {
            if let Some(sub) = sub {
                s.push_str(&format!("{} {} {} {sub}\n", p / self.width, p % self.width, labels.labels[p]));
            }
        }
        s
    }

    /// Parses split lines; classes must agree with `labels`.
    pub fn from_text(text: &str, labels: &LabelMap) -> Result<Self> {
        let (h, w) = (labels.height, labels.width);
        let mut subsets = vec![None; h * w];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_ascii_whitespace().collect();
            let bad = |m: &str| Error::Format(format!("split line {}: {m}", i + 1));
            if f.len() != 4 {
                return Err(bad("expected `<row> <col> <class> <train|val|test>`"));
            }
            let r: usize = f[0].parse().map_err(|_| bad("bad row"))?;
            let c: usize = f[1].parse().map_err(|_| bad("bad column"))?;
            let class: u16 = f[2].parse().map_err(|_| bad("bad class"))?;
            let sub: Subset = f[3].parse()?;
            if r >= h || c >= w {
                return Err(bad(&format!("pixel ({r}, {c}) outside {h}×{w}")));
            }
            if labels.at(r, c) != class || class == 0 {
                return Err(bad(&format!("class {class} disagrees with label {}", labels.at(r, c))));
            }
            if subsets[r * w + c].replace(sub).is_some() {
                return Err(bad("pixel listed twice"));
            }
        }
        Ok(Self {
            height: h,
            width: w,
            subsets,
            seed: None,
        })
    }
}

pub fn save_split(split: &SplitSpec, labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, split.to_text(labels))?;
    Ok(())
}

pub fn load_split(path: impl AsRef<Path>, labels: &LabelMap) -> Result<SplitSpec> {
    SplitSpec::from_text(&fs::read_to_string(path)?, labels)
}

/// Seeded per-class split: each class's pixels are shuffled, the first
/// `train` go to train, the next `val` to val, the rest to test. Classes
/// present in the labels but absent from `counts` go entirely to test.
/// Requests larger than a class are clamped with a warning.
pub fn make_split(labels: &LabelMap, counts: &ClassCounts, seed: u64) -> Result<SplitSpec> {
    let census = labels.census();
    for &class in counts.keys() {
        if census.get(class as usize).copied().unwrap_or(0) == 0 {
            return invalid(format!("class {class} does not occur in the label map"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets = vec![None; labels.labels.len()];
    for class in 1..census.len() as u16 {
        let mut pixels: Vec<usize> = (0..labels.labels.len()).filter(|&p| labels.labels[p] == class).collect();
        if pixels.is_empty() {
            continue;
        }
        pixels.shuffle(&mut rng);
        let (want_train, want_val) = counts.get(&class).copied().unwrap_or((0, 0));
        let n = pixels.len();
        let train = want_train.min(n);
        let val = want_val.min(n - train);
        if (train, val) != (want_train, want_val) {
            warn!("class {class}: requested {want_train}/{want_val} train/val from {n} pixels, using {train}/{val}");
        }
        for (i, &p) in pixels.iter().enumerate() {
            subsets[p] = Some(if i < train {
                Subset::Train
            } else if i < train + val {
                Subset::Val
            } else {
                Subset::Test
            });
        }
    }
    Ok(SplitSpec {
        height: labels.height,
        width: labels.width,
        subsets,
        seed: Some(seed),
    })
}

/// Smooth spectral signatures, one per class, `classes × bands`.
pub fn class_signatures(classes: usize, bands: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    (0..classes)
        .map(|_| {
            let terms: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(0.3..1.0), rng.gen_range(0.2..2.0), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            let offset = rng.gen_range(-1.0..1.0);
            (0..bands)
                .map(|b| {
                    let t = b as f64 / bands.max(2) as f64 * std::f64::consts::TAU;
                    let v: f64 = terms.iter().map(|&(a, f, ph)| a * (f * t + ph).sin()).sum();
                    (offset + v) as f32
                })
                .collect()
        })
        .collect()
}

/// Fully labeled synthetic scene: Voronoi regions around `2·classes` random
/// sites (site `i` has class `i mod classes`), each pixel its class's
/// signature plus white noise of standard deviation `noise_sigma`.
pub fn synth_scene(
    height: usize,
    width: usize,
    bands: usize,
    classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(HsiCube, LabelMap)> {
    if !(1..=16).contains(&classes) {
        return invalid(format!("synthetic scenes support 1..=16 classes, got {classes}"));
    }
    if height == 0 || width == 0 || bands == 0 {
        return invalid("scene extents must be positive");
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return invalid(format!("noise sigma must be a nonnegative number, got {noise_sigma}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64)> = (0..2 * classes)
        .map(|_| (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64)))
        .collect();
    let signatures = class_signatures(classes, bands, &mut rng);
    let labels: Vec<u16> = (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
            let nearest = (0..sites.len())
                .min_by(|&a, &b| {
                    let da = (sites[a].0 - y).powi(2) + (sites[a].1 - x).powi(2);
                    let db = (sites[b].0 - y).powi(2) + (sites[b].1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            (nearest % classes + 1) as u16
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = height * width;
    let mut values = vec![0.0f32; bands * n];
    for b in 0..bands {
        for p in 0..n {
            let sig = signatures[labels[p] as usize - 1][b];
            let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            values[b * n + p] = sig + eps;
        }
    }
    Ok((HsiCube::new(height, width, bands, values)?, LabelMap::new(height, width, labels)?))
}
