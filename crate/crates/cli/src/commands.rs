use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use ssgrn::data::*;
use ssgrn::metrics::*;
use ssgrn::network::*;
use ssgrn::pixmap::{class_map_ppm, graymap_pgm, ids_to_gray};
use ssgrn::sagrn::PoolMode;
use ssgrn::superpix::hard_map;
use ssgrn::trainer::{self, TrainConfig};
use ssgrn::{Tape, Tensor};

use crate::{AggregateArgs, Artifact, ComplexityArgs, EvalArgs, InspectArgs, PredictArgs, SplitArgs, SynthArgs, TrainArgs};

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cube(path: &Path) -> Result<HsiCube> {
    load_cube(path).with_context(|| format!("reading cube {}", path.display()))
}

fn labels(path: &Path) -> Result<LabelMap> {
    load_labels(path).with_context(|| format!("reading labels {}", path.display()))
}

fn checkpoint(path: &Path) -> Result<ModelState<f32>> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn check_extent(cube: &HsiCube, labels: &LabelMap) -> Result<()> {
    ensure!(
        (cube.height, cube.width) == (labels.height, labels.width),
        "cube is {}×{} but labels are {}×{}",
        cube.height,
        cube.width,
        labels.height,
        labels.width
    );
    Ok(())
}

fn check_model(state: &ModelState<f32>, cube: &HsiCube) -> Result<()> {
    let c = &state.config;
    ensure!(
        c.in_bands == cube.bands,
        "checkpoint expects {} bands, cube has {}",
        c.in_bands,
        cube.bands
    );
    ensure!(
        (c.height, c.width) == (cube.height, cube.width),
        "checkpoint was trained on {}×{} images, cube is {}×{}",
        c.height,
        c.width,
        cube.height,
        cube.width
    );
    Ok(())
}

fn check_classes(classes: usize, labels: &LabelMap) -> Result<()> {
    let max = labels.max_label() as usize;
    ensure!(max <= classes, "labels use class {max} but the model has {classes} classes");
    Ok(())
}

fn image(cube: &HsiCube) -> Tensor<f32> {
    standardize(cube).to_tensor()
}

fn pool_mode(hard: bool) -> ForwardOptions {
    ForwardOptions {
        pool_mode: if hard { PoolMode::Hard } else { PoolMode::Soft },
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let (cube, labels) = synth_scene(a.h, a.w, a.bands, a.classes, a.noise, a.seed)?;
    let (cp, lp) = (with_suffix(&a.out, ".cube"), with_suffix(&a.out, ".lab"));
    save_cube(&cube, &cp).with_context(|| format!("writing {}", cp.display()))?;
    save_labels(&labels, &lp).with_context(|| format!("writing {}", lp.display()))?;
    info!("wrote {} and {}", cp.display(), lp.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let labels = labels(&a.labels)?;
    let counts = match &a.counts {
        Some(p) => parse_counts(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => labels
            .census()
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| (c as u16, (a.train_per_class, a.val_per_class)))
            .collect(),
    };
    let split = make_split(&labels, &counts, a.seed)?;
    save_split(&split, &labels, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!(
        "split: {} train, {} val, {} test",
        split.count(Subset::Train),
        split.count(Subset::Val),
        split.count(Subset::Test)
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cube = cube(&a.cube)?;
    let labels = labels(&a.labels)?;
    check_extent(&cube, &labels)?;
    let split = load_split(&a.split, &labels).with_context(|| format!("reading split {}", a.split.display()))?;
    let classes = a.classes.unwrap_or(labels.max_label() as usize);
    ensure!(classes > 0, "label map has no labeled pixels");
    check_classes(classes, &labels)?;

    let mut config = ModelConfig::new(cube.bands, cube.height, cube.width, classes, a.model);
    config.spectral_descriptors = a.spectral_descriptors;
    let mut config = config.with_widths(a.widths);
    config.slic.k = a.descriptors;
    if let Some(v) = a.head_hidden {
        config.head_hidden = v;
    }
    if let Some(v) = a.slic_iters {
        config.slic.iters = v;
    }
    if let Some(v) = a.compactness {
        config.slic.compactness = v;
    }
    if let Some(v) = a.temperature {
        config.slic.temperature = v;
    }
    if let Some(v) = a.spectral_stride {
        config.spectral_stride = v;
    }
    config.validate()?;

    let cfg = TrainConfig {
        base_lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        max_iter: a.iters,
        power: a.power,
        seed: a.seed,
        eval_every: a.eval_every,
    };
    cfg.validate()?;
    let mut state = ModelState::<f32>::init(config, a.seed)?;
    info!("{} model, {} parameters", a.model, count_params(&state));
    let history = trainer::train(&mut state, &image(&cube), &labels, &split, &cfg)?;
    save_checkpoint(&state, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let hp = a.history.unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    write(&hp, history.to_csv())?;
    if let Some(last) = history.records.last() {
        info!("final loss {:.4}", last.loss);
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let state = checkpoint(&a.ckpt)?;
    let cube = cube(&a.cube)?;
    let labels = labels(&a.labels)?;
    check_extent(&cube, &labels)?;
    check_model(&state, &cube)?;
    check_classes(state.config.classes, &labels)?;
    let split = load_split(&a.split, &labels).with_context(|| format!("reading split {}", a.split.display()))?;
    if split.count(a.subset) == 0 {
        bail!("{} subset of {} is empty", a.subset, a.split.display());
    }
    let cm = trainer::evaluate(&state, &image(&cube), &labels, &split, a.subset, pool_mode(a.hard_pool))?;
    let m = RunMetrics::from_confusion(&cm)?;
    write(&a.report, report_text(&aggregate_runs(&[m])?))?;
    write(&with_suffix(&a.report, ".confusion.csv"), cm.to_csv())?;
    println!("OA {:.4} AA {:.4} Kappa {:.4}", m.oa, m.aa, m.kappa);
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let state = checkpoint(&a.ckpt)?;
    let cube = cube(&a.cube)?;
    check_model(&state, &cube)?;
    let mut map = trainer::predict_map(&state, &image(&cube), pool_mode(a.hard_pool))?;
    if let Some(p) = &a.mask_labels {
        let mask = labels(p)?;
        check_extent(&cube, &mask)?;
        for (m, &l) in map.labels.iter_mut().zip(&mask.labels) {
            if l == 0 {
                *m = 0;
            }
        }
    }
    write(&a.out, class_map_ppm(&map))
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let state = checkpoint(&a.ckpt)?;
    let cube = cube(&a.cube)?;
    check_model(&state, &cube)?;
    let variant = state.config.variant;
    match a.what {
        Artifact::Superpixels | Artifact::SpatialAffinity if !variant.has_spatial() => {
            bail!("{variant} model has no spatial branch")
        }
        Artifact::SpectralAffinity if !variant.has_spectral() => bail!("{variant} model has no spectral branch"),
        _ => {}
    }
    let mut tape = Tape::new();
    let params = state.bind(&mut tape, false);
    let x = tape.constant(pad_even(&image(&cube))?);
    let out = forward(&mut tape, &state.config, &params, x, ForwardOptions::default())?;
    match a.what {
        Artifact::Superpixels => {
            let sa = out.spatial.expect("checked above");
            let ids = hard_map(tape.value(sa.assignment.q))?;
            let (h, w) = state.config.feature_extent();
            let gray = ids_to_gray(&ids, state.config.slic.k - 1);
            write(&a.out, graymap_pgm(h, w, &gray)?)
        }
        Artifact::SpatialAffinity => write(&a.out, csv_rows(tape.value(out.spatial.expect("checked above").reprojection))?),
        Artifact::SpectralAffinity => write(&a.out, csv_rows(tape.value(out.spectral.expect("checked above").affinity))?),
    }
}

fn csv_rows(m: &Tensor<f32>) -> Result<String> {
    let (r, c) = m.dims2()?;
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| m.at2(i, j).to_string()).collect();
        writeln!(s, "{}", row.join(",")).expect("string write");
    }
    Ok(s)
}

pub fn complexity(a: ComplexityArgs) -> Result<()> {
    let mut config = ModelConfig::new(a.bands, a.h, a.w, a.classes, a.model);
    config.spectral_descriptors = a.spectral_descriptors;
    let mut config = config.with_widths(a.widths);
    config.slic.k = a.descriptors;
    config.validate()?;
    let params: usize = param_specs(&config).iter().map(|s| s.shape.iter().product::<usize>()).sum();
    let (fh, fw) = config.feature_extent();
    let ops = if a.model.has_spatial() { count_attention_ops(a.descriptors, fh * fw) } else { 0 };
    println!("params {params}");
    println!("attention_ops {ops}");
    Ok(())
}

pub fn aggregate(a: AggregateArgs) -> Result<()> {
    let runs = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_report(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_runs(&runs)?;
    println!("runs {}", runs.len());
    println!("OA {}", agg.oa.display());
    println!("AA {}", agg.aa.display());
    println!("Kappa {}", agg.kappa.display());
    Ok(())
}
