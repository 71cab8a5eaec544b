use std::path::{Path, PathBuf};

use serde::Serialize;

use repinv::autodiff::Tensor;
use repinv::classifier::{train_classifier as fit_classifier, ClassifierConfig, ClassifierModel, Representer, Tap, Variant};
use repinv::data::{make_affine_digits, AffineRanges, ImageDataset, Split, MNIST_IMAGES, MNIST_LABELS};
use repinv::eval::{
    dynamics_sweep, nn_table_reference, sample_grid, topk_samples, write_csv, NnTableConfig, Regime, SweepCheckpoint,
};
use repinv::inverter::{train_inverter as fit_inverter, Conditioning, InverterCurvePoint, InversionConfig, InversionModel, Pairs};
use repinv::io::write_atomic;
use repinv::mi::{binning_mi, kde_noise_bound, kraskov_entropy, nce_bound, EstimatorKind, MIEstimate};
use repinv::mse::{export_levels, mae, mse, train_mse as fit_mse, MseConfig, MseInverterModel};
use repinv::seed::derive;

use crate::config::RunConfig;
use crate::error::CliError;

const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

fn out_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let out = cfg.path("out").unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let path = out.join(format!("{command}.resolved.cfg"));
    write_atomic(&path, cfg.resolved().as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(out)
}

fn seed(cfg: &RunConfig, stage: &str) -> Result<u64, CliError> {
    Ok(derive(cfg.get("seed")?, stage))
}

fn parse_with<T, E: std::fmt::Display>(cfg: &RunConfig, key: &str, f: impl FnOnce(&str) -> Result<T, E>) -> Result<T, CliError> {
    f(cfg.raw(key)).map_err(|e| CliError::usage(format!("`{key}`: {e}")))
}

fn split(cfg: &RunConfig) -> Result<Split, CliError> {
    match cfg.raw("eval.split") {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        s => Err(CliError::usage(format!("`eval.split`: unknown split `{s}`"))),
    }
}

fn layer(cfg: &RunConfig) -> Result<Tap, CliError> {
    parse_with(cfg, "inverter.layer", str::parse::<Tap>)
}

fn layers(cfg: &RunConfig) -> Result<Vec<Tap>, CliError> {
    let taps: Vec<Tap> = cfg.list("eval.layers")?;
    if taps.is_empty() {
        return Err(CliError::usage("`eval.layers` is empty"));
    }
    Ok(taps)
}

/// MNIST from IDX files, optionally downscaled 2×, split, optionally placed
/// on an affine canvas, then quantized.
fn load_data(cfg: &RunConfig) -> Result<ImageDataset, CliError> {
    let levels: usize = cfg.get("data.levels")?;
    if !(2..=256).contains(&levels) {
        return Err(CliError::usage(format!("`data.levels` = {levels} outside [2, 256]")));
    }
    let dataset = cfg.raw("data.dataset");
    if dataset != "mnist" && dataset != "affine" {
        return Err(CliError::usage(format!("`data.dataset`: unknown dataset `{dataset}`")));
    }
    let dir = cfg.path("data.dir").unwrap_or_default();
    let mut data = ImageDataset::load_mnist(&dir.join(MNIST_IMAGES), &dir.join(MNIST_LABELS))?;
    if cfg.get::<bool>("data.downscale")? {
        data = data.downscale2();
    }
    data = data.split_deterministic(SPLIT_FRACTIONS, cfg.get("data.split_seed")?)?;
    if dataset == "affine" {
        let canvas: usize = cfg.get("data.canvas")?;
        data = make_affine_digits(&data, canvas, cfg.get("data.affine_seed")?, &AffineRanges::default())?.0;
    }
    Ok(data.quantize(levels)?)
}

fn rows(data: &ImageDataset, split: Split, limit: Option<usize>) -> Result<Vec<usize>, CliError> {
    let mut r = data.indices(split);
    if r.is_empty() {
        return Err(CliError::data(format!("{} split is empty", split.as_str())));
    }
    if let Some(n) = limit {
        r.truncate(n);
    }
    Ok(r)
}

fn classifier_config(cfg: &RunConfig) -> Result<ClassifierConfig, CliError> {
    Ok(ClassifierConfig {
        variant: parse_with(cfg, "classifier.variant", str::parse::<Variant>)?,
        c1: cfg.get("classifier.c1")?,
        c2: cfg.get("classifier.c2")?,
        kernel: cfg.get("classifier.kernel")?,
        fc3: cfg.get("classifier.fc3")?,
        fc_widths: (cfg.get("classifier.fc_width1")?, cfg.get("classifier.fc_width2")?),
        conv_dropout: cfg.get("classifier.conv_dropout")?,
        fc_dropout: cfg.get("classifier.fc_dropout")?,
        dropout: cfg.get("classifier.dropout")?,
        lr: cfg.get("classifier.lr")?,
        max_steps: cfg.get("classifier.max_steps")?,
        batch_size: cfg.get("classifier.batch_size")?,
        eval_every: cfg.get("classifier.eval_every")?,
        patience: cfg.get("classifier.patience")?,
        checkpoints: cfg.list("classifier.checkpoints")?,
        train_subset: cfg.optional("classifier.train_subset")?,
        seed: seed(cfg, "classifier")?,
    })
}

fn inverter_config(cfg: &RunConfig, levels: usize) -> Result<InversionConfig, CliError> {
    let conditioning = match cfg.raw("inverter.conditioning") {
        "auto" => None,
        _ => Some(parse_with(cfg, "inverter.conditioning", str::parse::<Conditioning>)?),
    };
    Ok(InversionConfig {
        layers: cfg.get("inverter.layers")?,
        filters: cfg.get("inverter.filters")?,
        first_kernel: cfg.get("inverter.first_kernel")?,
        kernel: cfg.get("inverter.kernel")?,
        levels,
        conditioning,
        dropout: cfg.get("inverter.dropout")?,
        context_dropout: cfg.get("inverter.context_dropout")?,
        lr: cfg.get("inverter.lr")?,
        lr_decay: cfg.get("inverter.lr_decay")?,
        max_steps: cfg.get("inverter.max_steps")?,
        batch_size: cfg.get("inverter.batch_size")?,
        eval_every: cfg.get("inverter.eval_every")?,
        val_limit: cfg.get("inverter.val_limit")?,
        seed: seed(cfg, "inverter")?,
    })
}

fn mse_config(cfg: &RunConfig) -> Result<MseConfig, CliError> {
    Ok(MseConfig {
        filters: cfg.get("mse.filters")?,
        lr: cfg.get("mse.lr")?,
        max_steps: cfg.get("mse.max_steps")?,
        batch_size: cfg.get("mse.batch_size")?,
        eval_every: cfg.get("mse.eval_every")?,
        seed: seed(cfg, "mse")?,
    })
}

fn load_classifier(cfg: &RunConfig, out: &Path) -> Result<ClassifierModel, CliError> {
    let path = cfg.path("classifier.checkpoint").unwrap_or_else(|| out.join("classifier.ckpt"));
    Ok(ClassifierModel::load(&path)?)
}

fn inverter_path(cfg: &RunConfig, out: &Path, tap: Tap) -> PathBuf {
    cfg.path("inverter.dir").unwrap_or_else(|| out.to_path_buf()).join(format!("inverter-{tap}.ckpt"))
}

fn load_inverter(cfg: &RunConfig, out: &Path, tap: Tap) -> Result<InversionModel, CliError> {
    Ok(InversionModel::load(&inverter_path(cfg, out, tap))?)
}

#[derive(Serialize)]
struct ClassifierCurveRow {
    step: usize,
    train_loss: f64,
    val_accuracy: f64,
}

pub fn train_classifier(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let config = classifier_config(cfg)?;
    config.validate()?;
    let out = out_dir(cfg, command)?;
    let data = load_data(cfg)?;
    let trained = fit_classifier(&config, &data)?;
    for (step, _) in &trained.checkpoints {
        let model = trained.at_checkpoint(*step).expect("listed step");
        model.save(&out.join(format!("classifier-step{step}.ckpt")))?;
    }
    trained.model.save(&out.join("classifier.ckpt"))?;
    let curve: Vec<ClassifierCurveRow> = trained
        .curve
        .iter()
        .map(|p| ClassifierCurveRow { step: p.step, train_loss: p.train_loss, val_accuracy: p.val_accuracy })
        .collect();
    write_csv(&out.join("classifier_curve.csv"), &curve)?;
    let test = rows(&data, Split::Test, None)?;
    let acc = trained.model.accuracy(&data, &test)?;
    println!(
        "classifier {}: best step {}, stopped at {}, test accuracy {acc:.4}",
        config.variant.as_str(),
        trained.best_step,
        trained.final_step
    );
    Ok(())
}

#[derive(Serialize)]
struct InverterCurveRow {
    step: usize,
    train_nll: f64,
    val_nll: f64,
}

pub fn train_inverter(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let tap = layer(cfg)?;
    let config = inverter_config(cfg, cfg.get("data.levels")?)?;
    config.validate()?;
    let out = out_dir(cfg, command)?;
    let classifier = load_classifier(cfg, &out)?;
    let data = load_data(cfg)?;
    let trained = fit_inverter(&classifier, tap, &data, &config)?;
    let path = inverter_path(cfg, &out, tap);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    trained.model.save(&path)?;
    let curve: Vec<InverterCurveRow> = trained.curve.iter().map(InverterCurveRow::from).collect();
    write_csv(&out.join(format!("inverter-{tap}_curve.csv")), &curve)?;
    println!(
        "inverter {tap}: best step {}, val NLL {:.3} nats ({:.4} bits/dim)",
        trained.best_step,
        trained.best_val_nll,
        trained.best_val_nll / (trained.model.dims() as f64 * std::f64::consts::LN_2)
    );
    Ok(())
}

impl From<&InverterCurvePoint> for InverterCurveRow {
    fn from(p: &InverterCurvePoint) -> Self {
        Self { step: p.step, train_nll: p.train_nll, val_nll: p.val_nll }
    }
}

#[derive(Serialize)]
struct MseCurveRow {
    step: usize,
    train_mse: f64,
    val_mse: f64,
}

#[derive(Serialize)]
struct MseSummaryRow {
    layer: String,
    split: &'static str,
    mse: f64,
    mae: f64,
}

pub fn train_mse(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let tap = layer(cfg)?;
    let config = mse_config(cfg)?;
    let split = split(cfg)?;
    let (grid_rows, grid_cols): (usize, usize) = (cfg.get("eval.rows")?, cfg.get("eval.cols")?);
    let out = out_dir(cfg, command)?;
    let classifier = load_classifier(cfg, &out)?;
    let data = load_data(cfg)?;
    let trained = fit_mse(&classifier, tap, &data, &config)?;
    trained.model.save(&out.join(format!("mse-{tap}.ckpt")))?;
    let curve: Vec<MseCurveRow> =
        trained.curve.iter().map(|&(step, train_mse, val_mse)| MseCurveRow { step, train_mse, val_mse }).collect();
    write_csv(&out.join(format!("mse-{tap}_curve.csv")), &curve)?;

    let eval_rows = rows(&data, split, None)?;
    let x = data.batch(&eval_rows);
    let recon = trained.model.reconstruct(&classifier.extract(&x, tap)?)?;
    let summary = MseSummaryRow { layer: tap.to_string(), split: split.as_str(), mse: mse(&recon, &x), mae: mae(&recon, &x) };
    println!("mse {tap} on {}: MSE {:.5}, MAE {:.5}", split.as_str(), summary.mse, summary.mae);
    write_csv(&out.join(format!("mse-{tap}.csv")), &[summary])?;
    write_reconstruction_grid(&trained.model, &classifier, &data, tap, &eval_rows, grid_rows, grid_cols, &out)
}

/// Pairs of columns: original, then its reconstruction.
#[allow(clippy::too_many_arguments)]
fn write_reconstruction_grid(
    model: &MseInverterModel,
    classifier: &ClassifierModel,
    data: &ImageDataset,
    tap: Tap,
    eval_rows: &[usize],
    grid_rows: usize,
    grid_cols: usize,
    out: &Path,
) -> Result<(), CliError> {
    let n = (grid_rows * grid_cols / 2).min(eval_rows.len());
    if n == 0 {
        return Err(CliError::usage("grid needs at least two columns"));
    }
    let shown = &eval_rows[..n];
    let recon = model.reconstruct(&classifier.extract(&data.batch(shown), tap)?)?;
    let levels = export_levels(&recon, data.levels);
    let per = data.pixels_per_image();
    let shape = [data.channels, data.height, data.width];
    let mut tiles = Vec::new();
    for (i, &r) in shown.iter().enumerate() {
        tiles.push(level_tensor(data.image(r), &shape));
        tiles.push(level_tensor(&levels[i * per..(i + 1) * per], &shape));
    }
    sample_grid(&tiles, data.levels, grid_rows, grid_cols, &out.join(format!("mse-{tap}.pgm")))?;
    Ok(())
}

fn level_tensor(pixels: &[u8], shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| f64::from(pixels[i]))
}

/// Each grid row: an original image, then inversion samples of its
/// representation.
pub fn sample(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let tap = layer(cfg)?;
    let split = split(cfg)?;
    let (grid_rows, grid_cols): (usize, usize) = (cfg.get("eval.rows")?, cfg.get("eval.cols")?);
    if grid_rows == 0 || grid_cols < 2 {
        return Err(CliError::usage("sample grid needs at least one row and two columns"));
    }
    let out = out_dir(cfg, command)?;
    let classifier = load_classifier(cfg, &out)?;
    let inverter = load_inverter(cfg, &out, tap)?;
    let data = load_data(cfg)?;
    let shown = rows(&data, split, Some(grid_rows))?;
    let h = classifier.extract(&data.batch(&shown), tap)?;
    let per_row = grid_cols - 1;
    let reps: Vec<usize> = (0..shown.len()).flat_map(|i| std::iter::repeat(i).take(per_row)).collect();
    let samples = inverter.sample(&h.select_batch(&reps), seed(cfg, "sample")?)?;
    let shape = [data.channels, data.height, data.width];
    let mut tiles = Vec::new();
    for (i, &r) in shown.iter().enumerate() {
        tiles.push(level_tensor(data.image(r), &shape));
        for s in 0..per_row {
            tiles.push(samples.slice_batch(i * per_row + s, i * per_row + s + 1).reshape(&shape)?);
        }
    }
    let path = out.join(format!("samples-{tap}.pgm"));
    sample_grid(&tiles, data.levels, grid_rows, grid_cols, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct MiRow {
    estimator: &'static str,
    layer: String,
    split: &'static str,
    n: usize,
    value_nats: f64,
    stderr: Option<f64>,
    bits_per_dim: Option<f64>,
}

pub fn estimate_mi(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let kind = parse_with(cfg, "eval.kind", str::parse::<EstimatorKind>)?;
    let tap = layer(cfg)?;
    let split = split(cfg)?;
    let n: usize = cfg.get("eval.n")?;
    let k: usize = cfg.get("eval.k")?;
    let bins: usize = cfg.get("eval.bins")?;
    if n == 0 {
        return Err(CliError::usage("`eval.n` must be positive"));
    }
    if kind == EstimatorKind::KraskovEntropy && (k == 0 || k >= n) {
        return Err(CliError::usage(format!("kraskov needs 0 < k < n; got k = {k}, n = {n}")));
    }
    if kind == EstimatorKind::Binning && bins == 0 {
        return Err(CliError::usage("`eval.bins` must be positive"));
    }
    let out = out_dir(cfg, command)?;
    let classifier = load_classifier(cfg, &out)?;
    let data = load_data(cfg)?;
    let eval_rows = rows(&data, split, Some(n))?;
    if kind == EstimatorKind::KraskovEntropy && k >= eval_rows.len() {
        return Err(CliError::usage(format!("kraskov needs k < n; the split has only {} rows", eval_rows.len())));
    }
    let estimate: MIEstimate = match kind {
        EstimatorKind::NceLowerBound => {
            let inverter = load_inverter(cfg, &out, tap)?;
            nce_bound(&inverter, &Pairs::extract(&classifier, tap, &data, &eval_rows)?)?
        }
        _ => {
            let h = classifier.extract(&data.batch(&eval_rows), tap)?;
            match kind {
                EstimatorKind::Binning => binning_mi(&(0..eval_rows.len()).collect::<Vec<_>>(), &h, bins)?,
                EstimatorKind::KraskovEntropy => kraskov_entropy(&h, k)?,
                _ => kde_noise_bound(&h, cfg.get("eval.sigma2")?, cfg.get("eval.held_out")?, seed(cfg, "kde")?)?,
            }
        }
    };
    let row = MiRow {
        estimator: kind.as_str(),
        layer: tap.to_string(),
        split: split.as_str(),
        n: estimate.n,
        value_nats: estimate.value,
        stderr: estimate.stderr,
        bits_per_dim: estimate.bits_per_dim(),
    };
    let short = cfg.raw("eval.kind").split('_').next().unwrap_or("mi");
    write_csv(&out.join(format!("mi-{short}-{tap}.csv")), &[&row])?;
    match row.stderr {
        Some(se) => println!("{} {tap}: {:.4} nats (stderr {se:.4}, n {})", row.estimator, row.value_nats, row.n),
        None => println!("{} {tap}: {:.4} nats (n {})", row.estimator, row.value_nats, row.n),
    }
    Ok(())
}

/// Desk rows for the configured layers followed by the stored reference
/// rows.
pub fn nn_table(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let taps = layers(cfg)?;
    let n_test: usize = cfg.get("eval.n_test")?;
    let n_samples: usize = cfg.get("eval.n_samples")?;
    if n_test == 0 || n_samples == 0 {
        return Err(CliError::usage("`eval.n_test` and `eval.n_samples` must be positive"));
    }
    let out = out_dir(cfg, command)?;
    let classifier = load_classifier(cfg, &out)?;
    let inverters: Vec<(Tap, InversionModel)> =
        taps.iter().map(|&t| Ok((t, load_inverter(cfg, &out, t)?))).collect::<Result<_, CliError>>()?;
    let data = load_data(cfg)?;
    let test = rows(&data, Split::Test, Some(n_test))?;
    let train = rows(&data, Split::Train, None)?;
    let refs: Vec<(Tap, &InversionModel)> = inverters.iter().map(|(t, m)| (*t, m)).collect();
    let config = NnTableConfig { dataset: cfg.raw("data.dataset").to_string(), n_samples, seed: seed(cfg, "nn-table")? };
    let mut table = repinv::eval::nn_table(&classifier, &refs, &data, &test, &train, &config)?;
    for r in &table {
        println!("{:<6} {:<6} {:.5e}", r.layer, r.method, r.mean_l1);
    }
    table.extend(nn_table_reference());
    write_csv(&out.join("nn_table.csv"), &table)?;
    Ok(())
}

#[derive(Serialize)]
struct TopkRow {
    rank: usize,
    draw: usize,
    l1_levels: f64,
}

pub fn topk(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let tap = layer(cfg)?;
    let split = split(cfg)?;
    let index: usize = cfg.get("eval.index")?;
    let pool: usize = cfg.get("eval.pool")?;
    let k: usize = cfg.get("eval.topk")?;
    if k == 0 || k > pool {
        return Err(CliError::usage(format!("topk needs 0 < k <= pool; got k = {k}, pool = {pool}")));
    }
    let out = out_dir(cfg, command)?;
    let classifier = load_classifier(cfg, &out)?;
    let inverter = load_inverter(cfg, &out, tap)?;
    let data = load_data(cfg)?;
    let split_rows = rows(&data, split, None)?;
    let &row = split_rows
        .get(index)
        .ok_or_else(|| CliError::usage(format!("`eval.index` {index} beyond {} {} rows", split_rows.len(), split.as_str())))?;
    let x_levels = data.batch_levels(&[row]);
    let h = classifier.extract(&data.batch(&[row]), tap)?;
    let ranked = topk_samples(&inverter, &x_levels, &h, pool, k, seed(cfg, "topk")?)?;
    let shape = [data.channels, data.height, data.width];
    let mut tiles = vec![level_tensor(data.image(row), &shape)];
    for r in &ranked {
        tiles.push(r.image.clone().reshape(&shape)?);
    }
    sample_grid(&tiles, data.levels, 1, k + 1, &out.join(format!("topk-{tap}.pgm")))?;
    let table: Vec<TopkRow> =
        ranked.iter().enumerate().map(|(i, r)| TopkRow { rank: i + 1, draw: r.draw, l1_levels: r.l1 }).collect();
    write_csv(&out.join(format!("topk-{tap}.csv")), &table)?;
    println!("topk {tap}: closest L1 {:.1} levels over {pool} draws", ranked[0].l1);
    Ok(())
}

/// Loads `classifier-step{N}.ckpt` for every scheduled step from the two
/// regime directories and runs the sweep with one inverter seed for all
/// checkpoints.
pub fn dynamics(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let taps = layers(cfg)?;
    let schedule: Vec<usize> = cfg.list("classifier.checkpoints")?;
    let workers: usize = cfg.get("eval.workers")?;
    let config = inverter_config(cfg, cfg.get("data.levels")?)?;
    config.validate()?;
    let mut checkpoints = Vec::new();
    for (regime, key) in [(Regime::Regular, "eval.regular_dir"), (Regime::Overfit, "eval.overfit_dir")] {
        let dir = cfg.path(key).ok_or_else(|| CliError::usage(format!("`{key}` is not set")))?;
        for &step in &schedule {
            let path = dir.join(format!("classifier-step{step}.ckpt"));
            if path.exists() {
                checkpoints.push(SweepCheckpoint { step, regime, model: ClassifierModel::load(&path)? });
            }
        }
        if !checkpoints.iter().any(|c| c.regime == regime) {
            return Err(CliError::data(format!("no scheduled classifier checkpoints under {}", dir.display())));
        }
    }
    let out = out_dir(cfg, command)?;
    let data = load_data(cfg)?;
    let results = dynamics_sweep(&checkpoints, &taps, &config, &data, workers)?;
    let records: Vec<_> = results.iter().map(|r| r.record.clone()).collect();
    for r in &records {
        println!("{:<8} {:<6} step {:>6}: NCE {:.3}", r.regime, r.layer, r.step, r.nce_nats);
    }
    write_csv(&out.join("dynamics.csv"), &records)?;
    Ok(())
}

pub fn grid(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let split = split(cfg)?;
    let (grid_rows, grid_cols): (usize, usize) = (cfg.get("eval.rows")?, cfg.get("eval.cols")?);
    if grid_rows == 0 || grid_cols == 0 {
        return Err(CliError::usage("grid needs at least one row and one column"));
    }
    let out = out_dir(cfg, command)?;
    let data = load_data(cfg)?;
    let shown = rows(&data, split, Some(grid_rows * grid_cols))?;
    let shape = [data.channels, data.height, data.width];
    let tiles: Vec<Tensor> = shown.iter().map(|&r| level_tensor(data.image(r), &shape)).collect();
    let path = out.join("grid.pgm");
    sample_grid(&tiles, data.levels, grid_rows, grid_cols, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
