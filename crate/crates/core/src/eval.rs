//! Experiment drivers: representation-space nearest-neighbour tables,
//! top-k inversion samples, per-layer NCE, training-dynamics sweeps, CSV
//! output and PGM/PPM tile grids.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::classifier::{ClassifierError, ClassifierModel, Representer, Tap};
use crate::data::{ImageDataset, Split};
use crate::inverter::{train_inverter, InversionConfig, InversionModel, InverterError, Pairs};
use crate::io::write_atomic;
use crate::mi::{nce_bound, MIEstimate, MiError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Inverter(#[from] InverterError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Mi(#[from] MiError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("missing {0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io { path: path.display().to_string(), source }
}

/// Sum of absolute differences between two flattened tap values.
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnTableRow {
    pub dataset: String,
    pub layer: String,
    pub method: String,
    pub mean_l1: f64,
    pub n: usize,
}

/// Representation-space L1 reference distances for MNIST at full scale
/// (500 test images; 28×28 inputs, 256 gray levels).
pub fn nn_table_reference() -> Vec<NnTableRow> {
    let values = [
        ("CONV1", [1.25e-2, 7.68e-4, 6.29e-4]),
        ("CONV2", [4.95e-2, 1.65e-2, 1.40e-2]),
        ("FC3", [1.22e-1, 1.35e-1, 9.52e-2]),
    ];
    let mut rows = Vec::new();
    for (layer, v) in values {
        for (method, mean_l1) in ["1NN", "IM-S", "IM-NN"].into_iter().zip(v) {
            rows.push(NnTableRow { dataset: "mnist-reference".into(), layer: layer.into(), method: method.into(), mean_l1, n: 500 });
        }
    }
    rows
}

/// Settings for [`nn_table`].
#[derive(Clone, Debug)]
pub struct NnTableConfig {
    pub dataset: String,
    pub n_samples: usize,
    pub seed: u64,
}

/// For each test image and layer: L1 distance in representation space to
/// the nearest training image (1NN), to the first inversion sample (IM-S)
/// and to the closest of `n_samples` inversion samples (IM-NN).
pub fn nn_table(
    rep: &dyn Representer,
    inverters: &[(Tap, &InversionModel)],
    data: &ImageDataset,
    test_rows: &[usize],
    train_rows: &[usize],
    config: &NnTableConfig,
) -> Result<Vec<NnTableRow>, EvalError> {
    if test_rows.is_empty() || train_rows.is_empty() || config.n_samples == 0 {
        return Err(EvalError::Invalid("nn_table needs test rows, train rows and at least one sample".into()));
    }
    let scale = 1.0 / (data.levels - 1) as f64;
    let mut rows = Vec::new();
    for &(tap, model) in inverters {
        let h_test = rep.extract(&data.batch(test_rows), tap)?;
        let h_train = rep.extract(&data.batch(train_rows), tap)?;
        let nn: Vec<f64> = (0..test_rows.len())
            .map(|i| {
                (0..train_rows.len()).map(|j| l1(h_test.example(i), h_train.example(j))).fold(f64::INFINITY, f64::min)
            })
            .collect();
        let reps: Vec<usize> = (0..test_rows.len()).flat_map(|i| std::iter::repeat(i).take(config.n_samples)).collect();
        let samples = model.sample(&h_test.select_batch(&reps), config.seed)?;
        let h_samples = rep.extract(&samples.map(|v| v * scale), tap)?;
        let (mut ims, mut imnn) = (Vec::new(), Vec::new());
        for i in 0..test_rows.len() {
            let d: Vec<f64> = (0..config.n_samples)
                .map(|s| l1(h_test.example(i), h_samples.example(i * config.n_samples + s)))
                .collect();
            ims.push(d[0]);
            imnn.push(d.iter().copied().fold(f64::INFINITY, f64::min));
        }
        for (method, values) in [("1NN", nn), ("IM-S", ims), ("IM-NN", imnn)] {
            rows.push(NnTableRow {
                dataset: config.dataset.clone(),
                layer: tap.as_str().into(),
                method: method.into(),
                mean_l1: values.iter().sum::<f64>() / values.len() as f64,
                n: values.len(),
            });
        }
    }
    Ok(rows)
}

/// One draw from a top-k pool.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedSample {
    pub draw: usize,
    pub l1: f64,
    pub image: Tensor,
}

/// Draws `pool` samples for one context and keeps the `k` closest to
/// `x_levels` in pixel L1 (gray levels), ties broken by draw index.
pub fn topk_samples(
    model: &InversionModel,
    x_levels: &Tensor,
    h: &Tensor,
    pool: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<RankedSample>, EvalError> {
    if k > pool {
        return Err(EvalError::Invalid(format!("k = {k} exceeds pool size {pool}")));
    }
    if h.batch() != 1 || x_levels.batch() != 1 {
        return Err(EvalError::Invalid("topk takes one image and one context".into()));
    }
    let samples = model.sample(&h.select_batch(&vec![0; pool]), seed)?;
    let mut ranked: Vec<RankedSample> = (0..pool)
        .map(|i| RankedSample { draw: i, l1: l1(samples.example(i), x_levels.data()), image: samples.slice_batch(i, i + 1) })
        .collect();
    ranked.sort_by(|a, b| a.l1.total_cmp(&b.l1).then(a.draw.cmp(&b.draw)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiLayerRow {
    pub layer: String,
    pub nce_nats: f64,
    pub nce_rel_conv1: f64,
    pub stderr: f64,
}

/// NCE per layer on held-out rows, with each value also divided by the
/// CONV1 value.
pub fn mi_by_layer(
    rep: &dyn Representer,
    inverters: &[(Tap, &InversionModel)],
    data: &ImageDataset,
    test_rows: &[usize],
) -> Result<(Vec<MiLayerRow>, Vec<(Tap, MIEstimate)>), EvalError> {
    for needed in [Tap::Conv1, Tap::Conv2, Tap::Fc3] {
        if !inverters.iter().any(|(t, _)| *t == needed) {
            return Err(EvalError::Missing(format!("inverter for {needed}")));
        }
    }
    let mut estimates = Vec::new();
    for &(tap, model) in inverters {
        let pairs = Pairs::extract(rep, tap, data, test_rows)?;
        estimates.push((tap, nce_bound(model, &pairs)?));
    }
    let conv1 = estimates.iter().find(|(t, _)| *t == Tap::Conv1).expect("checked").1.value;
    let rows = estimates
        .iter()
        .map(|(tap, e)| MiLayerRow {
            layer: tap.as_str().into(),
            nce_nats: e.value,
            nce_rel_conv1: e.value / conv1,
            stderr: e.stderr.unwrap_or(f64::NAN),
        })
        .collect();
    Ok((rows, estimates))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Regular,
    Overfit,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Regular => "regular",
            Regime::Overfit => "overfit",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(Regime::Regular),
            "overfit" => Ok(Regime::Overfit),
            _ => Err(EvalError::Invalid(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub step: usize,
    pub layer: String,
    pub regime: String,
    pub nce_nats: f64,
    pub val_nll_nats: f64,
}

#[derive(Clone, Debug)]
pub struct DynamicsResult {
    pub record: DynamicsRecord,
    pub nce: MIEstimate,
}

/// A classifier snapshot to analyse.
#[derive(Clone, Debug)]
pub struct SweepCheckpoint {
    pub step: usize,
    pub regime: Regime,
    pub model: ClassifierModel,
}

/// Trains a fresh inverter for every `(checkpoint, layer)` and measures NCE
/// on the test split. Jobs run on a pool of `workers` threads; results are
/// sorted by `(regime, layer, step)`.
pub fn dynamics_sweep(
    checkpoints: &[SweepCheckpoint],
    layers: &[Tap],
    config: &InversionConfig,
    data: &ImageDataset,
    workers: usize,
) -> Result<Vec<DynamicsResult>, EvalError> {
    let mut seen = std::collections::HashSet::new();
    for c in checkpoints {
        if !seen.insert((c.regime, c.step)) {
            return Err(EvalError::Invalid(format!("duplicate checkpoint {} at step {}", c.regime, c.step)));
        }
    }
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(EvalError::Missing("test split".into()));
    }
    let jobs: Vec<(&SweepCheckpoint, Tap)> =
        checkpoints.iter().flat_map(|c| layers.iter().map(move |&t| (c, t))).collect();
    let run = |&(ck, tap): &(&SweepCheckpoint, Tap)| -> Result<DynamicsResult, EvalError> {
        let trained = train_inverter(&ck.model, tap, data, config)?;
        let pairs = Pairs::extract(&ck.model, tap, data, &test)?;
        let nce = nce_bound(&trained.model, &pairs)?;
        Ok(DynamicsResult {
            record: DynamicsRecord {
                step: ck.step,
                layer: tap.as_str().into(),
                regime: ck.regime.as_str().into(),
                nce_nats: nce.value,
                val_nll_nats: trained.best_val_nll,
            },
            nce,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    let results: Vec<Result<DynamicsResult, EvalError>> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    });
    let mut out = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let order: HashMap<&str, usize> = Tap::ALL.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    out.sort_by(|a, b| {
        (a.record.regime.as_str(), order[a.record.layer.as_str()], a.record.step)
            .cmp(&(b.record.regime.as_str(), order[b.record.layer.as_str()], b.record.step))
    });
    Ok(out)
}

/// Writes rows with a header line, atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let bytes = csv_bytes(rows).map_err(|source| EvalError::Csv { path: path.display().to_string(), source })?;
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let err = |source| EvalError::Csv { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(err)
}

/// A decoded PGM (`channels == 1`) or PPM (`channels == 3`) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Tiles `[C, H, W]` level images row-major into a `rows × cols` grid with
/// one-pixel separators of value 0, and writes binary PGM (gray) or PPM
/// (RGB) with `maxval = levels − 1`.
pub fn sample_grid(images: &[Tensor], levels: usize, rows: usize, cols: usize, path: &Path) -> Result<Pnm, EvalError> {
    let first = images.first().ok_or_else(|| EvalError::Invalid("no images to tile".into()))?;
    let shape = per_image_shape(first)?;
    if images.len() > rows * cols {
        return Err(EvalError::Invalid(format!("{} images do not fit a {rows}x{cols} grid", images.len())));
    }
    let (c, h, w) = shape;
    if c != 1 && c != 3 {
        return Err(EvalError::Invalid(format!("{c} channels; expected 1 or 3")));
    }
    let (gw, gh) = (cols * w + cols - 1, rows * h + rows - 1);
    let mut pixels = vec![0u8; gw * gh * c];
    for (i, img) in images.iter().enumerate() {
        if per_image_shape(img)? != shape {
            return Err(EvalError::Invalid(format!("image {i} has shape {:?}, expected {:?}", img.shape(), shape)));
        }
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = img.data()[(ch * h + y) * w + x].round().clamp(0.0, (levels - 1) as f64) as u8;
                    pixels[((oy + y) * gw + ox + x) * c + ch] = v;
                }
            }
        }
    }
    let pnm = Pnm { width: gw, height: gh, maxval: (levels - 1) as u16, channels: c, pixels };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{gw} {gh}\n{}\n", pnm.maxval).into_bytes();
    bytes.extend_from_slice(&pnm.pixels);
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))?;
    Ok(pnm)
}

fn per_image_shape(t: &Tensor) -> Result<(usize, usize, usize), EvalError> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(EvalError::Invalid(format!("image tensor {s:?} is not [C, H, W]"))),
    }
}

/// Reads a binary PGM/PPM written by [`sample_grid`].
pub fn read_pnm(path: &Path) -> Result<Pnm, EvalError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |m: &str| EvalError::Invalid(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval > 255 {
        return Err(bad("16-bit samples unsupported"));
    }
    let pixels = bytes.get(at..).unwrap_or_default().to_vec();
    if pixels.len() != width * height * channels {
        return Err(bad("payload size does not match header"));
    }
    Ok(Pnm { width, height, maxval: maxval as u16, channels, pixels })
}
