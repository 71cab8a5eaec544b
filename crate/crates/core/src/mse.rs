//! Point-estimate inversion `f(h)` trained on squared error.
//!
//! `h` is flattened, projected to a coarse half-resolution grid, upsampled
//! by nearest neighbour to the image size and refined by two same-padded
//! convolutions. Pixels are compared in the [0, 1] scale.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, Graph, GraphError, Mode, NodeId, ParamSet, Padding, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::classifier::{ClassifierError, Representer, Tap};
use crate::data::{ImageDataset, Split};
use crate::seed::derive;

#[derive(Debug, Error)]
pub enum MseError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid MSE config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseConfig {
    pub filters: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for MseConfig {
    fn default() -> Self {
        Self { filters: 32, lr: 1e-3, max_steps: 2000, batch_size: 32, eval_every: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseShape {
    pub image: (usize, usize, usize),
    pub h_shape: Vec<usize>,
    pub tap: Option<Tap>,
    pub filters: usize,
}

impl MseShape {
    fn coarse(&self) -> (usize, usize) {
        let (_, h, w) = self.image;
        (h.div_ceil(2), w.div_ceil(2))
    }

    pub fn descriptor(&self) -> BTreeMap<String, String> {
        let (c, h, w) = self.image;
        let dims = self.h_shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        [
            ("kind", "mse".to_string()),
            ("image", format!("{c}x{h}x{w}")),
            ("h_shape", dims),
            ("tap", self.tap.map_or("none".to_string(), |t| t.as_str().to_string())),
            ("filters", self.filters.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

struct Net {
    graph: Graph,
    out: NodeId,
    loss: NodeId,
}

fn build(shape: &MseShape) -> Result<Net, MseError> {
    let (c, h, w) = shape.image;
    let (ch, cw) = shape.coarse();
    let f = shape.filters;
    let d: usize = shape.h_shape.iter().product();
    let mut g = Graph::new();
    let hin = g.input("h");
    let target = g.input("x");
    let flat = g.flatten(hin);
    let proj = g.linear("project", flat, d, f * ch * cw);
    let proj = g.relu(proj);
    let grid = g.reshape(proj, &[f, ch, cw]);
    let up = g.resize_nearest(grid, h, w);
    let c1 = g.conv("refine", up, f, f, 3, Padding::Same, None)?;
    let c1 = g.relu(c1);
    let out = g.conv("output", c1, f, c, 3, Padding::Same, None)?;
    let loss = g.mean_squared_error(out, target);
    Ok(Net { graph: g, out, loss })
}

pub struct MseInverterModel {
    pub shape: MseShape,
    pub params: ParamSet,
    net: Net,
}

impl std::fmt::Debug for MseInverterModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MseInverterModel").field("shape", &self.shape).finish_non_exhaustive()
    }
}

impl MseInverterModel {
    pub fn new(shape: MseShape, params: ParamSet) -> Result<Self, MseError> {
        let net = build(&shape)?;
        net.graph.check_params(&params)?;
        Ok(Self { shape, params, net })
    }

    pub fn init(shape: MseShape, seed: u64) -> Result<Self, MseError> {
        let net = build(&shape)?;
        let params = net.graph.init_params(seed);
        Ok(Self { shape, params, net })
    }

    pub fn zeros(shape: MseShape) -> Result<Self, MseError> {
        let net = build(&shape)?;
        let params = net.graph.zero_params();
        Ok(Self { shape, params, net })
    }

    /// Real-valued reconstructions `[N, C, H, W]` in the [0, 1] pixel scale
    /// (not clamped).
    pub fn reconstruct(&self, h: &Tensor) -> Result<Tensor, MseError> {
        if h.shape()[1..] != self.shape.h_shape[..] {
            return Err(MseError::Shape(format!("context {:?}, model expects [N, {:?}]", h.shape(), self.shape.h_shape)));
        }
        let mut parts = Vec::new();
        for start in (0..h.batch()).step_by(256) {
            let hb = h.slice_batch(start, (start + 256).min(h.batch()));
            let mut fwd = self.net.graph.eval(&self.params, &[("h", &hb)], Mode::Infer, 0, &[self.net.out])?;
            parts.push(fwd.take(self.net.out).expect("evaluated"));
        }
        Ok(Tensor::concat_batch(&parts)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.shape.descriptor(), self.params.tensors().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<(), MseError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, MseError> {
        let ck = Checkpoint::load(path)?;
        if ck.get("kind") != Some("mse") {
            return Err(CheckpointError::Corrupt("not an MSE inverter checkpoint".into()).into());
        }
        let dims = |key: &str| -> Result<Vec<usize>, MseError> {
            let raw: String = ck.parse(key)?;
            raw.split('x')
                .map(|d| d.parse().map_err(|_| CheckpointError::Corrupt(format!("bad `{key}` {raw:?}")).into()))
                .collect()
        };
        let image = dims("image")?;
        if image.len() != 3 {
            return Err(CheckpointError::Corrupt("malformed image shape".into()).into());
        }
        let tap = match ck.get("tap") {
            Some("none") | None => None,
            Some(t) => Some(t.parse()?),
        };
        let shape = MseShape { image: (image[0], image[1], image[2]), h_shape: dims("h_shape")?, tap, filters: ck.parse("filters")? };
        Self::new(shape, ParamSet::new(ck.tensors))
    }
}

/// Rounds [0, 1]-scale reconstructions to gray levels, clamping to
/// `[0, L − 1]`.
pub fn export_levels(recon: &Tensor, levels: usize) -> Vec<u8> {
    let top = (levels - 1) as f64;
    recon.data().iter().map(|&v| (v * top).round().clamp(0.0, top) as u8).collect()
}

/// Mean squared error between a reconstruction and images in [0, 1].
pub fn mse(recon: &Tensor, target: &Tensor) -> f64 {
    let s: f64 = recon.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    s / recon.len() as f64
}

/// Mean absolute error per pixel.
pub fn mae(recon: &Tensor, target: &Tensor) -> f64 {
    let s: f64 = recon.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    s / recon.len() as f64
}

#[derive(Debug)]
pub struct TrainedMse {
    pub model: MseInverterModel,
    pub best_step: usize,
    pub best_val_mse: f64,
    /// `(step, train MSE, val MSE)` at each validation check.
    pub curve: Vec<(usize, f64, f64)>,
}

/// Trains `f(h)` on the train split of `data`, validating on the val split
/// (or the train split when there is none).
pub fn train_mse(rep: &dyn Representer, tap: Tap, data: &ImageDataset, config: &MseConfig) -> Result<TrainedMse, MseError> {
    let train_rows = data.indices(Split::Train);
    let mut val_rows = data.indices(Split::Val);
    if val_rows.is_empty() {
        val_rows = train_rows.clone();
    }
    if train_rows.is_empty() {
        return Err(MseError::Config("no training examples".into()));
    }
    let h_train = rep.extract(&data.batch(&train_rows), tap)?;
    let h_val = rep.extract(&data.batch(&val_rows), tap)?;
    let shape = MseShape {
        image: (data.channels, data.height, data.width),
        h_shape: h_train.shape()[1..].to_vec(),
        tap: Some(tap),
        filters: config.filters,
    };
    train_on(shape, (&data.batch(&train_rows), &h_train), (&data.batch(&val_rows), &h_val), config)
}

/// Trains on precomputed `(x in [0,1], h)` pairs.
pub fn train_on(
    shape: MseShape,
    train: (&Tensor, &Tensor),
    val: (&Tensor, &Tensor),
    config: &MseConfig,
) -> Result<TrainedMse, MseError> {
    if config.filters == 0 || config.batch_size == 0 || config.eval_every == 0 || !(config.lr > 0.0) {
        return Err(MseError::Config("filters, batch size, eval cadence and learning rate must be positive".into()));
    }
    let mut model = MseInverterModel::init(shape, derive(config.seed, "mse-init"))?;
    let (x_train, h_train) = train;
    let n = x_train.batch();
    let batch = config.batch_size.min(n);
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, "mse-batches"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let val_mse = |m: &MseInverterModel| -> Result<f64, MseError> { Ok(mse(&m.reconstruct(val.1)?, val.0)) };
    let mut best = (val_mse(&model)?, 0, model.params.clone());
    let mut curve = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for step in 1..=config.max_steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let (xb, hb) = (x_train.select_batch(rows), h_train.select_batch(rows));
        let g = &model.net.graph;
        let fwd = g
            .eval(&model.params, &[("h", &hb), ("x", &xb)], Mode::Train, 0, &[model.net.loss])
            .map_err(|e| match e {
                GraphError::NonFinite { .. } => MseError::Diverged { step },
                e => e.into(),
            })?;
        loss_sum += fwd.value(model.net.loss).expect("evaluated").data()[0];
        loss_count += 1;
        let grads = g.backward(&fwd, model.net.loss)?;
        adam.step(&mut model.params, &grads)?;
        if step % config.eval_every == 0 || step == config.max_steps {
            let v = val_mse(&model).map_err(|e| match e {
                MseError::Graph(GraphError::NonFinite { .. }) => MseError::Diverged { step },
                e => e,
            })?;
            curve.push((step, loss_sum / loss_count as f64, v));
            (loss_sum, loss_count) = (0.0, 0);
            if v < best.0 {
                best = (v, step, model.params.clone());
            }
        }
    }
    let (best_val_mse, best_step, params) = best;
    model.params = params;
    Ok(TrainedMse { model, best_step, best_val_mse, curve })
}
