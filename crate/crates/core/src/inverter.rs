//! Conditional autoregressive density model p(x | h) over quantized images.
//!
//! A mask-A convolution is followed by residual mask-B blocks and a 1×1
//! mask-B head producing `C·L` logits per pixel. The representation `h`
//! enters every layer as an additive bias: projected from a vector, or
//! resized to the image grid and mixed by a 1×1 convolution when spatial.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    AdamConfig, AdamState, ConvMask, Graph, GraphError, MaskKind, Mode, NodeId, ParamSet, Padding, Tensor,
};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::classifier::{ClassifierError, Representer, Tap};
use crate::data::{ImageDataset, Split};
use crate::seed::{derive, mix};

#[derive(Debug, Error)]
pub enum InverterError {
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
    #[error("state space of {levels}^{pixels} images exceeds 2^20")]
    TooLarge { levels: usize, pixels: usize },
    #[error("invalid inverter config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// `h` flattened and linearly projected to one bias per channel.
    VectorBias,
    /// `h` resized to the image grid, then a 1×1 convolution gives biases.
    SpatialBias,
}

impl Conditioning {
    pub fn as_str(self) -> &'static str {
        match self {
            Conditioning::VectorBias => "vector_bias",
            Conditioning::SpatialBias => "spatial_bias",
        }
    }

    /// Spatial taps (rank-3 per example) get spatial biases.
    pub fn for_shape(h_shape: &[usize]) -> Self {
        if h_shape.len() == 3 {
            Conditioning::SpatialBias
        } else {
            Conditioning::VectorBias
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Conditioning {
    type Err = InverterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vector_bias" => Ok(Conditioning::VectorBias),
            "spatial_bias" => Ok(Conditioning::SpatialBias),
            _ => Err(InverterError::Config(format!("unknown conditioning `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    /// Masked convolutions before the head: one mask-A layer, the rest
    /// residual mask-B blocks.
    pub layers: usize,
    pub filters: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub levels: usize,
    /// `None` picks by the tap's shape.
    pub conditioning: Option<Conditioning>,
    pub dropout: f64,
    pub context_dropout: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Validation examples used per check (all if larger than the split).
    pub val_limit: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            filters: 32,
            first_kernel: 5,
            kernel: 3,
            levels: 16,
            conditioning: None,
            dropout: 0.5,
            context_dropout: 0.0,
            lr: 1e-3,
            lr_decay: 0.9999,
            max_steps: 2000,
            batch_size: 32,
            eval_every: 200,
            val_limit: 500,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<(), InverterError> {
        let bad = |m: &str| Err(InverterError::Config(m.to_owned()));
        if self.layers == 0 || self.filters == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("layers, filters, batch size and eval cadence must be positive");
        }
        if self.first_kernel % 2 == 0 || self.kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        if !(2..=256).contains(&self.levels) {
            return bad("levels must be in [2, 256]");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.context_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning rate must be positive and decay in (0, 1]");
        }
        Ok(())
    }
}

/// Everything fixed at construction: image and context geometry plus the
/// network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct InverterShape {
    pub image: (usize, usize, usize),
    pub h_shape: Vec<usize>,
    pub tap: Option<Tap>,
    pub conditioning: Conditioning,
    pub layers: usize,
    pub filters: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub levels: usize,
    pub dropout: f64,
    pub context_dropout: f64,
}

impl InverterShape {
    pub fn new(config: &InversionConfig, image: (usize, usize, usize), h_shape: &[usize], tap: Option<Tap>) -> Self {
        Self {
            image,
            h_shape: h_shape.to_vec(),
            tap,
            conditioning: config.conditioning.unwrap_or_else(|| Conditioning::for_shape(h_shape)),
            layers: config.layers,
            filters: config.filters,
            first_kernel: config.first_kernel,
            kernel: config.kernel,
            levels: config.levels,
            dropout: config.dropout,
            context_dropout: config.context_dropout,
        }
    }

    pub fn descriptor(&self) -> BTreeMap<String, String> {
        let (c, h, w) = self.image;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        [
            ("kind", "inverter".to_string()),
            ("image", format!("{c}x{h}x{w}")),
            ("h_shape", join(&self.h_shape)),
            ("tap", self.tap.map_or("none".to_string(), |t| t.as_str().to_string())),
            ("conditioning", self.conditioning.as_str().to_string()),
            ("layers", self.layers.to_string()),
            ("filters", self.filters.to_string()),
            ("first_kernel", self.first_kernel.to_string()),
            ("kernel", self.kernel.to_string()),
            ("levels", self.levels.to_string()),
            ("dropout", self.dropout.to_string()),
            ("context_dropout", self.context_dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self, InverterError> {
        if ck.get("kind") != Some("inverter") {
            return Err(CheckpointError::Corrupt("not an inverter checkpoint".into()).into());
        }
        let dims = |key: &str| -> Result<Vec<usize>, InverterError> {
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
        Ok(Self {
            image: (image[0], image[1], image[2]),
            h_shape: dims("h_shape")?,
            tap,
            conditioning: ck.parse::<String>("conditioning")?.parse()?,
            layers: ck.parse("layers")?,
            filters: ck.parse("filters")?,
            first_kernel: ck.parse("first_kernel")?,
            kernel: ck.parse("kernel")?,
            levels: ck.parse("levels")?,
            dropout: ck.parse("dropout")?,
            context_dropout: ck.parse("context_dropout")?,
        })
    }
}

struct Net {
    graph: Graph,
    logits: NodeId,
    log_probs: NodeId,
    loss: NodeId,
}

fn build(shape: &InverterShape) -> Result<Net, InverterError> {
    let (c, _, _) = shape.image;
    let (f, l) = (shape.filters, shape.levels);
    let mut g = Graph::new();
    let x = g.input("x");
    let h = g.input("h");
    let y = g.input("y");
    let mask = |kind| ConvMask::with_groups(kind, c);

    // Context prepared once, then projected per layer.
    let (ctx, ctx_width) = match shape.conditioning {
        Conditioning::VectorBias => {
            let flat = g.flatten(h);
            let d: usize = shape.h_shape.iter().product();
            (g.dropout(flat, shape.context_dropout)?, d)
        }
        Conditioning::SpatialBias => {
            if shape.h_shape.len() != 3 {
                return Err(InverterError::Shape(format!("spatial conditioning needs a CxHxW tap, got {:?}", shape.h_shape)));
            }
            let (_, ih, iw) = shape.image;
            let resized = g.resize_nearest(h, ih, iw);
            let rows = g.slice_rows_like(resized, x);
            (g.dropout(rows, shape.context_dropout)?, shape.h_shape[0])
        }
    };
    let bias = |g: &mut Graph, name: &str, feat: NodeId| -> Result<NodeId, InverterError> {
        Ok(match shape.conditioning {
            Conditioning::VectorBias => {
                let b = g.linear(name, ctx, ctx_width, f);
                g.bias_add(feat, b)
            }
            Conditioning::SpatialBias => {
                let b = g.conv(name, ctx, ctx_width, f, 1, Padding::Same, None)?;
                g.add(feat, b)
            }
        })
    };

    let first = g.conv("masked0", x, c, f, shape.first_kernel, Padding::Same, Some(mask(MaskKind::A)))?;
    let first = bias(&mut g, "context0", first)?;
    let mut cur = g.relu(first);
    for i in 1..shape.layers {
        let conv = g.conv(&format!("masked{i}"), cur, f, f, shape.kernel, Padding::Same, Some(mask(MaskKind::B)))?;
        let conv = bias(&mut g, &format!("context{i}"), conv)?;
        let act = g.relu(conv);
        let act = g.dropout(act, shape.dropout)?;
        cur = g.add(cur, act);
    }
    let logits = g.conv("head", cur, f, c * l, 1, Padding::Same, Some(mask(MaskKind::B)))?;
    let log_probs = g.log_softmax(logits, l);
    let loss = g.softmax_cross_entropy(logits, y, l);
    Ok(Net { graph: g, logits, log_probs, loss })
}

const CHUNK: usize = 128;

#[derive(Clone)]
pub struct InversionModel {
    pub shape: InverterShape,
    pub params: ParamSet,
    net: std::sync::Arc<NetHandle>,
}

struct NetHandle(Net);

impl fmt::Debug for InversionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InversionModel").field("shape", &self.shape).finish_non_exhaustive()
    }
}

impl InversionModel {
    pub fn new(shape: InverterShape, params: ParamSet) -> Result<Self, InverterError> {
        let net = build(&shape)?;
        net.graph.check_params(&params)?;
        Ok(Self { shape, params, net: std::sync::Arc::new(NetHandle(net)) })
    }

    pub fn init(shape: InverterShape, seed: u64) -> Result<Self, InverterError> {
        let net = build(&shape)?;
        let params = net.graph.init_params(seed);
        Ok(Self { shape, params, net: std::sync::Arc::new(NetHandle(net)) })
    }

    /// All parameters zero: every conditional is uniform.
    pub fn zeros(shape: InverterShape) -> Result<Self, InverterError> {
        let net = build(&shape)?;
        let params = net.graph.zero_params();
        Ok(Self { shape, params, net: std::sync::Arc::new(NetHandle(net)) })
    }

    pub fn graph(&self) -> &Graph {
        &self.net.0.graph
    }

    pub fn levels(&self) -> usize {
        self.shape.levels
    }

    /// Number of sub-pixels `C·H·W`.
    pub fn dims(&self) -> usize {
        let (c, h, w) = self.shape.image;
        c * h * w
    }

    fn check(&self, x: &Tensor, h: &Tensor) -> Result<(), InverterError> {
        let (c, hh, ww) = self.shape.image;
        if x.shape().len() != 4 || x.shape()[1..] != [c, hh, ww] {
            return Err(InverterError::Shape(format!("image batch {:?}, model expects [N, {c}, {hh}, {ww}]", x.shape())));
        }
        if h.shape()[1..] != self.shape.h_shape[..] || h.batch() != x.batch() {
            return Err(InverterError::Shape(format!(
                "context {:?} for {} images, model expects [N, {:?}]",
                h.shape(),
                x.batch(),
                self.shape.h_shape
            )));
        }
        let l = self.levels() as f64;
        if x.data().iter().any(|&v| v < 0.0 || v >= l || v.fract() != 0.0) {
            return Err(InverterError::Shape(format!("pixel values must be integer levels in [0, {l})")));
        }
        Ok(())
    }

    fn scaled(&self, levels: &Tensor) -> Tensor {
        let s = 1.0 / (self.levels() - 1) as f64;
        levels.map(|v| v * s)
    }

    /// Per-position log-conditionals `[N, C·L, H, W]` under teacher forcing.
    pub fn conditionals(&self, x_levels: &Tensor, h: &Tensor) -> Result<Tensor, InverterError> {
        self.check(x_levels, h)?;
        let net = &self.net.0;
        let xs = self.scaled(x_levels);
        let mut fwd = net.graph.eval(&self.params, &[("x", &xs), ("h", h)], Mode::Infer, 0, &[net.log_probs])?;
        Ok(fwd.take(net.log_probs).expect("evaluated"))
    }

    /// `log p(x | h)` in nats for each example of the batch.
    pub fn log_prob(&self, x_levels: &Tensor, h: &Tensor) -> Result<Vec<f64>, InverterError> {
        self.check(x_levels, h)?;
        let (c, hh, ww) = self.shape.image;
        let (l, rest) = (self.levels(), hh * ww);
        let mut out = Vec::with_capacity(x_levels.batch());
        for start in (0..x_levels.batch()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x_levels.batch());
            let xc = x_levels.slice_batch(start, end);
            let lp = self.conditionals(&xc, &h.slice_batch(start, end))?;
            for b in 0..end - start {
                let mut s = 0.0;
                for ch in 0..c {
                    for r in 0..rest {
                        let v = xc.data()[(b * c + ch) * rest + r] as usize;
                        s += lp.data()[((b * c + ch) * l + v) * rest + r];
                    }
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Mean negative log-likelihood (nats per image) over a batch.
    pub fn nll(&self, x_levels: &Tensor, h: &Tensor) -> Result<f64, InverterError> {
        let lp = self.log_prob(x_levels, h)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// Ancestral sampling in raster order (channels innermost). Example `i`
    /// draws from its own stream `mix(seed, i)`.
    pub fn sample(&self, h: &Tensor, seed: u64) -> Result<Tensor, InverterError> {
        let (c, hh, ww) = self.shape.image;
        let n = h.batch();
        let probe = Tensor::zeros(&[n, c, hh, ww]);
        self.check(&probe, h)?;
        let mut out = Vec::with_capacity(n * c * hh * ww);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let rngs = (start..end).map(|i| ChaCha8Rng::seed_from_u64(mix(seed, i as u64))).collect();
            let x = self.sample_chunk(&h.slice_batch(start, end), rngs)?;
            out.extend_from_slice(x.data());
        }
        Ok(Tensor::new(vec![n, c, hh, ww], out)?)
    }

    fn sample_chunk(&self, h: &Tensor, mut rngs: Vec<ChaCha8Rng>) -> Result<Tensor, InverterError> {
        let (c, hh, ww) = self.shape.image;
        let (n, l) = (h.batch(), self.levels());
        let net = &self.net.0;
        let mut x = Tensor::zeros(&[n, c, hh, ww]);
        for row in 0..hh {
            // Outputs in rows ≤ row depend only on rows ≤ row, so the
            // forward pass runs on the top `row + 1` rows.
            let rows = row + 1;
            for col in 0..ww {
                for ch in 0..c {
                    let crop = crop_rows(&x, rows);
                    let xs = self.scaled(&crop);
                    let mut fwd =
                        net.graph.eval(&self.params, &[("x", &xs), ("h", h)], Mode::Infer, 0, &[net.logits])?;
                    let logits = fwd.take(net.logits).expect("evaluated");
                    let plane = rows * ww;
                    for (b, rng) in rngs.iter_mut().enumerate() {
                        let at = |k: usize| logits.data()[((b * c + ch) * l + k) * plane + row * ww + col];
                        let max = (0..l).map(at).fold(f64::NEG_INFINITY, f64::max);
                        let weights: Vec<f64> = (0..l).map(|k| (at(k) - max).exp()).collect();
                        let total: f64 = weights.iter().sum();
                        let u: f64 = rng.gen::<f64>() * total;
                        let mut acc = 0.0;
                        let mut v = l - 1;
                        for (k, wk) in weights.iter().enumerate() {
                            acc += wk;
                            if u < acc {
                                v = k;
                                break;
                            }
                        }
                        x.data_mut()[((b * c + ch) * hh + row) * ww + col] = v as f64;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Probability of every one of the `L^(C·H·W)` images given a single
    /// context, indexed by raster-order base-`L` digits (first sub-pixel
    /// most significant).
    pub fn enumerate_density(&self, h: &Tensor) -> Result<Vec<f64>, InverterError> {
        let dims = self.dims();
        let l = self.levels();
        let total = (l as f64).powi(dims as i32);
        if total > (1u64 << 20) as f64 {
            return Err(InverterError::TooLarge { levels: l, pixels: dims });
        }
        if h.batch() != 1 {
            return Err(InverterError::Shape("enumeration takes a single context".into()));
        }
        let total = total as usize;
        let (c, hh, ww) = self.shape.image;
        let mut probs = Vec::with_capacity(total);
        for start in (0..total).step_by(4096) {
            let end = (start + 4096).min(total);
            let mut data = Vec::with_capacity((end - start) * dims);
            for idx in start..end {
                // Sub-pixel order: raster position major, channel minor.
                let mut digits = vec![0.0; dims];
                let mut rem = idx;
                for pos in (0..dims).rev() {
                    let (p, ch) = (pos / c, pos % c);
                    digits[ch * hh * ww + p] = (rem % l) as f64;
                    rem /= l;
                }
                data.extend(digits);
            }
            let xb = Tensor::new(vec![end - start, c, hh, ww], data)?;
            let hb = Tensor::concat_batch(&vec![h.clone(); end - start])?;
            probs.extend(self.log_prob(&xb, &hb)?.into_iter().map(f64::exp));
        }
        Ok(probs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.shape.descriptor(), self.params.tensors().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<(), InverterError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, InverterError> {
        Self::new(InverterShape::from_checkpoint(ck)?, ParamSet::new(ck.tensors.clone()))
    }

    pub fn load(path: &Path) -> Result<Self, InverterError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn crop_rows(x: &Tensor, rows: usize) -> Tensor {
    let s = x.shape();
    let (hh, ww) = (s[2], s[3]);
    if rows == hh {
        return x.clone();
    }
    let mut out = Vec::with_capacity(s[0] * s[1] * rows * ww);
    for plane in x.data().chunks_exact(hh * ww) {
        out.extend_from_slice(&plane[..rows * ww]);
    }
    Tensor::new(vec![s[0], s[1], rows, ww], out).expect("crop shape")
}

/// Pairs of (image levels, representation) for a set of rows.
#[derive(Clone, Debug)]
pub struct Pairs {
    pub x: Tensor,
    pub h: Tensor,
}

impl Pairs {
    /// Extracts `tap` from a frozen representer for the given rows.
    pub fn extract(rep: &dyn Representer, tap: Tap, data: &ImageDataset, rows: &[usize]) -> Result<Self, InverterError> {
        if rows.is_empty() {
            return Err(InverterError::Config("no examples".into()));
        }
        let h = rep.extract(&data.batch(rows), tap)?;
        Ok(Self { x: data.batch_levels(rows), h })
    }

    pub fn len(&self) -> usize {
        self.x.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { x: self.x.select_batch(rows), h: self.h.select_batch(rows) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverterCurvePoint {
    pub step: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug)]
pub struct TrainedInverter {
    pub model: InversionModel,
    pub curve: Vec<InverterCurvePoint>,
    pub best_step: usize,
    pub best_val_nll: f64,
}

/// Trains an inverter for `tap` of a frozen representer on the train split,
/// tracking validation NLL on the val split.
pub fn train_inverter(
    rep: &dyn Representer,
    tap: Tap,
    data: &ImageDataset,
    config: &InversionConfig,
) -> Result<TrainedInverter, InverterError> {
    if data.levels != config.levels {
        return Err(InverterError::Config(format!("dataset has {} levels, config {}", data.levels, config.levels)));
    }
    let train = Pairs::extract(rep, tap, data, &data.indices(Split::Train))?;
    let val_rows = data.indices(Split::Val);
    let val_rows = if val_rows.is_empty() { data.indices(Split::Train) } else { val_rows };
    let val = Pairs::extract(rep, tap, data, &val_rows)?;
    let expected = rep.tap_shape(tap)?;
    if train.h.shape()[1..] != expected[..] {
        return Err(InverterError::Shape(format!(
            "representation shape {:?} drifted from {expected:?}",
            &train.h.shape()[1..]
        )));
    }
    let image = (data.channels, data.height, data.width);
    let shape = InverterShape::new(config, image, &expected, Some(tap));
    train_on_pairs(shape, &train, &val, config)
}

/// Maximum-likelihood training on precomputed pairs. Returns the parameters
/// with the lowest validation NLL.
pub fn train_on_pairs(
    shape: InverterShape,
    train: &Pairs,
    val: &Pairs,
    config: &InversionConfig,
) -> Result<TrainedInverter, InverterError> {
    config.validate()?;
    let mut model = InversionModel::init(shape, derive(config.seed, "inverter-init"))?;
    let val = val.select(&(0..val.len().min(config.val_limit)).collect::<Vec<_>>());
    let net = std::sync::Arc::clone(&model.net);
    let (graph, loss) = (&net.0.graph, net.0.loss);
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, "inverter-batches"));
    let dropout_seed = derive(config.seed, "inverter-dropout");
    let batch = config.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut curve = Vec::new();
    let mut best = (model.val_nll(&val)?, 0, model.params.clone());
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for step in 1..=config.max_steps {
        if cursor + batch > order.len() {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let b = train.select(rows);
        let xs = model.scaled(&b.x);
        let fwd = graph
            .eval(&model.params, &[("x", &xs), ("h", &b.h), ("y", &b.x)], Mode::Train, mix(dropout_seed, step as u64), &[loss])
            .map_err(|e| match e {
                GraphError::NonFinite { .. } => InverterError::Diverged { step },
                e => e.into(),
            })?;
        loss_sum += fwd.value(loss).expect("evaluated").data()[0];
        loss_count += 1;
        let grads = graph.backward(&fwd, loss)?;
        adam.config.lr = config.lr * config.lr_decay.powi(step as i32 - 1);
        adam.step(&mut model.params, &grads)?;
        if step % config.eval_every == 0 || step == config.max_steps {
            let v = model.val_nll(&val).map_err(|e| match e {
                InverterError::Graph(GraphError::NonFinite { .. }) => InverterError::Diverged { step },
                e => e,
            })?;
            curve.push(InverterCurvePoint { step, train_nll: loss_sum / loss_count as f64, val_nll: v });
            (loss_sum, loss_count) = (0.0, 0);
            if v < best.0 {
                best = (v, step, model.params.clone());
            }
        }
    }
    let (best_val_nll, best_step, params) = best;
    model.params = params;
    Ok(TrainedInverter { model, curve, best_step, best_val_nll })
}

impl InversionModel {
    fn val_nll(&self, val: &Pairs) -> Result<f64, InverterError> {
        self.nll(&val.x, &val.h)
    }
}
