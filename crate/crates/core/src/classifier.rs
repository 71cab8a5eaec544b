//! Convolutional classifiers with named representation taps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, Graph, GraphError, Mode, NodeId, ParamSet, Padding, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{ImageDataset, Split};
use crate::seed::{derive, mix};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: usize },
    #[error("unknown tap `{0}` (expected CONV1, CONV2, FC3 or LOGITS)")]
    UnknownTap(String),
    #[error("unknown classifier variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid classifier config: {0}")]
    Config(String),
}

/// A named representation layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    Conv1,
    Conv2,
    Fc3,
    Logits,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Conv1, Tap::Conv2, Tap::Fc3, Tap::Logits];

    pub fn as_str(self) -> &'static str {
        match self {
            Tap::Conv1 => "CONV1",
            Tap::Conv2 => "CONV2",
            Tap::Fc3 => "FC3",
            Tap::Logits => "LOGITS",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tap {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tap::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ClassifierError::UnknownTap(s.to_owned()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    GlobalPool,
    FullyConnected,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GlobalPool => "global_pool",
            Variant::FullyConnected => "fully_connected",
        }
    }
}

impl FromStr for Variant {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "global_pool" => Ok(Variant::GlobalPool),
            "fully_connected" => Ok(Variant::FullyConnected),
            _ => Err(ClassifierError::UnknownVariant(s.to_owned())),
        }
    }
}

/// Network shape; everything needed to rebuild the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub variant: Variant,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub c1: usize,
    pub c2: usize,
    pub kernel: usize,
    pub fc3: usize,
    pub fc_widths: (usize, usize),
    pub conv_dropout: f64,
    pub fc_dropout: f64,
}

impl Architecture {
    pub fn descriptor(&self) -> BTreeMap<String, String> {
        let (c, h, w) = self.input;
        [
            ("kind", "classifier".to_string()),
            ("variant", self.variant.as_str().to_string()),
            ("input", format!("{c}x{h}x{w}")),
            ("classes", self.classes.to_string()),
            ("c1", self.c1.to_string()),
            ("c2", self.c2.to_string()),
            ("kernel", self.kernel.to_string()),
            ("fc3", self.fc3.to_string()),
            ("fc_widths", format!("{}x{}", self.fc_widths.0, self.fc_widths.1)),
            ("conv_dropout", self.conv_dropout.to_string()),
            ("fc_dropout", self.fc_dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ClassifierError> {
        if ck.get("kind") != Some("classifier") {
            return Err(CheckpointError::Corrupt("not a classifier checkpoint".into()).into());
        }
        let dims = |key: &str| -> Result<Vec<usize>, ClassifierError> {
            let raw: String = ck.parse(key)?;
            raw.split('x')
                .map(|d| d.parse().map_err(|_| CheckpointError::Corrupt(format!("bad `{key}` {raw:?}")).into()))
                .collect()
        };
        let input = dims("input")?;
        let widths = dims("fc_widths")?;
        if input.len() != 3 || widths.len() != 2 {
            return Err(CheckpointError::Corrupt("malformed dimensions".into()).into());
        }
        Ok(Self {
            variant: ck.parse::<String>("variant")?.parse()?,
            input: (input[0], input[1], input[2]),
            classes: ck.parse("classes")?,
            c1: ck.parse("c1")?,
            c2: ck.parse("c2")?,
            kernel: ck.parse("kernel")?,
            fc3: ck.parse("fc3")?,
            fc_widths: (widths[0], widths[1]),
            conv_dropout: ck.parse("conv_dropout")?,
            fc_dropout: ck.parse("fc_dropout")?,
        })
    }

    /// Builds the graph; returns it with the tap nodes.
    fn build(&self) -> Result<(Graph, HashMap<Tap, NodeId>), ClassifierError> {
        let (c, h, w) = self.input;
        let mut g = Graph::new();
        let x = g.input("x");
        let mut taps = HashMap::new();
        let fc3_in;
        let mut cur;
        match self.variant {
            Variant::Baseline | Variant::GlobalPool => {
                let k = self.kernel;
                let h1 = (h.checked_sub(k - 1).unwrap_or(0)) / 2;
                let w1 = (w.checked_sub(k - 1).unwrap_or(0)) / 2;
                let h2 = (h1.checked_sub(k - 1).unwrap_or(0)) / 2;
                let w2 = (w1.checked_sub(k - 1).unwrap_or(0)) / 2;
                if h2 == 0 || w2 == 0 {
                    return Err(ClassifierError::Config(format!("{h}x{w} input too small for kernel {k}")));
                }
                cur = g.conv("conv1", x, c, self.c1, k, Padding::Valid, None)?;
                cur = g.relu(cur);
                cur = g.max_pool2(cur);
                taps.insert(Tap::Conv1, cur);
                cur = g.dropout(cur, self.conv_dropout)?;
                cur = g.conv("conv2", cur, self.c1, self.c2, k, Padding::Valid, None)?;
                cur = g.relu(cur);
                cur = g.max_pool2(cur);
                taps.insert(Tap::Conv2, cur);
                cur = g.dropout(cur, self.conv_dropout)?;
                if self.variant == Variant::GlobalPool {
                    cur = g.global_max_pool(cur);
                    fc3_in = self.c2;
                } else {
                    cur = g.flatten(cur);
                    fc3_in = self.c2 * h2 * w2;
                }
            }
            Variant::FullyConnected => {
                let (a, b) = self.fc_widths;
                cur = g.flatten(x);
                cur = g.linear("fc1", cur, c * h * w, a);
                cur = g.relu(cur);
                taps.insert(Tap::Conv1, cur);
                cur = g.dropout(cur, self.fc_dropout)?;
                cur = g.linear("fc2", cur, a, b);
                cur = g.relu(cur);
                taps.insert(Tap::Conv2, cur);
                cur = g.dropout(cur, self.fc_dropout)?;
                fc3_in = b;
            }
        }
        cur = g.linear("fc3", cur, fc3_in, self.fc3);
        cur = g.relu(cur);
        taps.insert(Tap::Fc3, cur);
        cur = g.dropout(cur, self.fc_dropout)?;
        let logits = g.linear("logits", cur, self.fc3, self.classes);
        taps.insert(Tap::Logits, logits);
        Ok((g, taps))
    }
}

/// Anything that maps a batch of images (pixels in [0, 1]) to tap values.
pub trait Representer: Sync {
    fn extract(&self, x: &Tensor, tap: Tap) -> Result<Tensor, ClassifierError>;

    /// Per-example shape of a tap.
    fn tap_shape(&self, tap: Tap) -> Result<Vec<usize>, ClassifierError>;
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub arch: Architecture,
    pub params: ParamSet,
    graph: Graph,
    taps: HashMap<Tap, NodeId>,
}

const EXTRACT_CHUNK: usize = 256;

impl ClassifierModel {
    pub fn new(arch: Architecture, params: ParamSet) -> Result<Self, ClassifierError> {
        let (graph, taps) = arch.build()?;
        graph.check_params(&params)?;
        Ok(Self { arch, params, graph, taps })
    }

    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ClassifierError> {
        let (graph, taps) = arch.build()?;
        let params = graph.init_params(seed);
        Ok(Self { arch, params, graph, taps })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn tap_node(&self, tap: Tap) -> NodeId {
        self.taps[&tap]
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ClassifierError> {
        self.extract(x, Tap::Logits)
    }

    /// Fraction of `rows` whose arg-max logit equals the label.
    pub fn accuracy(&self, data: &ImageDataset, rows: &[usize]) -> Result<f64, ClassifierError> {
        if rows.is_empty() {
            return Err(ClassifierError::Config("accuracy over zero examples".into()));
        }
        let logits = self.logits(&data.batch(rows))?;
        let hits = rows
            .iter()
            .enumerate()
            .filter(|&(i, &r)| argmax(logits.example(i)) == usize::from(data.labels[r]))
            .count();
        Ok(hits as f64 / rows.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.arch.descriptor(), self.params.tensors().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ClassifierError> {
        let arch = Architecture::from_checkpoint(ck)?;
        Self::new(arch, ParamSet::new(ck.tensors.clone()))
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a checkpoint, requiring it to match `expected`.
    pub fn load_as(path: &Path, expected: &Architecture) -> Result<Self, ClassifierError> {
        let ck = Checkpoint::load(path)?;
        ck.expect(&expected.descriptor())?;
        Self::from_checkpoint(&ck)
    }
}

impl Representer for ClassifierModel {
    fn extract(&self, x: &Tensor, tap: Tap) -> Result<Tensor, ClassifierError> {
        let node = self.tap_node(tap);
        let mut parts = Vec::new();
        let n = x.batch();
        for start in (0..n).step_by(EXTRACT_CHUNK) {
            let chunk = x.slice_batch(start, (start + EXTRACT_CHUNK).min(n));
            let mut fwd = self.graph.eval(&self.params, &[("x", &chunk)], Mode::Infer, 0, &[node])?;
            parts.push(fwd.take(node).expect("evaluated"));
        }
        Ok(Tensor::concat_batch(&parts)?)
    }

    fn tap_shape(&self, tap: Tap) -> Result<Vec<usize>, ClassifierError> {
        let (c, h, w) = self.arch.input;
        let probe = Tensor::zeros(&[1, c, h, w]);
        Ok(self.extract(&probe, tap)?.shape()[1..].to_vec())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub variant: Variant,
    pub c1: usize,
    pub c2: usize,
    pub kernel: usize,
    pub fc3: usize,
    pub fc_widths: (usize, usize),
    pub conv_dropout: f64,
    pub fc_dropout: f64,
    pub dropout: bool,
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub checkpoints: Vec<usize>,
    pub train_subset: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            c1: 32,
            c2: 32,
            kernel: 3,
            fc3: 256,
            fc_widths: (512, 512),
            conv_dropout: 0.2,
            fc_dropout: 0.5,
            dropout: true,
            lr: 3e-4,
            max_steps: 10_000,
            batch_size: 64,
            eval_every: 200,
            patience: 10,
            checkpoints: vec![0, 10, 100, 1000, 10_000],
            train_subset: None,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Config(m.to_owned()));
        if self.c1 == 0 || self.c2 == 0 || self.fc3 == 0 || self.fc_widths.0 == 0 || self.fc_widths.1 == 0 {
            return bad("layer widths must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch size and eval cadence must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if !self.checkpoints.is_empty() && (self.checkpoints[0] != 0 || self.checkpoints.windows(2).any(|w| w[0] >= w[1])) {
            return bad("checkpoint schedule must start at 0 and increase strictly");
        }
        if let Some(&last) = self.checkpoints.last() {
            if last > self.max_steps {
                return bad("checkpoint scheduled after max_steps");
            }
        }
        if !(0.0..1.0).contains(&self.conv_dropout) || !(0.0..1.0).contains(&self.fc_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if self.train_subset == Some(0) {
            return bad("train subset must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self, data: &ImageDataset) -> Architecture {
        let rate = |r: f64| if self.dropout { r } else { 0.0 };
        Architecture {
            variant: self.variant,
            input: (data.channels, data.height, data.width),
            classes: data.num_classes,
            c1: self.c1,
            c2: self.c2,
            kernel: self.kernel,
            fc3: self.fc3,
            fc_widths: self.fc_widths,
            conv_dropout: rate(self.conv_dropout),
            fc_dropout: rate(self.fc_dropout),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainedClassifier {
    /// Parameters with the best validation accuracy seen.
    pub model: ClassifierModel,
    pub best_step: usize,
    pub final_step: usize,
    pub curve: Vec<CurvePoint>,
    /// Parameter snapshots at the scheduled steps, in schedule order.
    pub checkpoints: Vec<(usize, ParamSet)>,
}

impl TrainedClassifier {
    pub fn at_checkpoint(&self, step: usize) -> Option<ClassifierModel> {
        self.checkpoints
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, p)| ClassifierModel::new(self.model.arch.clone(), p.clone()).expect("same architecture"))
    }
}

/// Training rows after the optional seeded subset draw.
pub fn training_rows(config: &ClassifierConfig, data: &ImageDataset) -> Vec<usize> {
    let mut rows = data.indices(Split::Train);
    if let Some(k) = config.train_subset {
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(config.seed, "train-subset")));
        rows.truncate(k);
        rows.sort_unstable();
    }
    rows
}

/// Minibatch Adam on softmax cross entropy with validation-accuracy early
/// stopping. Training runs until `max_steps`, or until patience runs out
/// once every scheduled checkpoint has been taken.
pub fn train_classifier(config: &ClassifierConfig, data: &ImageDataset) -> Result<TrainedClassifier, ClassifierError> {
    config.validate()?;
    let train = training_rows(config, data);
    let val = data.indices(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(ClassifierError::Config("dataset needs train and val examples".into()));
    }
    if data.labels.iter().any(|&l| usize::from(l) >= data.num_classes) {
        return Err(ClassifierError::Config("label outside class range".into()));
    }
    let arch = config.architecture(data);
    let mut model = ClassifierModel::init(arch, derive(config.seed, "classifier-init"))?;
    let mut g = model.graph.clone();
    let logits = model.tap_node(Tap::Logits);
    let y = g.input("y");
    let loss = g.softmax_cross_entropy(logits, y, data.num_classes);

    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.lr));
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive(config.seed, "classifier-batches"));
    let dropout_seed = derive(config.seed, "classifier-dropout");
    let batch = config.batch_size.min(train.len());
    let mut order = train.clone();
    let mut cursor = order.len();

    let mut checkpoints = Vec::new();
    if config.checkpoints.first() == Some(&0) {
        checkpoints.push((0, model.params.clone()));
    }
    let last_scheduled = config.checkpoints.last().copied().unwrap_or(0);
    let mut curve = Vec::new();
    let (mut best_acc, mut best_step, mut best_params) = (f64::NEG_INFINITY, 0, model.params.clone());
    let (mut since_best, mut loss_sum, mut loss_count) = (0, 0.0, 0usize);
    let mut step = 0;
    while step < config.max_steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let x = data.batch(rows);
        let targets = Tensor::new(vec![batch], rows.iter().map(|&r| f64::from(data.labels[r])).collect())?;
        let fwd = g
            .eval(&model.params, &[("x", &x), ("y", &targets)], Mode::Train, mix(dropout_seed, step as u64), &[loss])
            .map_err(|e| diverged(e, step + 1))?;
        let value = fwd.value(loss).expect("evaluated").data()[0];
        let grads = g.backward(&fwd, loss)?;
        adam.step(&mut model.params, &grads)?;
        step += 1;
        loss_sum += value;
        loss_count += 1;
        if config.checkpoints.binary_search(&step).is_ok() {
            checkpoints.push((step, model.params.clone()));
        }
        if step % config.eval_every == 0 || step == config.max_steps {
            let acc = model.accuracy(data, &val).map_err(|e| match e {
                ClassifierError::Graph(g) => diverged(g, step),
                e => e,
            })?;
            curve.push(CurvePoint { step, train_loss: loss_sum / loss_count as f64, val_accuracy: acc });
            (loss_sum, loss_count) = (0.0, 0);
            if acc > best_acc {
                (best_acc, best_step, best_params) = (acc, step, model.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= config.patience && step >= last_scheduled {
                break;
            }
        }
    }
    let final_step = step;
    model.params = best_params;
    Ok(TrainedClassifier { model, best_step, final_step, curve, checkpoints })
}

fn diverged(e: GraphError, step: usize) -> ClassifierError {
    match e {
        GraphError::NonFinite { .. } => ClassifierError::Diverged { step },
        e => e.into(),
    }
}
