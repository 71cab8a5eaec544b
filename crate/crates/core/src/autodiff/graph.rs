use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvDims, ConvMask, Padding};
use super::{GraphError, Tensor};
use crate::seed::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Set when the parameter is the kernel of a masked convolution; masked
    /// taps are held at zero.
    pub mask: Option<ConvMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { slot: usize },
    Param { slot: usize },
    /// `x: [N, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, padding: Padding, mask: Option<ConvMask> },
    Relu { x: NodeId },
    MaxPool2 { x: NodeId },
    GlobalMaxPool { x: NodeId },
    /// Inverted dropout; identity in inference mode.
    Dropout { x: NodeId, rate: f64 },
    ResizeNearest { x: NodeId, height: usize, width: usize },
    /// Keeps the leading rows of `x` so its height matches `like`.
    SliceRowsLike { x: NodeId, like: NodeId },
    /// Reshape each batch element to `shape`.
    Reshape { x: NodeId, shape: Vec<usize> },
    Flatten { x: NodeId },
    /// `b` is `[C]` or `[N, C]`, broadcast over everything after axis 1.
    BiasAdd { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Over consecutive blocks of `classes` channels on axis 1.
    LogSoftmax { x: NodeId, classes: usize },
    /// Mean over the batch of the summed per-position negative log-likelihood.
    SoftmaxCrossEntropy { logits: NodeId, targets: NodeId, classes: usize },
    /// Mean of squared differences over all elements.
    MeanSquaredError { a: NodeId, b: NodeId },
    /// Sum of all elements.
    Sum { x: NodeId },
    /// Draws one class index per position; not differentiable.
    SampleCategorical { logits: NodeId, classes: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Conv2d { mask: Some(_), .. } => "masked_conv2d",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::Dropout { .. } => "dropout",
            Op::ResizeNearest { .. } => "resize_nearest",
            Op::SliceRowsLike { .. } => "slice_rows",
            Op::Reshape { .. } => "reshape",
            Op::Flatten { .. } => "flatten",
            Op::BiasAdd { .. } => "bias_add",
            Op::Add { .. } => "add",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MeanSquaredError { .. } => "mean_squared_error",
            Op::Sum { .. } => "sum",
            Op::SampleCategorical { .. } => "sample_categorical",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![x, w];
                p.extend(b);
                p
            }
            Op::Relu { x }
            | Op::MaxPool2 { x }
            | Op::GlobalMaxPool { x }
            | Op::Dropout { x, .. }
            | Op::ResizeNearest { x, .. }
            | Op::Reshape { x, .. }
            | Op::Flatten { x }
            | Op::Sum { x }
            | Op::LogSoftmax { x, .. } => vec![x],
            Op::SliceRowsLike { x, like } => vec![x, like],
            Op::BiasAdd { x, b } => vec![x, b],
            Op::Add { a, b } | Op::MeanSquaredError { a, b } => vec![a, b],
            Op::SoftmaxCrossEntropy { logits, targets, .. } => vec![logits, targets],
            Op::SampleCategorical { logits, .. } => vec![logits],
        }
    }

    /// Parents that receive gradient.
    fn differentiable_parents(&self) -> Vec<NodeId> {
        match *self {
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Op::SliceRowsLike { x, .. } => vec![x],
            Op::SampleCategorical { .. } => vec![],
            ref op => op.parents(),
        }
    }
}

/// Ordered parameter tensors, one per graph parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Static computation DAG. Nodes are appended by the builder methods, so a
/// node's parents always precede it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    params: Vec<ParamSpec>,
    inputs: Vec<String>,
}

#[derive(Debug, Default)]
enum Aux {
    #[default]
    None,
    Indices(Vec<usize>),
    Scale(Vec<f64>),
    LogProbs(Vec<f64>),
}

/// Values computed by [`Graph::eval`].
#[derive(Debug)]
pub struct Forward {
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
}

impl Forward {
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.values.get_mut(node.0).and_then(Option::take)
    }

    fn get(&self, node: NodeId) -> Result<&Tensor, GraphError> {
        self.value(node).ok_or(GraphError::NotEvaluated(node.0))
    }
}

fn mismatch(node: usize, op: &Op, detail: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch { node, op: op.name(), detail: detail.into() }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        let slot = self.inputs.len();
        self.inputs.push(name.to_string());
        self.push(Op::Input { slot })
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> NodeId {
        let slot = self.params.len();
        self.params.push(ParamSpec { name: name.to_string(), shape: shape.to_vec(), init, mask: None });
        self.push(Op::Param { slot })
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    /// Dense layer with fresh Glorot weights and zero bias.
    pub fn linear(&mut self, name: &str, x: NodeId, din: usize, dout: usize) -> NodeId {
        let w = self.param(&format!("{name}.w"), &[dout, din], Init::Glorot { fan_in: din, fan_out: dout });
        let b = self.param(&format!("{name}.b"), &[dout], Init::Zeros);
        self.affine(x, w, b)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        padding: Padding,
        mask: Option<ConvMask>,
    ) -> Result<NodeId, GraphError> {
        if let Op::Param { slot } = self.nodes[w.0] {
            let spec = &mut self.params[slot];
            if spec.shape.len() != 4 || spec.shape[2] != spec.shape[3] {
                return Err(GraphError::InvalidShape(format!("conv kernel shape {:?}", spec.shape)));
            }
            let k = spec.shape[2];
            if (mask.is_some() || padding == Padding::Same) && k % 2 == 0 {
                return Err(GraphError::EvenKernel(k));
            }
            if let Some(m) = mask {
                if m.color_groups == 0 || m.color_groups > spec.shape[0] || m.color_groups > spec.shape[1] {
                    return Err(GraphError::InvalidShape(format!(
                        "{} color groups for kernel {:?}",
                        m.color_groups, spec.shape
                    )));
                }
                spec.mask = Some(m);
            }
        }
        Ok(self.push(Op::Conv2d { x, w, b, padding, mask }))
    }

    /// Convolution layer with fresh Glorot kernel and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        cin: usize,
        cout: usize,
        k: usize,
        padding: Padding,
        mask: Option<ConvMask>,
    ) -> Result<NodeId, GraphError> {
        let init = Init::Glorot { fan_in: cin * k * k, fan_out: cout * k * k };
        let w = self.param(&format!("{name}.w"), &[cout, cin, k, k], init);
        let b = self.param(&format!("{name}.b"), &[cout], Init::Zeros);
        self.conv2d(x, w, Some(b), padding, mask)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu { x })
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2 { x })
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalMaxPool { x })
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, GraphError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::InvalidShape(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(self.push(Op::Dropout { x, rate }))
    }

    pub fn resize_nearest(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        self.push(Op::ResizeNearest { x, height, width })
    }

    pub fn slice_rows_like(&mut self, x: NodeId, like: NodeId) -> NodeId {
        self.push(Op::SliceRowsLike { x, like })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape { x, shape: shape.to_vec() })
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten { x })
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BiasAdd { x, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    pub fn log_softmax(&mut self, x: NodeId, classes: usize) -> NodeId {
        self.push(Op::LogSoftmax { x, classes })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId, classes: usize) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets, classes })
    }

    pub fn mean_squared_error(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MeanSquaredError { a, b })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x })
    }

    pub fn sample_categorical(&mut self, logits: NodeId, classes: usize) -> NodeId {
        self.push(Op::SampleCategorical { logits, classes })
    }

    /// Fresh parameters drawn from each slot's [`Init`]; masked taps are zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .params
            .iter()
            .map(|spec| {
                let mut t = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Glorot { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| rng.gen_range(-limit..limit))
                    }
                };
                if let Some(mask) = spec.mask {
                    apply_mask(&mut t, mask);
                }
                t
            })
            .collect();
        ParamSet::new(tensors)
    }

    pub fn zero_params(&self) -> ParamSet {
        ParamSet::new(self.params.iter().map(|s| Tensor::zeros(&s.shape)).collect())
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<(), GraphError> {
        if params.len() != self.params.len() {
            return Err(GraphError::ParamMismatch(format!(
                "graph has {} parameter slots, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (spec, t) in self.params.iter().zip(params.tensors()) {
            if spec.shape != t.shape() {
                return Err(GraphError::ParamMismatch(format!(
                    "`{}` expects {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn needed(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for p in self.nodes[i].parents() {
                    needed[p.0] = true;
                }
            }
        }
        needed
    }

    /// Evaluates the ancestors of `outputs`.
    ///
    /// Deterministic in `(params, inputs, mode, seed)`; in [`Mode::Infer`]
    /// dropout is the identity and `seed` only affects sampling nodes.
    pub fn eval(
        &self,
        params: &ParamSet,
        inputs: &[(&str, &Tensor)],
        mode: Mode,
        seed: u64,
        outputs: &[NodeId],
    ) -> Result<Forward, GraphError> {
        self.check_params(params)?;
        for (name, _) in inputs {
            if !self.inputs.iter().any(|n| n == name) {
                return Err(GraphError::UnknownInput(name.to_string()));
            }
        }
        let needed = self.needed(outputs);
        let mut fwd = Forward {
            values: (0..self.nodes.len()).map(|_| None).collect(),
            aux: (0..self.nodes.len()).map(|_| Aux::None).collect(),
        };
        for (i, op) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let (value, aux) = self.forward_node(i, op, params, inputs, mode, seed, &fwd)?;
            if !value.all_finite() {
                return Err(GraphError::NonFinite { node: i, op: op.name() });
            }
            fwd.values[i] = Some(value);
            fwd.aux[i] = aux;
        }
        Ok(fwd)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_node(
        &self,
        i: usize,
        op: &Op,
        params: &ParamSet,
        inputs: &[(&str, &Tensor)],
        mode: Mode,
        seed: u64,
        fwd: &Forward,
    ) -> Result<(Tensor, Aux), GraphError> {
        let err = |detail: String| mismatch(i, op, detail);
        let out = match *op {
            Op::Input { slot } => {
                let name = &self.inputs[slot];
                let t = inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                (t, Aux::None)
            }
            Op::Param { slot } => (params.get(slot).clone(), Aux::None),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (fwd.get(x)?, fwd.get(w)?, fwd.get(b)?);
                if x.shape().len() != 2 || w.shape().len() != 2 || w.shape()[1] != x.shape()[1] {
                    return Err(err(format!("x {:?} vs w {:?}", x.shape(), w.shape())));
                }
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if b.shape() != [dout] {
                    return Err(err(format!("bias {:?} vs {dout} outputs", b.shape())));
                }
                let y = kernels::affine_forward(x.data(), w.data(), b.data(), n, din, dout);
                (Tensor::new(vec![n, dout], y)?, Aux::None)
            }
            Op::Conv2d { x, w, b, padding, mask } => {
                let (xt, wt) = (fwd.get(x)?, fwd.get(w)?);
                let d = ConvDims::new(xt.shape(), wt.shape(), padding).map_err(err)?;
                if (mask.is_some() || padding == Padding::Same) && d.k % 2 == 0 {
                    return Err(GraphError::EvenKernel(d.k));
                }
                let bias = match b {
                    Some(b) => {
                        let bt = fwd.get(b)?;
                        if bt.shape() != [d.cout] {
                            return Err(err(format!("bias {:?} vs {} channels", bt.shape(), d.cout)));
                        }
                        Some(bt.data())
                    }
                    None => None,
                };
                let plan = kernels::tap_plan(d.cout, d.cin, d.k, mask);
                let y = kernels::conv2d_forward(xt.data(), wt.data(), bias, &d, &plan);
                (Tensor::new(vec![d.n, d.cout, d.ho, d.wo], y)?, Aux::None)
            }
            Op::Relu { x } => (fwd.get(x)?.map(|v| if v > 0.0 { v } else { 0.0 }), Aux::None),
            Op::MaxPool2 { x } => {
                let xt = fwd.get(x)?;
                let s = xt.shape();
                if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                    return Err(err(format!("needs [N, C, H>=2, W>=2], got {s:?}")));
                }
                let (y, arg) = kernels::maxpool2_forward(xt.data(), s[0], s[1], s[2], s[3]);
                (Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], y)?, Aux::Indices(arg))
            }
            Op::GlobalMaxPool { x } => {
                let xt = fwd.get(x)?;
                let s = xt.shape();
                if s.len() != 4 {
                    return Err(err(format!("needs [N, C, H, W], got {s:?}")));
                }
                let (y, arg) = kernels::global_maxpool_forward(xt.data(), s[0], s[1], s[2] * s[3]);
                (Tensor::new(vec![s[0], s[1]], y)?, Aux::Indices(arg))
            }
            Op::Dropout { x, rate } => {
                let xt = fwd.get(x)?;
                if mode == Mode::Infer || rate == 0.0 {
                    (xt.clone(), Aux::None)
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
                    let keep = 1.0 / (1.0 - rate);
                    let scale: Vec<f64> =
                        (0..xt.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                    let mut y = xt.clone();
                    for (v, s) in y.data_mut().iter_mut().zip(&scale) {
                        *v *= s;
                    }
                    (y, Aux::Scale(scale))
                }
            }
            Op::ResizeNearest { x, height, width } => {
                let xt = fwd.get(x)?;
                let s = xt.shape();
                if s.len() != 4 {
                    return Err(err(format!("needs [N, C, H, W], got {s:?}")));
                }
                let idx = kernels::resize_nearest_index(s[0], s[1], s[2], s[3], height, width);
                let y = idx.iter().map(|&j| xt.data()[j]).collect();
                (Tensor::new(vec![s[0], s[1], height, width], y)?, Aux::Indices(idx))
            }
            Op::SliceRowsLike { x, like } => {
                let (xt, lt) = (fwd.get(x)?, fwd.get(like)?);
                let (s, ls) = (xt.shape(), lt.shape());
                if s.len() != 4 || ls.len() != 4 || ls[2] > s[2] {
                    return Err(err(format!("cannot slice {s:?} to the rows of {ls:?}")));
                }
                let rows = ls[2];
                let mut y = Vec::with_capacity(s[0] * s[1] * rows * s[3]);
                for plane in xt.data().chunks_exact(s[2] * s[3]) {
                    y.extend_from_slice(&plane[..rows * s[3]]);
                }
                (Tensor::new(vec![s[0], s[1], rows, s[3]], y)?, Aux::None)
            }
            Op::Reshape { x, ref shape } => {
                let xt = fwd.get(x)?;
                let mut full = vec![xt.batch()];
                full.extend_from_slice(shape);
                let y = xt.clone().reshape(&full).map_err(|e| err(e.to_string()))?;
                (y, Aux::None)
            }
            Op::Flatten { x } => {
                let xt = fwd.get(x)?;
                let full = [xt.batch(), xt.per_example()];
                (xt.clone().reshape(&full)?, Aux::None)
            }
            Op::BiasAdd { x, b } => {
                let (xt, bt) = (fwd.get(x)?, fwd.get(b)?);
                let s = xt.shape();
                if s.len() < 2 {
                    return Err(err(format!("needs at least [N, C], got {s:?}")));
                }
                let (n, c) = (s[0], s[1]);
                let rest: usize = s[2..].iter().product();
                let per_example = match bt.shape() {
                    [bc] if *bc == c => false,
                    [bn, bc] if *bn == n && *bc == c => true,
                    other => return Err(err(format!("bias {other:?} vs input {s:?}"))),
                };
                let mut y = xt.clone();
                let bd = bt.data();
                for (row, chunk) in y.data_mut().chunks_exact_mut(rest).enumerate() {
                    let (bi, ci) = (row / c, row % c);
                    let bias = if per_example { bd[bi * c + ci] } else { bd[ci] };
                    for v in chunk {
                        *v += bias;
                    }
                }
                (y, Aux::None)
            }
            Op::Add { a, b } => {
                let (at, bt) = (fwd.get(a)?, fwd.get(b)?);
                if at.shape() != bt.shape() {
                    return Err(err(format!("{:?} + {:?}", at.shape(), bt.shape())));
                }
                let mut y = at.clone();
                y.add_assign(bt);
                (y, Aux::None)
            }
            Op::LogSoftmax { x, classes } => {
                let xt = fwd.get(x)?;
                let (n, g, rest) = softmax_dims(xt.shape(), classes).map_err(err)?;
                let y = kernels::log_softmax(xt.data(), n, g, classes, rest);
                (Tensor::new(xt.shape().to_vec(), y)?, Aux::None)
            }
            Op::SoftmaxCrossEntropy { logits, targets, classes } => {
                let (lt, tt) = (fwd.get(logits)?, fwd.get(targets)?);
                let (n, g, rest) = softmax_dims(lt.shape(), classes).map_err(err)?;
                if tt.len() != n * g * rest {
                    return Err(err(format!("targets {:?} vs logits {:?}", tt.shape(), lt.shape())));
                }
                let logp = kernels::log_softmax(lt.data(), n, g, classes, rest);
                let mut total = 0.0;
                for b in 0..n {
                    let mut s = 0.0;
                    for gg in 0..g {
                        for r in 0..rest {
                            let t = target_class(tt.data()[(b * g + gg) * rest + r], classes)
                                .ok_or_else(|| err(format!("target outside [0, {classes})")))?;
                            s -= logp[((b * g + gg) * classes + t) * rest + r];
                        }
                    }
                    total += s;
                }
                (Tensor::scalar(total / n as f64), Aux::LogProbs(logp))
            }
            Op::MeanSquaredError { a, b } => {
                let (at, bt) = (fwd.get(a)?, fwd.get(b)?);
                if at.len() != bt.len() {
                    return Err(err(format!("{:?} vs {:?}", at.shape(), bt.shape())));
                }
                let s: f64 = at.data().iter().zip(bt.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                (Tensor::scalar(s / at.len() as f64), Aux::None)
            }
            Op::Sum { x } => (Tensor::scalar(fwd.get(x)?.sum()), Aux::None),
            Op::SampleCategorical { logits, classes } => {
                let lt = fwd.get(logits)?;
                let (n, g, rest) = softmax_dims(lt.shape(), classes).map_err(err)?;
                let logp = kernels::log_softmax(lt.data(), n, g, classes, rest);
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
                let mut y = Vec::with_capacity(n * g * rest);
                for b in 0..n {
                    for gg in 0..g {
                        for r in 0..rest {
                            let u: f64 = rng.gen();
                            let mut acc = 0.0;
                            let mut pick = classes - 1;
                            for c in 0..classes {
                                acc += logp[((b * g + gg) * classes + c) * rest + r].exp();
                                if u < acc {
                                    pick = c;
                                    break;
                                }
                            }
                            y.push(pick as f64);
                        }
                    }
                }
                let mut shape = vec![n, g];
                shape.extend_from_slice(&lt.shape()[2..]);
                (Tensor::new(shape, y)?, Aux::None)
            }
        };
        Ok(out)
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// parameter slot. `fwd` must come from [`Graph::eval`] with `output`
    /// among the requested nodes.
    pub fn backward(&self, fwd: &Forward, output: NodeId) -> Result<Vec<Tensor>, GraphError> {
        let out = fwd.get(output)?;
        if !out.is_scalar() {
            return Err(GraphError::NotScalar { node: output.0, shape: out.shape().to_vec() });
        }
        let mut requires = vec![false; self.nodes.len()];
        for (i, op) in self.nodes.iter().enumerate() {
            requires[i] = matches!(op, Op::Param { .. })
                || op.differentiable_parents().iter().any(|p| requires[p.0])
                || matches!(op, Op::SampleCategorical { logits, .. } if requires[logits.0]);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Tensor> = self.params.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        if !requires[output.0] {
            return Ok(param_grads);
        }
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i];
            let send = |node: NodeId, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !requires[node.0] {
                    return;
                }
                match &mut grads[node.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match *op {
                Op::Input { .. } => {}
                Op::Param { slot } => param_grads[slot].add_assign(&g),
                Op::Affine { x, w, b } => {
                    let (xt, wt) = (fwd.get(x)?, fwd.get(w)?);
                    let (n, din, dout) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                    let (dx, dw, db) = kernels::affine_backward(xt.data(), wt.data(), g.data(), n, din, dout);
                    send(x, Tensor::new(xt.shape().to_vec(), dx)?, &mut grads);
                    send(w, Tensor::new(wt.shape().to_vec(), dw)?, &mut grads);
                    send(b, Tensor::new(vec![dout], db)?, &mut grads);
                }
                Op::Conv2d { x, w, b, padding, mask } => {
                    let (xt, wt) = (fwd.get(x)?, fwd.get(w)?);
                    let d = ConvDims::new(xt.shape(), wt.shape(), padding).map_err(|e| mismatch(i, op, e))?;
                    let plan = kernels::tap_plan(d.cout, d.cin, d.k, mask);
                    let cg = kernels::conv2d_backward(xt.data(), wt.data(), g.data(), &d, &plan);
                    send(x, Tensor::new(xt.shape().to_vec(), cg.dx)?, &mut grads);
                    send(w, Tensor::new(wt.shape().to_vec(), cg.dw)?, &mut grads);
                    if let Some(b) = b {
                        send(b, Tensor::new(vec![d.cout], cg.db)?, &mut grads);
                    }
                }
                Op::Relu { x } => {
                    let xt = fwd.get(x)?;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xt.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    send(x, dx, &mut grads);
                }
                Op::MaxPool2 { x } | Op::GlobalMaxPool { x } | Op::ResizeNearest { x, .. } => {
                    let Aux::Indices(idx) = &fwd.aux[i] else { return Err(GraphError::NotEvaluated(i)) };
                    let xt = fwd.get(x)?;
                    let mut dx = Tensor::zeros(xt.shape());
                    let dd = dx.data_mut();
                    for (&j, &gv) in idx.iter().zip(g.data()) {
                        dd[j] += gv;
                    }
                    send(x, dx, &mut grads);
                }
                Op::Dropout { x, .. } => {
                    let mut dx = g;
                    if let Aux::Scale(scale) = &fwd.aux[i] {
                        for (d, s) in dx.data_mut().iter_mut().zip(scale) {
                            *d *= s;
                        }
                    }
                    send(x, dx, &mut grads);
                }
                Op::SliceRowsLike { x, .. } => {
                    let xt = fwd.get(x)?;
                    let s = xt.shape();
                    let rows = g.shape()[2];
                    let mut dx = Tensor::zeros(s);
                    for (dst, src) in dx.data_mut().chunks_exact_mut(s[2] * s[3]).zip(g.data().chunks_exact(rows * s[3])) {
                        dst[..rows * s[3]].copy_from_slice(src);
                    }
                    send(x, dx, &mut grads);
                }
                Op::Reshape { x, .. } | Op::Flatten { x } => {
                    let shape = fwd.get(x)?.shape().to_vec();
                    send(x, g.reshape(&shape)?, &mut grads);
                }
                Op::BiasAdd { x, b } => {
                    let bt = fwd.get(b)?;
                    let s = g.shape();
                    let (c, rest) = (s[1], s[2..].iter().product::<usize>());
                    let mut db = Tensor::zeros(bt.shape());
                    let per_example = bt.shape().len() == 2;
                    {
                        let dbd = db.data_mut();
                        for (row, chunk) in g.data().chunks_exact(rest).enumerate() {
                            let j = if per_example { row } else { row % c };
                            dbd[j] += chunk.iter().sum::<f64>();
                        }
                    }
                    send(b, db, &mut grads);
                    send(x, g, &mut grads);
                }
                Op::Add { a, b } => {
                    send(a, g.clone(), &mut grads);
                    send(b, g, &mut grads);
                }
                Op::LogSoftmax { x, classes } => {
                    let y = fwd.get(NodeId(i))?;
                    let (n, gr, rest) = softmax_dims(y.shape(), classes).map_err(|e| mismatch(i, op, e))?;
                    let mut dx = g.clone();
                    let (yd, gd) = (y.data(), g.data());
                    let dd = dx.data_mut();
                    for blk in 0..n * gr {
                        let base = blk * classes * rest;
                        for r in 0..rest {
                            let s: f64 = (0..classes).map(|c| gd[base + c * rest + r]).sum();
                            for c in 0..classes {
                                let j = base + c * rest + r;
                                dd[j] = gd[j] - yd[j].exp() * s;
                            }
                        }
                    }
                    send(x, dx, &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, targets, classes } => {
                    let Aux::LogProbs(logp) = &fwd.aux[i] else { return Err(GraphError::NotEvaluated(i)) };
                    let lt = fwd.get(logits)?;
                    let tt = fwd.get(targets)?;
                    let (n, gr, rest) = softmax_dims(lt.shape(), classes).map_err(|e| mismatch(i, op, e))?;
                    let scale = g.data()[0] / n as f64;
                    let mut dl = Tensor::zeros(lt.shape());
                    let dd = dl.data_mut();
                    for blk in 0..n * gr {
                        for r in 0..rest {
                            let t = target_class(tt.data()[blk * rest + r], classes).unwrap_or(0);
                            for c in 0..classes {
                                let j = (blk * classes + c) * rest + r;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                dd[j] = scale * (logp[j].exp() - onehot);
                            }
                        }
                    }
                    send(logits, dl, &mut grads);
                }
                Op::MeanSquaredError { a, b } => {
                    let (at, bt) = (fwd.get(a)?, fwd.get(b)?);
                    let scale = 2.0 * g.data()[0] / at.len() as f64;
                    let da: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| scale * (x - y)).collect();
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    send(a, Tensor::new(at.shape().to_vec(), da)?, &mut grads);
                    send(b, Tensor::new(bt.shape().to_vec(), db)?, &mut grads);
                }
                Op::Sum { x } => {
                    let xt = fwd.get(x)?;
                    send(x, Tensor::full(xt.shape(), g.data()[0]), &mut grads);
                }
                Op::SampleCategorical { .. } => return Err(GraphError::NonDifferentiable { node: i }),
            }
        }
        Ok(param_grads)
    }
}

fn softmax_dims(shape: &[usize], classes: usize) -> Result<(usize, usize, usize), String> {
    if shape.len() < 2 || classes == 0 || shape[1] % classes != 0 {
        return Err(format!("{shape:?} is not [N, groups*{classes}, ...]"));
    }
    Ok((shape[0], shape[1] / classes, shape[2..].iter().product()))
}

fn target_class(v: f64, classes: usize) -> Option<usize> {
    (v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes).then_some(v as usize)
}

/// Zeroes every masked tap of a `[Cout, Cin, k, k]` kernel.
pub fn apply_mask(kernel: &mut Tensor, mask: ConvMask) {
    let s = kernel.shape().to_vec();
    let (cout, cin, k) = (s[0], s[1], s[2]);
    let data = kernel.data_mut();
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    if !kernels::tap_active(Some(mask), co, cout, ci, cin, ky, kx, k) {
                        data[((co * cin + ci) * k + ky) * k + kx] = 0.0;
                    }
                }
            }
        }
    }
}
