//! Test-only oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repinv::autodiff::{Graph, Mode, NodeId, ParamSet, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Parameters with every entry drawn uniformly from [-1, 1], then masked
/// taps restored to zero so the masked structure is preserved.
pub fn random_params(graph: &Graph, seed: u64) -> ParamSet {
    let mut r = rng(seed);
    let mut p = graph.init_params(seed);
    for (t, spec) in p.tensors_mut().iter_mut().zip(graph.params()) {
        let mask = spec.mask;
        for v in t.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        if let Some(m) = mask {
            repinv::autodiff::apply_mask(t, m);
        }
    }
    p
}

fn loss_at(graph: &Graph, params: &ParamSet, inputs: &[(&str, &Tensor)], mode: Mode, seed: u64, out: NodeId) -> f64 {
    let fwd = graph.eval(params, inputs, mode, seed, &[out]).unwrap();
    fwd.value(out).unwrap().data()[0]
}

/// Maximum relative error between analytic gradients and central
/// differences with step `h`, over every parameter entry (or at most
/// `max_per_slot` entries per slot, evenly spaced).
pub fn max_grad_error(
    graph: &Graph,
    params: &ParamSet,
    inputs: &[(&str, &Tensor)],
    mode: Mode,
    seed: u64,
    out: NodeId,
    h: f64,
    max_per_slot: usize,
) -> f64 {
    let fwd = graph.eval(params, inputs, mode, seed, &[out]).unwrap();
    let analytic = graph.backward(&fwd, out).unwrap();
    let mut worst = 0.0_f64;
    let mut p = params.clone();
    for slot in 0..params.len() {
        let n = params.get(slot).len();
        let stride = (n / max_per_slot.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = p.get(slot).data()[j];
            p.tensors_mut()[slot].data_mut()[j] = orig + h;
            let up = loss_at(graph, &p, inputs, mode, seed, out);
            p.tensors_mut()[slot].data_mut()[j] = orig - h;
            let down = loss_at(graph, &p, inputs, mode, seed, out);
            p.tensors_mut()[slot].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[slot].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

use repinv::autodiff::{ConvMask, Init, MaskKind, Padding};

/// One differentiable scenario for the finite-difference oracle.
pub struct GradCase {
    pub name: &'static str,
    pub graph: Graph,
    pub params: ParamSet,
    pub inputs: Vec<(String, Tensor)>,
    pub out: NodeId,
    pub mode: Mode,
}

impl GradCase {
    pub fn max_error(&self, h: f64, max_per_slot: usize) -> f64 {
        let inputs: Vec<(&str, &Tensor)> = self.inputs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        max_grad_error(&self.graph, &self.params, &inputs, self.mode, 11, self.out, h, max_per_slot)
    }
}

fn leaf(g: &mut Graph, name: &str, shape: &[usize]) -> NodeId {
    g.param(name, shape, Init::Glorot { fan_in: 1, fan_out: 1 })
}

/// Finishes a case by regressing `y` onto a random target of its shape.
fn mse_case(name: &'static str, mut g: Graph, y: NodeId, y_shape: &[usize], seed: u64, mode: Mode) -> GradCase {
    let t = g.input("target");
    let out = g.mean_squared_error(y, t);
    let mut r = rng(seed ^ 0xabc);
    let target = random_tensor(y_shape, &mut r);
    let params = random_params(&g, seed);
    GradCase { name, graph: g, params, inputs: vec![("target".into(), target)], out, mode }
}

pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[3, 4]);
        let y = g.linear("fc", x, 4, 5);
        cases.push(mse_case("affine", g, y, &[3, 5], 1, Mode::Infer));
    }
    for (name, padding, mask, cin, cout, k, hw, out_hw) in [
        ("conv2d_valid", Padding::Valid, None, 2, 3, 3, 5, 3),
        ("conv2d_same", Padding::Same, None, 2, 3, 3, 5, 5),
        ("masked_conv2d_a", Padding::Same, Some(ConvMask::new(MaskKind::A)), 1, 3, 5, 5, 5),
        ("masked_conv2d_b", Padding::Same, Some(ConvMask::new(MaskKind::B)), 3, 3, 3, 4, 4),
        ("masked_conv2d_a_rgb", Padding::Same, Some(ConvMask::with_groups(MaskKind::A, 3)), 3, 6, 3, 4, 4),
        ("masked_conv2d_b_rgb", Padding::Same, Some(ConvMask::with_groups(MaskKind::B, 3)), 6, 6, 3, 4, 4),
    ] {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, cin, hw, hw]);
        let y = g.conv("conv", x, cin, cout, k, padding, mask).unwrap();
        cases.push(mse_case(name, g, y, &[2, cout, out_hw, out_hw], 2, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 3, 4]);
        let y = g.relu(x);
        cases.push(mse_case("relu", g, y, &[2, 3, 4], 3, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 2, 5, 5]);
        let y = g.max_pool2(x);
        cases.push(mse_case("max_pool2", g, y, &[2, 2, 2, 2], 4, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 3, 4, 4]);
        let y = g.global_max_pool(x);
        cases.push(mse_case("global_max_pool", g, y, &[2, 3], 5, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[4, 6]);
        let y = g.dropout(x, 0.3).unwrap();
        cases.push(mse_case("dropout", g, y, &[4, 6], 6, Mode::Train));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 2, 3, 3]);
        let y = g.resize_nearest(x, 7, 5);
        cases.push(mse_case("resize_nearest", g, y, &[2, 2, 7, 5], 7, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 2, 5, 3]);
        let like = g.input("like");
        let y = g.slice_rows_like(x, like);
        let mut case = mse_case("slice_rows", g, y, &[2, 2, 3, 3], 8, Mode::Infer);
        case.inputs.push(("like".into(), Tensor::zeros(&[2, 1, 3, 3])));
        cases.push(case);
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 12]);
        let r = g.reshape(x, &[3, 2, 2]);
        let y = g.flatten(r);
        cases.push(mse_case("reshape_flatten", g, y, &[2, 12], 9, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 3, 2, 2]);
        let b = leaf(&mut g, "b", &[3]);
        let y = g.bias_add(x, b);
        cases.push(mse_case("bias_add_channel", g, y, &[2, 3, 2, 2], 10, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 3, 2, 2]);
        let b = leaf(&mut g, "b", &[2, 3]);
        let y = g.bias_add(x, b);
        cases.push(mse_case("bias_add_per_example", g, y, &[2, 3, 2, 2], 11, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let a = leaf(&mut g, "a", &[2, 5]);
        let b = leaf(&mut g, "b", &[2, 5]);
        let y = g.add(a, b);
        cases.push(mse_case("add", g, y, &[2, 5], 12, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 6, 2, 3]);
        let y = g.log_softmax(x, 3);
        cases.push(mse_case("log_softmax", g, y, &[2, 6, 2, 3], 13, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[2, 8, 3, 3]);
        let t = g.input("labels");
        let out = g.softmax_cross_entropy(x, t, 4);
        let mut r = rng(14);
        let labels = Tensor::from_fn(&[2, 2, 3, 3], |_| r.gen_range(0..4) as f64);
        let params = random_params(&g, 14);
        cases.push(GradCase {
            name: "softmax_cross_entropy",
            graph: g,
            params,
            inputs: vec![("labels".into(), labels)],
            out,
            mode: Mode::Infer,
        });
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[3, 4]);
        let y = g.relu(x);
        cases.push(mse_case("mean_squared_error", g, y, &[3, 4], 15, Mode::Infer));
    }
    {
        let mut g = Graph::new();
        let x = leaf(&mut g, "x", &[3, 4]);
        let y = g.relu(x);
        let out = g.sum(y);
        let params = random_params(&g, 16);
        cases.push(GradCase { name: "sum", graph: g, params, inputs: vec![], out, mode: Mode::Infer });
    }
    cases.push(masked_network_case(17, 16));
    cases
}

/// Mask-A 5×5, two mask-B 3×3 layers and a 1×1 mask-B head with a softmax
/// likelihood over `levels` values, on a 2×1×4×4 batch.
pub fn masked_network_case(seed: u64, levels: usize) -> GradCase {
    let mut g = Graph::new();
    let x = g.input("x");
    let t = g.input("labels");
    let a = g.conv("l0", x, 1, 4, 5, Padding::Same, Some(ConvMask::new(MaskKind::A))).unwrap();
    let a = g.relu(a);
    let b = g.conv("l1", a, 4, 4, 3, Padding::Same, Some(ConvMask::new(MaskKind::B))).unwrap();
    let b = g.relu(b);
    let c = g.conv("l2", b, 4, 4, 3, Padding::Same, Some(ConvMask::new(MaskKind::B))).unwrap();
    let c = g.relu(c);
    let logits = g.conv("head", c, 4, levels, 1, Padding::Same, Some(ConvMask::new(MaskKind::B))).unwrap();
    let out = g.softmax_cross_entropy(logits, t, levels);
    let mut r = rng(seed);
    let labels = Tensor::from_fn(&[2, 1, 4, 4], |_| r.gen_range(0..levels) as f64);
    let xs = labels.map(|v| v / (levels - 1) as f64 * 2.0 - 1.0);
    let params = random_params(&g, seed);
    GradCase {
        name: "masked_conv_network",
        graph: g,
        params,
        inputs: vec![("x".into(), xs), ("labels".into(), labels)],
        out,
        mode: Mode::Infer,
    }
}

/// Ring-shaped strokes with a class-dependent aspect ratio on a
/// `size`×`size` frame, 256 gray levels, split 60/20/20.
pub fn synthetic_digits(n: usize, size: usize, seed: u64) -> repinv::data::ImageDataset {
    let mut r = rng(seed);
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let mid = size as f64 / 2.0;
    for i in 0..n {
        let label = i % 4;
        let (ry, rx) = [(0.30, 0.30), (0.35, 0.15), (0.15, 0.35), (0.25, 0.10)][label];
        let cy = mid + r.gen_range(-0.08..0.08) * size as f64;
        let cx = mid + r.gen_range(-0.08..0.08) * size as f64;
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy) / (ry * size as f64)).powi(2) + ((x as f64 - cx) / (rx * size as f64)).powi(2);
                let v = if (0.5..1.5).contains(&d) { 255.0 - 200.0 * (d - 1.0).abs() } else { 0.0 };
                images.push(v as u8);
            }
        }
        labels.push(label as u8);
    }
    repinv::data::ImageDataset::new(images, labels, (size, size, 1), 256, 4)
        .unwrap()
        .split_deterministic([0.6, 0.2, 0.2], seed)
        .unwrap()
}
