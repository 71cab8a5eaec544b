mod common;

use common::{random_params, random_tensor, rng};
use rand::Rng;
use repinv::autodiff::Tensor;
use repinv::inverter::{
    train_on_pairs, Conditioning, InversionConfig, InversionModel, InverterError, InverterShape, Pairs,
};

fn small_config(levels: usize) -> InversionConfig {
    InversionConfig { layers: 2, filters: 8, first_kernel: 3, kernel: 3, levels, dropout: 0.0, ..Default::default() }
}

fn model(image: (usize, usize, usize), h_shape: &[usize], levels: usize, seed: u64, scale: f64) -> InversionModel {
    let shape = InverterShape::new(&small_config(levels), image, h_shape, None);
    let zero = InversionModel::zeros(shape.clone()).unwrap();
    let mut params = random_params(zero.graph(), seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    InversionModel::new(shape, params).unwrap()
}

fn random_levels(shape: &[usize], levels: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(0..levels) as f64)
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn zero_model_is_uniform() {
    for (levels, expect) in [(2, -4.0 * 2f64.ln()), (16, -4.0 * 16f64.ln())] {
        let shape = InverterShape::new(&small_config(levels), (1, 2, 2), &[3], None);
        let m = InversionModel::zeros(shape).unwrap();
        let x = random_levels(&[5, 1, 2, 2], levels, 1);
        let h = random_tensor(&[5, 3], &mut rng(2));
        for lp in m.log_prob(&x, &h).unwrap() {
            assert!((lp - expect).abs() < 1e-12, "{lp} vs {expect}");
        }
    }
}

#[test]
fn log_prob_matches_chain_rule_with_hidden_future() {
    // Each conditional is recomputed with every later sub-pixel replaced by
    // noise, so the sum only agrees if the network is causal.
    let (c, hh, ww, l) = (3, 3, 3, 4);
    let m = model((c, hh, ww), &[2, 2, 2], l, 7, 1.0);
    let x = random_levels(&[2, c, hh, ww], l, 3);
    let h = random_tensor(&[2, 2, 2, 2], &mut rng(4));
    let fast = m.log_prob(&x, &h).unwrap();
    let mut scramble = rng(5);
    for b in 0..2 {
        let xb = x.select_batch(&[b]);
        let hb = h.select_batch(&[b]);
        let mut total = 0.0;
        for pos in 0..hh * ww {
            for ch in 0..c {
                let mut masked = xb.clone();
                for later in 0..hh * ww {
                    for k in 0..c {
                        if (later, k) > (pos, ch) {
                            masked.data_mut()[k * hh * ww + later] = scramble.gen_range(0..l) as f64;
                        }
                    }
                }
                let lp = m.conditionals(&masked, &hb).unwrap();
                let logits: Vec<f64> = (0..l).map(|v| lp.data()[(ch * l + v) * hh * ww + pos]).collect();
                assert!(logsumexp(&logits).abs() < 1e-12);
                total += logits[xb.data()[ch * hh * ww + pos] as usize];
            }
        }
        assert!((total - fast[b]).abs() < 1e-9, "{total} vs {}", fast[b]);
    }
}

fn assert_causal(m: &InversionModel, image: (usize, usize, usize), h: &Tensor, levels: usize, seed: u64) {
    let (c, hh, ww) = image;
    let plane = hh * ww;
    let x = random_levels(&[1, c, hh, ww], levels, seed);
    let base = m.conditionals(&x, h).unwrap();
    for pos in 0..plane {
        for ch in 0..c {
            let mut y = x.clone();
            let v = &mut y.data_mut()[ch * plane + pos];
            *v = ((*v as usize + 1) % levels) as f64;
            let moved = m.conditionals(&y, h).unwrap();
            for q in 0..plane {
                for k in 0..c {
                    if (q, k) > (pos, ch) {
                        continue;
                    }
                    for lv in 0..levels {
                        let i = (k * levels + lv) * plane + q;
                        assert_eq!(
                            base.data()[i].to_bits(),
                            moved.data()[i].to_bits(),
                            "sub-pixel ({q}, {k}) sees ({pos}, {ch})"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn causality_is_bitwise_for_vector_conditioning() {
    let m = model((3, 4, 4), &[5], 4, 11, 1.0);
    assert_eq!(m.shape.conditioning, Conditioning::VectorBias);
    assert_causal(&m, (3, 4, 4), &random_tensor(&[1, 5], &mut rng(1)), 4, 2);
}

#[test]
fn causality_is_bitwise_for_spatial_conditioning() {
    let m = model((1, 5, 5), &[3, 2, 2], 4, 12, 1.0);
    assert_eq!(m.shape.conditioning, Conditioning::SpatialBias);
    assert_causal(&m, (1, 5, 5), &random_tensor(&[1, 3, 2, 2], &mut rng(3)), 4, 4);
}

#[test]
fn enumeration_is_normalised() {
    let cases = [
        ((1, 2, 3), vec![4], 4, 1.0),
        ((1, 3, 3), vec![2, 2, 2], 4, 1.0),
        ((1, 2, 2), vec![3], 8, 6.0),
        ((3, 1, 2), vec![3], 4, 1.0),
        ((3, 2, 2), vec![2, 1, 1], 2, 4.0),
    ];
    for (i, (image, h_shape, levels, scale)) in cases.into_iter().enumerate() {
        let m = model(image, &h_shape, levels, 20 + i as u64, scale);
        let mut hs = vec![1];
        hs.extend(&h_shape);
        let h = random_tensor(&hs, &mut rng(i as u64));
        let p = m.enumerate_density(&h).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "case {i}: {total}");
    }
}

#[test]
fn enumeration_of_uniform_model() {
    let shape = InverterShape::new(&small_config(16), (1, 1, 2), &[2], None);
    let m = InversionModel::zeros(shape).unwrap();
    let p = m.enumerate_density(&Tensor::zeros(&[1, 2])).unwrap();
    assert_eq!(p.len(), 256);
    assert!(p.iter().all(|&v| (v - 1.0 / 256.0).abs() < 1e-15));
}

#[test]
fn single_pixel_table_is_the_softmax() {
    let m = model((1, 1, 1), &[3], 16, 5, 1.0);
    let h = random_tensor(&[1, 3], &mut rng(9));
    let table = m.enumerate_density(&h).unwrap();
    let lp = m.conditionals(&Tensor::zeros(&[1, 1, 1, 1]), &h).unwrap();
    for (t, l) in table.iter().zip(lp.data()) {
        assert!((t - l.exp()).abs() < 1e-14);
    }
}

#[test]
fn enumeration_refuses_huge_spaces() {
    let shape = InverterShape::new(&small_config(16), (1, 3, 3), &[2], None);
    let m = InversionModel::zeros(shape).unwrap();
    assert!(matches!(
        m.enumerate_density(&Tensor::zeros(&[1, 2])),
        Err(InverterError::TooLarge { levels: 16, pixels: 9 })
    ));
}

#[test]
fn uniform_binary_samples_average_one_half() {
    let shape = InverterShape::new(&small_config(2), (1, 1, 1), &[1], None);
    let m = InversionModel::zeros(shape).unwrap();
    let x = m.sample(&Tensor::zeros(&[10_000, 1]), 3).unwrap();
    let mean = x.data().iter().sum::<f64>() / 10_000.0;
    assert!((0.48..=0.52).contains(&mean), "{mean}");
}

#[test]
fn sampling_is_seeded_per_example() {
    let m = model((1, 3, 3), &[2], 4, 8, 1.0);
    let h = random_tensor(&[6, 2], &mut rng(1));
    let a = m.sample(&h, 42).unwrap();
    assert_eq!(a, m.sample(&h, 42).unwrap());
    assert_ne!(a, m.sample(&h, 43).unwrap());
    // Example i only depends on its own stream and its own context.
    let tail = m.sample(&h.slice_batch(3, 6), 42).unwrap();
    assert_ne!(tail.data(), &a.data()[27..]);
    let sub = m.sample(&h.slice_batch(0, 3), 42).unwrap();
    assert_eq!(sub.data(), &a.data()[..27]);
}

#[test]
fn samples_follow_the_enumerated_density() {
    let (image, levels) = ((1, 2, 2), 3);
    let m = model(image, &[2], levels, 30, 2.0);
    let h1 = random_tensor(&[1, 2], &mut rng(31));
    let p = m.enumerate_density(&h1).unwrap();
    let n = 100_000;
    let h = Tensor::concat_batch(&vec![h1.clone(); n]).unwrap();
    let x = m.sample(&h, 5).unwrap();
    let mut counts = vec![0usize; p.len()];
    for s in x.data().chunks(4) {
        counts[s.iter().fold(0, |acc, &v| acc * levels + v as usize)] += 1;
    }
    let tv: f64 = counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / n as f64 - q).abs()).sum::<f64>() / 2.0;
    assert!(tv <= 0.02, "total variation {tv}");

    let entropy: f64 = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
    let lp = m.log_prob(&x.slice_batch(0, 10_000), &h.slice_batch(0, 10_000)).unwrap();
    let mean = -lp.iter().sum::<f64>() / lp.len() as f64;
    let var = lp.iter().map(|v| (-v - mean).powi(2)).sum::<f64>() / (lp.len() - 1) as f64;
    let se = (var / lp.len() as f64).sqrt();
    assert!((mean - entropy).abs() <= 3.0 * se, "{mean} vs {entropy} (se {se})");
}

#[test]
fn memorises_a_single_image() {
    let x = random_levels(&[1, 1, 4, 4], 4, 2);
    let h = Tensor::full(&[1, 2], 0.5);
    let pairs = Pairs { x, h };
    let config = InversionConfig { max_steps: 1000, lr: 1e-2, lr_decay: 1.0, eval_every: 100, ..small_config(4) };
    let shape = InverterShape::new(&config, (1, 4, 4), &[2], None);
    let r = train_on_pairs(shape, &pairs, &pairs, &config).unwrap();
    assert!(r.best_val_nll < 0.05, "{}", r.best_val_nll);
    assert!(r.curve.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn context_beats_shuffled_context() {
    // Each image is a noisy copy of one of four prototypes; h names the
    // prototype.
    let (n, levels) = (400, 4);
    let mut r = rng(6);
    let protos: Vec<Vec<usize>> = (0..4).map(|_| (0..16).map(|_| r.gen_range(0..levels)).collect()).collect();
    let mut xs = Vec::new();
    let mut hs = Vec::new();
    for i in 0..n {
        let k = i % 4;
        for &v in &protos[k] {
            xs.push(if r.gen_bool(0.1) { r.gen_range(0..levels) } else { v } as f64);
        }
        hs.extend((0..4).map(|j| f64::from(u8::from(j == k))));
    }
    let all = Pairs { x: Tensor::new(vec![n, 1, 4, 4], xs).unwrap(), h: Tensor::new(vec![n, 4], hs).unwrap() };
    let train = all.select(&(0..300).collect::<Vec<_>>());
    let test = all.select(&(300..n).collect::<Vec<_>>());
    let config = InversionConfig { max_steps: 300, lr: 5e-3, eval_every: 100, ..small_config(levels) };
    let shape = InverterShape::new(&config, (1, 4, 4), &[4], None);
    let m = train_on_pairs(shape, &train, &test, &config).unwrap().model;
    let matched = m.nll(&test.x, &test.h).unwrap();
    let perm: Vec<usize> = (0..100).map(|i| (i + 1) % 100).collect();
    let shuffled = m.nll(&test.x, &test.h.select_batch(&perm)).unwrap();
    assert!(matched + 2.0 < shuffled, "matched {matched}, shuffled {shuffled}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inv.ckpt");
    let m = model((1, 4, 4), &[3, 2, 2], 4, 1, 1.0);
    m.save(&path).unwrap();
    let back = InversionModel::load(&path).unwrap();
    assert_eq!(back.shape, m.shape);
    assert_eq!(back.params, m.params);
    let x = random_levels(&[3, 1, 4, 4], 4, 1);
    let h = random_tensor(&[3, 3, 2, 2], &mut rng(0));
    assert_eq!(m.log_prob(&x, &h).unwrap(), back.log_prob(&x, &h).unwrap());
}

#[test]
fn shape_errors() {
    let m = model((1, 4, 4), &[3], 4, 1, 1.0);
    let h = Tensor::zeros(&[2, 3]);
    assert!(matches!(m.log_prob(&Tensor::zeros(&[2, 1, 4, 5]), &h), Err(InverterError::Shape(_))));
    assert!(matches!(m.log_prob(&Tensor::zeros(&[2, 1, 4, 4]), &Tensor::zeros(&[2, 4])), Err(InverterError::Shape(_))));
    assert!(matches!(m.log_prob(&Tensor::full(&[2, 1, 4, 4], 4.0), &h), Err(InverterError::Shape(_))));
    assert!(matches!(m.enumerate_density(&h), Err(InverterError::TooLarge { .. })));
    let bad = InversionConfig { first_kernel: 4, ..small_config(4) };
    assert!(matches!(bad.validate(), Err(InverterError::Config(_))));
}
