mod common;

use common::{random_tensor, rng, synthetic_digits};
use proptest::prelude::*;
use repinv::autodiff::Tensor;
use repinv::classifier::{Architecture, ClassifierModel, Representer, Tap, Variant};
use repinv::data::{ImageDataset, Split};
use repinv::eval::{
    csv_bytes, dynamics_sweep, l1, mi_by_layer, nn_table, read_csv, read_pnm, sample_grid, topk_samples, write_csv,
    DynamicsRecord, EvalError, MiLayerRow, NnTableConfig, NnTableRow, Regime, SweepCheckpoint,
};
use repinv::inverter::{InversionConfig, InversionModel, InverterShape};

const LEVELS: usize = 4;

fn dataset() -> ImageDataset {
    let d = synthetic_digits(40, 10, 1).quantize(LEVELS).unwrap();
    assert_eq!(d.levels, LEVELS);
    d
}

fn classifier(seed: u64) -> ClassifierModel {
    let arch = Architecture {
        variant: Variant::Baseline,
        input: (1, 10, 10),
        classes: 4,
        c1: 4,
        c2: 4,
        kernel: 3,
        fc3: 12,
        fc_widths: (8, 8),
        conv_dropout: 0.2,
        fc_dropout: 0.5,
    };
    ClassifierModel::init(arch, seed).unwrap()
}

fn inv_config() -> InversionConfig {
    InversionConfig {
        layers: 1,
        filters: 4,
        first_kernel: 3,
        levels: LEVELS,
        max_steps: 6,
        eval_every: 3,
        batch_size: 8,
        ..Default::default()
    }
}

fn inverter(clf: &ClassifierModel, tap: Tap, seed: u64) -> InversionModel {
    let shape = InverterShape::new(&inv_config(), (1, 10, 10), &clf.tap_shape(tap).unwrap(), Some(tap));
    InversionModel::init(shape, seed).unwrap()
}

#[test]
fn nn_table_rows_and_orderings() {
    let data = dataset();
    let clf = classifier(0);
    let taps = [Tap::Conv1, Tap::Conv2, Tap::Fc3];
    let models: Vec<InversionModel> = taps.iter().map(|&t| inverter(&clf, t, 1)).collect();
    let inverters: Vec<(Tap, &InversionModel)> = taps.iter().copied().zip(&models).collect();
    let test = data.indices(Split::Test);
    let train = data.indices(Split::Train);
    let config = NnTableConfig { dataset: "synthetic".into(), n_samples: 5, seed: 3 };
    let rows = nn_table(&clf, &inverters, &data, &test, &train, &config).unwrap();
    assert_eq!(rows.len(), 9);
    for (chunk, tap) in rows.chunks(3).zip(taps) {
        let methods: Vec<&str> = chunk.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["1NN", "IM-S", "IM-NN"]);
        assert!(chunk.iter().all(|r| r.layer == tap.as_str() && r.n == test.len() && r.dataset == "synthetic"));
        assert!(chunk[2].mean_l1 <= chunk[1].mean_l1);
    }
    assert_eq!(rows, nn_table(&clf, &inverters, &data, &test, &train, &config).unwrap());

    // Test images that are also in the training pool have a zero-distance
    // neighbour.
    let overlap = nn_table(&clf, &inverters[..1], &data, &train[..4], &train, &config).unwrap();
    assert_eq!(overlap[0].mean_l1, 0.0);
}

#[test]
fn nn_table_matches_a_direct_oracle() {
    let data = dataset();
    let clf = classifier(2);
    let model = inverter(&clf, Tap::Fc3, 4);
    let (test, train) = (data.indices(Split::Test), data.indices(Split::Train));
    let config = NnTableConfig { dataset: "d".into(), n_samples: 3, seed: 9 };
    let rows = nn_table(&clf, &[(Tap::Fc3, &model)], &data, &test[..2], &train, &config).unwrap();

    let mut ims = 0.0;
    let mut imnn = 0.0;
    let mut nn = 0.0;
    for (i, &row) in test[..2].iter().enumerate() {
        let h = clf.extract(&data.batch(&[row]), Tap::Fc3).unwrap();
        nn += train
            .iter()
            .map(|&j| l1(h.data(), clf.extract(&data.batch(&[j]), Tap::Fc3).unwrap().data()))
            .fold(f64::INFINITY, f64::min);
        // Draws for test image i use streams 3i, 3i+1, 3i+2 of the batch.
        let hs = Tensor::concat_batch(&[h.clone(), h.clone(), h.clone(), h.clone(), h.clone(), h.clone()]).unwrap();
        let all = model.sample(&hs, 9).unwrap();
        let d: Vec<f64> = (0..3)
            .map(|s| {
                let x = all.slice_batch(3 * i + s, 3 * i + s + 1).map(|v| v / (LEVELS - 1) as f64);
                l1(h.data(), clf.extract(&x, Tap::Fc3).unwrap().data())
            })
            .collect();
        ims += d[0];
        imnn += d.iter().copied().fold(f64::INFINITY, f64::min);
    }
    assert!((rows[0].mean_l1 - nn / 2.0).abs() < 1e-12);
    assert!((rows[1].mean_l1 - ims / 2.0).abs() < 1e-12);
    assert!((rows[2].mean_l1 - imnn / 2.0).abs() < 1e-12);
}

#[test]
fn topk_keeps_the_closest_draws() {
    let data = dataset();
    let clf = classifier(0);
    let model = inverter(&clf, Tap::Fc3, 5);
    let x = data.batch_levels(&[0]);
    let h = clf.extract(&data.batch(&[0]), Tap::Fc3).unwrap();
    let ranked = topk_samples(&model, &x, &h, 12, 4, 1).unwrap();
    assert_eq!(ranked.len(), 4);
    assert!(ranked.windows(2).all(|w| (w[0].l1, w[0].draw) <= (w[1].l1, w[1].draw)));
    let everything = topk_samples(&model, &x, &h, 12, 12, 1).unwrap();
    assert_eq!(&everything[..4], &ranked[..]);
    assert!(everything[4..].iter().all(|r| r.l1 >= ranked[3].l1));
    for r in &ranked {
        assert_eq!(r.l1, l1(r.image.data(), x.data()));
    }
    assert!(matches!(topk_samples(&model, &x, &h, 3, 4, 1), Err(EvalError::Invalid(_))));
}

#[test]
fn mi_by_layer_is_relative_to_conv1() {
    let data = dataset();
    let clf = classifier(0);
    let taps = [Tap::Conv1, Tap::Conv2, Tap::Fc3];
    let models: Vec<InversionModel> = taps.iter().map(|&t| inverter(&clf, t, 7)).collect();
    let inverters: Vec<(Tap, &InversionModel)> = taps.iter().copied().zip(&models).collect();
    let test = data.indices(Split::Test);
    let (rows, estimates) = mi_by_layer(&clf, &inverters, &data, &test).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].nce_rel_conv1, 1.0);
    for (row, (tap, e)) in rows.iter().zip(&estimates) {
        assert_eq!(row.layer, tap.as_str());
        assert_eq!(row.nce_nats, e.value);
        assert!((row.nce_rel_conv1 - e.value / estimates[0].1.value).abs() < 1e-15);
    }
    assert!(matches!(mi_by_layer(&clf, &inverters[1..], &data, &test), Err(EvalError::Missing(_))));
}

#[test]
fn sample_grid_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(0);
    let gray: Vec<Tensor> = (0..5).map(|_| random_tensor(&[1, 3, 2], &mut r).map(|v| (v.abs() * 3.0).floor())).collect();
    let path = dir.path().join("g.pgm");
    let pnm = sample_grid(&gray, LEVELS, 2, 3, &path).unwrap();
    assert_eq!((pnm.width, pnm.height, pnm.channels, pnm.maxval), (3 * 2 + 2, 2 * 3 + 1, 1, 3));
    assert_eq!(read_pnm(&path).unwrap(), pnm);
    // Image 4 sits in grid row 1, column 1.
    let at = |y: usize, x: usize| pnm.pixels[y * pnm.width + x];
    assert_eq!(f64::from(at(4 + 2, 3 + 1)), gray[4].data()[2 * 2 + 1]);
    assert_eq!(at(3, 0), 0);

    let rgb: Vec<Tensor> = (0..2).map(|i| Tensor::full(&[3, 2, 2], i as f64)).collect();
    let path = dir.path().join("g.ppm");
    let pnm = sample_grid(&rgb, LEVELS, 1, 2, &path).unwrap();
    assert_eq!(read_pnm(&path).unwrap(), pnm);
    assert_eq!(pnm.pixels.len(), 5 * 2 * 3);

    let mixed = vec![Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 3, 2])];
    assert!(matches!(sample_grid(&mixed, LEVELS, 1, 2, &path), Err(EvalError::Invalid(_))));
    assert!(matches!(sample_grid(&gray, LEVELS, 1, 2, &path), Err(EvalError::Invalid(_))));
}

#[test]
fn dynamics_sweep_covers_every_job() {
    let data = dataset();
    let checkpoints = vec![
        SweepCheckpoint { step: 10, regime: Regime::Overfit, model: classifier(1) },
        SweepCheckpoint { step: 0, regime: Regime::Regular, model: classifier(2) },
        SweepCheckpoint { step: 10, regime: Regime::Regular, model: classifier(3) },
    ];
    let layers = [Tap::Fc3, Tap::Conv1];
    let out = dynamics_sweep(&checkpoints, &layers, &inv_config(), &data, 2).unwrap();
    let keys: Vec<(String, String, usize)> =
        out.iter().map(|r| (r.record.regime.clone(), r.record.layer.clone(), r.record.step)).collect();
    let expect = [
        ("overfit", "CONV1", 10),
        ("overfit", "FC3", 10),
        ("regular", "CONV1", 0),
        ("regular", "CONV1", 10),
        ("regular", "FC3", 0),
        ("regular", "FC3", 10),
    ];
    assert_eq!(keys, expect.map(|(a, b, c)| (a.to_string(), b.to_string(), c)));
    assert!(out.iter().all(|r| r.record.nce_nats == r.nce.value && r.record.nce_nats.is_finite()));

    let serial = dynamics_sweep(&checkpoints, &layers, &inv_config(), &data, 1).unwrap();
    let records = |v: &[repinv::eval::DynamicsResult]| v.iter().map(|r| r.record.clone()).collect::<Vec<_>>();
    assert_eq!(csv_bytes(&records(&out)).unwrap(), csv_bytes(&records(&serial)).unwrap());

    let dup = vec![checkpoints[1].clone(), checkpoints[1].clone()];
    assert!(matches!(dynamics_sweep(&dup, &layers, &inv_config(), &data, 1), Err(EvalError::Invalid(_))));
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, any::<f64>().prop_filter("finite", |v| v.is_finite())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_rows_round_trip(values in proptest::collection::vec((finite(), finite(), 0usize..1000), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let nn: Vec<NnTableRow> = values
            .iter()
            .map(|&(a, _, n)| NnTableRow { dataset: "d,x".into(), layer: "FC3".into(), method: "IM-S".into(), mean_l1: a, n })
            .collect();
        let path = dir.path().join("nn.csv");
        write_csv(&path, &nn).unwrap();
        prop_assert_eq!(read_csv::<NnTableRow>(&path).unwrap(), nn);

        let dynamics: Vec<DynamicsRecord> = values
            .iter()
            .map(|&(a, b, n)| DynamicsRecord { step: n, layer: "CONV2".into(), regime: "overfit".into(), nce_nats: a, val_nll_nats: b })
            .collect();
        let path = dir.path().join("dyn.csv");
        write_csv(&path, &dynamics).unwrap();
        prop_assert_eq!(read_csv::<DynamicsRecord>(&path).unwrap(), dynamics);

        let mi: Vec<MiLayerRow> = values
            .iter()
            .map(|&(a, b, _)| MiLayerRow { layer: "CONV1".into(), nce_nats: a, nce_rel_conv1: b, stderr: a.abs() })
            .collect();
        let path = dir.path().join("mi.csv");
        write_csv(&path, &mi).unwrap();
        prop_assert_eq!(read_csv::<MiLayerRow>(&path).unwrap(), mi);
    }
}

#[test]
fn missing_csv_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_csv::<NnTableRow>(&dir.path().join("nope.csv")), Err(EvalError::Io { .. })));
}
