mod common;

use dida::checkpoint;
use dida::data::{normalize, toy_digits, Normalization};
use dida::dida::DidaConfig;
use dida::experiment::{load_data, model_for, ExperimentConfig};
use dida::models::{ForwardCtx, Model};
use dida::train::{fit, target_weights, FitData, FitSummary, LogRecord, TargetLossMode};
use dida::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn toy_with_module() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.model.dida = Some(DidaConfig {
        reduction: 4,
        ..Default::default()
    });
    cfg.train.steps_per_epoch = Some(3);
    cfg.train.epochs = 2;
    cfg
}

fn train(cfg: &ExperimentConfig, out: Option<&std::path::Path>) -> (Model<f32>, FitSummary) {
    let data = load_data(cfg).unwrap();
    let mut model = model_for(cfg).unwrap();
    let fit_data = FitData {
        sources: &data.sources,
        target: &data.target,
        target_test: data.target_test.as_ref(),
        target_oracle: data.target_labels.as_deref(),
    };
    let summary = fit(&mut model, &fit_data, &cfg.train, &cfg.data.augment, &cfg.data.normalization, out).unwrap();
    (model, summary)
}

fn trainable(model: &Model<f32>) -> Vec<(String, Vec<f32>)> {
    let store = model.store();
    store
        .trainable_ids()
        .into_iter()
        .map(|id| (store.get(id).name().to_string(), store.value(id).data().to_vec()))
        .collect()
}

fn records(dir: &std::path::Path) -> Vec<LogRecord> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn toy_inputs(n: usize, seed: u64) -> Tensor<f32> {
    let set = toy_digits(n, "toy", &mut common::rng(seed)).unwrap();
    normalize(&set.images, &Normalization::default()).unwrap()
}

proptest! {
    #[test]
    fn raising_tau_never_admits_more_samples(
        q in prop::collection::vec(0.0f32..=1.0, 1..64),
        lo in 0.01f64..1.0,
        gap in 0.0f64..0.5,
    ) {
        let count = |tau| target_weights(&q, tau, TargetLossMode::HardThreshold).iter().filter(|&&w| w > 0.0).count();
        prop_assert!(count(lo + gap) <= count(lo));
        let w = target_weights(&q, lo, TargetLossMode::HardThreshold);
        prop_assert!(w.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_reproduces_outputs(seed in 0u64..1000) {
        let mut cfg = toy_with_module();
        cfg.train.seed = seed;
        let mut model = model_for(&cfg).unwrap();
        let mut r = common::rng(seed);
        let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in model.store_mut().value_mut(id).data_mut() {
                *v = r.random_range(0.5..1.5);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(model.store(), &path).unwrap();

        let mut fresh = model_for(&ExperimentConfig { train: Default::default(), ..cfg.clone() }).unwrap();
        checkpoint::load_into(fresh.store_mut(), &path).unwrap();
        let x = toy_inputs(6, seed);
        let (a, fa) = model.infer(&x, 6).unwrap();
        let (b, fb) = fresh.infer(&x, 6).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(fa.data(), fb.data());

        let bytes = checkpoint::to_bytes(model.store()).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&checkpoint::from_bytes::<f32>(&bytes).unwrap()).unwrap(), bytes);
    }
}

#[test]
fn tau_above_one_trains_exactly_like_source_only() {
    let mut hard = toy_with_module();
    hard.train.tau = 1.5;
    let mut off = hard.clone();
    off.train.target_loss_mode = TargetLossMode::Off;
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train(&hard, Some(dir.path()));
    let (b, _) = train(&off, None);
    let (pa, pb) = (trainable(&a), trainable(&b));
    assert_eq!(pa.len(), pb.len());
    for ((name, x), (_, y)) in pa.iter().zip(&pb) {
        assert!(x == y, "{name} diverged");
    }
    for rec in records(dir.path()) {
        if let LogRecord::Step(m) = rec {
            assert_eq!(m.l_t, 0.0);
            assert_eq!(m.coverage, 0.0);
        }
    }
}

#[test]
fn metrics_log_accounts_for_every_step() {
    let cfg = toy_with_module();
    let dir = tempfile::tempdir().unwrap();
    let (_, summary) = train(&cfg, Some(dir.path()));
    let recs = records(dir.path());
    let steps: Vec<_> = recs
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step(m) => Some(m.clone()),
            _ => None,
        })
        .collect();
    let epochs: Vec<_> = recs
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(steps.len(), 6);
    assert_eq!(epochs.len(), 2);
    assert_eq!(summary.steps, 6);
    assert_eq!(summary.epochs, epochs);
    for (i, m) in steps.iter().enumerate() {
        assert_eq!(m.step, i);
        assert_eq!(m.epoch, i / 3);
        assert!((m.l - (m.l_s + m.l_t)).abs() <= 1e-6 * m.l.abs().max(1.0), "step {i}: {m:?}");
        assert!(m.dida_grad_norm > 0.0, "step {i}: module received no gradient");
        assert!((0.0..=1.0).contains(&m.coverage));
        assert!(m.pseudo_label_accuracy.is_some());
    }
    for (e, rec) in epochs.iter().enumerate() {
        let mean = steps[e * 3..e * 3 + 3].iter().map(|m| m.l_s).sum::<f64>() / 3.0;
        assert!((rec.l_s - mean).abs() < 1e-12);
        assert_eq!(rec.step, (e + 1) * 3);
        assert!(rec.acc.is_some());
    }
    assert!(dir.path().join("final.ckpt").is_file());
    assert!(dir.path().join("best.ckpt").is_file());
}

#[test]
fn same_seed_same_parameters() {
    let cfg = toy_with_module();
    let (a, sa) = train(&cfg, None);
    let (b, sb) = train(&cfg, None);
    assert_eq!(trainable(&a), trainable(&b));
    assert_eq!(sa.epochs, sb.epochs);
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(trainable(&a), trainable(&train(&other, None).0));
}

#[test]
fn constant_classifier_scores_the_class_frequency() {
    let cfg = ExperimentConfig::toy();
    let mut model = model_for(&cfg).unwrap();
    for id in model.store().trainable_ids() {
        model.store_mut().value_mut(id).data_mut().fill(0.0);
    }
    let bias = model.store().id("classifier.bias").unwrap();
    model.store_mut().value_mut(bias).data_mut()[3] = 1.0;
    let set = toy_digits(57, "toy", &mut common::rng(2)).unwrap();
    let expect = set.labels.iter().filter(|&&l| l == 3).count() as f64 / 57.0;
    let norm = Normalization::default();
    for batch in [1, 8, 57, 500] {
        let pred = dida::train::predict(&model, &set, &norm, batch).unwrap();
        assert_eq!(pred.len(), 57);
        assert!(pred.iter().all(|&p| p == 3));
        assert_eq!(dida::train::evaluate(&model, &set, &norm, batch).unwrap(), expect);
    }
}

#[test]
fn eval_outputs_do_not_depend_on_batch_company() {
    let (model, _) = train(&toy_with_module(), None);
    let x = toy_inputs(12, 4);
    let (all, _) = model.infer(&x, 12).unwrap();
    let k = model.num_classes();
    for i in 0..12 {
        let (one, _) = model.infer(&x.slice_batch(i, i + 1), 1).unwrap();
        let diff = one
            .data()
            .iter()
            .zip(&all.data()[i * k..(i + 1) * k])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "sample {i}: {diff}");
    }
}

#[test]
fn fresh_module_leaves_the_network_unchanged() {
    let with = toy_with_module();
    let mut without = with.clone();
    without.model.dida = None;
    let a = model_for(&with).unwrap();
    let mut b = model_for(&without).unwrap();
    let shared: Vec<_> = b.store().iter().map(|(id, p)| (id, p.name().to_string())).collect();
    for (id, name) in shared {
        let v = a.store().by_name(&name).unwrap().value().clone();
        *b.store_mut().value_mut(id) = v;
    }
    let x = toy_inputs(5, 1);
    let (la, za) = a.infer(&x, 5).unwrap();
    let (lb, zb) = b.infer(&x, 5).unwrap();
    assert_eq!(la.data(), lb.data());
    assert_eq!(za.data(), zb.data());

    let tape = Tape::no_grad();
    let ya = a.forward(&tape, tape.constant(x.clone()), &mut ForwardCtx::train_deterministic()).unwrap();
    let yb = b.forward(&tape, tape.constant(x), &mut ForwardCtx::train_deterministic()).unwrap();
    assert_eq!(ya.logits.value().data(), yb.logits.value().data());
}
