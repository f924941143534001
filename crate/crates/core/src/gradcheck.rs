//! Central finite-difference checks of the analytic gradients, in f64.
//!
//! A case evaluates a function of some input tensors (and optionally of the
//! trainable parameters in a store). Non-scalar outputs are reduced to a
//! scalar with a fixed random projection `sum(out * R)`, so every output
//! element contributes to the checked gradient.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dida::{DidaConfig, DidaModule, GeneratorMode};
use crate::error::{Error, Result};
use crate::init;
use crate::param::{ParamId, ParamStore};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::ops::{self, BnStats};
use crate::tensor::{Tape, Tensor, Var};

type CaseFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

pub struct GradCase {
    pub name: &'static str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured on an absolute
    /// scale: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates probed per tensor (all of them for smaller tensors).
    pub max_coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
            max_coords: 512,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub seed: u64,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Where the worst error occurred, e.g. `input 1[17]` or `dida.reduce.weight[3]`.
    pub worst_at: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub cases: Vec<CaseReport>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_err <= self.config.tolerance)
    }

    /// Worst relative error per case name, in first-seen order.
    pub fn worst_by_case(&self) -> Vec<(String, f64, usize)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(n, _, _)| *n == c.name) {
                Some(entry) => {
                    entry.1 = entry.1.max(c.max_rel_err);
                    entry.2 += 1;
                }
                None => out.push((c.name.clone(), c.max_rel_err, 1)),
            }
        }
        out
    }
}

pub const CASE_NAMES: [&str; 15] = [
    "conv2d",
    "conv2d_strided",
    "depthwise_conv2d_per_sample",
    "depthwise_conv2d_per_sample_dilation2",
    "linear",
    "relu",
    "global_avg_pool",
    "max_pool2d",
    "batch_norm_train",
    "softmax_cross_entropy",
    "concat_channels",
    "generate_kernels",
    "dida_residual",
    "dida_residual_unshared",
    "dida_residual_static_cnn",
];

fn randn(shape: impl Into<Vec<usize>>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    init::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(shape: impl Into<Vec<usize>>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn simple(name: &'static str, inputs: Vec<Tensor<f64>>, f: CaseFn) -> GradCase {
    GradCase {
        name,
        store: ParamStore::new(),
        inputs,
        f,
    }
}

fn dida_case(name: &'static str, cfg: DidaConfig, rng: &mut ChaCha8Rng, kernels_only: bool) -> Result<GradCase> {
    let c = cfg.in_channels.unwrap_or(8);
    let mut store = ParamStore::new();
    let module = DidaModule::new(cfg, "dida", &mut store, rng)?;
    // the lifting weights start at zero; randomise them so every path carries gradient
    let expand = module.expand_id();
    let shape = store.value(expand).shape().to_vec();
    *store.value_mut(expand) = randn(shape, rng);
    for id in store.trainable_ids() {
        if id != expand {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = randn(shape, rng);
        }
    }
    let x = randn([2, c, 5, 5], rng);
    Ok(GradCase {
        name,
        store,
        inputs: vec![x],
        f: Box::new(move |t, s, v| {
            if kernels_only {
                Ok(module.generate_kernels(t, s, v[0], 0)?.bank)
            } else {
                module.residual(t, s, v[0])
            }
        }),
    })
}

pub fn build_case(name: &str, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let case = match name {
        "conv2d" => simple(
            "conv2d",
            vec![randn([2, 3, 5, 5], rng), randn([4, 3, 3, 3], rng)],
            Box::new(|_, _, v| ops::conv2d(v[0], v[1], ConvGeom::same(3, 1))),
        ),
        "conv2d_strided" => simple(
            "conv2d_strided",
            vec![randn([2, 2, 6, 6], rng), randn([3, 2, 3, 3], rng)],
            Box::new(|_, _, v| ops::conv2d(v[0], v[1], ConvGeom::new(2, 1, 2))),
        ),
        "depthwise_conv2d_per_sample" => simple(
            "depthwise_conv2d_per_sample",
            vec![randn([2, 3, 5, 5], rng), randn([2, 3, 3, 3], rng)],
            Box::new(|_, _, v| ops::depthwise_conv2d_per_sample(v[0], v[1], 1, 1)),
        ),
        "depthwise_conv2d_per_sample_dilation2" => simple(
            "depthwise_conv2d_per_sample_dilation2",
            vec![randn([2, 3, 5, 5], rng), randn([2, 3, 3, 3], rng)],
            Box::new(|_, _, v| ops::depthwise_conv2d_per_sample(v[0], v[1], 2, 2)),
        ),
        "linear" => simple(
            "linear",
            vec![randn([3, 5], rng), randn([4, 5], rng), randn([4], rng)],
            Box::new(|_, _, v| ops::linear(v[0], v[1], Some(v[2]))),
        ),
        "relu" => simple(
            "relu",
            vec![away_from_zero([2, 3, 4, 4], rng)],
            Box::new(|_, _, v| Ok(ops::relu(v[0]))),
        ),
        "global_avg_pool" => simple(
            "global_avg_pool",
            vec![randn([2, 3, 4, 5], rng)],
            Box::new(|_, _, v| ops::global_avg_pool(v[0])),
        ),
        "max_pool2d" => {
            // a shuffled grid of well-separated values, so no window has a near tie
            let n = 2 * 2 * 4 * 4;
            let order = sample(rng, n, n).into_vec();
            let x = Tensor::new([2, 2, 4, 4], order.iter().map(|&i| i as f64 * 0.05 - 0.8).collect())?;
            simple("max_pool2d", vec![x], Box::new(|_, _, v| ops::max_pool2d(v[0], 2)))
        }
        "batch_norm_train" => simple(
            "batch_norm_train",
            vec![randn([3, 2, 3, 3], rng), randn([2], rng), randn([2], rng)],
            Box::new(|_, _, v| Ok(ops::batch_norm2d(v[0], v[1], v[2], BnStats::Batch, 1e-5)?.out)),
        ),
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            simple(
                "softmax_cross_entropy",
                vec![randn([4, 5], rng).map(|v| 3.0 * v)],
                Box::new(move |_, _, v| ops::softmax_cross_entropy(v[0], &labels, Some(&weights))),
            )
        }
        "concat_channels" => simple(
            "concat_channels",
            vec![randn([2, 1, 3, 3], rng), randn([2, 2, 3, 3], rng)],
            Box::new(|_, _, v| ops::concat_channels(&[v[0], v[1]])),
        ),
        "generate_kernels" => dida_case(
            "generate_kernels",
            DidaConfig {
                reduction: 2,
                ..DidaConfig::with_channels(8, 8)
            },
            rng,
            true,
        )?,
        "dida_residual" => dida_case(
            "dida_residual",
            DidaConfig {
                reduction: 2,
                ..DidaConfig::with_channels(8, 6)
            },
            rng,
            false,
        )?,
        "dida_residual_unshared" => dida_case(
            "dida_residual_unshared",
            DidaConfig {
                reduction: 4,
                share_reduction: false,
                ..DidaConfig::with_channels(8, 4)
            },
            rng,
            false,
        )?,
        "dida_residual_static_cnn" => dida_case(
            "dida_residual_static_cnn",
            DidaConfig {
                reduction: 2,
                generator_mode: GeneratorMode::StaticCnn,
                ..DidaConfig::with_channels(4, 4)
            },
            rng,
            false,
        )?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck case `{other}` (known: {})",
                CASE_NAMES.join(", ")
            )))
        }
    };
    Ok(case)
}

enum Slot {
    Input(usize),
    Param(ParamId),
}

fn projected<'t>(
    case: &GradCase,
    tape: &'t Tape<f64>,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    proj: &mut Option<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)> {
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.f)(tape, store, &vars)?;
    let r = proj
        .get_or_insert_with(|| randn(out.value().shape().to_vec(), rng))
        .clone();
    let loss = ops::sum(ops::mul(out, tape.constant(r))?);
    Ok((loss, vars))
}

/// Check every input and trainable parameter of `case`.
pub fn check_case(case: &GradCase, seed: u64, cfg: &GradcheckConfig) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut proj = None;
    let tape = Tape::new();
    let (loss, vars) = projected(case, &tape, &case.store, &case.inputs, &mut proj, &mut rng)?;
    let grads = tape.backward(loss)?;

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| -> Result<f64> {
        let tape = Tape::no_grad();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let (l, _) = projected(case, &tape, store, inputs, proj, &mut dummy)?;
        Ok(l.value().item())
    };

    let mut slots: Vec<(Slot, String, Tensor<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape().to_vec()));
        slots.push((Slot::Input(i), format!("input {i}"), g));
    }
    for id in case.store.trainable_ids() {
        // parameters the case never touches must have a zero numeric gradient too
        let g = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.store.value(id).shape().to_vec()));
        slots.push((Slot::Param(id), case.store.get(id).name().to_string(), g));
    }

    let mut report = CaseReport {
        name: case.name.to_string(),
        seed,
        coords: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_at: String::new(),
    };
    let mut store = case.store.clone();
    let mut inputs = case.inputs.clone();
    for (slot, label, analytic) in &slots {
        let len = analytic.len();
        let coords = if len <= cfg.max_coords {
            (0..len).collect()
        } else {
            sample(&mut rng, len, cfg.max_coords).into_vec()
        };
        for j in coords {
            let nudge = |store: &mut ParamStore<f64>, inputs: &mut Vec<Tensor<f64>>, delta: f64| match slot {
                Slot::Input(i) => inputs[*i].data_mut()[j] += delta,
                Slot::Param(id) => store.value_mut(*id).data_mut()[j] += delta,
            };
            let orig = match slot {
                Slot::Input(i) => inputs[*i].data()[j],
                Slot::Param(id) => store.value(*id).data()[j],
            };
            nudge(&mut store, &mut inputs, cfg.eps);
            let up = eval(&store, &inputs, &mut proj)?;
            nudge(&mut store, &mut inputs, -2.0 * cfg.eps);
            let down = eval(&store, &inputs, &mut proj)?;
            match slot {
                Slot::Input(i) => inputs[*i].data_mut()[j] = orig,
                Slot::Param(id) => store.value_mut(*id).data_mut()[j] = orig,
            }
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.coords += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst_at.is_empty() {
                report.max_rel_err = rel;
                report.worst_at = format!("{label}[{j}]");
            }
        }
    }
    Ok(report)
}

/// Run `names` (all cases when empty) for each seed.
pub fn run_suite(names: &[&str], seeds: impl IntoIterator<Item = u64> + Clone, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let names: Vec<&str> = if names.is_empty() { CASE_NAMES.to_vec() } else { names.to_vec() };
    let mut cases = Vec::new();
    for name in names {
        for seed in seeds.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let case = build_case(name, &mut rng)?;
            cases.push(check_case(&case, seed, cfg)?);
        }
    }
    Ok(GradcheckReport {
        config: *cfg,
        cases,
        elapsed: start.elapsed(),
    })
}
