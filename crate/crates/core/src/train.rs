//! Source cross-entropy plus confidence-filtered pseudo-labelling on
//! strongly augmented target views, the optimisation loop and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{normalize, AugmentConfig, DomainBatch, LabeledSet, Normalization, Sampler, UnlabeledSet};
use crate::error::{Error, Result};
use crate::models::{ForwardCtx, Model, PARAM_PREFIXES};
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};
use crate::tensor::{ops, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetLossMode {
    /// Weight 1 for pseudo-labels with confidence at least `tau`, else 0.
    #[default]
    HardThreshold,
    /// Weight equal to the confidence itself.
    SoftWeight,
    /// No target term at all (source-only training).
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Report the epoch with the best target accuracy.
    #[default]
    Best,
    /// Report the last epoch.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the steps of each epoch; one pass over the target set otherwise.
    pub steps_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub dida_lr_multiplier: f64,
    pub target_loss_mode: TargetLossMode,
    /// Linear ramp of the target-loss weight from 0 to 1 over this many steps.
    pub warmup_steps: usize,
    pub seed: u64,
    pub selection: Selection,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.95,
            epochs: 15,
            batch_size: 128,
            steps_per_epoch: None,
            base_lr: 2e-4,
            optimizer: OptimizerKind::adam(),
            schedule: Schedule::Cosine,
            dida_lr_multiplier: 10.0,
            target_loss_mode: TargetLossMode::HardThreshold,
            warmup_steps: 0,
            seed: 0,
            selection: Selection::Best,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("train.tau must be positive, got {}", self.tau));
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("train.steps_per_epoch must be positive when set".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("train.base_lr must be positive, got {}", self.base_lr));
        }
        if self.dida_lr_multiplier.is_nan() || self.dida_lr_multiplier <= 0.0 {
            return bad("train.dida_lr_multiplier must be positive".into());
        }
        Ok(())
    }

    pub fn lr_multiplier(&self, name: &str) -> f64 {
        if name.starts_with("dida.") {
            self.dida_lr_multiplier
        } else {
            1.0
        }
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.base_lr),
            Schedule::Cosine => cosine_lr(step, total_steps, self.base_lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub lr: f64,
    /// Fraction of the target batch with confidence at least `tau`.
    pub coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pseudo_label_accuracy: Option<f64>,
    pub grad_norm: f64,
    pub dida_grad_norm: f64,
}

/// Mean cross-entropy over the source batch.
pub fn loss_source<'t>(logits: Var<'t, f32>, labels: &[usize]) -> Result<Var<'t, f32>> {
    ops::softmax_cross_entropy(logits, labels, None)
}

/// Argmax class (lowest index on ties) and its softmax probability, per row.
pub fn pseudo_label(weak_logits: &Tensor<f32>) -> Result<(Vec<usize>, Vec<f32>)> {
    let (_, k) = weak_logits.dims2("pseudo_label")?;
    let logp = ops::log_softmax_rows(weak_logits)?;
    let mut labels = Vec::new();
    let mut conf = Vec::new();
    for row in logp.data().chunks(k) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        labels.push(best);
        conf.push(row[best].exp());
    }
    Ok((labels, conf))
}

/// Per-sample target-loss weights before the `1/B` averaging.
pub fn target_weights(q: &[f32], tau: f64, mode: TargetLossMode) -> Vec<f32> {
    q.iter()
        .map(|&qi| match mode {
            TargetLossMode::HardThreshold => {
                if qi as f64 >= tau {
                    1.0
                } else {
                    0.0
                }
            }
            TargetLossMode::SoftWeight => qi,
            TargetLossMode::Off => 0.0,
        })
        .collect()
}

/// `(1/B) sum_i w_i CE(strong_i, yhat_i)`.
pub fn loss_target<'t>(
    strong_logits: Var<'t, f32>,
    pseudo: &[usize],
    q: &[f32],
    tau: f64,
    mode: TargetLossMode,
) -> Result<Var<'t, f32>> {
    let b = pseudo.len().max(1) as f32;
    let w: Vec<f32> = target_weights(q, tau, mode).into_iter().map(|w| w / b).collect();
    ops::softmax_cross_entropy(strong_logits, pseudo, Some(&w))
}

/// Independent random stream for one (seed, step, role) triple.
pub fn stream(seed: u64, step: u64, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(8).wrapping_add(role));
    rng
}

const ROLE_SOURCE_MIX: u64 = 0;
const ROLE_STRONG_MIX: u64 = 1;

fn grad_norms(model: &Model<f32>, grads: &Gradients<f32>) -> (f64, f64, String) {
    let mut total = 0.0;
    let mut per_prefix = vec![0.0f64; PARAM_PREFIXES.len()];
    for id in model.store().trainable_ids() {
        let sq = grads.param(id).map_or(0.0, |g| g.sq_norm() as f64);
        total += sq;
        let name = model.store().get(id).name();
        if let Some(i) = PARAM_PREFIXES.iter().position(|p| name.starts_with(p)) {
            per_prefix[i] += sq;
        }
    }
    let text = PARAM_PREFIXES
        .iter()
        .zip(&per_prefix)
        .map(|(p, s)| format!("{p} {:.3e}", s.sqrt()))
        .collect::<Vec<_>>()
        .join(", ");
    (total.sqrt(), per_prefix[1].sqrt(), text)
}

/// One optimisation step on `batch` with learning rate `lr`.
///
/// `oracle` optionally maps target indices to true labels; it is used only
/// to report pseudo-label accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    batch: &DomainBatch,
    opt: &mut Optimizer<f32>,
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
    lr: f64,
    oracle: Option<&[u8]>,
) -> Result<StepMetrics> {
    let mut src_rng = stream(cfg.seed, step as u64, ROLE_SOURCE_MIX);
    let mut strong_rng = stream(cfg.seed, step as u64, ROLE_STRONG_MIX);
    let tape = Tape::new();
    let mut src_ctx = ForwardCtx::train(&mut src_rng);
    let out = model.forward(&tape, tape.constant(batch.source_x.clone()), &mut src_ctx)?;
    let l_s = loss_source(out.logits, &batch.source_y)?;

    let mut coverage = 0.0;
    let mut pl_acc = None;
    let mut l_t = None;
    let mut strong_ctx = None;
    if cfg.target_loss_mode != TargetLossMode::Off {
        let (weak_logits, _) = model.infer(&batch.target_weak, batch.target_weak.shape()[0])?;
        let (yhat, q) = pseudo_label(&weak_logits)?;
        let b = yhat.len() as f64;
        coverage = q.iter().filter(|&&qi| qi as f64 >= cfg.tau).count() as f64 / b;
        if let Some(labels) = oracle {
            let hits = yhat
                .iter()
                .zip(&batch.target_ids)
                .filter(|(&y, &i)| labels[i] as usize == y)
                .count();
            pl_acc = Some(hits as f64 / b);
        }
        let ramp = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f32 / cfg.warmup_steps as f32).min(1.0)
        };
        let q_eff: Vec<f32> = match cfg.target_loss_mode {
            TargetLossMode::SoftWeight => q.iter().map(|&v| v * ramp).collect(),
            _ => q.clone(),
        };
        // the strong view passes through train-mode batch norm even when every
        // weight is zero and the loss term is exactly 0
        let mut ctx = ForwardCtx::train(&mut strong_rng);
        let strong = model.forward(&tape, tape.constant(batch.target_strong.clone()), &mut ctx)?;
        let lt = loss_target(strong.logits, &yhat, &q_eff, cfg.tau, cfg.target_loss_mode)?;
        l_t = Some(if ramp < 1.0 && cfg.target_loss_mode == TargetLossMode::HardThreshold {
            ops::scale(lt, ramp)
        } else {
            lt
        });
        strong_ctx = Some(ctx.into_updates());
    }
    let loss = match l_t {
        Some(t) => ops::add(l_s, t)?,
        None => l_s,
    };
    let l_s_v = l_s.value().item() as f64;
    let l_t_v = l_t.map_or(0.0, |t| t.value().item() as f64);
    let l_v = loss.value().item() as f64;
    let grads = tape.backward(loss)?;
    let (grad_norm, dida_grad_norm, text) = grad_norms(model, &grads);
    if !l_v.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            lr,
            grad_norms: text,
        });
    }
    let src_updates = src_ctx.into_updates();
    drop(tape);
    let store = model.store_mut();
    store.zero_grads();
    store.absorb_grads(grads, false);
    opt.step(store, lr)?;
    model.apply_updates(src_updates);
    if let Some(u) = strong_ctx {
        model.apply_updates(u);
    }
    Ok(StepMetrics {
        step,
        epoch,
        l_s: l_s_v,
        l_t: l_t_v,
        l: l_v,
        lr,
        coverage,
        pseudo_label_accuracy: pl_acc,
        grad_norm,
        dida_grad_norm,
    })
}

/// Eval-mode predictions for a labelled set.
pub fn predict(model: &Model<f32>, set: &LabeledSet, norm: &Normalization, batch: usize) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::EmptyDataset(set.domain.clone()));
    }
    let x = normalize(&set.images, norm)?;
    let (logits, _) = model.infer(&x, batch)?;
    Ok(pseudo_label(&logits)?.0)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(pred: &[usize], labels: &[u8]) -> Result<f64> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let hits = pred.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Top-1 accuracy in eval mode, without augmentation.
pub fn evaluate(model: &Model<f32>, set: &LabeledSet, norm: &Normalization, batch: usize) -> Result<f64> {
    accuracy(&predict(model, set, norm, batch)?, &set.labels)
}

pub struct FitData<'a> {
    pub sources: &'a [LabeledSet],
    pub target: &'a UnlabeledSet,
    /// Labelled target test set, used for reporting and checkpoint selection only.
    pub target_test: Option<&'a LabeledSet>,
    /// True labels of `target`, for pseudo-label accuracy reporting only.
    pub target_oracle: Option<&'a [u8]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepMetrics),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Serialize)]
pub struct FitSummary {
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_acc: Option<f64>,
    /// Accuracy under the configured selection rule.
    pub selected_acc: Option<f64>,
}

/// Train for `cfg.epochs` epochs. With `out_dir`, writes `metrics.jsonl`,
/// `final.ckpt` and (when a target test set is given) `best.ckpt`.
pub fn fit(
    model: &mut Model<f32>,
    data: &FitData<'_>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    norm: &Normalization,
    out_dir: Option<&Path>,
) -> Result<FitSummary> {
    cfg.validate()?;
    let mut data_rng = stream(cfg.seed, u64::MAX / 16, 7);
    let mut sampler = Sampler::new(data.sources, data.target, cfg.batch_size, aug.clone(), *norm, &mut data_rng)?;
    let steps_per_epoch = cfg
        .steps_per_epoch
        .map_or(sampler.steps_per_epoch(), |s| s.min(sampler.steps_per_epoch()).max(1));
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = Optimizer::new(cfg.optimizer, model.store(), |n| cfg.lr_multiplier(n));
    let mut log = match out_dir {
        Some(d) => Some(BufWriter::new(File::create(d.join("metrics.jsonl"))?)),
        None => None,
    };
    let mut summary = FitSummary {
        steps: 0,
        epochs: Vec::new(),
        best_acc: None,
        best_epoch: None,
        final_acc: None,
        selected_acc: None,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut s_sum, mut t_sum, mut l_sum, mut cov_sum) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let batch = sampler.next_batch(&mut data_rng)?;
            let lr = cfg.lr_at(step, total)?;
            let m = train_step(model, &batch, &mut opt, cfg, step, epoch, lr, data.target_oracle)?;
            s_sum += m.l_s;
            t_sum += m.l_t;
            l_sum += m.l;
            cov_sum += m.coverage;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &LogRecord::Step(m))?;
                w.write_all(b"\n")?;
            }
            step += 1;
        }
        let acc = match data.target_test {
            Some(t) => Some(evaluate(model, t, norm, cfg.eval_batch)?),
            None => None,
        };
        let k = steps_per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            step,
            l_s: s_sum / k,
            l_t: t_sum / k,
            l: l_sum / k,
            coverage: cov_sum / k,
            acc,
        };
        info!(
            "epoch {epoch}: L_s {:.4} L_t {:.4} coverage {:.3}{}",
            rec.l_s,
            rec.l_t,
            rec.coverage,
            acc.map_or(String::new(), |a| format!(" acc {a:.4}"))
        );
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &LogRecord::Epoch(rec.clone()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if let Some(a) = acc {
            if summary.best_acc.is_none_or(|b| a > b) {
                summary.best_acc = Some(a);
                summary.best_epoch = Some(epoch);
                if let Some(d) = out_dir {
                    checkpoint::save(model.store(), d.join("best.ckpt"))?;
                }
            }
        }
        summary.final_acc = acc;
        summary.epochs.push(rec);
    }
    summary.steps = step;
    summary.selected_acc = match cfg.selection {
        Selection::Best => summary.best_acc,
        Selection::Last => summary.final_acc,
    };
    if let Some(d) = out_dir {
        checkpoint::save(model.store(), d.join("final.ckpt"))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_ties_and_saturation() {
        let t = Tensor::new([3, 3], vec![0.0, 0.0, 0.0, 1.0, 3.0, 3.0, 50.0, 0.0, 0.0]).unwrap();
        let (y, q) = pseudo_label(&t).unwrap();
        assert_eq!(y, vec![0, 1, 0]);
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((q[2] - 1.0).abs() < 1e-6);
        let (_, q) = pseudo_label(&Tensor::zeros([1, 10])).unwrap();
        assert!((q[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn hard_threshold_masks_low_confidence() {
        assert_eq!(target_weights(&[0.96, 0.90], 0.95, TargetLossMode::HardThreshold), vec![1.0, 0.0]);
        assert_eq!(target_weights(&[0.96, 0.90], 0.95, TargetLossMode::SoftWeight), vec![0.96, 0.90]);
    }

    #[test]
    fn soft_weight_scalar_oracle() {
        // one sample with CE 2.0 and confidence 0.5: logits chosen so -log p[0] = 2
        let p0 = (-2.0f64).exp();
        let rest = ((1.0 - p0) / 2.0).ln();
        let logits = Tensor::new([1, 3], vec![p0.ln() as f32, rest as f32, rest as f32]).unwrap();
        let tape = Tape::new();
        let l = loss_target(tape.leaf(logits), &[0], &[0.5], 0.95, TargetLossMode::SoftWeight).unwrap();
        assert!((l.value().item() - 1.0).abs() < 1e-6);
        let l = loss_target(tape.constant(Tensor::zeros([2, 3])), &[0, 1], &[0.2, 0.3], 0.95, TargetLossMode::HardThreshold)
            .unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn config_guards() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { tau: 0.0, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { base_lr: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(ok.lr_multiplier("dida.expand.weight"), 10.0);
        assert_eq!(ok.lr_multiplier("backbone.block1.conv.weight"), 1.0);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }
}
