//! Backbones with an optional dynamic residual branch.
//!
//! A backbone is a list of named stages. The stage named by the insertion
//! point ends the lower sub-network; the remaining stages form the static
//! top block, and the dynamic module reads the same tapped features. Their
//! outputs are summed, globally pooled and fed to the (shared) head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dida::{fuse, mixstyle, DidaConfig, DidaModule, MixStyleConfig};
use crate::error::{Error, Result};
use crate::init;
use crate::param::{ParamId, ParamStore};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::ops::{self, BnStats};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// conv5x5(64)-pool, conv5x5(64)-pool, conv3x3(128); fc 3072; classifier.
    #[default]
    Digit3conv,
    /// conv5x5(64)-pool, conv5x5(64); fc 3072; classifier.
    Digit2conv,
    /// 3x3 stem and four basic residual blocks (16/32/64/128); classifier.
    Smallresnet,
}

impl Variant {
    fn default_widths(self) -> Vec<usize> {
        match self {
            Variant::Digit3conv => vec![64, 64, 128],
            Variant::Digit2conv => vec![64, 64],
            Variant::Smallresnet => vec![16, 16, 32, 64, 128],
        }
    }

    fn default_insertion(self) -> &'static str {
        match self {
            Variant::Digit3conv => "block2",
            Variant::Digit2conv => "block1",
            Variant::Smallresnet => "block3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub variant: Variant,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Per-stage output channels; the variant's defaults when unset.
    pub widths: Option<Vec<usize>>,
    /// Hidden width of the first fully connected layer (digit variants).
    pub hidden: usize,
    /// Stage after which the dynamic branch taps the feature stream.
    pub insertion: Option<String>,
    pub dida: Option<DidaConfig>,
    pub mixstyle: Option<MixStyleConfig>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            variant: Variant::Digit3conv,
            num_classes: 10,
            in_channels: 1,
            widths: None,
            hidden: 3072,
            insertion: None,
            dida: None,
            mixstyle: None,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, the randomness MixStyle draws from, and the
/// running-statistic updates produced by train-mode batch norm.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    rng: Option<&'r mut ChaCha8Rng>,
    updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'r> ForwardCtx<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
            updates: Vec::new(),
        }
    }

    /// Train-mode normalisation without any random regularisers.
    pub fn train_deterministic() -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: None,
            updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: None,
            updates: Vec::new(),
        }
    }

    /// Release the randomness and keep the pending running-statistic updates.
    pub fn into_updates(self) -> StatUpdates {
        StatUpdates(self.updates)
    }
}

/// Batch statistics of a train-mode forward, to be folded into the
/// running buffers once the step is committed.
pub struct StatUpdates(Vec<(ParamId, Vec<f64>)>);

pub struct ModelOutput<'t, T> {
    pub logits: Var<'t, T>,
    /// Fused feature map `Z` (static + residual), before pooling.
    pub z: Var<'t, T>,
    /// `Z` after global average pooling, `[N, C]`.
    pub pooled: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

struct ConvBn {
    conv: ParamId,
    bn: BatchNorm,
    cin: usize,
    cout: usize,
    k: usize,
    geom: ConvGeom,
}

enum StageKind {
    Plain { unit: ConvBn, pool: Option<usize> },
    Residual {
        a: ConvBn,
        b: ConvBn,
        shortcut: Option<ConvBn>,
    },
}

struct Stage {
    name: String,
    kind: StageKind,
}

struct Linear {
    weight: ParamId,
    bias: ParamId,
    din: usize,
    dout: usize,
}

pub struct Model<T> {
    spec: BackboneSpec,
    store: ParamStore<T>,
    stages: Vec<Stage>,
    insertion: usize,
    mix_after: Option<usize>,
    dida: Option<DidaModule>,
    hidden: Option<Linear>,
    classifier: Linear,
}

struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Float, R: Rng> Builder<'_, T, R> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Result<ConvBn> {
        let conv = self.store.add_param(
            &format!("{name}.conv.weight"),
            init::kaiming_uniform([cout, cin, k, k], cin * k * k, 1.0, self.rng),
        )?;
        let bn = BatchNorm {
            gamma: self.store.add_param(&format!("{name}.bn.weight"), Tensor::ones([cout]))?,
            beta: self.store.add_param(&format!("{name}.bn.bias"), Tensor::zeros([cout]))?,
            mean: self
                .store
                .add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros([cout]))?,
            var: self
                .store
                .add_buffer(&format!("{name}.bn.running_var"), Tensor::ones([cout]))?,
        };
        Ok(ConvBn {
            conv,
            bn,
            cin,
            cout,
            k,
            geom,
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Linear {
            weight: self.store.add_param(
                &format!("{name}.weight"),
                init::uniform([dout, din], bound, self.rng),
            )?,
            bias: self
                .store
                .add_param(&format!("{name}.bias"), init::uniform([dout], bound, self.rng))?,
            din,
            dout,
        })
    }
}

impl ConvBn {
    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.geom.out_len(h, self.k), self.geom.out_len(w, self.k)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::shape("backbone", format!("{h}x{w} too small for {}x{} conv", self.k, self.k))),
        }
    }

    fn params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + 2 * self.cout
    }

    fn macs(&self, n: usize, ho: usize, wo: usize) -> u64 {
        (n * self.cout * ho * wo * self.cin * self.k * self.k) as u64
    }
}

impl Stage {
    fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        match &self.kind {
            StageKind::Plain { unit, pool } => {
                debug_assert_eq!(c, unit.cin);
                let (h, w) = unit.out_hw(h, w)?;
                let p = pool.unwrap_or(1);
                Ok((unit.cout, h / p, w / p))
            }
            StageKind::Residual { a, b, .. } => {
                let (h, w) = a.out_hw(h, w)?;
                let (h, w) = b.out_hw(h, w)?;
                Ok((b.cout, h, w))
            }
        }
    }

    fn summarize(&self, n: usize, h: usize, w: usize, out: &mut Vec<LayerSummary>) -> Result<()> {
        let mut push = |suffix: &str, unit: &ConvBn, h: usize, w: usize| -> Result<(usize, usize)> {
            let (ho, wo) = unit.out_hw(h, w)?;
            out.push(LayerSummary {
                name: format!("{}.{suffix}", self.name),
                out_shape: vec![n, unit.cout, ho, wo],
                params: unit.params(),
                macs: unit.macs(n, ho, wo),
            });
            Ok((ho, wo))
        };
        match &self.kind {
            StageKind::Plain { unit, .. } => {
                push("conv", unit, h, w)?;
            }
            StageKind::Residual { a, b, shortcut } => {
                let (h1, w1) = push("conv_a", a, h, w)?;
                push("conv_b", b, h1, w1)?;
                if let Some(s) = shortcut {
                    push("shortcut", s, h, w)?;
                }
            }
        }
        Ok(())
    }
}

/// Build a model. Backbone and head parameters are drawn from `rng` first;
/// the dynamic module is initialised from a stream forked afterwards, so
/// models with and without it share identical backbone weights for a seed.
pub fn build_model<T: Float>(spec: &BackboneSpec, rng: &mut impl Rng) -> Result<Model<T>> {
    let widths = spec
        .widths
        .clone()
        .unwrap_or_else(|| spec.variant.default_widths());
    let expected = spec.variant.default_widths().len();
    if widths.len() != expected || widths.contains(&0) {
        return Err(Error::Config(format!(
            "{:?} needs {expected} positive widths, got {widths:?}",
            spec.variant
        )));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng,
    };
    let mut stages = Vec::new();
    let mix_after;
    match spec.variant {
        Variant::Digit3conv | Variant::Digit2conv => {
            let kernels: &[usize] = if spec.variant == Variant::Digit3conv {
                &[5, 5, 3]
            } else {
                &[5, 5]
            };
            let mut cin = spec.in_channels;
            for (i, (&cout, &k)) in widths.iter().zip(kernels).enumerate() {
                let name = format!("block{}", i + 1);
                let last = i + 1 == widths.len();
                let unit = b.conv_bn(&format!("backbone.{name}"), cin, cout, k, ConvGeom::same(k, 1))?;
                stages.push(Stage {
                    name,
                    kind: StageKind::Plain {
                        unit,
                        pool: (!last).then_some(2),
                    },
                });
                cin = cout;
            }
            mix_after = Some(0);
        }
        Variant::Smallresnet => {
            let unit = b.conv_bn("backbone.stem", spec.in_channels, widths[0], 3, ConvGeom::same(3, 1))?;
            stages.push(Stage {
                name: "stem".into(),
                kind: StageKind::Plain { unit, pool: None },
            });
            let strides = [1, 2, 2, 1];
            let mut cin = widths[0];
            for (i, (&cout, &stride)) in widths[1..].iter().zip(&strides).enumerate() {
                let name = format!("block{}", i + 1);
                let p = format!("backbone.{name}");
                let a = b.conv_bn(&format!("{p}.a"), cin, cout, 3, ConvGeom::new(stride, 1, 1))?;
                let bb = b.conv_bn(&format!("{p}.b"), cout, cout, 3, ConvGeom::same(3, 1))?;
                let shortcut = if stride != 1 || cin != cout {
                    Some(b.conv_bn(&format!("{p}.shortcut"), cin, cout, 1, ConvGeom::new(stride, 0, 1))?)
                } else {
                    None
                };
                stages.push(Stage {
                    name,
                    kind: StageKind::Residual { a, b: bb, shortcut },
                });
                cin = cout;
            }
            mix_after = Some(1);
        }
    }
    let feat = *widths.last().unwrap();
    let (hidden, classifier) = match spec.variant {
        Variant::Smallresnet => (None, b.linear("classifier", feat, spec.num_classes)?),
        _ => {
            let h = b.linear("head.fc1", feat, spec.hidden)?;
            (Some(h), b.linear("classifier", spec.hidden, spec.num_classes)?)
        }
    };

    let insertion_name = spec
        .insertion
        .clone()
        .unwrap_or_else(|| spec.variant.default_insertion().to_string());
    let insertion = stages
        .iter()
        .position(|s| s.name == insertion_name)
        .ok_or_else(|| Error::Config(format!("insertion point `{insertion_name}` is not a stage")))?;
    if insertion + 1 >= stages.len() {
        return Err(Error::Config(format!(
            "insertion point `{insertion_name}` leaves no static block after it"
        )));
    }

    let dida = match &spec.dida {
        None => None,
        Some(cfg) => {
            // trace a nominal 32x32 input to size the tap and the static output
            let (mut c, mut h, mut w) = (spec.in_channels, 32, 32);
            let mut tap = (0, 0, 0);
            for (i, s) in stages.iter().enumerate() {
                (c, h, w) = s.out_shape(c, h, w)?;
                if i == insertion {
                    tap = (c, h, w);
                }
            }
            let mut cfg = cfg.clone();
            if let Some(ci) = cfg.in_channels {
                if ci != tap.0 {
                    return Err(Error::Config(format!(
                        "dida.in_channels {ci} does not match `{insertion_name}` output channels {}",
                        tap.0
                    )));
                }
            }
            if let Some(co) = cfg.out_channels {
                if co != c {
                    return Err(Error::Config(format!(
                        "dida.out_channels {co} does not match static block output channels {c}"
                    )));
                }
            }
            cfg.in_channels = Some(tap.0);
            cfg.out_channels = Some(c);
            if tap.1 % h != 0 || (tap.1 - 1) / (tap.1 / h) + 1 != h {
                return Err(Error::Config(format!(
                    "static block maps {}x{} to {h}x{w}; not an integer stride",
                    tap.1, tap.2
                )));
            }
            cfg.stride = tap.1 / h;
            let mut fork = ChaCha8Rng::seed_from_u64(b.rng.random());
            Some(DidaModule::new(cfg, "dida", b.store, &mut fork)?)
        }
    };

    Ok(Model {
        spec: spec.clone(),
        store,
        stages,
        insertion,
        mix_after: spec.mixstyle.as_ref().and(mix_after),
        dida,
        hidden,
        classifier,
    })
}

impl<T: Float> Model<T> {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn dida(&self) -> Option<&DidaModule> {
        self.dida.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.din,
            None => self.classifier.din,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.dout
    }

    fn bn<'t>(
        &self,
        bn: &BatchNorm,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, T>> {
        let gamma = tape.param(&self.store, bn.gamma);
        let beta = tape.param(&self.store, bn.beta);
        let eps = T::from_f64_lossy(self.spec.bn_eps);
        match ctx.mode {
            Mode::Train => {
                let out = ops::batch_norm2d(x, gamma, beta, BnStats::Batch, eps)?;
                let s = x.shape();
                let count = (s[0] * s[2] * s[3]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mean: Vec<f64> = out.batch_mean.unwrap().iter().map(|v| v.as_f64()).collect();
                let var: Vec<f64> = out
                    .batch_var
                    .unwrap()
                    .iter()
                    .map(|v| v.as_f64() * unbias)
                    .collect();
                ctx.updates.push((bn.mean, mean));
                ctx.updates.push((bn.var, var));
                Ok(out.out)
            }
            Mode::Eval => {
                let mean = self.store.value(bn.mean).data();
                let var = self.store.value(bn.var).data();
                Ok(ops::batch_norm2d(x, gamma, beta, BnStats::Running { mean, var }, eps)?.out)
            }
        }
    }

    fn conv_bn<'t>(
        &self,
        unit: &ConvBn,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, T>> {
        let y = ops::conv2d(x, tape.param(&self.store, unit.conv), unit.geom)?;
        self.bn(&unit.bn, tape, y, ctx)
    }

    fn stage<'t>(
        &self,
        stage: &Stage,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t, T>> {
        match &stage.kind {
            StageKind::Plain { unit, pool } => {
                let y = ops::relu(self.conv_bn(unit, tape, x, ctx)?);
                match pool {
                    Some(p) => ops::max_pool2d(y, *p),
                    None => Ok(y),
                }
            }
            StageKind::Residual { a, b, shortcut } => {
                let y = ops::relu(self.conv_bn(a, tape, x, ctx)?);
                let y = self.conv_bn(b, tape, y, ctx)?;
                let skip = match shortcut {
                    Some(s) => self.conv_bn(s, tape, x, ctx)?,
                    None => x,
                };
                Ok(ops::relu(ops::add(y, skip)?))
            }
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ModelOutput<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, H, W] input, got {s:?}", self.spec.in_channels),
            ));
        }
        let mut h = x;
        let mut tapped = None;
        for (i, stage) in self.stages.iter().enumerate() {
            h = self.stage(stage, tape, h, ctx)?;
            if self.mix_after == Some(i) && ctx.mode == Mode::Train {
                if let (Some(cfg), Some(rng)) = (&self.spec.mixstyle, ctx.rng.as_deref_mut()) {
                    h = mixstyle(h, cfg, rng)?;
                }
            }
            if i == self.insertion {
                tapped = Some(h);
            }
        }
        let z = match &self.dida {
            Some(d) => fuse(h, d.residual(tape, &self.store, tapped.expect("insertion < stages"))?)?,
            None => h,
        };
        let zs = z.shape();
        let pooled = ops::reshape(ops::global_avg_pool(z)?, &[zs[0], zs[1]])?;
        let mut feat = pooled;
        if let Some(hd) = &self.hidden {
            feat = ops::relu(ops::linear(
                feat,
                tape.param(&self.store, hd.weight),
                Some(tape.param(&self.store, hd.bias)),
            )?);
        }
        let logits = ops::linear(
            feat,
            tape.param(&self.store, self.classifier.weight),
            Some(tape.param(&self.store, self.classifier.bias)),
        )?;
        Ok(ModelOutput { logits, z, pooled })
    }

    /// Fold the running-statistic updates of a train-mode forward into the
    /// batch-norm buffers (momentum `bn_momentum`).
    pub fn apply_updates(&mut self, updates: StatUpdates) {
        let m = self.spec.bn_momentum;
        for (id, batch) in updates.0 {
            let buf = self.store.value_mut(id);
            for (v, b) in buf.data_mut().iter_mut().zip(batch) {
                *v = T::from_f64_lossy((1.0 - m) * v.as_f64() + m * b);
            }
        }
    }

    /// Eval-mode logits and pooled features, in chunks of `batch` samples.
    pub fn infer(&self, x: &Tensor<T>, batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = x.shape()[0];
        let mut logits = Vec::new();
        let mut feats = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let tape = Tape::no_grad();
            let xin = tape.constant(x.slice_batch(start, end));
            let out = self.forward(&tape, xin, &mut ForwardCtx::eval())?;
            logits.push((*out.logits.value()).clone());
            feats.push((*out.pooled.value()).clone());
            start = end;
        }
        if logits.is_empty() {
            return Err(Error::EmptyDataset("inference input".into()));
        }
        Ok((Tensor::concat_batch(&logits)?, Tensor::concat_batch(&feats)?))
    }

    /// Trainable scalars whose name starts with `prefix` (`""` for all).
    pub fn count_params(&self, prefix: &str) -> usize {
        self.store.count(prefix)
    }

    /// Per-layer shapes, parameter counts and multiply-accumulates for an
    /// input of shape `[N, C, H, W]`.
    pub fn summary(&self, input: [usize; 4]) -> Result<Vec<LayerSummary>> {
        let [n, c0, h0, w0] = input;
        if c0 != self.spec.in_channels {
            return Err(Error::shape("summary", format!("input has {c0} channels")));
        }
        let mut rows = Vec::new();
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut tap = (0, 0);
        for (i, s) in self.stages.iter().enumerate() {
            s.summarize(n, h, w, &mut rows)?;
            (c, h, w) = s.out_shape(c, h, w)?;
            if i == self.insertion {
                tap = (h, w);
            }
        }
        if let Some(d) = &self.dida {
            rows.push(LayerSummary {
                name: "dida".into(),
                out_shape: vec![n, d.out_channels(), h, w],
                params: self.store.count("dida."),
                macs: d.macs(n, tap.0, tap.1),
            });
        }
        let mut linear = |name: &str, l: &Linear| {
            rows.push(LayerSummary {
                name: name.into(),
                out_shape: vec![n, l.dout],
                params: l.din * l.dout + l.dout,
                macs: (n * l.din * l.dout) as u64,
            });
        };
        if let Some(hd) = &self.hidden {
            linear("head.fc1", hd);
        }
        linear("classifier", &self.classifier);
        Ok(rows)
    }

    pub fn count_macs(&self, input: [usize; 4]) -> Result<u64> {
        Ok(self.summary(input)?.iter().map(|r| r.macs).sum())
    }
}

/// Prefixes that partition every parameter name of a model.
pub const PARAM_PREFIXES: [&str; 4] = ["backbone.", "dida.", "head.", "classifier."];
