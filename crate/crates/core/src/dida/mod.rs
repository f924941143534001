//! The dynamic instance adaptation module.
//!
//! A shared 1x1 convolution (`reduce`) squeezes the tapped feature map from
//! `c` to `c/m` channels. Each branch owns a kernel generator that turns the
//! globally pooled input into a per-sample depthwise filter bank; the bank is
//! applied to the reduced features with the branch's dilation. A shared 1x1
//! convolution (`expand`) lifts every branch back up and the branch outputs
//! are concatenated into a residual with `out_channels` channels, which is
//! added to the static branch output.
//!
//! The module has no bias terms and no normalisation, so each sample's
//! residual depends on that sample alone.

pub mod mixstyle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::param::{ParamId, ParamStore};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{ops, Float, Tape, Tensor, Var};

pub use mixstyle::{mixstyle, MixStyleConfig};

/// How each branch obtains its depthwise kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Kernels generated from the input, one bank per sample.
    #[default]
    Dynamic,
    /// One learned depthwise kernel per branch, shared by all samples.
    StaticCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DidaConfig {
    /// Channels of the tapped feature map; filled in by the backbone when unset.
    pub in_channels: Option<usize>,
    /// Channel reduction rate `m`.
    pub reduction: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub share_reduction: bool,
    pub generator_mode: GeneratorMode,
    /// Residual channels; defaults to the static branch's output channels.
    pub out_channels: Option<usize>,
    /// Spatial stride of the lifting convolution, for static branches that
    /// downsample. Filled in by the backbone.
    pub stride: usize,
}

impl Default for DidaConfig {
    fn default() -> Self {
        DidaConfig {
            in_channels: None,
            reduction: 16,
            dilations: vec![1, 2],
            kernel_size: 3,
            share_reduction: true,
            generator_mode: GeneratorMode::Dynamic,
            out_channels: None,
            stride: 1,
        }
    }
}

impl DidaConfig {
    pub fn with_channels(in_channels: usize, out_channels: usize) -> Self {
        DidaConfig {
            in_channels: Some(in_channels),
            out_channels: Some(out_channels),
            ..Default::default()
        }
    }

    fn resolved(&self) -> Result<(usize, usize)> {
        let c = self
            .in_channels
            .ok_or_else(|| Error::Config("dida.in_channels is unresolved".into()))?;
        Ok((c, self.out_channels.unwrap_or(c)))
    }

    pub fn validate(&self) -> Result<()> {
        let (c, out) = self.resolved()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.reduction == 0 || c == 0 || c % self.reduction != 0 {
            return bad(format!(
                "in_channels {c} must be divisible by reduction {}",
                self.reduction
            ));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad(format!("dilations must be non-empty and positive, got {:?}", self.dilations));
        }
        if out == 0 || out % self.dilations.len() != 0 {
            return bad(format!(
                "out_channels {out} must be divisible by the {} branches",
                self.dilations.len()
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        Ok(())
    }

    pub fn reduced_channels(&self) -> usize {
        self.in_channels.unwrap_or(0) / self.reduction.max(1)
    }

    /// Closed-form trainable parameter count of the module.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let (c, out) = self.resolved()?;
        let r = c / self.reduction;
        let b = self.dilations.len();
        let k2 = self.kernel_size * self.kernel_size;
        let per_branch = match self.generator_mode {
            GeneratorMode::Dynamic => k2 + if self.share_reduction { 0 } else { c * r },
            GeneratorMode::StaticCnn => r * k2,
        };
        Ok(c * r + b * per_branch + r * (out / b))
    }
}

enum BranchKernel {
    Dynamic {
        reduce: Option<ParamId>,
        generator: ParamId,
    },
    Static {
        kernel: ParamId,
    },
}

struct Branch {
    dilation: usize,
    kernel: BranchKernel,
}

/// Per-sample depthwise filter bank `[N, c/m, k, k]`.
pub struct DynamicKernels<'t, T> {
    pub bank: Var<'t, T>,
}

pub struct DidaModule {
    cfg: DidaConfig,
    in_channels: usize,
    out_channels: usize,
    reduce: ParamId,
    branches: Vec<Branch>,
    expand: ParamId,
}

impl DidaModule {
    /// Register the module's parameters under `prefix` (e.g. `"dida"`).
    ///
    /// Initialisation: reduction convolutions Kaiming-uniform, generators and
    /// static kernels Kaiming-uniform scaled by 0.1, the lifting convolution
    /// zero so the module starts as an exact no-op.
    pub fn new<T: Float>(
        cfg: DidaConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, out) = cfg.resolved()?;
        let r = c / cfg.reduction;
        let k = cfg.kernel_size;
        let b = cfg.dilations.len();
        let reduce = store.add_param(
            &format!("{prefix}.reduce.weight"),
            init::kaiming_uniform([r, c, 1, 1], c, 1.0, rng),
        )?;
        let mut branches = Vec::with_capacity(b);
        for (i, &d) in cfg.dilations.iter().enumerate() {
            let kernel = match cfg.generator_mode {
                GeneratorMode::Dynamic => {
                    let reduce = if cfg.share_reduction {
                        None
                    } else {
                        Some(store.add_param(
                            &format!("{prefix}.generator.{i}.reduce.weight"),
                            init::kaiming_uniform([r, c, 1, 1], c, 1.0, rng),
                        )?)
                    };
                    let generator = store.add_param(
                        &format!("{prefix}.generator.{i}.weight"),
                        init::kaiming_uniform([k * k, 1, 1, 1], 1, 0.1, rng),
                    )?;
                    BranchKernel::Dynamic { reduce, generator }
                }
                GeneratorMode::StaticCnn => BranchKernel::Static {
                    kernel: store.add_param(
                        &format!("{prefix}.branch.{i}.kernel"),
                        init::kaiming_uniform([r, 1, k, k], k * k, 0.1, rng),
                    )?,
                },
            };
            branches.push(Branch { dilation: d, kernel });
        }
        let expand = store.add_param(
            &format!("{prefix}.expand.weight"),
            Tensor::zeros([out / b, r, 1, 1]),
        )?;
        Ok(DidaModule {
            cfg,
            in_channels: c,
            out_channels: out,
            reduce,
            branches,
            expand,
        })
    }

    pub fn config(&self) -> &DidaConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn expand_id(&self) -> ParamId {
        self.expand
    }

    pub fn reduce_id(&self) -> ParamId {
        self.reduce
    }

    fn check_input<T: Float>(&self, x: &Var<'_, T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "dida",
                format!("expected [N, {}, H, W], got {s:?}", self.in_channels),
            ));
        }
        Ok(())
    }

    /// `F = reduce(x)`: `[N, c, h, w] -> [N, c/m, h, w]`.
    pub fn reduce_channels<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        ops::conv2d(x, tape.param(store, self.reduce), ConvGeom::default())
    }

    /// Kernel generation for `branch`: global average pool, channel
    /// reduction, axis swap, 1x1 expansion to `k*k` elements, swap back and
    /// reshape to `[N, c/m, k, k]`.
    pub fn generate_kernels<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        branch: usize,
    ) -> Result<DynamicKernels<'t, T>> {
        self.check_input(&x)?;
        let b = self
            .branches
            .get(branch)
            .ok_or_else(|| Error::InvalidArgument(format!("no branch {branch}")))?;
        let BranchKernel::Dynamic { reduce, generator } = &b.kernel else {
            return Err(Error::InvalidArgument(format!(
                "branch {branch} uses a static kernel"
            )));
        };
        let pooled = ops::global_avg_pool(x)?;
        let reduce = reduce.unwrap_or(self.reduce);
        let reduced = ops::conv2d(pooled, tape.param(store, reduce), ConvGeom::default())?;
        self.expand_to_kernels(tape, store, reduced, *generator)
            .map(|bank| DynamicKernels { bank })
    }

    fn expand_to_kernels<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        reduced: Var<'t, T>,
        generator: ParamId,
    ) -> Result<Var<'t, T>> {
        // [N, r, 1, 1] -> [N, 1, 1, r]: the r reduced values become the width axis
        let n = reduced.shape()[0];
        let r = self.cfg.reduced_channels();
        let k = self.cfg.kernel_size;
        let swapped = ops::swap_axes(reduced, 1, 3)?;
        let grown = ops::conv2d(swapped, tape.param(store, generator), ConvGeom::default())?;
        // [N, k*k, 1, r] -> [N, r, 1, k*k] -> [N, r, k, k]
        let back = ops::swap_axes(grown, 1, 3)?;
        ops::reshape(back, &[n, r, k, k])
    }

    /// The dynamic residual `[N, out_channels, h', w']`.
    pub fn residual<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = x.shape()[0];
        let features = self.reduce_channels(tape, store, x)?;
        // shared reduction: pool once, reuse for every generator
        let mut shared_pooled = None;
        let expand = tape.param(store, self.expand);
        let lift = ConvGeom::new(self.cfg.stride, 0, 1);
        let mut outs = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter().enumerate() {
            let bank = match &b.kernel {
                BranchKernel::Dynamic {
                    reduce: None,
                    generator,
                } => {
                    let reduced = match shared_pooled {
                        Some(v) => v,
                        None => {
                            let pooled = ops::global_avg_pool(x)?;
                            let v = ops::conv2d(
                                pooled,
                                tape.param(store, self.reduce),
                                ConvGeom::default(),
                            )?;
                            shared_pooled = Some(v);
                            v
                        }
                    };
                    self.expand_to_kernels(tape, store, reduced, *generator)?
                }
                BranchKernel::Dynamic { reduce: Some(_), .. } => {
                    self.generate_kernels(tape, store, x, i)?.bank
                }
                BranchKernel::Static { kernel } => {
                    ops::broadcast_batch(tape.param(store, *kernel), n)?
                }
            };
            let pad = b.dilation * (self.cfg.kernel_size - 1) / 2;
            let o = ops::depthwise_conv2d_per_sample(features, bank, pad, b.dilation)?;
            outs.push(ops::conv2d(o, expand, lift)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            ops::concat_channels(&outs)
        }
    }

    /// Trainable scalars actually registered.
    pub fn param_count<T: Float>(&self, store: &ParamStore<T>, prefix: &str) -> usize {
        store.count(&format!("{prefix}."))
    }

    /// Multiply-accumulates for a batch of `n` inputs of spatial size `h x w`.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (c, out) = (self.in_channels as u64, self.out_channels as u64);
        let r = self.cfg.reduced_channels() as u64;
        let k2 = (self.cfg.kernel_size * self.cfg.kernel_size) as u64;
        let b = self.branches.len() as u64;
        let (n, hw) = (n as u64, (h * w) as u64);
        let s = self.cfg.stride;
        let hw_out = (((h - 1) / s + 1) * ((w - 1) / s + 1)) as u64;
        let mut total = n * r * hw * c; // reduce
        let mut pooled_shared = false;
        for br in &self.branches {
            match br.kernel {
                BranchKernel::Dynamic { reduce, .. } => {
                    if reduce.is_some() || !pooled_shared {
                        total += n * r * c;
                        pooled_shared |= reduce.is_none();
                    }
                    total += n * k2 * r;
                }
                BranchKernel::Static { .. } => {}
            }
            total += n * r * hw * k2; // depthwise
        }
        total += b * n * (out / b) * hw_out * r; // expand
        total
    }
}

/// `Z = static_out + residual`, elementwise.
pub fn fuse<'t, T: Float>(static_out: Var<'t, T>, residual: Var<'t, T>) -> Result<Var<'t, T>> {
    let (a, b) = (static_out.shape(), residual.shape());
    if a != b {
        return Err(Error::shape(
            "fuse",
            format!("static branch {a:?} vs residual {b:?}"),
        ));
    }
    ops::add(static_out, residual)
}
