//! Class-attention image transformer (CaiT-style) assembly.
//!
//! Two-stage architecture: a self-attention stage over patch tokens with
//! no class token, followed by a class-attention stage in which a single
//! learnable class embedding queries the frozen patch set. The classic
//! ViT layout (class token inserted with the patches) and average pooling
//! are available as alternative class policies for comparison runs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::blocks::{
    apply_strategy, attention_forward, ffn_forward, linear, sa_forward, AttentionRecord, AttnIds,
    FfnIds, LinearIds, ResidualStrategy, ScaleParam, Stage, StochasticDepthSchedule,
};
use crate::error::{CoreError, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor, TensorId};

/// How the class representation fed to the classifier is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsPolicy {
    /// Class token joins the patch tokens at SA layer `k` (ViT layout at
    /// `k = 0`, late insertion otherwise).
    InsertAtLayer(usize),
    /// No class token; the head sees the mean of the final patch tokens.
    AveragePooling,
    /// Dedicated class-attention stage over frozen patch tokens.
    ClassAttentionStage,
}

impl ClsPolicy {
    pub fn tag(&self) -> String {
        match self {
            ClsPolicy::InsertAtLayer(k) => format!("insert-at-{k}"),
            ClsPolicy::AveragePooling => "average-pooling".to_string(),
            ClsPolicy::ClassAttentionStage => "class-attention".to_string(),
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct CaitConfig {
    pub sa_depth: usize,
    pub ca_depth: usize,
    pub d: usize,
    pub heads: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub epsilon: f64,
    pub drop_rate: f64,
    pub cls_policy: ClsPolicy,
    pub keys_include_class: bool,
    pub layerscale_in_ca: bool,
    pub talking_heads_in_ca: bool,
    pub strategy: ResidualStrategy,
    /// Normalize branch inputs (pre-norm). Turned off only by the
    /// divergence-prone unadapted strategy variants.
    pub pre_norm: bool,
    pub ln_eps: f64,
}

impl CaitConfig {
    /// Dimensionality of one flattened input patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn total_depth(&self) -> usize {
        self.sa_depth + self.ca_depth
    }

    pub fn has_cls_token(&self) -> bool {
        !matches!(self.cls_policy, ClsPolicy::AveragePooling)
    }

    /// Depth notation like `24+2`.
    pub fn depth_tag(&self) -> String {
        format!("{}+{}", self.sa_depth, self.ca_depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sa_depth < 1 {
            return Err(CoreError::Config("sa_depth must be at least 1".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.patch_count < 1 {
            return Err(CoreError::Config("patch_count must be at least 1".into()));
        }
        if self.num_classes < 1 {
            return Err(CoreError::Config("num_classes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(CoreError::Config(format!(
                "drop_rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        match self.cls_policy {
            ClsPolicy::ClassAttentionStage => {
                if self.ca_depth < 1 {
                    return Err(CoreError::Config(
                        "class-attention policy needs ca_depth >= 1".into(),
                    ));
                }
            }
            ClsPolicy::InsertAtLayer(k) => {
                if self.ca_depth != 0 {
                    return Err(CoreError::Config(
                        "insert-at-layer policy requires ca_depth == 0".into(),
                    ));
                }
                if k >= self.sa_depth {
                    return Err(CoreError::Config(format!(
                        "insertion layer {k} must be below sa_depth {}",
                        self.sa_depth
                    )));
                }
            }
            ClsPolicy::AveragePooling => {
                if self.ca_depth != 0 {
                    return Err(CoreError::Config(
                        "average-pooling policy requires ca_depth == 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Desk-scale backbone: 64x64 single-channel images, 16 patches,
    /// width 64, 4 heads, two-class head, class-attention stage.
    pub fn toy(sa_depth: usize) -> Result<Self> {
        let epsilon = crate::blocks::default_epsilon(sa_depth)?;
        Ok(Self {
            sa_depth,
            ca_depth: 2,
            d: 64,
            heads: 4,
            patch_count: 16,
            patch_size: 16,
            in_channels: 1,
            num_classes: 2,
            epsilon,
            drop_rate: crate::blocks::default_drop_rate(sa_depth, 0.0)?,
            cls_policy: ClsPolicy::ClassAttentionStage,
            keys_include_class: true,
            layerscale_in_ca: true,
            talking_heads_in_ca: false,
            strategy: ResidualStrategy::layerscale(epsilon),
            pre_norm: true,
            ln_eps: 1e-6,
        })
    }
}

/// Published CaiT model family: (name, sa_depth, d, heads, drop rate,
/// layerscale init).
pub const PRESETS: &[(&str, usize, usize, usize, f64, f64)] = &[
    ("XXS-24", 24, 192, 4, 0.05, 1e-5),
    ("XXS-36", 36, 192, 4, 0.1, 1e-6),
    ("XS-24", 24, 288, 6, 0.05, 1e-5),
    ("XS-36", 36, 288, 6, 0.1, 1e-6),
    ("S-24", 24, 384, 8, 0.1, 1e-5),
    ("S-36", 36, 384, 8, 0.2, 1e-6),
    ("S-48", 48, 384, 8, 0.3, 1e-6),
    ("M-24", 24, 768, 16, 0.2, 1e-5),
    ("M-36", 36, 768, 16, 0.3, 1e-6),
    ("M-48", 48, 768, 16, 0.4, 1e-6),
];

/// Configuration of a published preset, at 224x224 input (196 patches),
/// 1000 classes. Head count satisfies `d = 48 * heads`.
pub fn model_preset(name: &str) -> Result<CaitConfig> {
    let wanted = name.to_ascii_uppercase();
    for &(preset, sa_depth, d, heads, drop_rate, epsilon) in PRESETS {
        if preset == wanted {
            debug_assert_eq!(d, 48 * heads);
            return Ok(CaitConfig {
                sa_depth,
                ca_depth: 2,
                d,
                heads,
                patch_count: 196,
                patch_size: 16,
                in_channels: 3,
                num_classes: 1000,
                epsilon,
                drop_rate,
                cls_policy: ClsPolicy::ClassAttentionStage,
                keys_include_class: true,
                layerscale_in_ca: true,
                talking_heads_in_ca: false,
                strategy: ResidualStrategy::layerscale(epsilon),
                pre_norm: true,
                ln_eps: 1e-6,
            });
        }
    }
    Err(CoreError::UnknownPreset(name.to_string()))
}

/// Parse `"12+2"` depth notation into `(sa_depth, ca_depth)`.
pub fn parse_depth_pair(s: &str) -> Result<(usize, usize)> {
    let err = || CoreError::Config(format!("bad depth spec `{s}`, expected like `12+2`"));
    let (sa, ca) = s.split_once('+').ok_or_else(err)?;
    Ok((
        sa.trim().parse().map_err(|_| err())?,
        ca.trim().parse().map_err(|_| err())?,
    ))
}

// ── model layout ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// One residual pair: attention branch + feed-forward branch.
#[derive(Debug, Clone, Copy)]
pub struct PairIds {
    pub norm1: Option<NormIds>,
    pub attn: AttnIds,
    pub scale1: ScaleParam,
    pub norm2: Option<NormIds>,
    pub ffn: FfnIds,
    pub scale2: ScaleParam,
}

#[derive(Debug, Clone)]
pub struct CaitModel {
    pub config: CaitConfig,
    pub store: ParamStore,
    pub patch_proj: LinearIds,
    pub pos_embed: ParamId,
    pub cls_token: Option<ParamId>,
    pub sa_pairs: Vec<PairIds>,
    pub ca_pairs: Vec<PairIds>,
    pub final_norm: NormIds,
    pub head: LinearIds,
}

#[derive(Clone, Copy)]
enum WInit {
    Normal(f64),
    XavierScaled(f64),
    Zero,
}

fn make_linear(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut SeedRng,
    init: WInit,
) -> LinearIds {
    let data = match init {
        WInit::Normal(std) => rng.normal_vec(din * dout, 0.0, std),
        WInit::XavierScaled(mult) => {
            let bound = mult * crate::math::sqrt(6.0 / (din + dout) as f64);
            rng.uniform_vec(din * dout, -bound, bound)
        }
        WInit::Zero => vec![0.0; din * dout],
    };
    let w = Tensor::from_vec(vec![din, dout], data).expect("sized init");
    LinearIds {
        w: store.add(format!("{name}.w"), w, true),
        b: store.add(format!("{name}.b"), Tensor::zeros(vec![dout]), true),
    }
}

fn make_norm(store: &mut ParamStore, name: &str, d: usize) -> NormIds {
    NormIds {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], 1.0), true),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d]), true),
    }
}

fn identity_mix(store: &mut ParamStore, name: &str, h: usize) -> ParamId {
    let mut data = vec![0.0; h * h];
    for i in 0..h {
        data[i * h + i] = 1.0;
    }
    store.add(
        name,
        Tensor::from_vec(vec![h, h], data).expect("square"),
        true,
    )
}

/// Per-branch weight init spec derived from the residual strategy. The
/// scalar schemes keep their published initialization rules: Fixup
/// downscales branch weights by depth^(-1/2) and zero-initializes the
/// branch output layers; T-Fixup uses Xavier init with value/output and
/// FFN weights shrunk by 0.67 * depth^(-1/4).
struct BranchInit {
    qk: WInit,
    v: WInit,
    o: WInit,
    fc1: WInit,
    fc2: WInit,
}

fn branch_init(strategy: &ResidualStrategy, total_depth: usize) -> BranchInit {
    const BASE_STD: f64 = 0.02;
    match strategy {
        ResidualStrategy::AdaptedFixup { .. } => {
            let shrink = 1.0 / crate::math::sqrt(total_depth as f64);
            BranchInit {
                qk: WInit::Normal(BASE_STD * shrink),
                v: WInit::Normal(BASE_STD * shrink),
                o: WInit::Zero,
                fc1: WInit::Normal(BASE_STD * shrink),
                fc2: WInit::Zero,
            }
        }
        ResidualStrategy::AdaptedTFixup { .. } => {
            let shrink = 0.67 * libm::pow(total_depth as f64, -0.25);
            BranchInit {
                qk: WInit::XavierScaled(1.0),
                v: WInit::XavierScaled(shrink),
                o: WInit::XavierScaled(shrink),
                fc1: WInit::XavierScaled(shrink),
                fc2: WInit::XavierScaled(shrink),
            }
        }
        _ => BranchInit {
            qk: WInit::Normal(BASE_STD),
            v: WInit::Normal(BASE_STD),
            o: WInit::Normal(BASE_STD),
            fc1: WInit::Normal(BASE_STD),
            fc2: WInit::Normal(BASE_STD),
        },
    }
}

impl CaitModel {
    pub fn init(config: CaitConfig, rng: &mut SeedRng) -> Result<Self> {
        Self::init_with_fixed_scales(config, None, rng)
    }

    /// Build a model; when `fixed_scales` is given, the strategy's
    /// channel-scaling diagonals are taken from it (keyed by parameter
    /// name) and frozen out of the trainable set.
    pub fn init_with_fixed_scales(
        config: CaitConfig,
        fixed_scales: Option<&BTreeMap<String, Vec<f64>>>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d;
        let binit = branch_init(&config.strategy, config.total_depth());

        let patch_proj = make_linear(
            &mut store,
            "patch_proj",
            config.patch_dim(),
            d,
            rng,
            WInit::Normal(0.02),
        );
        let pos = Tensor::from_vec(
            vec![config.patch_count, d],
            rng.normal_vec(config.patch_count * d, 0.0, 0.02),
        )?;
        let pos_embed = store.add("pos_embed", pos, true);
        let cls_token = config.has_cls_token().then(|| {
            store.add(
                "cls_token",
                Tensor::from_vec(vec![1, d], rng.normal_vec(d, 0.0, 0.02)).expect("cls"),
                true,
            )
        });

        let make_pair = |store: &mut ParamStore,
                             rng: &mut SeedRng,
                             prefix: &str,
                             talking_heads: bool,
                             scaled: bool|
         -> Result<PairIds> {
            let norm1 = config.pre_norm.then(|| make_norm(store, &format!("{prefix}.norm1"), d));
            let attn = AttnIds {
                q: make_linear(store, &format!("{prefix}.attn.q"), d, d, rng, binit.qk),
                k: make_linear(store, &format!("{prefix}.attn.k"), d, d, rng, binit.qk),
                v: make_linear(store, &format!("{prefix}.attn.v"), d, d, rng, binit.v),
                o: make_linear(store, &format!("{prefix}.attn.o"), d, d, rng, binit.o),
                mix_pre: talking_heads
                    .then(|| identity_mix(store, &format!("{prefix}.attn.mix_pre"), config.heads)),
                mix_post: talking_heads
                    .then(|| identity_mix(store, &format!("{prefix}.attn.mix_post"), config.heads)),
                heads: config.heads,
            };
            let scale1 = if scaled {
                let name = format!("{prefix}.scale1");
                let fixed = fixed_scales.and_then(|m| m.get(&name)).map(|v| v.as_slice());
                config.strategy.make_scale(store, &name, d, rng, fixed)?
            } else {
                ScaleParam::None
            };
            let norm2 = config.pre_norm.then(|| make_norm(store, &format!("{prefix}.norm2"), d));
            let ffn = FfnIds {
                fc1: make_linear(store, &format!("{prefix}.ffn.fc1"), d, 4 * d, rng, binit.fc1),
                fc2: make_linear(store, &format!("{prefix}.ffn.fc2"), 4 * d, d, rng, binit.fc2),
            };
            let scale2 = if scaled {
                let name = format!("{prefix}.scale2");
                let fixed = fixed_scales.and_then(|m| m.get(&name)).map(|v| v.as_slice());
                config.strategy.make_scale(store, &name, d, rng, fixed)?
            } else {
                ScaleParam::None
            };
            Ok(PairIds {
                norm1,
                attn,
                scale1,
                norm2,
                ffn,
                scale2,
            })
        };

        let mut sa_pairs = Vec::with_capacity(config.sa_depth);
        for l in 0..config.sa_depth {
            sa_pairs.push(make_pair(&mut store, rng, &format!("sa.{l}"), true, true)?);
        }
        let mut ca_pairs = Vec::with_capacity(config.ca_depth);
        for l in 0..config.ca_depth {
            ca_pairs.push(make_pair(
                &mut store,
                rng,
                &format!("ca.{l}"),
                config.talking_heads_in_ca,
                config.layerscale_in_ca,
            )?);
        }

        let final_norm = make_norm(&mut store, "final_norm", d);
        let head = make_linear(
            &mut store,
            "head",
            d,
            config.num_classes,
            rng,
            WInit::Normal(0.02),
        );

        Ok(Self {
            config,
            store,
            patch_proj,
            pos_embed,
            cls_token,
            sa_pairs,
            ca_pairs,
            final_norm,
            head,
        })
    }

    /// Names of the channel-scaling diagonal parameters, in layer order.
    pub fn scale_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for pairs in [&self.sa_pairs, &self.ca_pairs] {
            for pair in pairs.iter() {
                for scale in [&pair.scale1, &pair.scale2] {
                    if let ScaleParam::Diag(id) = scale {
                        names.push(self.store.get(*id).name.clone());
                    }
                }
            }
        }
        names
    }
}

// ── forward pass ────────────────────────────────────────────────────

/// Per-call forward options.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub record_attention: bool,
    pub trace: bool,
    pub rng: Option<&'r mut SeedRng>,
}

impl ForwardCtx<'_> {
    pub fn evaluation() -> Self {
        ForwardCtx {
            training: false,
            record_attention: false,
            trace: false,
            rng: None,
        }
    }
}

/// Which branch of a residual pair a trace row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Attention,
    Ffn,
}

impl BranchKind {
    /// CSV tag: attention branches are `sa`, feed-forward branches `ffn`.
    pub fn tag(&self) -> &'static str {
        match self {
            BranchKind::Attention => "sa",
            BranchKind::Ffn => "ffn",
        }
    }
}

/// Tape ids of one residual branch, captured for norm-ratio analysis.
#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    pub stage: Stage,
    pub layer: usize,
    pub branch: BranchKind,
    pub input: TensorId,
    pub weighted: TensorId,
}

pub struct ForwardOutput {
    /// `1 x num_classes` logits node.
    pub logits: TensorId,
    pub records: Vec<AttentionRecord>,
    pub branch_traces: Vec<BranchTrace>,
    /// Patch tokens right after projection + positional embedding.
    pub x0: TensorId,
    /// Token set at the end of the self-attention stage.
    pub sa_out: TensorId,
    /// The node the class-attention stage reads its patch keys from
    /// (always `sa_out`; patches are never rewritten by the CA stage).
    pub ca_input_patches: Option<TensorId>,
}

impl CaitModel {
    fn gate(&self, ctx: &mut ForwardCtx) -> Result<f64> {
        if !ctx.training || self.config.drop_rate == 0.0 {
            return Ok(1.0);
        }
        let sched = StochasticDepthSchedule::uniform(self.config.drop_rate)?;
        let rng = ctx.rng.as_deref_mut().ok_or_else(|| {
            CoreError::Config("training forward with stochastic depth needs an RNG".into())
        })?;
        Ok(sched.gate(rng, true))
    }

    #[allow(clippy::too_many_arguments)]
    fn residual_branch(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        ctx: &mut ForwardCtx,
        traces: &mut Vec<BranchTrace>,
        x: TensorId,
        branch_value: TensorId,
        scale: &ScaleParam,
        stage: Stage,
        layer: usize,
        kind: BranchKind,
    ) -> Result<TensorId> {
        let weighted = apply_strategy(tape, binding, scale, branch_value)?;
        if ctx.trace {
            traces.push(BranchTrace {
                stage,
                layer,
                branch: kind,
                input: x,
                weighted,
            });
        }
        let gate = self.gate(ctx)?;
        let gated = if gate == 1.0 {
            weighted
        } else {
            tape.scale_const(weighted, gate)?
        };
        tape.add(x, gated)
    }

    fn maybe_norm(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        norm: &Option<NormIds>,
        x: TensorId,
    ) -> Result<TensorId> {
        match norm {
            Some(n) => tape.layer_norm(x, binding.id(n.gamma), binding.id(n.beta), self.config.ln_eps),
            None => Ok(x),
        }
    }

    /// Run the model on one image's flattened patches (`p x patch_dim`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        patches: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if patches.rank() != 2
            || patches.rows() != cfg.patch_count
            || patches.cols() != cfg.patch_dim()
        {
            return Err(CoreError::ShapeMismatch {
                op: "forward",
                lhs: format!("{:?}", patches.shape()),
                rhs: format!("[{}, {}]", cfg.patch_count, cfg.patch_dim()),
            });
        }

        let mut records = Vec::new();
        let mut traces = Vec::new();

        let input = tape.constant(patches.clone())?;
        let projected = linear(tape, binding, &self.patch_proj, input)?;
        let x0 = tape.add(projected, binding.id(self.pos_embed))?;
        let mut tokens = x0;

        // Self-attention stage.
        for (l, pair) in self.sa_pairs.iter().enumerate() {
            if let ClsPolicy::InsertAtLayer(k) = cfg.cls_policy {
                if l == k {
                    let cls = binding.id(self.cls_token.expect("policy has cls"));
                    tokens = tape.concat_rows(&[cls, tokens])?;
                }
            }
            let normed = self.maybe_norm(tape, binding, &pair.norm1, tokens)?;
            let record = ctx
                .record_attention
                .then_some((Stage::SelfAttention, l));
            let (branch, rec) = sa_forward(tape, binding, &pair.attn, normed, record)?;
            if let Some(rec) = rec {
                records.push(rec);
            }
            tokens = self.residual_branch(
                tape,
                binding,
                ctx,
                &mut traces,
                tokens,
                branch,
                &pair.scale1,
                Stage::SelfAttention,
                l,
                BranchKind::Attention,
            )?;

            let normed = self.maybe_norm(tape, binding, &pair.norm2, tokens)?;
            let branch = ffn_forward(tape, binding, &pair.ffn, normed)?;
            tokens = self.residual_branch(
                tape,
                binding,
                ctx,
                &mut traces,
                tokens,
                branch,
                &pair.scale2,
                Stage::SelfAttention,
                l,
                BranchKind::Ffn,
            )?;
        }
        let sa_out = tokens;

        // Class policy.
        let (summary, ca_input_patches) = match cfg.cls_policy {
            ClsPolicy::InsertAtLayer(_) => (tape.slice_rows(tokens, 0, 1)?, None),
            ClsPolicy::AveragePooling => (tape.mean_rows(tokens)?, None),
            ClsPolicy::ClassAttentionStage => {
                let mut cls = binding.id(self.cls_token.expect("policy has cls"));
                let p = cfg.patch_count;
                for (l, pair) in self.ca_pairs.iter().enumerate() {
                    let layer = cfg.sa_depth + l;
                    // Branch norm covers the class token and the (frozen)
                    // patch tokens it attends to.
                    let (q_src, keys) = if cfg.pre_norm {
                        let joint = tape.concat_rows(&[cls, sa_out])?;
                        let normed = self.maybe_norm(tape, binding, &pair.norm1, joint)?;
                        let q_src = tape.slice_rows(normed, 0, 1)?;
                        let patches_n = tape.slice_rows(normed, 1, p)?;
                        let keys = if cfg.keys_include_class {
                            tape.concat_rows(&[q_src, patches_n])?
                        } else {
                            patches_n
                        };
                        (q_src, keys)
                    } else {
                        let keys = if cfg.keys_include_class {
                            tape.concat_rows(&[cls, sa_out])?
                        } else {
                            sa_out
                        };
                        (cls, keys)
                    };
                    let record = ctx
                        .record_attention
                        .then_some((Stage::ClassAttention, layer));
                    let (branch, rec) =
                        attention_forward(tape, binding, &pair.attn, q_src, keys, record)?;
                    if let Some(rec) = rec {
                        records.push(rec);
                    }
                    cls = self.residual_branch(
                        tape,
                        binding,
                        ctx,
                        &mut traces,
                        cls,
                        branch,
                        &pair.scale1,
                        Stage::ClassAttention,
                        layer,
                        BranchKind::Attention,
                    )?;

                    let normed = self.maybe_norm(tape, binding, &pair.norm2, cls)?;
                    let branch = ffn_forward(tape, binding, &pair.ffn, normed)?;
                    cls = self.residual_branch(
                        tape,
                        binding,
                        ctx,
                        &mut traces,
                        cls,
                        branch,
                        &pair.scale2,
                        Stage::ClassAttention,
                        layer,
                        BranchKind::Ffn,
                    )?;
                }
                (cls, Some(sa_out))
            }
        };

        let normed = tape.layer_norm(
            summary,
            binding.id(self.final_norm.gamma),
            binding.id(self.final_norm.beta),
            cfg.ln_eps,
        )?;
        let logits = linear(tape, binding, &self.head, normed)?;

        Ok(ForwardOutput {
            logits,
            records,
            branch_traces: traces,
            x0,
            sa_out,
            ca_input_patches,
        })
    }

    /// Evaluation-mode forward returning logits values and any attention
    /// records. Reentrant: every call builds its own tape.
    pub fn infer(&self, patches: &Tensor, record: bool) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape)?;
        let mut ctx = ForwardCtx {
            record_attention: record,
            ..ForwardCtx::evaluation()
        };
        let out = self.forward(&mut tape, &binding, patches, &mut ctx)?;
        Ok((tape.value(out.logits).data().to_vec(), out.records))
    }
}

/// Class-attention residual branch on explicit class/patch tensors.
///
/// `z` is the class token prepended to the patches when
/// `keys_include_class` is set, otherwise the patches alone. Returns the
/// branch value for the class token and the attention record; the patch
/// tokens are left untouched.
pub fn ca_forward(
    tape: &mut Tape,
    binding: &Binding,
    layer: &AttnIds,
    x_class: TensorId,
    x_patches: TensorId,
    keys_include_class: bool,
    layer_index: usize,
) -> Result<(TensorId, AttentionRecord)> {
    let keys = if keys_include_class {
        tape.concat_rows(&[x_class, x_patches])?
    } else {
        x_patches
    };
    let (out, rec) = attention_forward(
        tape,
        binding,
        layer,
        x_class,
        keys,
        Some((Stage::ClassAttention, layer_index)),
    )?;
    Ok((out, rec.expect("record requested")))
}

// ── accounting ──────────────────────────────────────────────────────

/// Trainable-parameter breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub patch_proj: usize,
    pub pos_embed: usize,
    pub cls_token: usize,
    pub sa_stage: usize,
    pub ca_stage: usize,
    pub final_norm: usize,
    pub head: usize,
    pub per_sa_pair: usize,
    pub per_ca_pair: usize,
    /// Attention-layer parameters alone (projections + biases), i.e.
    /// without talking-heads mixing matrices. Identical across stages.
    pub attn_layer_params: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.patch_proj
            + self.pos_embed
            + self.cls_token
            + self.sa_stage
            + self.ca_stage
            + self.final_norm
            + self.head
    }
}

fn scale_params_per_pair(strategy: &ResidualStrategy, d: usize) -> usize {
    match strategy {
        ResidualStrategy::PreNormBaseline => 0,
        ResidualStrategy::AdaptedReZero { .. }
        | ResidualStrategy::AdaptedFixup { .. }
        | ResidualStrategy::AdaptedTFixup { .. } => 2,
        ResidualStrategy::LayerScale { init } => match init {
            // Frozen diagonals are not trainable parameters.
            crate::blocks::LayerScaleInit::Fixed => 0,
            _ => 2 * d,
        },
    }
}

/// Exact trainable-parameter count for a configuration.
pub fn count_params(config: &CaitConfig) -> ParamCounts {
    let d = config.d;
    let h = config.heads;
    let attn = 4 * (d * d + d);
    let ffn = (d * 4 * d + 4 * d) + (4 * d * d + d);
    let norms = if config.pre_norm { 2 * 2 * d } else { 0 };

    let sa_pair = attn + 2 * h * h + ffn + norms + scale_params_per_pair(&config.strategy, d);
    let ca_scale = if config.layerscale_in_ca {
        scale_params_per_pair(&config.strategy, d)
    } else {
        0
    };
    let ca_mix = if config.talking_heads_in_ca { 2 * h * h } else { 0 };
    let ca_pair = attn + ca_mix + ffn + norms + ca_scale;

    ParamCounts {
        patch_proj: config.patch_dim() * d + d,
        pos_embed: config.patch_count * d,
        cls_token: if config.has_cls_token() { d } else { 0 },
        sa_stage: config.sa_depth * sa_pair,
        ca_stage: config.ca_depth * ca_pair,
        final_norm: 2 * d,
        head: d * config.num_classes + config.num_classes,
        per_sa_pair: sa_pair,
        per_ca_pair: ca_pair,
        attn_layer_params: attn,
    }
}

/// Multiply-accumulate counts of one residual pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFlops {
    pub stage: Stage,
    pub layer: usize,
    /// Q/K/V/O projection cost.
    pub projections: u64,
    /// Attention scores, head mixing, and value aggregation; the part
    /// that is quadratic in tokens for SA and linear for CA.
    pub attention: u64,
    pub ffn: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.ffn
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopCounts {
    pub patch_proj: u64,
    pub head: u64,
    pub layers: Vec<LayerFlops>,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.patch_proj + self.head + self.layers.iter().map(|l| l.total()).sum::<u64>()
    }

    pub fn stage_total(&self, stage: Stage) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.stage == stage)
            .map(|l| l.total())
            .sum()
    }

    pub fn stage_attention(&self, stage: Stage) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.stage == stage)
            .map(|l| l.attention)
            .sum()
    }
}

/// Multiply-accumulate estimate of one forward pass at the given square
/// input resolution. Counts matrix products only (the convention under
/// which the published model-family numbers are quoted).
pub fn count_flops(config: &CaitConfig, resolution: usize) -> Result<FlopCounts> {
    if resolution == 0 || resolution % config.patch_size != 0 {
        return Err(CoreError::Config(format!(
            "resolution {resolution} not divisible by patch size {}",
            config.patch_size
        )));
    }
    let grid = resolution / config.patch_size;
    count_flops_for_patches(config, grid * grid)
}

/// [`count_flops`] at an explicit patch count.
pub fn count_flops_for_patches(config: &CaitConfig, patches: usize) -> Result<FlopCounts> {
    if patches == 0 {
        return Err(CoreError::Config("patch count must be positive".into()));
    }
    let p = patches as u64;
    let d = config.d as u64;
    let h = config.heads as u64;

    let mut layers = Vec::new();
    for l in 0..config.sa_depth {
        let mut t = p;
        if let ClsPolicy::InsertAtLayer(k) = config.cls_policy {
            if l >= k {
                t = p + 1;
            }
        }
        let mixes = 2 * t * t * h * h;
        layers.push(LayerFlops {
            stage: Stage::SelfAttention,
            layer: l,
            projections: 4 * t * d * d,
            attention: 2 * t * t * d + mixes,
            ffn: 8 * t * d * d,
        });
    }
    for l in 0..config.ca_depth {
        let z = p + u64::from(config.keys_include_class);
        let mixes = if config.talking_heads_in_ca {
            2 * z * h * h
        } else {
            0
        };
        layers.push(LayerFlops {
            stage: Stage::ClassAttention,
            layer: config.sa_depth + l,
            projections: (2 * z + 2) * d * d,
            attention: 2 * z * d + mixes,
            ffn: 8 * d * d,
        });
    }

    Ok(FlopCounts {
        patch_proj: p * config.patch_dim() as u64 * d,
        head: d * config.num_classes as u64,
        layers,
    })
}

// ── LayerScale fold-in ──────────────────────────────────────────────

fn fold_diag_into(store: &mut ParamStore, out: &LinearIds, diag: &[f64]) {
    let w = &mut store.get_mut(out.w).value;
    let dout = w.cols();
    debug_assert_eq!(dout, diag.len());
    for row in w.data_mut().chunks_mut(dout) {
        for (v, lam) in row.iter_mut().zip(diag) {
            *v *= lam;
        }
    }
    for (v, lam) in store.get_mut(out.b).value.data_mut().iter_mut().zip(diag) {
        *v *= lam;
    }
}

impl CaitModel {
    /// Fold the learned per-channel diagonals into the branch output
    /// projections and drop the scaling, yielding a pre-norm baseline
    /// model that implements the same function.
    pub fn fold_layerscale(&self) -> Result<CaitModel> {
        if !self.config.strategy.is_layerscale() {
            return Err(CoreError::Config(
                "fold-in requires a LayerScale strategy".into(),
            ));
        }
        let mut cfg = self.config.clone();
        cfg.strategy = ResidualStrategy::PreNormBaseline;
        let mut folded = CaitModel::init(cfg, &mut SeedRng::new(0, crate::rng::streams::MODEL_INIT))?;

        // Copy every shared parameter by name.
        for (_, p) in folded.store.iter_mut() {
            if let Some(src) = self.store.find(&p.name) {
                p.value = self.store.get(src).value.clone();
                p.value.grad = None;
            }
        }

        // Fold λ into the output projections of each scaled pair.
        let jobs: Vec<(PairIds, PairIds)> = self
            .sa_pairs
            .iter()
            .copied()
            .zip(folded.sa_pairs.iter().copied())
            .chain(
                self.ca_pairs
                    .iter()
                    .copied()
                    .zip(folded.ca_pairs.iter().copied()),
            )
            .collect();
        for (src_pair, dst_pair) in jobs {
            if let ScaleParam::Diag(id) = src_pair.scale1 {
                let diag = self.store.get(id).value.data().to_vec();
                fold_diag_into(&mut folded.store, &dst_pair.attn.o, &diag);
            }
            if let ScaleParam::Diag(id) = src_pair.scale2 {
                let diag = self.store.get(id).value.data().to_vec();
                fold_diag_into(&mut folded.store, &dst_pair.ffn.fc2, &diag);
            }
        }
        Ok(folded)
    }
}
