//! CLI-level preset and strategy resolution.
//!
//! Besides the published model family, desk-scale `toy-N` presets run the
//! same architecture at width 64 on 64x64 single-channel synthetic
//! images, and `<name>-like` presets put a published preset's depth and
//! hyper-parameters on the toy backbone so its schedule can actually be
//! exercised on a desk.

use cait_core::blocks::{self, LayerScaleInit, ResidualStrategy};
use cait_core::cait::{model_preset, CaitConfig, ClsPolicy};

use crate::{LabError, Result};

/// Resolve a preset name: `toy-12|toy-24|toy-36`, a published name like
/// `s-36` (case-insensitive, `s36` also accepted), or `<published>-like`
/// for the toy-backbone variant carrying that preset's depth, epsilon,
/// and drop rate.
pub fn resolve_preset(name: &str) -> Result<CaitConfig> {
    let lower = name.to_ascii_lowercase();
    if let Some(depth) = lower.strip_prefix("toy-") {
        let depth: usize = depth
            .parse()
            .map_err(|_| LabError::Usage(format!("bad toy preset `{name}`")))?;
        return Ok(CaitConfig::toy(depth)?);
    }
    if let Some(paper) = lower.strip_prefix("paper:") {
        return Ok(model_preset(paper)?);
    }
    if let Some(base) = lower.strip_suffix("-like") {
        let reference = model_preset(&normalize_family_name(base))?;
        let mut cfg = CaitConfig::toy(reference.sa_depth)?;
        cfg.epsilon = reference.epsilon;
        cfg.drop_rate = reference.drop_rate;
        cfg.strategy = ResidualStrategy::layerscale(reference.epsilon);
        return Ok(cfg);
    }
    Ok(model_preset(&normalize_family_name(&lower))?)
}

/// Accept `s36` as well as `s-36`.
fn normalize_family_name(name: &str) -> String {
    if name.contains('-') {
        return name.to_string();
    }
    let split = name.find(|c: char| c.is_ascii_digit());
    match split {
        Some(i) if i > 0 => format!("{}-{}", &name[..i], &name[i..]),
        _ => name.to_string(),
    }
}

/// All strategy names the CLI accepts. The `-original` forms drop the
/// branch normalization and warmup and are known to be divergence-prone;
/// they are only available behind `--allow-divergent`.
pub const STRATEGY_NAMES: &[&str] = &[
    "baseline",
    "rezero-adapted",
    "fixup-adapted",
    "tfixup-adapted",
    "layerscale",
    "layerscale-zero",
    "layerscale-uniform",
    "rezero-original",
    "fixup-original",
    "tfixup-original",
];

/// Parse a strategy name. `epsilon` feeds the init value: the channel
/// init for LayerScale variants, or the scalar init for the adapted
/// schemes (so `--strategy rezero-adapted --epsilon 0.1` starts the
/// scalars at 0.1). Returns the strategy and whether branch inputs stay
/// normalized.
pub fn parse_strategy(
    name: &str,
    epsilon: f64,
    epsilon_explicit: bool,
    allow_divergent: bool,
) -> Result<(ResidualStrategy, bool)> {
    let scalar = |default: f64| if epsilon_explicit { epsilon } else { default };
    let (strategy, pre_norm) = match name {
        "baseline" => (ResidualStrategy::PreNormBaseline, true),
        "rezero-adapted" => (
            ResidualStrategy::AdaptedReZero {
                alpha0: scalar(0.0),
            },
            true,
        ),
        "fixup-adapted" => (
            ResidualStrategy::AdaptedFixup {
                alpha0: scalar(1.0),
            },
            true,
        ),
        "tfixup-adapted" => (
            ResidualStrategy::AdaptedTFixup {
                alpha0: scalar(1.0),
            },
            true,
        ),
        "layerscale" => (ResidualStrategy::layerscale(epsilon), true),
        "layerscale-zero" => (
            ResidualStrategy::LayerScale {
                init: LayerScaleInit::Zero,
            },
            true,
        ),
        "layerscale-uniform" => (
            ResidualStrategy::LayerScale {
                init: LayerScaleInit::Uniform(epsilon),
            },
            true,
        ),
        "rezero-original" => (
            ResidualStrategy::AdaptedReZero {
                alpha0: scalar(0.0),
            },
            false,
        ),
        "fixup-original" => (
            ResidualStrategy::AdaptedFixup {
                alpha0: scalar(1.0),
            },
            false,
        ),
        "tfixup-original" => (
            ResidualStrategy::AdaptedTFixup {
                alpha0: scalar(1.0),
            },
            false,
        ),
        other => {
            return Err(LabError::Usage(format!(
                "unknown strategy `{other}` (expected one of {})",
                STRATEGY_NAMES.join(", ")
            )))
        }
    };
    if !pre_norm && !allow_divergent {
        return Err(LabError::Usage(format!(
            "strategy `{name}` removes branch normalization and warmup and \
             usually does not converge; pass --allow-divergent to run it anyway"
        )));
    }
    Ok((strategy, pre_norm))
}

/// Parse `--cls-policy`: `class-attention`, `average-pooling`, or
/// `insert-at-<k>`.
pub fn parse_cls_policy(name: &str) -> Result<ClsPolicy> {
    if name == "class-attention" {
        return Ok(ClsPolicy::ClassAttentionStage);
    }
    if name == "average-pooling" {
        return Ok(ClsPolicy::AveragePooling);
    }
    if let Some(k) = name.strip_prefix("insert-at-") {
        let k = k
            .parse()
            .map_err(|_| LabError::Usage(format!("bad insertion layer in `{name}`")))?;
        return Ok(ClsPolicy::InsertAtLayer(k));
    }
    Err(LabError::Usage(format!(
        "unknown cls policy `{name}` (class-attention | average-pooling | insert-at-<k>)"
    )))
}

/// Apply a policy override to a preset, fixing up the class-attention
/// depth so the combination stays valid.
pub fn apply_cls_policy(cfg: &mut CaitConfig, policy: ClsPolicy) {
    cfg.cls_policy = policy;
    match policy {
        ClsPolicy::ClassAttentionStage => {
            if cfg.ca_depth == 0 {
                cfg.ca_depth = 2;
            }
        }
        _ => cfg.ca_depth = 0,
    }
}

/// Default epsilon for a config when the flag is omitted.
pub fn default_epsilon_for(cfg: &CaitConfig) -> Result<f64> {
    Ok(blocks::default_epsilon(cfg.sa_depth)?)
}
