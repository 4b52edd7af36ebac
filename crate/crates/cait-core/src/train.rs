//! Desk-scale training harness: AdamW with decoupled weight decay, linear
//! warmup into cosine decay, cross-entropy with optional label smoothing,
//! and divergence detection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::analysis::{branch_ratios, BranchRatioSeries};
use crate::blocks::{LayerScaleInit, ResidualStrategy};
use crate::cait::{CaitConfig, CaitModel, ForwardCtx};
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::{streams, RngState, SeedRng};
use crate::tensor::Tape;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// A step loss above this multiple of the first epoch's mean loss
    /// flags the run as diverged.
    pub divergence_factor: f64,
    /// Record a branch-ratio snapshot every this many epochs (0 = never;
    /// the final epoch is always captured when non-zero).
    pub snapshot_period: usize,
}

impl TrainConfig {
    /// Desk-scale defaults mirroring the usual transformer recipe
    /// (AdamW lr 1e-3, cosine schedule, warmup, weight decay 0.05).
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_epochs: 1,
            weight_decay: 0.05,
            seed,
            label_smoothing: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            divergence_factor: 10.0,
            snapshot_period: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(CoreError::Config("base_lr must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(CoreError::Config("label_smoothing outside [0, 1)".into()));
        }
        Ok(())
    }
}

// ── learning-rate schedule ──────────────────────────────────────────

/// Linear ramp `0 -> base_lr` over the warmup, then cosine decay to a
/// floor of `1e-6 * base_lr`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    if warmup_steps > 0 && step <= warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let floor = 1e-6 * base_lr;
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return floor;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    floor + (base_lr - floor) * 0.5 * (1.0 + math::cos(math::PI * progress))
}

// ── AdamW ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. State exists only for trainable
/// parameters; frozen ones are invisible to the optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    slots: Vec<Option<AdamSlot>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| AdamSlot {
                    m: vec![0.0; p.value.numel()],
                    v: vec![0.0; p.value.numel()],
                })
            })
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            slots,
        }
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.slots
            .get(id.index())
            .map(|s| s.is_some())
            .unwrap_or(false)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every trainable parameter's `grad` buffer. Aborts
    /// (before touching any parameter) if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = p.value.grad.as_ref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::NonFiniteGradient {
                        param: p.name.clone(),
                    });
                }
            }
        }

        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (id, p) in store.iter_mut() {
            let Some(slot) = self.slots[id.index()].as_mut() else {
                continue;
            };
            let (data, grad) = p.value.update_view();
            let Some(grad) = grad else {
                continue;
            };
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= lr * (mhat / (math::sqrt(vhat) + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

// ── training loop ───────────────────────────────────────────────────

/// Per-epoch branch-ratio probe.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSnapshot {
    pub epoch: usize,
    pub series: BranchRatioSeries,
}

/// Everything a run produces besides the trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub step_loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
    pub ratio_snapshots: Vec<RatioSnapshot>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Training-stream RNG position at the end of the run, for
    /// checkpointing.
    pub rng_state: RngState,
}

fn smoothed_target(classes: usize, label: usize, smoothing: f64) -> Vec<f64> {
    let mut t = vec![smoothing / classes as f64; classes];
    t[label] += 1.0 - smoothing;
    t
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Train `model` in place. Deterministic for a fixed seed; divergence
/// (non-finite loss, or a step loss beyond the configured multiple of the
/// first epoch's mean) stops the run and flags the report.
pub fn train_run(model: &mut CaitModel, cfg: &TrainConfig, data: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if data.num_classes != model.config.num_classes {
        return Err(CoreError::Config(format!(
            "dataset has {} classes, model head expects {}",
            data.num_classes, model.config.num_classes
        )));
    }

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    // The scalar-weighting schemes originally drop the warmup; the adapted
    // forms used here retain it, so only the explicitly un-normalized
    // variants train cold.
    let warmup_steps = if model.config.pre_norm {
        cfg.warmup_epochs * steps_per_epoch
    } else {
        0
    };

    let mut train_rng = SeedRng::new(cfg.seed, streams::TRAIN);
    let mut optimizer = AdamW::new(&model.store, cfg);
    let probe: Vec<_> = (0..data.len().min(cfg.batch_size))
        .map(|i| data.patches(i, model.config.patch_size))
        .collect::<Result<_>>()?;

    let mut report = RunReport {
        step_loss: Vec::with_capacity(total_steps),
        epoch_loss: Vec::new(),
        epoch_accuracy: Vec::new(),
        diverged: false,
        divergence_step: None,
        ratio_snapshots: Vec::new(),
        final_loss: f64::NAN,
        final_accuracy: 0.0,
        rng_state: train_rng.state(),
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch1_mean = f64::NAN;
    let mut global_step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        train_rng.shuffle(&mut order);
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        let mut correct = 0usize;
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(global_step + 1, total_steps, warmup_steps, cfg.base_lr);
            let mut tape = Tape::new();
            let binding = model.store.bind(&mut tape)?;
            let mut losses = Vec::with_capacity(batch.len());

            let forward_result: Result<()> = (|| {
                for &idx in batch {
                    let patches = data.patches(idx, model.config.patch_size)?;
                    let mut ctx = ForwardCtx {
                        training: true,
                        record_attention: false,
                        trace: false,
                        rng: Some(&mut train_rng),
                    };
                    let out = model.forward(&mut tape, &binding, &patches, &mut ctx)?;
                    let target = smoothed_target(
                        model.config.num_classes,
                        data.labels[idx],
                        cfg.label_smoothing,
                    );
                    losses.push(tape.cross_entropy(out.logits, &target)?);
                    if argmax(tape.value(out.logits).data()) == data.labels[idx] {
                        correct += 1;
                    }
                    seen += 1;
                }
                Ok(())
            })();
            match forward_result {
                Ok(()) => {}
                Err(CoreError::NonFinite { .. }) => {
                    report.diverged = true;
                    report.divergence_step = Some(global_step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }

            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let mean_loss = tape.scale_const(total, 1.0 / losses.len() as f64)?;
            let loss_value = tape.value(mean_loss).data()[0];
            report.step_loss.push(loss_value);
            epoch_losses.push(loss_value);

            if !loss_value.is_finite()
                || (epoch > 0 && loss_value > cfg.divergence_factor * epoch1_mean)
            {
                report.diverged = true;
                report.divergence_step = Some(global_step);
                break 'epochs;
            }

            tape.backward(mean_loss)?;
            model.store.collect_grads(&tape, &binding);
            match optimizer.step(&mut model.store, lr) {
                Ok(()) => {}
                Err(CoreError::NonFiniteGradient { .. }) => {
                    report.diverged = true;
                    report.divergence_step = Some(global_step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            global_step += 1;
        }

        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        if epoch == 0 {
            epoch1_mean = mean;
        }
        report.epoch_loss.push(mean);
        report.epoch_accuracy.push(correct as f64 / seen.max(1) as f64);
        if cfg.snapshot_period > 0
            && (epoch % cfg.snapshot_period == 0 || epoch + 1 == cfg.epochs)
        {
            report.ratio_snapshots.push(RatioSnapshot {
                epoch,
                series: branch_ratios(model, &probe)?,
            });
        }
    }

    report.final_loss = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
    report.final_accuracy = report.epoch_accuracy.last().copied().unwrap_or(0.0);
    report.rng_state = train_rng.state();
    Ok(report)
}

/// Rebuild a model with the channel-scaling diagonals taken from a
/// previous run and frozen, everything else freshly initialized, then
/// train it.
///
/// `diagonals` maps scale parameter names to their saved values; an
/// error is returned if it is empty (the source run had no per-channel
/// scaling to reuse).
pub fn retrain_fixed(
    base_config: &CaitConfig,
    diagonals: &BTreeMap<String, Vec<f64>>,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(CaitModel, RunReport)> {
    if diagonals.is_empty() {
        return Err(CoreError::Config(
            "no channel-scaling diagonals to reuse".into(),
        ));
    }
    let mut config = base_config.clone();
    config.strategy = ResidualStrategy::LayerScale {
        init: LayerScaleInit::Fixed,
    };
    let mut rng = SeedRng::new(cfg.seed, streams::MODEL_INIT);
    let mut model = CaitModel::init_with_fixed_scales(config, Some(diagonals), &mut rng)?;
    let report = train_run(&mut model, cfg, data)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn lr_schedule_endpoints() {
        let base = 1e-3;
        assert_eq!(lr_at(0, 100, 10, base), 0.0);
        assert_eq!(lr_at(10, 100, 10, base), base);
        // cosine midpoint
        let mid = lr_at(55, 100, 10, base);
        assert!((mid - base / 2.0).abs() < 0.01 * base, "{mid}");
        // end of schedule sits at the floor
        let end = lr_at(100, 100, 10, base);
        assert!((end - 1e-6 * base).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.5, -0.5]), true);
        store.get_mut(id).value.grad = Some(vec![0.0, 0.0]);
        let mut cfg = TrainConfig::desk(1);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).value.data(), &[1.5, -0.5]);
    }

    #[test]
    fn adamw_first_step_moves_by_about_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0), true);
        store.get_mut(id).value.grad = Some(vec![1.0]);
        let mut cfg = TrainConfig::desk(1);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, 0.1).unwrap();
        let got = store.get(id).value.data()[0];
        assert!((got - 0.9).abs() < 1e-6, "{got}");
    }

    #[test]
    fn adamw_decoupled_decay_applies_without_gradient_signal() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0), true);
        store.get_mut(id).value.grad = Some(vec![0.0]);
        let cfg = TrainConfig::desk(1); // weight_decay 0.05
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, 0.1).unwrap();
        let got = store.get(id).value.data()[0];
        assert!((got - 0.995).abs() < 1e-12, "{got}");
    }

    #[test]
    fn adamw_zero_lr_changes_nothing() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.3, 0.7]), true);
        store.get_mut(id).value.grad = Some(vec![0.5, -1.0]);
        let cfg = TrainConfig::desk(1);
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, 0.0).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.3, 0.7]);
    }

    #[test]
    fn adamw_aborts_on_non_finite_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0), true);
        let b = store.add("b", Tensor::scalar(2.0), true);
        store.get_mut(a).value.grad = Some(vec![1.0]);
        store.get_mut(b).value.grad = Some(vec![f64::NAN]);
        let cfg = TrainConfig::desk(1);
        let mut opt = AdamW::new(&store, &cfg);
        let err = opt.step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, CoreError::NonFiniteGradient { param } if param == "b"));
        // aborted before touching anything
        assert_eq!(store.get(a).value.data(), &[1.0]);
        assert_eq!(store.get(b).value.data(), &[2.0]);
    }

    #[test]
    fn adamw_tracks_only_trainable_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0), true);
        let frozen = store.add("frozen", Tensor::scalar(1.0), false);
        let opt = AdamW::new(&store, &TrainConfig::desk(1));
        assert!(opt.has_state(a));
        assert!(!opt.has_state(frozen));
    }

    #[test]
    fn smoothed_targets_sum_to_one() {
        let t = smoothed_target(4, 2, 0.1);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t[2] > t[0]);
        assert!((t[0] - 0.025).abs() < 1e-12);
    }
}
