//! Desk-scale training comparison of attention modes on synthetic video.

mod data;
mod model;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{LatentGeometry, LayerPartitions, PartitionSpec};
use crate::tensor::TensorError;

pub use data::{
    batch_from_blobs, position_features, render_blobs, sample_blobs, synth_video_batch, Blob, Motion,
    BLOBS_PER_CLIP, POSITION_FEATURES,
};
pub use model::{Forward, LayerWeights, Params, ToyModel, INPUT_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttentionMode {
    Full,
    Vmoba { tau: f64 },
    Moba1d { k: usize },
}

impl AttentionMode {
    pub fn label(&self) -> String {
        match self {
            AttentionMode::Full => "full".into(),
            AttentionMode::Vmoba { tau } => format!("vmoba_tau{tau}"),
            AttentionMode::Moba1d { k } => format!("moba1d_k{k}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionMode::Full => Ok(()),
            AttentionMode::Vmoba { tau } if tau > 0.0 && tau <= 1.0 => Ok(()),
            AttentionMode::Vmoba { tau } => Err(Error::TrainConfig(format!("tau must lie in (0, 1], got {tau}"))),
            AttentionMode::Moba1d { k } if k > 0 => Ok(()),
            AttentionMode::Moba1d { .. } => Err(Error::TrainConfig("moba1d needs k >= 1".into())),
        }
    }
}

fn default_batch() -> usize {
    1
}

fn default_final_lr_scale() -> f64 {
    1.0
}

fn default_scaled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub layers: usize,
    /// Hidden size and head count live in the geometry.
    pub geometry: LatentGeometry,
    /// One block size per scheme.
    pub partitions: Vec<PartitionSpec>,
    pub mode: AttentionMode,
    pub steps: usize,
    pub learning_rate: f64,
    /// The step size decays linearly from `learning_rate` to
    /// `learning_rate · final_lr_scale` at the last update.
    #[serde(default = "default_final_lr_scale")]
    pub final_lr_scale: f64,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Validation every this many steps; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub motion: Motion,
    #[serde(default = "default_scaled")]
    pub scaled: bool,
}

impl ToyModelConfig {
    /// The standard desk fixture: 8×12×16 latent, hidden 32, two heads,
    /// three layers, 300 steps.
    pub fn desk_default(mode: AttentionMode) -> Self {
        Self {
            layers: 3,
            geometry: LatentGeometry {
                frames: 8,
                height: 12,
                width: 16,
                hidden: 32,
                heads: 2,
            },
            partitions: vec![
                PartitionSpec::Temporal1D { t: 2 },
                PartitionSpec::Spatial2D { h: 4, w: 4 },
                PartitionSpec::SpatioTemporal3D { t: 2, h: 4, w: 4 },
            ],
            mode,
            steps: 300,
            learning_rate: 0.15,
            final_lr_scale: 0.1,
            seed: 7,
            batch: 1,
            eval_every: 50,
            motion: Motion::Translating,
            scaled: true,
        }
    }

    pub fn layer_partitions(&self) -> Result<LayerPartitions> {
        LayerPartitions::new(&self.partitions)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::TrainConfig(format!(
                "need at least 3 layers, got {}",
                self.layers
            )));
        }
        self.geometry.validate()?;
        self.layer_partitions()?.validate(&self.geometry)?;
        self.mode.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::TrainConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.final_lr_scale >= 0.0 && self.final_lr_scale <= 1.0) {
            return Err(Error::TrainConfig(format!(
                "final_lr_scale must lie in [0, 1], got {}",
                self.final_lr_scale
            )));
        }
        if self.batch == 0 {
            return Err(Error::TrainConfig("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub loss: f64,
    /// Mean token sparsity of the step's forward passes.
    pub sparsity: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub mode: AttentionMode,
    pub layer_schemes: Vec<String>,
    /// Entry `i` is the loss before update `i`; the last entry follows the
    /// final update.
    pub train: Vec<TrainPoint>,
    pub validation: Vec<EvalPoint>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.train.iter().map(|p| p.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.train.last().map(|p| p.loss)
    }

    pub fn train_csv(&self) -> String {
        let mut out = String::from("step,loss,wall_ms\n");
        for p in &self.train {
            out.push_str(&format!("{},{},{:.3}\n", p.step, p.loss, p.wall_ms));
        }
        out
    }

    pub fn validation_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for p in &self.validation {
            out.push_str(&format!("{},{}\n", p.step, p.loss));
        }
        out
    }
}

const VALIDATION_SALT: u64 = 0x5eed_0f_7a11d;

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Overflow surfaces either as a non-finite loss or as a non-finite tensor.
fn finite_or_diverged(outcome: Result<(f64, f64)>, step: usize, trace: &LossTrace) -> Result<(f64, f64)> {
    match outcome {
        Ok(v) if v.0.is_finite() => Ok(v),
        Ok(_) | Err(Error::Tensor(TensorError::NonFinite { .. })) => Err(Error::Diverged {
            step,
            trace: Box::new(trace.clone()),
        }),
        Err(e) => Err(e),
    }
}

/// Trains with plain gradient descent on per-token MSE. A fresh batch is
/// drawn for every step; validation uses one fixed held-out batch.
pub fn train(config: &ToyModelConfig) -> Result<LossTrace> {
    config.validate()?;
    let geom = config.geometry;
    let mut model = ToyModel::<f32>::new(
        geom,
        config.layers,
        &config.layer_partitions()?,
        config.mode,
        config.scaled,
        config.seed,
    )?;
    let (val_x, val_y) = synth_video_batch(config.seed ^ VALIDATION_SALT, &geom, config.batch, config.motion);
    let mut trace = LossTrace {
        mode: config.mode,
        layer_schemes: model.layer_schemes(),
        train: Vec::with_capacity(config.steps + 1),
        validation: Vec::new(),
    };
    for step in 0..=config.steps {
        let progress = step as f64 / config.steps.max(1) as f64;
        let lr = (config.learning_rate * (1.0 - (1.0 - config.final_lr_scale) * progress)) as f32;
        // validation sees the same parameters as this step's training loss
        if config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps) {
            let (loss, _) = finite_or_diverged(model.loss(&val_x, &val_y), step, &trace)?;
            trace.validation.push(EvalPoint { step, loss });
        }
        let (x, y) = synth_video_batch(step_seed(config.seed, step), &geom, config.batch, config.motion);
        let start = Instant::now();
        let outcome = if step < config.steps {
            model.loss_and_grads(&x, &y).and_then(|(loss, sparsity, grads)| {
                model.params.descend(&grads, lr)?;
                Ok((loss, sparsity))
            })
        } else {
            model.loss(&x, &y)
        };
        let (loss, sparsity) = finite_or_diverged(outcome, step, &trace)?;
        trace.train.push(TrainPoint {
            step,
            loss,
            sparsity,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceComparison {
    pub label: String,
    /// `loss / baseline_loss` per training step.
    pub ratios: Vec<f64>,
    pub final_gap: f64,
    pub final_relative_gap: f64,
    /// Trapezoidal integral of `|loss − baseline|` over steps.
    pub area_between: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub steps: usize,
    pub comparisons: Vec<TraceComparison>,
}

impl ComparisonReport {
    /// One row per step: `step,<label ratio>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.comparisons {
            out.push_str(&format!(",{}", c.label));
        }
        out.push('\n');
        for i in 0..self.steps {
            out.push_str(&i.to_string());
            for c in &self.comparisons {
                out.push_str(&format!(",{}", c.ratios[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Compares every trace against the first one.
pub fn compare_losses(traces: &[LossTrace]) -> Result<ComparisonReport> {
    let Some(base) = traces.first() else {
        return Err(Error::LengthMismatch("no traces to compare".into()));
    };
    let b = base.losses();
    let mut comparisons = Vec::with_capacity(traces.len());
    for t in traces {
        let l = t.losses();
        if l.len() != b.len() {
            return Err(Error::LengthMismatch(format!(
                "trace {} has {} points, baseline has {}",
                t.mode.label(),
                l.len(),
                b.len()
            )));
        }
        let diffs: Vec<f64> = l.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
        let area = diffs.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
        let (lf, bf) = (l.last().copied().unwrap_or(0.0), b.last().copied().unwrap_or(0.0));
        comparisons.push(TraceComparison {
            label: t.mode.label(),
            ratios: l.iter().zip(&b).map(|(x, y)| x / y).collect(),
            final_gap: lf - bf,
            final_relative_gap: (lf - bf) / bf,
            area_between: area,
            max_abs_diff: diffs.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(ComparisonReport {
        baseline: base.mode.label(),
        steps: b.len(),
        comparisons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: AttentionMode, steps: usize) -> ToyModelConfig {
        ToyModelConfig {
            layers: 3,
            geometry: LatentGeometry::new(4, 4, 6, 8, 2).unwrap(),
            partitions: vec![
                PartitionSpec::Temporal1D { t: 1 },
                PartitionSpec::Spatial2D { h: 2, w: 3 },
                PartitionSpec::SpatioTemporal3D { t: 2, h: 2, w: 3 },
            ],
            mode,
            steps,
            learning_rate: 0.1,
            final_lr_scale: 1.0,
            seed: 11,
            batch: 1,
            eval_every: 2,
            motion: Motion::Translating,
            scaled: true,
        }
    }

    fn trace(losses: &[f64]) -> LossTrace {
        LossTrace {
            mode: AttentionMode::Full,
            layer_schemes: vec![],
            train: losses
                .iter()
                .enumerate()
                .map(|(step, &loss)| TrainPoint {
                    step,
                    loss,
                    sparsity: 1.0,
                    wall_ms: 0.0,
                })
                .collect(),
            validation: vec![],
        }
    }

    #[test]
    fn zero_steps_records_initial_loss_only() {
        let t = train(&tiny(AttentionMode::Full, 0)).unwrap();
        assert_eq!(t.train.len(), 1);
        assert_eq!(t.train[0].step, 0);
        assert!(t.train[0].loss.is_finite());
    }

    #[test]
    fn tau_one_matches_full() {
        let full = train(&tiny(AttentionMode::Full, 5)).unwrap();
        let vm = train(&tiny(AttentionMode::Vmoba { tau: 1.0 }, 5)).unwrap();
        for (a, b) in full.train.iter().zip(&vm.train) {
            assert!((a.loss - b.loss).abs() <= 1e-4, "{} vs {}", a.loss, b.loss);
        }
        assert!(vm.train.iter().all(|p| p.sparsity == 1.0));
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = tiny(AttentionMode::Vmoba { tau: 0.5 }, 3);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.validation, b.validation);
    }

    #[test]
    fn config_validation() {
        assert!(tiny(AttentionMode::Vmoba { tau: 0.0 }, 1).validate().is_err());
        assert!(tiny(AttentionMode::Moba1d { k: 0 }, 1).validate().is_err());
        let mut c = tiny(AttentionMode::Full, 1);
        c.layers = 2;
        assert!(matches!(c.validate(), Err(Error::TrainConfig(_))));
        let mut c = tiny(AttentionMode::Full, 1);
        c.geometry.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(AttentionMode::Full, 1);
        c.partitions.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_keeps_partial_trace() {
        let mut c = tiny(AttentionMode::Full, 50);
        c.learning_rate = 1e6;
        match train(&c) {
            Err(Error::Diverged { step, trace }) => {
                assert_eq!(trace.train.len(), step);
                assert!(trace.train.iter().all(|p| p.step <= step));
                assert!(trace.train.iter().all(|p| p.loss.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identical_traces_compare_equal() {
        let a = trace(&[3.0, 2.0, 1.0]);
        let r = compare_losses(&[a.clone(), a]).unwrap();
        assert!(r.comparisons[1].ratios.iter().all(|&x| x == 1.0));
        assert_eq!(r.comparisons[1].final_gap, 0.0);
        assert_eq!(r.comparisons[1].area_between, 0.0);
    }

    #[test]
    fn doubled_trace_has_ratio_two() {
        let a = trace(&[3.0, 2.0, 1.0]);
        let b = trace(&[6.0, 4.0, 2.0]);
        let r = compare_losses(&[a, b]).unwrap();
        assert!(r.comparisons[1].ratios.iter().all(|&x| x == 2.0));
        assert_eq!(r.comparisons[1].final_gap, 1.0);
        assert_eq!(r.comparisons[1].area_between, 4.0);
        assert!(r.to_csv().starts_with("step,full,full\n0,1,2\n"));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let r = compare_losses(&[trace(&[1.0, 2.0]), trace(&[1.0])]);
        assert!(matches!(r, Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = ToyModelConfig::desk_default(AttentionMode::Vmoba { tau: 0.25 });
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains(r#""mode":{"kind":"vmoba","tau":0.25}"#));
        assert_eq!(serde_json::from_str::<ToyModelConfig>(&s).unwrap(), c);
    }
}
