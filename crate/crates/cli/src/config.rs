//! The single JSON document every command reads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmoba_core::partition::{LatentGeometry, LayerPartitions, PartitionSpec};
use vmoba_core::selection::{Scope, SelectionPolicy, SelectionRule};
use vmoba_core::toytrain::{AttentionMode, Motion, ToyModelConfig};

use crate::error::{CliError, Result};

pub const DEFAULT_TAU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    #[default]
    Threshold,
    Topk,
}

fn yes() -> bool {
    true
}

fn global() -> Scope {
    Scope::Global
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "global")]
    pub scope: Scope,
    #[serde(default)]
    pub rule: RuleKind,
    /// Threshold rule only; defaults to 0.25.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Top-k rule only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "yes")]
    pub scaled: bool,
    #[serde(default = "yes")]
    pub include_self: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            scope: Scope::Global,
            rule: RuleKind::Threshold,
            tau: None,
            k: None,
            scaled: true,
            include_self: true,
        }
    }
}

impl SelectionConfig {
    pub fn policy(&self) -> Result<SelectionPolicy> {
        let rule = match (self.rule, self.tau, self.k) {
            (RuleKind::Threshold, tau, None) => SelectionRule::Threshold(tau.unwrap_or(DEFAULT_TAU)),
            (RuleKind::Topk, None, Some(k)) => SelectionRule::TopK(k),
            (RuleKind::Threshold, _, Some(_)) => {
                return Err(CliError::Config("`k` is only valid with rule \"topk\"".into()))
            }
            (RuleKind::Topk, Some(_), _) => {
                return Err(CliError::Config("`tau` is only valid with rule \"threshold\"".into()))
            }
            (RuleKind::Topk, None, None) => {
                return Err(CliError::Config("rule \"topk\" needs `k`".into()))
            }
        };
        let policy = SelectionPolicy {
            scope: self.scope,
            rule,
            include_self: self.include_self,
        };
        policy.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Random fixtures for the forward-route comparison.
    pub oracle_fixtures: usize,
    /// Token budget of the miniature built from the configured geometry.
    pub max_tokens: usize,
    pub gradcheck_fixtures: usize,
    pub taus: Vec<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            oracle_fixtures: 12,
            max_tokens: 768,
            gradcheck_fixtures: 10,
            taus: vec![0.15, 0.25, 0.35, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Frame count held fixed while H and W grow.
    pub frames: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub partition: PartitionSpec,
    pub lengths: Vec<usize>,
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            frames: 4,
            heads: 1,
            head_dim: 16,
            partition: PartitionSpec::SpatioTemporal3D { t: 2, h: 8, w: 8 },
            lengths: vec![512, 1024, 2048, 3072, 4096, 6144],
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// VMTB files holding `[heads, s, head_dim]` or `[s, hidden]` tensors.
    pub q: PathBuf,
    pub k: PathBuf,
    /// Layer index; picks the partition scheme of the block maps.
    #[serde(default)]
    pub layer: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
}

fn default_p() -> f64 {
    0.25
}

fn default_fractions() -> Vec<f64> {
    vec![0.3, 0.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub modes: Vec<AttentionMode>,
    pub layers: usize,
    pub geometry: LatentGeometry,
    pub partitions: Vec<PartitionSpec>,
    pub steps: usize,
    pub learning_rate: f64,
    pub final_lr_scale: f64,
    pub batch: usize,
    pub eval_every: usize,
    pub motion: Motion,
    /// Falls back to the top-level seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = ToyModelConfig::desk_default(AttentionMode::Full);
        Self {
            modes: vec![AttentionMode::Full, AttentionMode::Vmoba { tau: DEFAULT_TAU }],
            layers: base.layers,
            geometry: base.geometry,
            partitions: base.partitions,
            steps: base.steps,
            learning_rate: base.learning_rate,
            final_lr_scale: base.final_lr_scale,
            batch: base.batch,
            eval_every: base.eval_every,
            motion: base.motion,
            seed: None,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: LatentGeometry,
    /// One block size per scheme.
    pub partitions: Vec<PartitionSpec>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze: Option<AnalyzeSection>,
    #[serde(default)]
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn layer_partitions(&self) -> Result<LayerPartitions> {
        LayerPartitions::new(&self.partitions).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every section against the library constraints.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: vmoba_core::Error| CliError::Config(e.to_string());
        self.geometry.validate().map_err(cfg_err)?;
        self.layer_partitions()?.validate(&self.geometry).map_err(cfg_err)?;
        self.selection.policy()?;

        let v = &self.verify;
        if v.oracle_fixtures == 0 || v.gradcheck_fixtures == 0 || v.max_tokens < 8 {
            return Err(CliError::Config(
                "verify needs at least one fixture per suite and max_tokens >= 8".into(),
            ));
        }
        if let Some(t) = v.taus.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(CliError::Config(format!("verify tau {t} outside (0, 1]")));
        }

        let b = &self.bench;
        if b.frames == 0 || b.heads == 0 || b.head_dim == 0 || b.repetitions == 0 || b.lengths.is_empty() {
            return Err(CliError::Config(
                "bench frames, heads, head_dim, repetitions and lengths must be nonzero".into(),
            ));
        }

        if let Some(a) = &self.analyze {
            if !(a.p > 0.0 && a.p <= 1.0) {
                return Err(CliError::Config(format!("analyze p {} outside (0, 1]", a.p)));
            }
            if let Some(f) = a.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
                return Err(CliError::Config(format!("analyze fraction {f} outside (0, 1]")));
            }
        }

        if self.train.modes.is_empty() {
            return Err(CliError::Config("train needs at least one mode".into()));
        }
        for mode in &self.train.modes {
            self.toy_config(*mode).validate().map_err(cfg_err)?;
        }
        Ok(())
    }

    pub fn toy_config(&self, mode: AttentionMode) -> ToyModelConfig {
        let t = &self.train;
        ToyModelConfig {
            layers: t.layers,
            geometry: t.geometry,
            partitions: t.partitions.clone(),
            mode,
            steps: t.steps,
            learning_rate: t.learning_rate,
            final_lr_scale: t.final_lr_scale,
            seed: t.seed.unwrap_or(self.seed),
            batch: t.batch,
            eval_every: t.eval_every,
            motion: t.motion,
            scaled: self.selection.scaled,
        }
    }
}
