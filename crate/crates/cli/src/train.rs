//! `vmoba train-toy`: one toy training run per requested attention mode.

use serde::Serialize;
use vmoba_core::toytrain::{compare_losses, train, ComparisonReport, LossTrace};

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub label: String,
    pub layer_schemes: Vec<String>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub mean_sparsity: f64,
    pub total_ms: f64,
    /// Step at which the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub traces: Vec<LossTrace>,
    pub summaries: Vec<ModeSummary>,
    /// Present when every mode finished with equal step counts.
    pub comparison: Option<ComparisonReport>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.summaries.iter().any(|s| s.diverged_at.is_some())
    }
}

fn summarize(trace: &LossTrace, diverged_at: Option<usize>) -> ModeSummary {
    let n = trace.train.len().max(1) as f64;
    ModeSummary {
        label: trace.mode.label(),
        layer_schemes: trace.layer_schemes.clone(),
        initial_loss: trace.train.first().map(|p| p.loss),
        final_loss: trace.final_loss(),
        mean_sparsity: trace.train.iter().map(|p| p.sparsity).sum::<f64>() / n,
        total_ms: trace.train.iter().map(|p| p.wall_ms).sum(),
        diverged_at,
    }
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut traces = Vec::new();
    let mut summaries = Vec::new();
    for &mode in &cfg.train.modes {
        let (trace, diverged_at) = match train(&cfg.toy_config(mode)) {
            Ok(t) => (t, None),
            Err(vmoba_core::Error::Diverged { step, trace }) => (*trace, Some(step)),
            Err(e) => return Err(e.into()),
        };
        summaries.push(summarize(&trace, diverged_at));
        traces.push(trace);
    }
    let comparison = if summaries.iter().all(|s| s.diverged_at.is_none()) {
        Some(compare_losses(&traces)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        traces,
        summaries,
        comparison,
    })
}

/// `mode,layer,scheme` rows.
pub fn scheme_log(traces: &[LossTrace]) -> String {
    let mut out = String::from("mode,layer,scheme\n");
    for t in traces {
        for (l, s) in t.layer_schemes.iter().enumerate() {
            out.push_str(&format!("{},{l},{s}\n", t.mode.label()));
        }
    }
    out
}
