//! `vmoba analyze`: block attention maps, per-query importance and per-head
//! concentration curves from stored Q/K tensors.

use std::path::Path;

use serde::Serialize;
use vmoba_core::metrics::{
    block_attention_map, block_maps_to_csv, concentration_curve, importance_to_csv, query_importance,
    ConcentrationReport, Cutoff, RowNorm,
};
use vmoba_core::partition::{block_means, build_layout, LatentGeometry};
use vmoba_core::selection::similarity;
use vmoba_core::tensor::{read_any, TensorError};
use vmoba_core::Tensor;

use crate::config::{AnalyzeSection, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct HeadAnalysis {
    pub head: usize,
    /// Mean attention mass a query block keeps on its own key block.
    pub diagonal_mass: f64,
    pub mean_importance: f64,
    pub cutoffs: Vec<Cutoff>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub scheme: String,
    pub num_blocks: usize,
    /// `1 / N_b`: the diagonal mass of a uniform map.
    pub uniform_baseline: f64,
    pub p: f64,
    pub heads: Vec<HeadAnalysis>,
    #[serde(skip)]
    pub block_maps: Vec<Tensor<f64>>,
    #[serde(skip)]
    pub importance: Vec<Vec<f64>>,
    #[serde(skip)]
    pub concentration: Vec<ConcentrationReport>,
}

/// Reads a `[heads, s, head_dim]` or `[s, hidden]` tensor and splits it per
/// head.
pub fn load_heads(path: &Path, geom: &LatentGeometry) -> Result<Vec<Tensor<f32>>> {
    let any = read_any(path).map_err(|e| match e {
        TensorError::Io(io) => CliError::io(path, io),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    let (s, heads, dh) = (geom.seq_len(), geom.heads, geom.head_dim());
    let shape = any.shape().to_vec();
    let t = any.into_scalar::<f32>();
    let mismatch = || {
        CliError::Config(format!(
            "{}: shape {shape:?} matches neither [{heads}, {s}, {dh}] nor [{s}, {}]",
            path.display(),
            geom.hidden
        ))
    };
    match shape[..] {
        [h, n, d] if (h, n, d) == (heads, s, dh) => {
            let data = t.into_data();
            (0..heads)
                .map(|i| Ok(Tensor::new([s, dh], data[i * s * dh..(i + 1) * s * dh].to_vec())?))
                .collect::<vmoba_core::Result<_>>()
                .map_err(CliError::from)
        }
        [n, d] if (n, d) == (s, geom.hidden) => (0..heads)
            .map(|i| t.column_slice(i * dh, dh))
            .collect::<Result<_, TensorError>>()
            .map_err(CliError::from),
        _ => Err(mismatch()),
    }
}

pub fn analyze_heads(
    cfg: &RunConfig,
    section: &AnalyzeSection,
    q: &[Tensor<f32>],
    k: &[Tensor<f32>],
) -> Result<AnalyzeReport> {
    let spec = cfg.layer_partitions()?.for_layer(section.layer);
    let layout = build_layout(&cfg.geometry, &spec)?;
    let scaled = cfg.selection.scaled;
    let nb = layout.num_blocks();
    let mut report = AnalyzeReport {
        scheme: spec.scheme().tag().to_string(),
        num_blocks: nb,
        uniform_baseline: 1.0 / nb as f64,
        p: section.p,
        heads: Vec::new(),
        block_maps: Vec::new(),
        importance: Vec::new(),
        concentration: Vec::new(),
    };
    for (h, (qh, kh)) in q.iter().zip(k).enumerate() {
        let map = block_attention_map(qh, kh, &layout, &layout, scaled)?;
        let diagonal_mass = (0..nb).map(|b| map.at2(b, b)).sum::<f64>() / nb as f64;
        let sim = similarity(qh, &block_means(kh, &layout)?, scaled)?;
        let importance = query_importance(sim.scores(), section.p, RowNorm::Softmax)?;
        let concentration = concentration_curve(&sim, &section.fractions)?;
        report.heads.push(HeadAnalysis {
            head: h,
            diagonal_mass,
            mean_importance: importance.iter().sum::<f64>() / importance.len() as f64,
            cutoffs: concentration.cutoffs.clone(),
        });
        report.block_maps.push(map);
        report.importance.push(importance);
        report.concentration.push(concentration);
    }
    Ok(report)
}

pub fn run_analyze(cfg: &RunConfig) -> Result<AnalyzeReport> {
    let section = cfg
        .analyze
        .as_ref()
        .ok_or_else(|| CliError::Config("analyze needs an `analyze` section with q and k paths".into()))?;
    let q = load_heads(&section.q, &cfg.geometry)?;
    let k = load_heads(&section.k, &cfg.geometry)?;
    analyze_heads(cfg, section, &q, &k)
}

/// Files written next to `analyze.json`.
pub fn report_files(report: &AnalyzeReport) -> Vec<(String, String)> {
    let mut files = vec![
        ("block_map.csv".to_string(), block_maps_to_csv(&report.block_maps)),
        ("importance.csv".to_string(), importance_to_csv(&report.importance)),
    ];
    for (h, c) in report.concentration.iter().enumerate() {
        files.push((format!("concentration_head{h}.csv"), c.to_csv()));
    }
    files
}
