//! `vmoba bench`: dense vs block-sparse forward latency over a length sweep.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vmoba_core::attention::{dense_attention, sparse_forward_streamed};
use vmoba_core::metrics::flops_estimate;
use vmoba_core::partition::{block_means, build_layout, LatentGeometry, PartitionSpec};
use vmoba_core::selection::{select, similarity, SelectionMask, SelectionPolicy};
use vmoba_core::Tensor;

use crate::config::{BenchSection, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub s: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dense_ms: f64,
    pub vmoba_ms: f64,
    pub flops_dense: u64,
    pub flops_vmoba: u64,
    pub num_blocks: usize,
    pub mean_block_len: f64,
    pub k_avg: f64,
    /// `k_avg·s_b + s/(2·s_b) < s`, with `s_b` the mean block length.
    pub below_crossover: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticFit {
    pub fn eval(&self, s: f64) -> f64 {
        (self.a * s + self.b) * s + self.c
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSkip {
    pub s: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub skipped: Vec<BenchSkip>,
    pub dense_fit: Option<QuadraticFit>,
    pub vmoba_fit: Option<QuadraticFit>,
    pub repetitions: usize,
}

impl BenchReport {
    /// `s,dense_ms,vmoba_ms,flops_dense,flops_vmoba`, in sweep order; skipped
    /// lengths keep their row with empty fields.
    pub fn to_csv(&self, order: &[usize]) -> String {
        let mut out = String::from("s,dense_ms,vmoba_ms,flops_dense,flops_vmoba\n");
        for &s in order {
            match self.rows.iter().find(|r| r.s == s) {
                Some(r) => out.push_str(&format!(
                    "{},{:.4},{:.4},{},{}\n",
                    r.s, r.dense_ms, r.vmoba_ms, r.flops_dense, r.flops_vmoba
                )),
                None => out.push_str(&format!("{s},,,,\n")),
            }
        }
        out
    }
}

/// Least-squares `a·s² + b·s + c`. Lengths are rescaled to `[0, 1]` before
/// the solve to keep the design matrix well conditioned.
pub fn fit_quadratic(s: &[f64], y: &[f64]) -> Option<QuadraticFit> {
    if s.len() < 3 || s.len() != y.len() {
        return None;
    }
    let scale = s.iter().copied().fold(0.0, f64::max);
    if scale <= 0.0 {
        return None;
    }
    let design = DMatrix::from_fn(s.len(), 3, |i, j| (s[i] / scale).powi(2 - j as i32));
    let rhs = DVector::from_column_slice(y);
    let coef = design.svd(true, true).solve(&rhs, 1e-12).ok()?;
    Some(QuadraticFit {
        a: coef[0] / (scale * scale),
        b: coef[1] / scale,
        c: coef[2],
    })
}

/// The most square `H × W` with `T·H·W = s` on which `spec` is valid.
pub fn shape_for_length(s: usize, frames: usize, heads: usize, head_dim: usize, spec: &PartitionSpec) -> Option<LatentGeometry> {
    if s == 0 || s % frames != 0 {
        return None;
    }
    let plane = s / frames;
    let mut h = (plane as f64).sqrt() as usize;
    while h > 0 {
        if plane % h == 0 {
            let g = LatentGeometry {
                frames,
                height: h,
                width: plane / h,
                hidden: heads * head_dim,
                heads,
            };
            if spec.validate(&g).is_ok() {
                return Some(g);
            }
        }
        h -= 1;
    }
    None
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn2(rows, cols, |_, _| rng.random_range(-1.0f32..1.0)).expect("finite")
}

fn measure_length(
    geom: &LatentGeometry,
    bench: &BenchSection,
    policy: &SelectionPolicy,
    scaled: bool,
    seed: u64,
) -> Result<BenchRow> {
    let s = geom.seq_len();
    let layout = build_layout(geom, &bench.partition)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s as u64);
    let heads: Vec<[Tensor<f32>; 3]> = (0..bench.heads)
        .map(|_| {
            [
                random(&mut rng, s, bench.head_dim),
                random(&mut rng, s, bench.head_dim),
                random(&mut rng, s, bench.head_dim),
            ]
        })
        .collect();

    let run_dense = || -> Result<()> {
        for [q, k, v] in &heads {
            dense_attention(q, k, v, scaled)?;
        }
        Ok(())
    };
    let run_sparse = || -> Result<Vec<SelectionMask>> {
        let mut masks = Vec::with_capacity(heads.len());
        for [q, k, v] in &heads {
            let sim = similarity(q, &block_means(k, &layout)?, scaled)?;
            let mask = select(&sim, policy, &layout)?;
            sparse_forward_streamed(q, k, v, &layout, &mask, scaled)?;
            masks.push(mask);
        }
        Ok(masks)
    };

    // warm-up
    run_dense()?;
    let masks = run_sparse()?;
    let mut dense_ms = Vec::with_capacity(bench.repetitions);
    let mut vmoba_ms = Vec::with_capacity(bench.repetitions);
    for _ in 0..bench.repetitions {
        let t = Instant::now();
        run_dense()?;
        dense_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        run_sparse()?;
        vmoba_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }

    let flops = flops_estimate(geom, &layout, &masks)?;
    let mean_block_len = s as f64 / layout.num_blocks() as f64;
    Ok(BenchRow {
        s,
        frames: geom.frames,
        height: geom.height,
        width: geom.width,
        dense_ms: median(dense_ms),
        vmoba_ms: median(vmoba_ms),
        flops_dense: flops.dense_flops,
        flops_vmoba: flops.total_flops,
        num_blocks: layout.num_blocks(),
        mean_block_len,
        k_avg: flops.k_avg,
        below_crossover: flops.k_avg * mean_block_len + s as f64 / (2.0 * mean_block_len) < s as f64,
    })
}

pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let bench = &cfg.bench;
    let policy = cfg.selection.policy()?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &s in &bench.lengths {
        match shape_for_length(s, bench.frames, bench.heads, bench.head_dim, &bench.partition) {
            Some(geom) => rows.push(measure_length(&geom, bench, &policy, cfg.selection.scaled, cfg.seed)?),
            None => {
                let reason = format!(
                    "no H×W grid at T = {} fits {} tokens and the {} block",
                    bench.frames,
                    s,
                    bench.partition.scheme()
                );
                eprintln!("warning: skipping s = {s}: {reason}");
                skipped.push(BenchSkip { s, reason });
            }
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.s as f64).collect();
    let dense: Vec<f64> = rows.iter().map(|r| r.dense_ms).collect();
    let vmoba: Vec<f64> = rows.iter().map(|r| r.vmoba_ms).collect();
    if rows.is_empty() {
        return Err(CliError::Config("no benchmark length is achievable".into()));
    }
    Ok(BenchReport {
        dense_fit: fit_quadratic(&xs, &dense),
        vmoba_fit: fit_quadratic(&xs, &vmoba),
        rows,
        skipped,
        repetitions: bench.repetitions,
    })
}
