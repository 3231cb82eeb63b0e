//! `vmoba verify`: route equivalence, sparsity bounds, gradient check and
//! partition bijectivity on seeded fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vmoba_core::attention::{
    dense_attention, masked_dense_attention, sparse_backward, sparse_forward_gather, sparse_forward_streamed,
};
use vmoba_core::metrics::token_sparsity;
use vmoba_core::partition::{block_means, build_layout, BlockLayout, LatentGeometry, PartitionSpec};
use vmoba_core::selection::{select, select_global_threshold, similarity, SelectionMask, SelectionPolicy};
use vmoba_core::{Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed error, or violation count for exact checks.
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub geometry: LatentGeometry,
    pub block_counts: Vec<usize>,
    pub miniature: LatentGeometry,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_error: f64,
    failed: bool,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            max_error: 0.0,
            failed: false,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        self.max_error = self.max_error.max(err);
        self.failed |= !(err <= self.tolerance);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            passed: !self.failed && self.cases > 0,
            cases: self.cases,
            max_error: self.max_error,
            tolerance: self.tolerance,
        }
    }
}

/// Shrinks the largest axis until the token count fits `max_tokens`; block
/// sizes are clamped to the new extents.
pub fn miniature(
    geom: &LatentGeometry,
    specs: &[PartitionSpec],
    max_tokens: usize,
    head_dim: usize,
) -> (LatentGeometry, Vec<PartitionSpec>) {
    let mut ext = geom.extents();
    while ext.iter().product::<usize>() > max_tokens {
        let i = (0..3).max_by_key(|&i| (ext[i], i)).expect("three axes");
        ext[i] -= (ext[i] / 4).max(1);
    }
    let mini = LatentGeometry {
        frames: ext[0],
        height: ext[1],
        width: ext[2],
        hidden: head_dim,
        heads: 1,
    };
    let specs = specs
        .iter()
        .map(|spec| match *spec {
            PartitionSpec::Temporal1D { t } => PartitionSpec::Temporal1D { t: t.min(ext[0]) },
            PartitionSpec::Spatial2D { h, w } => PartitionSpec::Spatial2D {
                h: h.min(ext[1]),
                w: w.min(ext[2]),
            },
            PartitionSpec::SpatioTemporal3D { t, h, w } => PartitionSpec::SpatioTemporal3D {
                t: t.min(ext[0]),
                h: h.min(ext[1]),
                w: w.min(ext[2]),
            },
        })
        .collect();
    (mini, specs)
}

/// Built-in fixtures: an exact layout set and a ragged one.
fn builtin_layouts() -> Vec<BlockLayout> {
    let exact = LatentGeometry::new(4, 6, 8, 8, 1).expect("valid");
    let ragged = LatentGeometry::new(5, 6, 8, 8, 1).expect("valid");
    let specs_exact = [
        PartitionSpec::Temporal1D { t: 2 },
        PartitionSpec::Spatial2D { h: 3, w: 4 },
        PartitionSpec::SpatioTemporal3D { t: 2, h: 3, w: 4 },
    ];
    let specs_ragged = [
        PartitionSpec::Temporal1D { t: 2 },
        PartitionSpec::Spatial2D { h: 4, w: 3 },
        PartitionSpec::SpatioTemporal3D { t: 2, h: 4, w: 5 },
    ];
    specs_exact
        .iter()
        .map(|s| build_layout(&exact, s))
        .chain(specs_ragged.iter().map(|s| build_layout(&ragged, s)))
        .collect::<vmoba_core::Result<_>>()
        .expect("built-in fixtures are valid")
}

fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Tensor<T> {
    Tensor::from_fn2(rows, cols, |_, _| T::from_f64(rng.random_range(-spread..spread))).expect("finite")
}

/// Every token lands in exactly one block and the block count is the product
/// of per-axis ceilings.
fn bijectivity_violations(layout: &BlockLayout) -> usize {
    let s = layout.seq_len();
    let mut seen = vec![0usize; s];
    let mut bad = 0;
    for b in 0..layout.num_blocks() {
        for &tok in layout.tokens(b) {
            seen[tok] += 1;
            bad += usize::from(layout.block_of(tok) != b);
        }
    }
    bad += seen.iter().filter(|&&c| c != 1).count();
    bad += usize::from(layout.axis_blocks().iter().product::<usize>() != layout.num_blocks());
    bad
}

pub fn run_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let policy = cfg.selection.policy()?;
    let scaled = cfg.selection.scaled;
    let vcfg = &cfg.verify;

    let mut bij = Tracker::new("partition_bijectivity", 0.0);
    let mut block_counts = Vec::new();
    for spec in &cfg.partitions {
        let layout = build_layout(&cfg.geometry, spec)?;
        block_counts.push(layout.num_blocks());
        bij.record(bijectivity_violations(&layout) as f64);
    }

    let head_dim = cfg.geometry.head_dim().min(16);
    let (mini, mini_specs) = miniature(&cfg.geometry, &cfg.partitions, vcfg.max_tokens, head_dim);
    let mut layouts = builtin_layouts();
    for spec in &mini_specs {
        layouts.push(build_layout(&mini, spec)?);
    }
    for l in &layouts {
        bij.record(bijectivity_violations(l) as f64);
    }

    // forward routes; self-inclusion keeps every row non-empty
    let route_policy = SelectionPolicy {
        include_self: true,
        ..policy
    };
    let mut gather_vs_masked = Tracker::new("gather_vs_masked_dense", 1e-5);
    let mut streamed_vs_gather = Tracker::new("streamed_vs_gather", 1e-6);
    let mut full_vs_dense = Tracker::new("full_mask_vs_dense", 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for layout in &layouts {
        let s = layout.seq_len();
        for _ in 0..vcfg.oracle_fixtures {
            let dim = rng.random_range(1..=head_dim.max(1));
            let q = random_tensor::<f32>(&mut rng, s, dim, 2.0);
            let k = random_tensor::<f32>(&mut rng, s, dim, 2.0);
            let v = random_tensor::<f32>(&mut rng, s, dim, 1.0);
            let sim = similarity(&q, &block_means(&k, layout)?, scaled)?;
            let mask = select(&sim, &route_policy, layout)?;
            let masked = masked_dense_attention(&q, &k, &v, layout, &mask, scaled)?;
            let gather = sparse_forward_gather(&q, &k, &v, layout, &mask, scaled)?;
            let streamed = sparse_forward_streamed(&q, &k, &v, layout, &mask, scaled)?;
            gather_vs_masked.record(gather.output.max_abs_diff(&masked.output)? as f64);
            streamed_vs_gather.record(streamed.output.max_abs_diff(&gather.output)? as f64);
            let full = SelectionMask::full(s, layout.num_blocks());
            let dense = dense_attention(&q, &k, &v, scaled)?;
            let all = sparse_forward_gather(&q, &k, &v, layout, &full, scaled)?;
            full_vs_dense.record(all.output.max_abs_diff(&dense.output)? as f64);
        }
    }

    // threshold bounds with self-inclusion off
    let mut pair_bound = Tracker::new("threshold_pair_bound", 0.0);
    let mut nesting = Tracker::new("threshold_nesting", 0.0);
    let mut sparsity_bound = Tracker::new("token_sparsity_bound", 0.0);
    let mut taus = vcfg.taus.clone();
    taus.sort_by(f64::total_cmp);
    for layout in &layouts {
        let s = layout.seq_len();
        let nb = layout.num_blocks();
        let uniform = layout.block_lens().iter().all(|&l| l == layout.block_len(0));
        for _ in 0..vcfg.oracle_fixtures {
            let dim = rng.random_range(1..=head_dim.max(1));
            let q = random_tensor::<f32>(&mut rng, s, dim, 2.0);
            let k = random_tensor::<f32>(&mut rng, s, dim, 2.0);
            let sim = similarity(&q, &block_means(&k, layout)?, scaled)?;
            let mut prev: Option<SelectionMask> = None;
            for &tau in &taus {
                let mask = select_global_threshold(&sim, tau, layout, false)?;
                let cap = (tau * (s * nb) as f64).ceil() as usize;
                pair_bound.record(mask.selected().saturating_sub(cap) as f64);
                if let Some(p) = &prev {
                    nesting.record(f64::from(u8::from(!p.is_subset_of(&mask))));
                }
                if uniform {
                    let bound = tau + 1.0 / (s * nb) as f64;
                    let sp = token_sparsity(std::slice::from_ref(&mask), layout)?;
                    sparsity_bound.record(if sp <= bound { 0.0 } else { sp - bound });
                }
                prev = Some(mask);
            }
        }
    }

    let grad = gradient_check(vcfg.gradcheck_fixtures, cfg.seed, scaled)?;

    let checks = vec![
        bij.finish(),
        gather_vs_masked.finish(),
        streamed_vs_gather.finish(),
        full_vs_dense.finish(),
        pair_bound.finish(),
        nesting.finish(),
        sparsity_bound.finish(),
        grad,
    ];
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        geometry: cfg.geometry,
        block_counts,
        miniature: mini,
        checks,
    })
}

/// Relative error with an absolute floor: differences at or below `1e-8`
/// count as exact.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-8 {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Central differences (`ε = 1e-5`) of `Σ dO ⊙ O` against the sparse
/// backward pass, in f64 on sequences of at most 16 tokens.
pub fn gradient_check(fixtures: usize, seed: u64, scaled: bool) -> Result<CheckResult> {
    const EPS: f64 = 1e-5;
    let shapes = [(2, 2, 4), (1, 4, 4), (2, 3, 2), (4, 2, 2), (3, 1, 5)];
    let specs = |g: &LatentGeometry| {
        [
            PartitionSpec::Temporal1D { t: 1 },
            PartitionSpec::Spatial2D {
                h: g.height.min(2),
                w: g.width.min(3),
            },
            PartitionSpec::SpatioTemporal3D {
                t: g.frames.min(2),
                h: g.height.min(2),
                w: g.width.min(2),
            },
        ]
    };
    let mut tracker = Tracker::new("gradient_check", 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ead);
    for f in 0..fixtures {
        let (t, h, w) = shapes[f % shapes.len()];
        let dim = 1 + f % 4;
        let g = LatentGeometry::new(t, h, w, dim, 1)?;
        let layout = build_layout(&g, &specs(&g)[f % 3])?;
        let s = g.seq_len();
        let nb = layout.num_blocks();
        let mut bits: Vec<bool> = (0..s * nb).map(|_| rng.random_bool(0.5)).collect();
        for i in 0..s {
            bits[i * nb + layout.block_of(i)] = true;
        }
        let mask = SelectionMask::from_bits(s, nb, bits)?;
        let q = random_tensor::<f64>(&mut rng, s, dim, 1.0);
        let k = random_tensor::<f64>(&mut rng, s, dim, 1.0);
        let v = random_tensor::<f64>(&mut rng, s, dim, 1.0);
        let d_out = random_tensor::<f64>(&mut rng, s, dim, 1.0);
        let io = sparse_forward_gather(&q, &k, &v, &layout, &mask, scaled)?;
        let grads = sparse_backward(&io, &q, &k, &v, &layout, &mask, &d_out, scaled)?;
        let objective = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> Result<f64> {
            let o = sparse_forward_gather(q, k, v, &layout, &mask, scaled)?;
            Ok(o.output.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum())
        };
        for (which, analytic) in [&grads.dq, &grads.dk, &grads.dv].into_iter().enumerate() {
            for idx in 0..s * dim {
                let nudged = |delta: f64| -> Result<f64> {
                    let mut ts = [q.clone(), k.clone(), v.clone()];
                    let mut data = ts[which].data().to_vec();
                    data[idx] += delta;
                    ts[which] = Tensor::new([s, dim], data)?;
                    objective(&ts[0], &ts[1], &ts[2])
                };
                let numeric = (nudged(EPS)? - nudged(-EPS)?) / (2.0 * EPS);
                tracker.record(gradient_error(analytic.data()[idx], numeric));
            }
        }
    }
    Ok(tracker.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_fits_budget_and_keeps_blocks_valid() {
        let g = LatentGeometry::new(21, 30, 52, 64, 2).unwrap();
        let specs = [
            PartitionSpec::Temporal1D { t: 3 },
            PartitionSpec::Spatial2D { h: 5, w: 13 },
            PartitionSpec::SpatioTemporal3D { t: 7, h: 5, w: 13 },
        ];
        let (mini, mspecs) = miniature(&g, &specs, 512, 16);
        assert!(mini.seq_len() <= 512);
        for s in &mspecs {
            s.validate(&mini).unwrap();
        }
    }

    #[test]
    fn gradient_error_floor() {
        assert_eq!(gradient_error(1e-12, 2e-12), 0.0);
        assert!((gradient_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }
}
