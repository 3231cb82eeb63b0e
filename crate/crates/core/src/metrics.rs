//! FLOPs and sparsity accounting, plus the statistics used to study
//! attention structure: per-query importance, per-head concentration curves
//! and query-block × key-block attention maps.
//!
//! Each matrix product counts 2 flops per multiply-add. Softmax and
//! normalization work is not counted.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::partition::{BlockLayout, LatentGeometry};
use crate::selection::{SelectionMask, SimilarityMatrix};
use crate::tensor::{dot, softmax_in_place, Scalar, Tensor};
use crate::attention::logit_scale;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsReport {
    pub selection_flops: u64,
    pub attention_flops: u64,
    pub total_flops: u64,
    pub dense_flops: u64,
    /// Mean selected blocks per query, averaged over heads.
    pub k_avg: f64,
    /// `dense_flops / total_flops`.
    pub speedup: f64,
}

fn check_masks(geom: &LatentGeometry, layout: &BlockLayout, masks: &[SelectionMask]) -> Result<()> {
    let s = geom.seq_len();
    if masks.is_empty() || (masks.len() != 1 && masks.len() != geom.heads) {
        return Err(Error::Shape(format!(
            "expected 1 or {} head masks, got {}",
            geom.heads,
            masks.len()
        )));
    }
    if layout.seq_len() != s {
        return Err(Error::Shape(format!(
            "layout covers {} tokens, geometry has {s}",
            layout.seq_len()
        )));
    }
    if let Some(m) = masks
        .iter()
        .find(|m| m.queries() != s || m.blocks() != layout.num_blocks())
    {
        return Err(Error::Shape(format!(
            "mask {}×{} does not match {s} tokens in {} blocks",
            m.queries(),
            m.blocks(),
            layout.num_blocks()
        )));
    }
    Ok(())
}

fn attended_total(mask: &SelectionMask, layout: &BlockLayout) -> u64 {
    (0..mask.queries())
        .map(|q| mask.attended_tokens(q, layout) as u64)
        .sum()
}

/// FLOPs of block selection plus sparse attention against dense attention.
///
/// `masks` holds one mask per head; a single mask is shared by all heads.
/// Selection costs `2·s·N_b·d`, sparse attention `4·(d/h)·Σ_q attended(q)`
/// per head, dense attention `4·s²·d`.
pub fn flops_estimate(
    geom: &LatentGeometry,
    layout: &BlockLayout,
    masks: &[SelectionMask],
) -> Result<FlopsReport> {
    check_masks(geom, layout, masks)?;
    let s = geom.seq_len() as u64;
    let d = geom.hidden as u64;
    let head_dim = geom.head_dim() as u64;
    let heads = geom.heads as u64;
    let nb = layout.num_blocks() as u64;

    let per_head: Vec<(u64, usize)> = masks
        .iter()
        .map(|m| (attended_total(m, layout), m.selected()))
        .collect();
    let repeat = if masks.len() == 1 { heads } else { 1 };
    let attended: u64 = per_head.iter().map(|p| p.0).sum::<u64>() * repeat;
    let pairs: usize = per_head.iter().map(|p| p.1).sum();

    let selection_flops = 2 * s * nb * d;
    let attention_flops = 4 * head_dim * attended;
    let total_flops = selection_flops + attention_flops;
    let dense_flops = 4 * s * s * d;
    Ok(FlopsReport {
        selection_flops,
        attention_flops,
        total_flops,
        dense_flops,
        k_avg: pairs as f64 / (masks.len() as f64 * s as f64),
        speedup: dense_flops as f64 / total_flops as f64,
    })
}

/// Closed-form FLOPs for equal blocks of `block_len` tokens:
/// `s·d·(2·s/s_b + 4·k_avg·s_b)`.
pub fn closed_form_flops(seq_len: usize, hidden: usize, block_len: usize, k_avg: f64) -> f64 {
    let (s, d, sb) = (seq_len as f64, hidden as f64, block_len as f64);
    s * d * (2.0 * s / sb + 4.0 * k_avg * sb)
}

/// Attended (query, key-token) pairs over `s²`, averaged over head masks.
pub fn token_sparsity(masks: &[SelectionMask], layout: &BlockLayout) -> Result<f64> {
    let s = layout.seq_len();
    if masks.is_empty() {
        return Err(Error::Shape("no masks given".into()));
    }
    let mut acc = 0.0;
    for m in masks {
        if m.queries() != s || m.blocks() != layout.num_blocks() {
            return Err(Error::Shape(format!(
                "mask {}×{} does not match layout",
                m.queries(),
                m.blocks()
            )));
        }
        acc += attended_total(m, layout) as f64 / (s as f64 * s as f64);
    }
    Ok(acc / masks.len() as f64)
}

/// How a score row is turned into a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowNorm {
    /// Softmax of the raw row.
    Softmax,
    /// Divide a nonnegative row by its sum.
    Sum,
}

fn normalize_row(row: &[f64], norm: RowNorm) -> Result<Vec<f64>> {
    match norm {
        RowNorm::Softmax => {
            let mut r = row.to_vec();
            softmax_in_place(&mut r, 1.0);
            Ok(r)
        }
        RowNorm::Sum => {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&x| x < 0.0) || total <= 0.0 {
                return Err(Error::Shape(
                    "sum normalization needs a nonnegative row with positive mass".into(),
                ));
            }
            Ok(row.iter().map(|x| x / total).collect())
        }
    }
}

/// For each row: normalize, sort descending, sum the largest `ceil(p·n)`
/// entries.
pub fn query_importance<T: Scalar>(rows: &Tensor<T>, p: f64, norm: RowNorm) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Policy(format!("fraction p must lie in (0, 1], got {p}")));
    }
    let (n_rows, n) = rows.dims2()?;
    let top = ((p * n as f64).ceil() as usize).clamp(1, n.max(1));
    (0..n_rows)
        .into_par_iter()
        .map(|i| {
            let raw: Vec<f64> = rows.row(i).iter().map(|x| x.as_f64()).collect();
            let mut r = normalize_row(&raw, norm)?;
            r.sort_by(|a, b| b.total_cmp(a));
            Ok(r[..top].iter().sum())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cutoff {
    pub fraction: f64,
    /// Number of top pairs needed for the cumulative mass to reach
    /// `fraction`.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    /// Softmax-normalized scores, descending.
    pub sorted: Vec<f64>,
    /// Running sum of `sorted`; ends at 1.
    pub cumulative: Vec<f64>,
    pub cutoffs: Vec<Cutoff>,
}

impl ConcentrationReport {
    pub fn cutoff_index(&self, fraction: f64) -> Option<usize> {
        self.cutoffs
            .iter()
            .find(|c| c.fraction == fraction)
            .map(|c| c.count)
    }

    /// `index,score,cumulative` rows, index starting at 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,score,cumulative\n");
        for (i, (s, c)) in self.sorted.iter().zip(&self.cumulative).enumerate() {
            let _ = writeln!(out, "{},{s:e},{c:e}", i + 1);
        }
        out
    }
}

/// Flattens one head's scores, softmax-normalizes them over the whole
/// matrix, sorts descending and accumulates.
pub fn concentration_curve<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    fractions: &[f64],
) -> Result<ConcentrationReport> {
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Policy(format!("fractions must lie in (0, 1], got {f}")));
    }
    let mut scores: Vec<f64> = sim.scores().data().iter().map(|x| x.as_f64()).collect();
    if scores.is_empty() {
        return Err(Error::Shape("empty similarity matrix".into()));
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let max = scores[0];
    let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
    let mut running = Vec::with_capacity(exps.len());
    let mut acc = 0.0;
    for e in &exps {
        acc += e;
        running.push(acc);
    }
    let total = acc;
    let cutoffs = fractions
        .iter()
        .map(|&f| Cutoff {
            fraction: f,
            count: running
                .iter()
                .position(|&c| c >= f * total)
                .map_or(running.len(), |i| i + 1),
        })
        .collect();
    Ok(ConcentrationReport {
        sorted: exps.iter().map(|e| e / total).collect(),
        cumulative: running.iter().map(|c| c / total).collect(),
        cutoffs,
    })
}

/// Query-block × key-block attention map of dense attention: entry `(i, j)`
/// is the mean, over queries in query block `i`, of the attention mass the
/// query puts on key block `j`.
pub fn block_attention_map<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    layout_q: &BlockLayout,
    layout_k: &BlockLayout,
    scaled: bool,
) -> Result<Tensor<f64>> {
    let (sq, dim) = q.dims2()?;
    let (sk, dim_k) = k.dims2()?;
    if dim != dim_k || sq != layout_q.seq_len() || sk != layout_k.seq_len() {
        return Err(Error::Shape(format!(
            "Q {:?} / K {:?} do not match layouts of {} and {} tokens",
            q.shape(),
            k.shape(),
            layout_q.seq_len(),
            layout_k.seq_len()
        )));
    }
    let scale = logit_scale::<T>(dim, scaled);
    let nk = layout_k.num_blocks();
    let per_query: Vec<Vec<f64>> = (0..sq)
        .into_par_iter()
        .map(|i| {
            let mut logits: Vec<T> = (0..sk).map(|j| dot(q.row(i), k.row(j))).collect();
            softmax_in_place(&mut logits, scale);
            let mut mass = vec![0.0f64; nk];
            for (j, p) in logits.iter().enumerate() {
                mass[layout_k.block_of(j)] += p.as_f64();
            }
            mass
        })
        .collect();
    let nq = layout_q.num_blocks();
    let mut data = vec![0.0f64; nq * nk];
    for bi in 0..nq {
        let toks = layout_q.tokens(bi);
        let row = &mut data[bi * nk..(bi + 1) * nk];
        for &i in toks {
            for (r, m) in row.iter_mut().zip(&per_query[i]) {
                *r += m;
            }
        }
        for r in row.iter_mut() {
            *r /= toks.len() as f64;
        }
    }
    Ok(Tensor::new([nq, nk], data)?)
}

/// `head,query_block,key_block,mass` rows for a set of per-head maps.
pub fn block_maps_to_csv(maps: &[Tensor<f64>]) -> String {
    let mut out = String::from("head,query_block,key_block,mass\n");
    for (h, m) in maps.iter().enumerate() {
        let (r, c) = (m.shape()[0], m.shape()[1]);
        for i in 0..r {
            for j in 0..c {
                let _ = writeln!(out, "{h},{i},{j},{:e}", m.at2(i, j));
            }
        }
    }
    out
}

/// `head,query,top_sum` rows.
pub fn importance_to_csv(per_head: &[Vec<f64>]) -> String {
    let mut out = String::from("head,query,top_sum\n");
    for (h, v) in per_head.iter().enumerate() {
        for (q, x) in v.iter().enumerate() {
            let _ = writeln!(out, "{h},{q},{x:e}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_layout, PartitionSpec};
    use crate::selection::{select_global_threshold, similarity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn2(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// s = 1024 tokens in 16 temporal slabs of 64.
    fn slab_fixture() -> (LatentGeometry, BlockLayout) {
        let g = LatentGeometry::new(16, 8, 8, 64, 1).unwrap();
        let l = build_layout(&g, &PartitionSpec::Temporal1D { t: 1 }).unwrap();
        (g, l)
    }

    fn every_query_selects(n: usize, s: usize, nb: usize) -> SelectionMask {
        let bits = (0..s * nb).map(|i| (i % nb + i / nb) % nb < n).collect();
        SelectionMask::from_bits(s, nb, bits).unwrap()
    }

    #[test]
    fn hand_computed_flops() {
        let (g, l) = slab_fixture();
        let r = flops_estimate(&g, &l, &[every_query_selects(4, 1024, 16)]).unwrap();
        assert_eq!(r.selection_flops, 2_097_152);
        assert_eq!(r.attention_flops, 67_108_864);
        assert_eq!(r.total_flops, 69_206_016);
        assert_eq!(r.dense_flops, 268_435_456);
        assert_eq!(r.k_avg, 4.0);
        assert!((r.speedup - 3.879).abs() < 1e-3);
        assert_eq!(
            r.total_flops as f64,
            closed_form_flops(1024, 64, 64, r.k_avg)
        );
    }

    #[test]
    fn full_mask_costs_more_than_dense() {
        let (g, l) = slab_fixture();
        let r = flops_estimate(&g, &l, &[SelectionMask::full(1024, 16)]).unwrap();
        assert_eq!(r.attention_flops, r.dense_flops);
        assert!(r.speedup < 1.0);
        let half = flops_estimate(&g, &l, &[every_query_selects(8, 1024, 16)]).unwrap();
        assert_eq!(half.attention_flops * 2, r.attention_flops);
    }

    #[test]
    fn per_head_masks_sum() {
        let g = LatentGeometry::new(16, 8, 8, 64, 2).unwrap();
        let l = build_layout(&g, &PartitionSpec::Temporal1D { t: 1 }).unwrap();
        let a = every_query_selects(2, 1024, 16);
        let b = every_query_selects(6, 1024, 16);
        let r = flops_estimate(&g, &l, &[a, b]).unwrap();
        assert_eq!(r.k_avg, 4.0);
        assert_eq!(r.attention_flops, 4 * 32 * 1024 * (2 * 64 + 6 * 64));
        assert!(flops_estimate(&g, &l, &[]).is_err());
    }

    #[test]
    fn sparsity_extremes() {
        let (_, l) = slab_fixture();
        assert_eq!(token_sparsity(&[SelectionMask::full(1024, 16)], &l).unwrap(), 1.0);
        let single = BlockLayout::singletons(10);
        let bits = (0..100).map(|i| i % 11 == 0).collect();
        let m = SelectionMask::from_bits(10, 10, bits).unwrap();
        assert!((token_sparsity(&[m], &single).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn threshold_sparsity_bound_on_uniform_blocks() {
        let g = LatentGeometry::new(4, 6, 8, 16, 1).unwrap();
        let l = build_layout(&g, &PartitionSpec::SpatioTemporal3D { t: 2, h: 3, w: 4 }).unwrap();
        for seed in 0..10 {
            let q = random(192, 16, seed);
            let k = random(192, 16, seed + 50);
            let means = crate::partition::block_means(&k, &l).unwrap();
            let sim = similarity(&q, &means, true).unwrap();
            let m = select_global_threshold(&sim, 0.25, &l, false).unwrap();
            let sp = token_sparsity(&[m], &l).unwrap();
            assert!(sp <= 0.25 + 1.0 / (192.0 * 8.0), "seed {seed}: {sp}");
        }
    }

    #[test]
    fn importance_cases() {
        let uniform = Tensor::full([3, 8], 0.7f32).unwrap();
        for v in query_importance(&uniform, 0.25, RowNorm::Softmax).unwrap() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let one_hot = Tensor::from_fn2(2, 8, |i, j| if j == i + 3 { 1.0f32 } else { 0.0 }).unwrap();
        assert_eq!(query_importance(&one_hot, 0.25, RowNorm::Sum).unwrap(), vec![1.0, 1.0]);
        let rows = random(5, 9, 3);
        let got = query_importance(&rows, 0.3, RowNorm::Softmax).unwrap();
        for (i, g) in got.iter().enumerate() {
            let r: Vec<f64> = rows.row(i).iter().map(|&x| x as f64).collect();
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            let mut p: Vec<f64> = r.iter().map(|x| x.exp() / z).collect();
            p.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let expect: f64 = p[..3].iter().sum();
            assert!((g - expect).abs() < 1e-12);
        }
        assert!(query_importance(&rows, 0.0, RowNorm::Softmax).is_err());
    }

    #[test]
    fn concentration_cases() {
        let uniform = SimilarityMatrix::from_scores(Tensor::full([10, 7], 1.0f32).unwrap(), false).unwrap();
        let r = concentration_curve(&uniform, &[0.5, 0.3]).unwrap();
        assert_eq!(r.cutoff_index(0.5), Some(35));
        assert_eq!(r.cutoff_index(0.3), Some(21));
        assert_eq!(*r.cumulative.last().unwrap(), 1.0);

        let mut d = vec![0.0f32; 70];
        d[12] = 20.0;
        let dominant = SimilarityMatrix::from_scores(Tensor::new([10, 7], d).unwrap(), false).unwrap();
        assert_eq!(concentration_curve(&dominant, &[0.3]).unwrap().cutoff_index(0.3), Some(1));
        assert!(concentration_curve(&dominant, &[1.2]).is_err());
    }

    #[test]
    fn sharper_head_concentrates() {
        let logits = random(30, 6, 21);
        let fractions = [0.1, 0.3, 0.5, 0.7, 0.9];
        let soft = SimilarityMatrix::from_scores(logits.clone(), false).unwrap();
        let sharp = SimilarityMatrix::from_scores(logits.scale(8.0).unwrap(), false).unwrap();
        let a = concentration_curve(&soft, &fractions).unwrap();
        let b = concentration_curve(&sharp, &fractions).unwrap();
        for f in fractions {
            // direct count from explicit probabilities
            let direct = |m: &Tensor<f32>| {
                let mut p: Vec<f64> = m.data().iter().map(|&x| (x as f64).exp()).collect();
                let z: f64 = p.iter().sum();
                p.sort_by(|x, y| y.partial_cmp(x).unwrap());
                let mut acc = 0.0;
                p.iter().position(|v| { acc += v / z; acc >= f }).unwrap() + 1
            };
            assert_eq!(a.cutoff_index(f), Some(direct(&logits)));
            assert_eq!(b.cutoff_index(f), Some(direct(&logits.scale(8.0).unwrap())));
            assert!(b.cutoff_index(f) < a.cutoff_index(f), "f = {f}");
        }
        assert!(a.cumulative.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn identity_affinity_map_is_diagonal() {
        let q = Tensor::<f32>::eye(8).scale(10.0).unwrap();
        let k = Tensor::<f32>::eye(8);
        let l = BlockLayout::singletons(8);
        let map = block_attention_map(&q, &k, &l, &l, false).unwrap();
        let diag = (10f64).exp() / ((10f64).exp() + 7.0);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { diag } else { (1.0 - diag) / 7.0 };
                assert!((map.at2(i, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_keys_map_to_block_share() {
        let g = LatentGeometry::new(5, 6, 8, 4, 1).unwrap();
        let l = build_layout(&g, &PartitionSpec::SpatioTemporal3D { t: 2, h: 3, w: 4 }).unwrap();
        let q = random(240, 4, 31);
        let k = Tensor::full([240, 4], 0.4f32).unwrap();
        let map = block_attention_map(&q, &k, &l, &l, true).unwrap();
        for i in 0..l.num_blocks() {
            for j in 0..l.num_blocks() {
                assert!((map.at2(i, j) - l.block_len(j) as f64 / 240.0).abs() < 1e-6);
            }
        }
        let map = block_attention_map(&q, &random(240, 4, 32), &l, &l, true).unwrap();
        for i in 0..l.num_blocks() {
            let total: f64 = (0..l.num_blocks()).map(|j| map.at2(i, j)).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }
}
