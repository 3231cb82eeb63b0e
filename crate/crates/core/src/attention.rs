//! Single-head attention over a block selection mask.
//!
//! Three forward routes compute the same function:
//!
//! * [`masked_dense_attention`] scores every key and masks unselected ones
//!   with `-inf` before the softmax (the verification oracle);
//! * [`sparse_forward_gather`] gathers the selected keys of each query and
//!   runs one softmax over them;
//! * [`sparse_forward_streamed`] visits the selected blocks one at a time and
//!   merges the partial softmax results by log-sum-exp rescaling.
//!
//! All of them return the per-query log-sum-exp so that [`sparse_backward`]
//! can rebuild the attention probabilities without a second normalization
//! pass. Masks are constants for the backward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::partition::BlockLayout;
use crate::selection::SelectionMask;
use crate::tensor::{dot, Scalar, Tensor};

/// Output and per-query log-sum-exp of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIO<T = f32> {
    pub output: Tensor<T>,
    pub lse: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T = f32> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

/// `1/sqrt(head_dim)` when `scaled`, else 1.
pub fn logit_scale<T: Scalar>(head_dim: usize, scaled: bool) -> T {
    if scaled {
        T::one() / T::from_usize(head_dim).sqrt()
    } else {
        T::one()
    }
}

struct Dims {
    queries: usize,
    keys: usize,
    dim: usize,
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Dims> {
    let (sq, dq) = q.dims2()?;
    let (sk, dk) = k.dims2()?;
    let (sv, dv) = v.dims2()?;
    if dq != dk || dq != dv || sk != sv {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?} are not a consistent attention input",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if sk == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    Ok(Dims {
        queries: sq,
        keys: sk,
        dim: dq,
    })
}

fn check_mask(dims: &Dims, layout: &BlockLayout, mask: &SelectionMask) -> Result<()> {
    if layout.seq_len() != dims.keys
        || mask.blocks() != layout.num_blocks()
        || mask.queries() != dims.queries
    {
        return Err(Error::Shape(format!(
            "mask {}×{} does not fit {} queries and {} keys in {} blocks",
            mask.queries(),
            mask.blocks(),
            dims.queries,
            dims.keys,
            layout.num_blocks()
        )));
    }
    match mask.first_empty_row() {
        Some(query) => Err(Error::EmptyAttention { query }),
        None => Ok(()),
    }
}

/// Softmax-weighted sum of `v` rows over `logits` (already scaled).
/// `-inf` logits contribute nothing. Writes the output row and returns the
/// log-sum-exp.
fn weighted_sum<T: Scalar>(
    logits: &[T],
    key_ids: impl Iterator<Item = usize>,
    v: &Tensor<T>,
    out: &mut [T],
) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    out.fill(T::zero());
    for (&x, j) in logits.iter().zip(key_ids) {
        let e = (x - max).exp();
        sum = sum + e;
        for (o, &vj) in out.iter_mut().zip(v.row(j)) {
            *o = *o + e * vj;
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    max + sum.ln()
}

fn run_rows<T: Scalar>(
    queries: usize,
    dim: usize,
    row_fn: impl Fn(usize, &mut [T]) -> T + Sync,
) -> Result<AttentionIO<T>> {
    let mut out = vec![T::zero(); queries * dim];
    let mut lse = vec![T::zero(); queries];
    if dim > 0 {
        out.par_chunks_mut(dim)
            .zip(lse.par_iter_mut())
            .enumerate()
            .for_each(|(i, (row, l))| *l = row_fn(i, row));
    } else {
        lse.par_iter_mut()
            .enumerate()
            .for_each(|(i, l)| *l = row_fn(i, &mut []));
    }
    Ok(AttentionIO {
        output: Tensor::new([queries, dim], out)?,
        lse,
    })
}

/// `softmax(scale · Q Kᵀ) V` with a row-wise stable softmax.
pub fn dense_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scaled: bool,
) -> Result<AttentionIO<T>> {
    let d = check_qkv(q, k, v)?;
    let scale = logit_scale::<T>(d.dim, scaled);
    run_rows(d.queries, d.dim, |i, out| {
        let qi = q.row(i);
        let logits: Vec<T> = (0..d.keys).map(|j| dot(qi, k.row(j)) * scale).collect();
        weighted_sum(&logits, 0..d.keys, v, out)
    })
}

/// Dense attention with a token-level `-inf` mask on keys whose block is not
/// selected for the query.
pub fn masked_dense_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &BlockLayout,
    mask: &SelectionMask,
    scaled: bool,
) -> Result<AttentionIO<T>> {
    let d = check_qkv(q, k, v)?;
    check_mask(&d, layout, mask)?;
    let scale = logit_scale::<T>(d.dim, scaled);
    run_rows(d.queries, d.dim, |i, out| {
        let qi = q.row(i);
        let row = mask.row(i);
        let logits: Vec<T> = (0..d.keys)
            .map(|j| {
                let x = dot(qi, k.row(j)) * scale;
                if row[layout.block_of(j)] {
                    x
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        weighted_sum(&logits, 0..d.keys, v, out)
    })
}

/// Key tokens of query `i` in gather order: selected blocks ascending, tokens
/// ascending within each block.
fn gathered_keys<'a>(
    layout: &'a BlockLayout,
    mask: &'a SelectionMask,
    i: usize,
) -> impl Iterator<Item = usize> + Clone + 'a {
    mask.row_blocks(i)
        .flat_map(move |b| layout.tokens(b).iter().copied())
}

/// Gathers the selected keys of every query and attends over them with one
/// softmax.
pub fn sparse_forward_gather<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &BlockLayout,
    mask: &SelectionMask,
    scaled: bool,
) -> Result<AttentionIO<T>> {
    let d = check_qkv(q, k, v)?;
    check_mask(&d, layout, mask)?;
    let scale = logit_scale::<T>(d.dim, scaled);
    run_rows(d.queries, d.dim, |i, out| {
        let qi = q.row(i);
        let keys = gathered_keys(layout, mask, i);
        let logits: Vec<T> = keys.clone().map(|j| dot(qi, k.row(j)) * scale).collect();
        weighted_sum(&logits, keys, v, out)
    })
}

/// Running softmax state for one query.
struct OnlineRow<'a, T> {
    max: T,
    sum: T,
    acc: &'a mut [T],
}

impl<'a, T: Scalar> OnlineRow<'a, T> {
    fn new(acc: &'a mut [T]) -> Self {
        acc.fill(T::zero());
        Self {
            max: T::neg_infinity(),
            sum: T::zero(),
            acc,
        }
    }

    /// Merges one block: its scaled logits and the matching key ids.
    fn merge_block(&mut self, logits: &[T], key_ids: &[usize], v: &Tensor<T>, partial: &mut [T]) {
        let block_max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let new_max = self.max.max(block_max);
        let mut block_sum = T::zero();
        partial.fill(T::zero());
        for (&x, &j) in logits.iter().zip(key_ids) {
            let e = (x - new_max).exp();
            block_sum = block_sum + e;
            for (p, &vj) in partial.iter_mut().zip(v.row(j)) {
                *p = *p + e * vj;
            }
        }
        // exp(-inf) = 0 on the first block
        let alpha = (self.max - new_max).exp();
        self.sum = self.sum * alpha + block_sum;
        for (a, &p) in self.acc.iter_mut().zip(partial.iter()) {
            *a = *a * alpha + p;
        }
        self.max = new_max;
    }

    fn finish(self) -> T {
        for a in self.acc.iter_mut() {
            *a = *a / self.sum;
        }
        self.max + self.sum.ln()
    }
}

/// Block-streamed attention: selected blocks are visited in ascending id
/// order and merged with a running max, running exponent sum and rescaled
/// value accumulator.
pub fn sparse_forward_streamed<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &BlockLayout,
    mask: &SelectionMask,
    scaled: bool,
) -> Result<AttentionIO<T>> {
    let d = check_qkv(q, k, v)?;
    check_mask(&d, layout, mask)?;
    let scale = logit_scale::<T>(d.dim, scaled);
    run_rows(d.queries, d.dim, |i, out| {
        let qi = q.row(i);
        let mut partial = vec![T::zero(); d.dim];
        let mut logits = Vec::new();
        let mut state = OnlineRow::new(out);
        for b in mask.row_blocks(i) {
            let toks = layout.tokens(b);
            logits.clear();
            logits.extend(toks.iter().map(|&j| dot(qi, k.row(j)) * scale));
            state.merge_block(&logits, toks, v, &mut partial);
        }
        state.finish()
    })
}

/// Attention weights of query `i` over its selected keys, recovered from the
/// stored log-sum-exp. Returned as `(key, weight)` in gather order.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    layout: &BlockLayout,
    mask: &SelectionMask,
    lse: &[T],
    scaled: bool,
    i: usize,
) -> Vec<(usize, T)> {
    let scale = logit_scale::<T>(q.shape()[1], scaled);
    gathered_keys(layout, mask, i)
        .map(|j| (j, (dot(q.row(i), k.row(j)) * scale - lse[i]).exp()))
        .collect()
}

/// Gradients of `sum(dO ⊙ O)` with respect to Q, K and V for masked
/// attention. Only selected (query, key) pairs contribute.
///
/// dK and dV are reduced per key over the selecting queries in ascending
/// order, so the result is independent of the worker count.
#[allow(clippy::too_many_arguments)]
pub fn sparse_backward<T: Scalar>(
    io: &AttentionIO<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &BlockLayout,
    mask: &SelectionMask,
    d_out: &Tensor<T>,
    scaled: bool,
) -> Result<AttentionGrads<T>> {
    let d = check_qkv(q, k, v)?;
    check_mask(&d, layout, mask)?;
    if d_out.shape() != io.output.shape()
        || io.output.shape() != [d.queries, d.dim]
        || io.lse.len() != d.queries
    {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} / forward output {:?} do not match {} queries × {}",
            d_out.shape(),
            io.output.shape(),
            d.queries,
            d.dim
        )));
    }
    let scale = logit_scale::<T>(d.dim, scaled);
    let lse = &io.lse;
    // D_i = <dO_i, O_i>
    let delta: Vec<T> = (0..d.queries)
        .map(|i| dot(d_out.row(i), io.output.row(i)))
        .collect();

    // per query: (key, P_ij, dS_ij) over its gathered keys
    let rows: Vec<Vec<(usize, T, T)>> = (0..d.queries)
        .into_par_iter()
        .map(|i| {
            let (qi, doi) = (q.row(i), d_out.row(i));
            gathered_keys(layout, mask, i)
                .map(|j| {
                    let p = (dot(qi, k.row(j)) * scale - lse[i]).exp();
                    (j, p, p * (dot(doi, v.row(j)) - delta[i]) * scale)
                })
                .collect()
        })
        .collect();

    let mut dq = vec![T::zero(); d.queries * d.dim];
    if d.dim > 0 {
        dq.par_chunks_mut(d.dim).zip(&rows).for_each(|(out, row)| {
            for &(j, _, ds) in row {
                for (o, &kj) in out.iter_mut().zip(k.row(j)) {
                    *o = *o + ds * kj;
                }
            }
        });
    }

    // every key accumulates over its selecting queries in ascending order
    let mut dk = vec![T::zero(); d.keys * d.dim];
    let mut dv = vec![T::zero(); d.keys * d.dim];
    if d.dim > 0 {
        for (i, row) in rows.iter().enumerate() {
            let (qi, doi) = (q.row(i), d_out.row(i));
            for &(j, p, ds) in row {
                let span = j * d.dim..(j + 1) * d.dim;
                for (a, &g) in dv[span.clone()].iter_mut().zip(doi) {
                    *a = *a + p * g;
                }
                for (b, &x) in dk[span].iter_mut().zip(qi) {
                    *b = *b + ds * x;
                }
            }
        }
    }
    Ok(AttentionGrads {
        dq: Tensor::new([d.queries, d.dim], dq)?,
        dk: Tensor::new([d.keys, d.dim], dk)?,
        dv: Tensor::new([d.keys, d.dim], dv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_layout, LatentGeometry, PartitionSpec};
    use crate::selection::{select_global_threshold, similarity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::from_fn2(rows, cols, |_, _| T::from_f64(rng.random_range(-1.0..1.0))).unwrap()
    }

    fn random_mask(queries: usize, blocks: usize, rng: &mut ChaCha8Rng) -> SelectionMask {
        let mut bits: Vec<bool> = (0..queries * blocks).map(|_| rng.random_bool(0.4)).collect();
        for q in 0..queries {
            let b = rng.random_range(0..blocks);
            bits[q * blocks + b] = true;
        }
        SelectionMask::from_bits(queries, blocks, bits).unwrap()
    }

    /// Materializes the probability matrix, then multiplies by V.
    fn two_step(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let (s, dim) = q.dims2().unwrap();
        let sk = k.shape()[0];
        let scale = 1.0 / (dim as f64).sqrt();
        (0..s)
            .map(|i| {
                let logits: Vec<f64> = (0..sk)
                    .map(|j| {
                        if allowed(i, j) {
                            (0..dim).map(|c| q.at2(i, c) as f64 * k.at2(j, c) as f64).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                let p: Vec<f64> = logits.iter().map(|x| (x - m).exp() / z).collect();
                (0..dim)
                    .map(|c| (0..sk).map(|j| p[j] * v.at2(j, c) as f64).sum())
                    .collect()
            })
            .collect()
    }

    fn max_diff(t: &Tensor<f32>, oracle: &[Vec<f64>]) -> f64 {
        let mut m = 0.0f64;
        for (i, row) in oracle.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                m = m.max((t.at2(i, c) as f64 - x).abs());
            }
        }
        m
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random::<f32>(1, 4, &mut rng), random(1, 4, &mut rng), random(1, 4, &mut rng));
        let io = dense_attention(&q, &k, &v, true).unwrap();
        assert_eq!(io.output, v);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random::<f32>(6, 3, &mut rng);
        let k = Tensor::from_fn2(6, 3, |_, j| [0.3f32, -0.2, 0.9][j]).unwrap();
        let v = random::<f32>(6, 3, &mut rng);
        let io = dense_attention(&q, &k, &v, true).unwrap();
        let mean: Vec<f32> = v.column_sums().unwrap().iter().map(|x| x / 6.0).collect();
        for i in 0..6 {
            for c in 0..3 {
                assert!((io.output.at2(i, c) - mean[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_matches_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (random::<f32>(16, 8, &mut rng), random(16, 8, &mut rng), random(16, 8, &mut rng));
        let io = dense_attention(&q, &k, &v, true).unwrap();
        assert!(max_diff(&io.output, &two_step(&q, &k, &v, |_, _| true)) < 1e-6);
    }

    fn fixture(seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>, BlockLayout) {
        let g = LatentGeometry::new(5, 6, 8, 8, 1).unwrap();
        let layout = build_layout(&g, &PartitionSpec::SpatioTemporal3D { t: 2, h: 3, w: 4 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(240, 8, &mut rng);
        let k = random(240, 8, &mut rng);
        let v = random(240, 8, &mut rng);
        (q, k, v, layout)
    }

    #[test]
    fn full_mask_is_bitwise_dense() {
        let (q, k, v, layout) = fixture(4);
        let full = SelectionMask::full(240, layout.num_blocks());
        let dense = dense_attention(&q, &k, &v, true).unwrap();
        assert_eq!(masked_dense_attention(&q, &k, &v, &layout, &full, true).unwrap(), dense);
        let gather = sparse_forward_gather(&q, &k, &v, &layout, &full, true).unwrap();
        assert!(gather.output.max_abs_diff(&dense.output).unwrap() < 1e-5);
    }

    #[test]
    fn singleton_delta_mask_copies_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random::<f32>(6, 4, &mut rng), random(6, 4, &mut rng), random(6, 4, &mut rng));
        let layout = BlockLayout::singletons(6);
        let pick = [3usize, 0, 5, 5, 1, 2];
        let mut bits = vec![false; 36];
        for (i, &j) in pick.iter().enumerate() {
            bits[i * 6 + j] = true;
        }
        let mask = SelectionMask::from_bits(6, 6, bits).unwrap();
        for io in [
            masked_dense_attention(&q, &k, &v, &layout, &mask, true).unwrap(),
            sparse_forward_gather(&q, &k, &v, &layout, &mask, true).unwrap(),
            sparse_forward_streamed(&q, &k, &v, &layout, &mask, true).unwrap(),
        ] {
            for (i, &j) in pick.iter().enumerate() {
                assert_eq!(io.output.row(i), v.row(j));
            }
        }
    }

    #[test]
    fn random_mask_matches_gather_oracle() {
        let (q, k, v, layout) = fixture(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mask = random_mask(240, layout.num_blocks(), &mut rng);
        let oracle = two_step(&q, &k, &v, |i, j| mask.get(i, layout.block_of(j)));
        let masked = masked_dense_attention(&q, &k, &v, &layout, &mask, true).unwrap();
        let gather = sparse_forward_gather(&q, &k, &v, &layout, &mask, true).unwrap();
        let streamed = sparse_forward_streamed(&q, &k, &v, &layout, &mask, true).unwrap();
        assert!(max_diff(&masked.output, &oracle) < 1e-6);
        assert!(gather.output.max_abs_diff(&masked.output).unwrap() < 1e-5);
        assert!(streamed.output.max_abs_diff(&gather.output).unwrap() <= 1e-6);
        for (a, b) in streamed.lse.iter().zip(&gather.lse) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn threshold_mask_routes_agree() {
        let (q, k, v, layout) = fixture(7);
        let means = crate::partition::block_means(&k, &layout).unwrap();
        let sim = similarity(&q, &means, true).unwrap();
        let mask = select_global_threshold(&sim, 0.25, &layout, true).unwrap();
        let masked = masked_dense_attention(&q, &k, &v, &layout, &mask, true).unwrap();
        let gather = sparse_forward_gather(&q, &k, &v, &layout, &mask, true).unwrap();
        assert!(gather.output.max_abs_diff(&masked.output).unwrap() <= 1e-5);
    }

    #[test]
    fn single_block_streamed_is_bitwise_gather() {
        let (q, k, v, layout) = fixture(8);
        let nb = layout.num_blocks();
        let mut bits = vec![false; 240 * nb];
        for i in 0..240 {
            bits[i * nb + (i * 7) % nb] = true;
        }
        let mask = SelectionMask::from_bits(240, nb, bits).unwrap();
        assert_eq!(
            sparse_forward_streamed(&q, &k, &v, &layout, &mask, true).unwrap(),
            sparse_forward_gather(&q, &k, &v, &layout, &mask, true).unwrap()
        );
    }

    #[test]
    fn streamed_survives_disparate_block_magnitudes() {
        // block 0 logits around -1e3, block 1 around +1e3
        let layout = BlockLayout::singletons(2);
        let q = Tensor::new([2, 1], vec![1000.0f32, -1000.0]).unwrap();
        let k = Tensor::new([2, 1], vec![-1.0f32, 1.0]).unwrap();
        let v = Tensor::new([2, 1], vec![5.0f32, 0.25]).unwrap();
        let mask = SelectionMask::full(2, 2);
        let s = sparse_forward_streamed(&q, &k, &v, &layout, &mask, false).unwrap();
        let g = sparse_forward_gather(&q, &k, &v, &layout, &mask, false).unwrap();
        assert!(s.output.data().iter().all(|x| x.is_finite()));
        assert!(s.output.max_abs_diff(&g.output).unwrap() <= 1e-6);
        assert_eq!(s.output.row(0), &[0.25]);
        assert_eq!(s.output.row(1), &[5.0]);
        assert!((s.lse[0] - 1000.0).abs() < 1e-3);
        assert!((s.lse[1] - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn duplicate_values_stay_on_simplex() {
        let (q, k, _, layout) = fixture(9);
        let v = Tensor::from_fn2(240, 8, |i, c| if i % 2 == 0 { c as f32 } else { -(c as f32) }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mask = random_mask(240, layout.num_blocks(), &mut rng);
        let io = sparse_forward_gather(&q, &k, &v, &layout, &mask, true).unwrap();
        for i in 0..240 {
            let w = attention_weights(&q, &k, &layout, &mask, &io.lse, true, i);
            let total: f32 = w.iter().map(|p| p.1).sum();
            assert!((total - 1.0).abs() <= 1e-5);
            assert!(w.iter().all(|p| p.1 >= 0.0));
            // output is the convex combination of the selected rows
            for c in 0..8 {
                let expect: f32 = w.iter().map(|&(j, p)| p * v.at2(j, c)).sum();
                assert!((io.output.at2(i, c) - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn empty_row_rejected() {
        let (q, k, v, layout) = fixture(10);
        let nb = layout.num_blocks();
        let mut bits = vec![true; 240 * nb];
        for b in 0..nb {
            bits[17 * nb + b] = false;
        }
        let mask = SelectionMask::from_bits(240, nb, bits).unwrap();
        for r in [
            masked_dense_attention(&q, &k, &v, &layout, &mask, true),
            sparse_forward_gather(&q, &k, &v, &layout, &mask, true),
            sparse_forward_streamed(&q, &k, &v, &layout, &mask, true),
        ] {
            assert!(matches!(r, Err(Error::EmptyAttention { query: 17 })));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random::<f32>(4, 3, &mut rng);
        let k = random::<f32>(4, 2, &mut rng);
        assert!(matches!(dense_attention(&q, &k, &k, true), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (q, k, v, layout) = fixture(12);
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        let mask = random_mask(240, layout.num_blocks(), &mut rng);
        let io = sparse_forward_gather(&q, &k, &v, &layout, &mask, true).unwrap();
        let g = sparse_backward(&io, &q, &k, &v, &layout, &mask, &Tensor::zeros([240, 8]), true).unwrap();
        for t in [&g.dq, &g.dk, &g.dv] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    /// Dense gradients written out with explicit matrices:
    /// P = softmax(c·QKᵀ), dV = Pᵀ dO, dP = dO Vᵀ, dS = P ⊙ (dP − rowsum(dP ⊙ P)),
    /// dQ = c·dS K, dK = c·dSᵀ Q.
    fn dense_grads_by_hand(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, d_o: &Tensor<f64>) -> [Vec<f64>; 3] {
        let (s, dim) = q.dims2().unwrap();
        let c = 1.0 / (dim as f64).sqrt();
        let mut p = vec![vec![0.0; s]; s];
        for i in 0..s {
            let l: Vec<f64> = (0..s).map(|j| c * (0..dim).map(|x| q.at2(i, x) * k.at2(j, x)).sum::<f64>()).collect();
            let m = l.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
            for j in 0..s {
                p[i][j] = (l[j] - m).exp() / z;
            }
        }
        let dp: Vec<Vec<f64>> = (0..s)
            .map(|i| (0..s).map(|j| (0..dim).map(|x| d_o.at2(i, x) * v.at2(j, x)).sum()).collect())
            .collect();
        let ds: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                let r: f64 = (0..s).map(|j| dp[i][j] * p[i][j]).sum();
                (0..s).map(|j| p[i][j] * (dp[i][j] - r)).collect()
            })
            .collect();
        let mut dq = vec![0.0; s * dim];
        let mut dk = vec![0.0; s * dim];
        let mut dv = vec![0.0; s * dim];
        for i in 0..s {
            for j in 0..s {
                for x in 0..dim {
                    dq[i * dim + x] += c * ds[i][j] * k.at2(j, x);
                    dk[j * dim + x] += c * ds[i][j] * q.at2(i, x);
                    dv[j * dim + x] += p[i][j] * d_o.at2(i, x);
                }
            }
        }
        [dq, dk, dv]
    }

    #[test]
    fn full_mask_grads_match_dense_formulas() {
        let g = LatentGeometry::new(2, 3, 4, 6, 1).unwrap();
        let layout = build_layout(&g, &PartitionSpec::Spatial2D { h: 2, w: 3 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (q, k, v, d_o) = (
            random::<f64>(24, 6, &mut rng),
            random::<f64>(24, 6, &mut rng),
            random::<f64>(24, 6, &mut rng),
            random::<f64>(24, 6, &mut rng),
        );
        let mask = SelectionMask::full(24, layout.num_blocks());
        let io = sparse_forward_streamed(&q, &k, &v, &layout, &mask, true).unwrap();
        let grads = sparse_backward(&io, &q, &k, &v, &layout, &mask, &d_o, true).unwrap();
        let expect = dense_grads_by_hand(&q, &k, &v, &d_o);
        for (got, want) in [&grads.dq, &grads.dk, &grads.dv].iter().zip(expect.iter()) {
            for (a, b) in got.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        // f32 route agrees with the f64 formulas too
        let (qf, kf, vf, dof) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>(), d_o.cast::<f32>());
        let io = sparse_forward_gather(&qf, &kf, &vf, &layout, &mask, true).unwrap();
        let grads = sparse_backward(&io, &qf, &kf, &vf, &layout, &mask, &dof, true).unwrap();
        for (got, want) in [&grads.dq, &grads.dk, &grads.dv].iter().zip(expect.iter()) {
            for (a, b) in got.data().iter().zip(want) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }
}
