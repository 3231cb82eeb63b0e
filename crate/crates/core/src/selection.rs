//! Query × key-block similarity and block selection.
//!
//! Four selection policies are available: `{local, global} × {top-k,
//! threshold}`. Local policies choose blocks independently for every query
//! row; global policies choose `(query, block)` pairs from one pool per head.
//! Threshold policies softmax-normalize the scores of their pool (the whole
//! matrix for global, one row for local) and keep the shortest
//! descending-score prefix whose cumulative mass reaches `tau`.
//!
//! Pairs are ordered by score descending, then query index, then block index,
//! so every mask is reproducible. Optionally every query is forced to attend
//! to the block that contains it.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::BlockLayout;
use crate::tensor::{dot, Scalar, Tensor};

/// Per-head `[seq_len × num_blocks]` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T = f32> {
    scores: Tensor<T>,
    scaled: bool,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn from_scores(scores: Tensor<T>, scaled: bool) -> Result<Self> {
        scores.dims2()?;
        Ok(Self { scores, scaled })
    }

    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    /// Whether the `1/sqrt(head_dim)` factor was applied.
    pub fn scaled(&self) -> bool {
        self.scaled
    }

    pub fn queries(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn blocks(&self) -> usize {
        self.scores.shape()[1]
    }

    fn check_layout(&self, layout: &BlockLayout) -> Result<()> {
        if self.queries() != layout.seq_len() || self.blocks() != layout.num_blocks() {
            return Err(Error::Shape(format!(
                "similarity is {}×{} but layout has {} tokens in {} blocks",
                self.queries(),
                self.blocks(),
                layout.seq_len(),
                layout.num_blocks()
            )));
        }
        Ok(())
    }
}

/// `S[q, b] = scale · <queries[q], means[b]>` with `scale = 1/sqrt(head_dim)`
/// when `scaled` is set.
pub fn similarity<T: Scalar>(
    queries: &Tensor<T>,
    means: &Tensor<T>,
    scaled: bool,
) -> Result<SimilarityMatrix<T>> {
    let (s, dim) = queries.dims2()?;
    let (nb, dim2) = means.dims2()?;
    if dim != dim2 {
        return Err(Error::Shape(format!(
            "queries have head dim {dim} but block means have {dim2}"
        )));
    }
    let scale = if scaled {
        T::one() / T::from_usize(dim).sqrt()
    } else {
        T::one()
    };
    let mut data = vec![T::zero(); s * nb];
    if nb > 0 {
        data.par_chunks_mut(nb).enumerate().for_each(|(q, out)| {
            let row = queries.row(q);
            for (b, o) in out.iter_mut().enumerate() {
                *o = scale * dot(row, means.row(b));
            }
        });
    }
    Ok(SimilarityMatrix {
        scores: Tensor::new([s, nb], data)?,
        scaled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    TopK(usize),
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub scope: Scope,
    pub rule: SelectionRule,
    /// Force every query to attend to its own block.
    pub include_self: bool,
}

impl SelectionPolicy {
    pub fn global_threshold(tau: f64) -> Self {
        Self {
            scope: Scope::Global,
            rule: SelectionRule::Threshold(tau),
            include_self: true,
        }
    }

    pub fn local_topk(k: usize) -> Self {
        Self {
            scope: Scope::Local,
            rule: SelectionRule::TopK(k),
            include_self: true,
        }
    }

    pub fn with_self(mut self, include_self: bool) -> Self {
        self.include_self = include_self;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.rule {
            SelectionRule::TopK(0) => Err(Error::Policy("top-k needs k >= 1".into())),
            SelectionRule::Threshold(tau) if !(tau > 0.0 && tau <= 1.0) => Err(Error::Policy(
                format!("threshold tau must lie in (0, 1], got {tau}"),
            )),
            _ => Ok(()),
        }
    }
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self::global_threshold(0.25)
    }
}

/// Boolean `[seq_len × num_blocks]` matrix of selected (query, block) pairs.
#[derive(Clone, PartialEq, Eq)]
pub struct SelectionMask {
    queries: usize,
    blocks: usize,
    bits: Vec<bool>,
    selected: usize,
}

impl std::fmt::Debug for SelectionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SelectionMask")
            .field("queries", &self.queries)
            .field("blocks", &self.blocks)
            .field("selected", &self.selected)
            .finish()
    }
}

impl SelectionMask {
    pub fn from_bits(queries: usize, blocks: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != queries * blocks {
            return Err(Error::Shape(format!(
                "{} mask bits for a {queries}×{blocks} mask",
                bits.len()
            )));
        }
        let selected = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            queries,
            blocks,
            bits,
            selected,
        })
    }

    pub fn full(queries: usize, blocks: usize) -> Self {
        Self {
            queries,
            blocks,
            bits: vec![true; queries * blocks],
            selected: queries * blocks,
        }
    }

    fn empty(queries: usize, blocks: usize) -> Self {
        Self {
            queries,
            blocks,
            bits: vec![false; queries * blocks],
            selected: 0,
        }
    }

    fn set(&mut self, q: usize, b: usize) {
        let bit = &mut self.bits[q * self.blocks + b];
        if !*bit {
            *bit = true;
            self.selected += 1;
        }
    }

    fn include_self(&mut self, layout: &BlockLayout) {
        for q in 0..self.queries {
            self.set(q, layout.block_of(q));
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn get(&self, q: usize, b: usize) -> bool {
        self.bits[q * self.blocks + b]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.blocks..(q + 1) * self.blocks]
    }

    /// Selected block ids of query `q`, ascending.
    pub fn row_blocks(&self, q: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        self.row(q)
            .iter()
            .enumerate()
            .filter_map(|(b, &on)| on.then_some(b))
    }

    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    /// Number of selected (query, block) pairs.
    pub fn selected(&self) -> usize {
        self.selected
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// True when every selected pair of `self` is also selected in `other`.
    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// First query with no selected block, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.queries).find(|&q| !self.row(q).iter().any(|&b| b))
    }

    /// Number of key tokens query `q` attends to under `layout`.
    pub fn attended_tokens(&self, q: usize, layout: &BlockLayout) -> usize {
        self.row_blocks(q).map(|b| layout.block_len(b)).sum()
    }

    /// 0/1 tensor of shape `[queries, blocks]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new([self.queries, self.blocks], data).expect("mask tensor shape")
    }

    /// Mask with block ids relabelled: column `b` moves to `perm[b]`.
    pub fn permute_blocks(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.queries, self.blocks);
        for q in 0..self.queries {
            for b in self.row_blocks(q) {
                out.set(q, perm[b]);
            }
        }
        out
    }
}

/// CSV listing of selected pairs, one `head,query,block` line per pair.
pub fn masks_to_csv(masks: &[SelectionMask]) -> String {
    let mut out = String::from("head,query,block\n");
    for (h, m) in masks.iter().enumerate() {
        for q in 0..m.queries() {
            for b in m.row_blocks(q) {
                let _ = writeln!(out, "{h},{q},{b}");
            }
        }
    }
    out
}

/// Indices of `scores` ordered by score descending, index ascending.
fn descending_order<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Length of the shortest prefix of `sorted` (descending scores) whose
/// softmax mass reaches `tau`.
///
/// The prefix sums run over unnormalized exponentials against
/// `tau · total`, with the total accumulated in the same order, so `tau = 1`
/// always selects everything. In exact arithmetic the prefix never exceeds
/// `ceil(tau · n)` because the largest `m` of `n` scores carry at least
/// `m / n` of the mass; the result is capped there to absorb rounding.
fn threshold_prefix<T: Scalar>(sorted: impl Iterator<Item = T> + Clone, tau: f64) -> usize {
    let mut values = sorted.map(Scalar::as_f64).peekable();
    let Some(&max) = values.peek() else {
        return 0;
    };
    let exps: Vec<f64> = values.map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let target = tau * total;
    let n = exps.len();
    let mut cum = 0.0;
    let mut k = n;
    for (i, e) in exps.iter().enumerate() {
        cum += e;
        if cum >= target {
            k = i + 1;
            break;
        }
    }
    k.min(((tau * n as f64).ceil() as usize).max(1))
}

pub fn select_global_threshold<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    tau: f64,
    layout: &BlockLayout,
    include_self: bool,
) -> Result<SelectionMask> {
    SelectionPolicy {
        scope: Scope::Global,
        rule: SelectionRule::Threshold(tau),
        include_self,
    }
    .validate()?;
    sim.check_layout(layout)?;
    let scores = sim.scores.data();
    let order = descending_order(scores);
    let k = threshold_prefix(order.iter().map(|&i| scores[i]), tau);
    Ok(mask_from_flat(sim, &order[..k], layout, include_self))
}

pub fn select_global_topk<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    k: usize,
    layout: &BlockLayout,
    include_self: bool,
) -> Result<SelectionMask> {
    sim.check_layout(layout)?;
    let pairs = sim.queries() * sim.blocks();
    if k == 0 || k > pairs {
        return Err(Error::Policy(format!(
            "global top-k needs 1 <= k <= {pairs}, got {k}"
        )));
    }
    let order = descending_order(sim.scores.data());
    Ok(mask_from_flat(sim, &order[..k], layout, include_self))
}

fn mask_from_flat<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    chosen: &[usize],
    layout: &BlockLayout,
    include_self: bool,
) -> SelectionMask {
    let nb = sim.blocks();
    let mut mask = SelectionMask::empty(sim.queries(), nb);
    for &flat in chosen {
        mask.set(flat / nb, flat % nb);
    }
    if include_self {
        mask.include_self(layout);
    }
    mask
}

/// Applies `choose` to every score row; `choose` returns the selected block
/// ids of that row.
fn select_rows<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    choose: impl Fn(usize, &[T]) -> Vec<usize> + Sync,
) -> SelectionMask {
    let nb = sim.blocks();
    let rows: Vec<Vec<usize>> = (0..sim.queries())
        .into_par_iter()
        .map(|q| choose(q, sim.scores.row(q)))
        .collect();
    let mut mask = SelectionMask::empty(sim.queries(), nb);
    for (q, blocks) in rows.into_iter().enumerate() {
        for b in blocks {
            mask.set(q, b);
        }
    }
    mask
}

/// Per query, the `k` highest-scoring blocks. With `include_self`, the own
/// block takes the k-th slot when it is not already among the top k, so
/// every row keeps exactly `k` blocks.
pub fn select_local_topk<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    k: usize,
    layout: &BlockLayout,
    include_self: bool,
) -> Result<SelectionMask> {
    sim.check_layout(layout)?;
    let nb = sim.blocks();
    if k == 0 || k > nb {
        return Err(Error::Policy(format!(
            "local top-k needs 1 <= k <= {nb}, got {k}"
        )));
    }
    Ok(select_rows(sim, |q, row| {
        let mut top = descending_order(row);
        top.truncate(k);
        if include_self {
            let own = layout.block_of(q);
            if !top.contains(&own) {
                top[k - 1] = own;
            }
        }
        top
    }))
}

pub fn select_local_threshold<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    tau: f64,
    layout: &BlockLayout,
    include_self: bool,
) -> Result<SelectionMask> {
    SelectionPolicy {
        scope: Scope::Local,
        rule: SelectionRule::Threshold(tau),
        include_self,
    }
    .validate()?;
    sim.check_layout(layout)?;
    let mut mask = select_rows(sim, |_, row| {
        let mut order = descending_order(row);
        let k = threshold_prefix(order.iter().map(|&b| row[b]), tau);
        order.truncate(k);
        order
    });
    if include_self {
        mask.include_self(layout);
    }
    Ok(mask)
}

/// Dispatches on the policy's scope and rule.
pub fn select<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    policy: &SelectionPolicy,
    layout: &BlockLayout,
) -> Result<SelectionMask> {
    policy.validate()?;
    let inc = policy.include_self;
    match (policy.scope, policy.rule) {
        (Scope::Global, SelectionRule::Threshold(tau)) => {
            select_global_threshold(sim, tau, layout, inc)
        }
        (Scope::Global, SelectionRule::TopK(k)) => select_global_topk(sim, k, layout, inc),
        (Scope::Local, SelectionRule::Threshold(tau)) => {
            select_local_threshold(sim, tau, layout, inc)
        }
        (Scope::Local, SelectionRule::TopK(k)) => select_local_topk(sim, k, layout, inc),
    }
}
