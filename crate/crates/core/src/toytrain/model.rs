//! A minimal attention stack with hand-written backpropagation.
//!
//! Per token: `x₀ = [content, position features, 1] · W_in`. Each layer adds
//! `concat_h(attn_h(x·Wq, x·Wk, x·Wv)) · Wo` to the residual stream, and the
//! readout is `x_L · w_out + b`. No feed-forward blocks, no normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{dense_attention, sparse_backward, sparse_forward_streamed, AttentionIO};
use crate::error::{Error, Result};
use crate::metrics::token_sparsity;
use crate::partition::{block_means, build_layout, BlockLayout, LatentGeometry, LayerPartitions, PartitionSpec};
use crate::selection::{select_global_threshold, select_local_topk, similarity, SelectionMask};
use crate::tensor::{matmul, matmul_nt, Scalar, Tensor};

use super::data::{position_features, POSITION_FEATURES};
use super::AttentionMode;

/// Content + position features + constant bias input.
pub const INPUT_FEATURES: usize = 1 + POSITION_FEATURES + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub w_in: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub w_out: Tensor<T>,
    pub b_out: T,
}

impl<T: Scalar> Params<T> {
    fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.w_in)
            .chain(self.layers.iter().flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo]))
            .chain(std::iter::once(&self.w_out))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        std::iter::once(&mut self.w_in)
            .chain(
                self.layers
                    .iter_mut()
                    .flat_map(|l| [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo]),
            )
            .chain(std::iter::once(&mut self.w_out))
    }

    /// All parameters flattened in a fixed order (bias last).
    pub fn flatten(&self) -> Vec<T> {
        let mut out: Vec<T> = self.tensors().flat_map(|t| t.data().iter().copied()).collect();
        out.push(self.b_out);
        out
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            *t = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            offset += n;
        }
        self.b_out = flat[offset];
        Ok(())
    }

    /// `self -= lr · grads`.
    pub fn descend(&mut self, grads: &Params<T>, lr: T) -> Result<()> {
        let flat: Vec<T> = self
            .flatten()
            .into_iter()
            .zip(grads.flatten())
            .map(|(p, g)| p - lr * g)
            .collect();
        self.unflatten(&flat)
    }

    fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
        Params {
            w_in: z(&self.w_in),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                })
                .collect(),
            w_out: z(&self.w_out),
            b_out: T::zero(),
        }
    }

    fn accumulate(&mut self, other: &Params<T>) -> Result<()> {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            *a = a.add(b)?;
        }
        self.b_out = self.b_out + other.b_out;
        Ok(())
    }
}

fn init_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn2(rows, cols, |_, _| T::from_f64(normal.sample(rng))).expect("finite init")
}

/// Per-layer attention routing for one forward pass.
struct HeadCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    io: AttentionIO<T>,
    mask: SelectionMask,
}

struct LayerCache<T> {
    x: Tensor<T>,
    concat: Tensor<T>,
    heads: Vec<HeadCache<T>>,
    sparsity: f64,
}

pub struct Forward<T> {
    pub prediction: Tensor<T>,
    layers: Vec<LayerCache<T>>,
    final_x: Tensor<T>,
    features: Tensor<T>,
}

impl<T> Forward<T> {
    /// Mean token sparsity over layers and heads.
    pub fn sparsity(&self) -> f64 {
        self.layers.iter().map(|l| l.sparsity).sum::<f64>() / self.layers.len() as f64
    }
}

pub struct ToyModel<T> {
    pub params: Params<T>,
    geometry: LatentGeometry,
    mode: AttentionMode,
    scaled: bool,
    layouts: Vec<BlockLayout>,
    positions: Vec<[f32; POSITION_FEATURES]>,
}

fn set_columns<T: Scalar>(dst: &mut [T], width: usize, start: usize, src: &Tensor<T>) {
    let w = src.shape()[1];
    for (i, row) in dst.chunks_mut(width).enumerate() {
        row[start..start + w].copy_from_slice(src.row(i));
    }
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(
        geometry: LatentGeometry,
        layers: usize,
        partitions: &LayerPartitions,
        mode: AttentionMode,
        scaled: bool,
        seed: u64,
    ) -> Result<Self> {
        geometry.validate()?;
        partitions.validate(&geometry)?;
        let hidden = geometry.hidden;
        let layouts = (0..layers)
            .map(|l| {
                let spec = match mode {
                    // one block covering every token
                    AttentionMode::Full => PartitionSpec::Temporal1D {
                        t: geometry.frames,
                    },
                    AttentionMode::Vmoba { .. } => partitions.for_layer(l),
                    AttentionMode::Moba1d { .. } => partitions.temporal,
                };
                build_layout(&geometry, &spec)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_h = 1.0 / (hidden as f64).sqrt();
        let w_in = init_matrix(&mut rng, INPUT_FEATURES, hidden, 1.0 / (INPUT_FEATURES as f64).sqrt());
        let layer_weights = (0..layers)
            .map(|_| LayerWeights {
                wq: init_matrix(&mut rng, hidden, hidden, std_h),
                wk: init_matrix(&mut rng, hidden, hidden, std_h),
                wv: init_matrix(&mut rng, hidden, hidden, std_h),
                wo: init_matrix(&mut rng, hidden, hidden, 0.5 * std_h),
            })
            .collect();
        // zero readout: the first update only fits the output layer
        let w_out = Tensor::zeros(vec![hidden, 1]);
        Ok(Self {
            params: Params {
                w_in,
                layers: layer_weights,
                w_out,
                b_out: T::zero(),
            },
            geometry,
            mode,
            scaled,
            layouts,
            positions: position_features(&geometry),
        })
    }

    /// Partition scheme tag each layer runs with.
    pub fn layer_schemes(&self) -> Vec<String> {
        self.layouts
            .iter()
            .map(|l| match self.mode {
                AttentionMode::Full => "full".to_string(),
                _ => l.scheme().tag().to_string(),
            })
            .collect()
    }

    fn features(&self, content: &[T]) -> Result<Tensor<T>> {
        let s = self.geometry.seq_len();
        let mut data = Vec::with_capacity(s * INPUT_FEATURES);
        for (c, pos) in content.iter().zip(&self.positions) {
            data.push(*c);
            data.extend(pos.iter().map(|&p| T::from_f64(p as f64)));
            data.push(T::one());
        }
        Ok(Tensor::new([s, INPUT_FEATURES], data)?)
    }

    fn head_mask(&self, layer: usize, q: &Tensor<T>, k: &Tensor<T>) -> Result<SelectionMask> {
        let layout = &self.layouts[layer];
        let s = self.geometry.seq_len();
        match self.mode {
            AttentionMode::Full => Ok(SelectionMask::full(s, 1)),
            AttentionMode::Vmoba { tau } => {
                let sim = similarity(q, &block_means(k, layout)?, self.scaled)?;
                select_global_threshold(&sim, tau, layout, true)
            }
            AttentionMode::Moba1d { k: top } => {
                let sim = similarity(q, &block_means(k, layout)?, self.scaled)?;
                select_local_topk(&sim, top.min(layout.num_blocks()), layout, true)
            }
        }
    }

    /// Runs one clip; `content` holds one scalar per token.
    pub fn forward(&self, content: &[T]) -> Result<Forward<T>> {
        let features = self.features(content)?;
        let hidden = self.geometry.hidden;
        let dh = self.geometry.head_dim();
        let s = self.geometry.seq_len();
        let mut x = matmul(&features, &self.params.w_in)?;
        let mut caches = Vec::with_capacity(self.params.layers.len());
        for (l, w) in self.params.layers.iter().enumerate() {
            let q_all = matmul(&x, &w.wq)?;
            let k_all = matmul(&x, &w.wk)?;
            let v_all = matmul(&x, &w.wv)?;
            let mut concat = vec![T::zero(); s * hidden];
            let mut heads = Vec::with_capacity(self.geometry.heads);
            for h in 0..self.geometry.heads {
                let q = q_all.column_slice(h * dh, dh)?;
                let k = k_all.column_slice(h * dh, dh)?;
                let v = v_all.column_slice(h * dh, dh)?;
                let mask = self.head_mask(l, &q, &k)?;
                let io = match self.mode {
                    AttentionMode::Full => dense_attention(&q, &k, &v, self.scaled)?,
                    _ => sparse_forward_streamed(&q, &k, &v, &self.layouts[l], &mask, self.scaled)?,
                };
                set_columns(&mut concat, hidden, h * dh, &io.output);
                heads.push(HeadCache { q, k, v, io, mask });
            }
            let masks: Vec<SelectionMask> = heads.iter().map(|hc| hc.mask.clone()).collect();
            let sparsity = token_sparsity(&masks, &self.layouts[l])?;
            let concat = Tensor::new([s, hidden], concat)?;
            let next = x.add(&matmul(&concat, &w.wo)?)?;
            caches.push(LayerCache {
                x,
                concat,
                heads,
                sparsity,
            });
            x = next;
        }
        let mut prediction = matmul(&x, &self.params.w_out)?;
        let b = self.params.b_out;
        prediction = Tensor::new(
            prediction.shape().to_vec(),
            prediction.data().iter().map(|&p| p + b).collect(),
        )?;
        Ok(Forward {
            prediction,
            layers: caches,
            final_x: x,
            features,
        })
    }

    /// Gradients of `Σ_tokens d_pred · prediction` for one clip.
    pub fn backward(&self, fwd: &Forward<T>, d_pred: &Tensor<T>) -> Result<Params<T>> {
        let hidden = self.geometry.hidden;
        let dh = self.geometry.head_dim();
        let s = self.geometry.seq_len();
        let mut grads = self.params.zeros_like();
        grads.b_out = d_pred.data().iter().copied().sum();
        grads.w_out = matmul(&fwd.final_x.transpose()?, d_pred)?;
        let mut dx = matmul_nt(d_pred, &self.params.w_out)?;

        for (l, (w, cache)) in self.params.layers.iter().zip(&fwd.layers).enumerate().rev() {
            grads.layers[l].wo = matmul(&cache.concat.transpose()?, &dx)?;
            let d_concat = matmul_nt(&dx, &w.wo)?;
            let mut dq = vec![T::zero(); s * hidden];
            let mut dk = vec![T::zero(); s * hidden];
            let mut dv = vec![T::zero(); s * hidden];
            for (h, hc) in cache.heads.iter().enumerate() {
                let d_out = d_concat.column_slice(h * dh, dh)?;
                let g = sparse_backward(
                    &hc.io,
                    &hc.q,
                    &hc.k,
                    &hc.v,
                    &self.layouts[l],
                    &hc.mask,
                    &d_out,
                    self.scaled,
                )?;
                set_columns(&mut dq, hidden, h * dh, &g.dq);
                set_columns(&mut dk, hidden, h * dh, &g.dk);
                set_columns(&mut dv, hidden, h * dh, &g.dv);
            }
            let dq = Tensor::new([s, hidden], dq)?;
            let dk = Tensor::new([s, hidden], dk)?;
            let dv = Tensor::new([s, hidden], dv)?;
            let xt = cache.x.transpose()?;
            grads.layers[l].wq = matmul(&xt, &dq)?;
            grads.layers[l].wk = matmul(&xt, &dk)?;
            grads.layers[l].wv = matmul(&xt, &dv)?;
            dx = dx
                .add(&matmul_nt(&dq, &w.wq)?)?
                .add(&matmul_nt(&dk, &w.wk)?)?
                .add(&matmul_nt(&dv, &w.wv)?)?;
        }
        grads.w_in = matmul(&fwd.features.transpose()?, &dx)?;
        Ok(grads)
    }

    fn clips<'a>(&self, batch: &'a Tensor<T>) -> Result<impl Iterator<Item = &'a [T]>> {
        let s = self.geometry.seq_len();
        if batch.ndim() != 3 || batch.shape()[1] != s || batch.shape()[2] != 1 {
            return Err(Error::Shape(format!(
                "expected a [batch, {s}, 1] tensor, got {:?}",
                batch.shape()
            )));
        }
        Ok(batch.data().chunks(s))
    }

    /// Mean squared error over every token of the batch, and the mean token
    /// sparsity of the forward passes.
    pub fn loss(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, f64)> {
        let mut sq = 0.0;
        let mut sparsity = 0.0;
        let mut clips = 0;
        for (x, y) in self.clips(input)?.zip(self.clips(target)?) {
            let fwd = self.forward(x)?;
            sq += fwd
                .prediction
                .data()
                .iter()
                .zip(y)
                .map(|(&p, &t)| (p - t).as_f64().powi(2))
                .sum::<f64>();
            sparsity += fwd.sparsity();
            clips += 1;
        }
        Ok((sq / input.len() as f64, sparsity / clips as f64))
    }

    /// Loss, mean sparsity and parameter gradients of the batch MSE.
    pub fn loss_and_grads(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, f64, Params<T>)> {
        let n = T::from_usize(input.len());
        let two = T::from_f64(2.0);
        let mut total = self.params.zeros_like();
        let mut sq = 0.0;
        let mut sparsity = 0.0;
        let mut clips = 0;
        for (x, y) in self.clips(input)?.zip(self.clips(target)?) {
            let fwd = self.forward(x)?;
            let resid: Vec<T> = fwd.prediction.data().iter().zip(y).map(|(&p, &t)| p - t).collect();
            sq += resid.iter().map(|r| r.as_f64().powi(2)).sum::<f64>();
            let d_pred = Tensor::new(
                [resid.len(), 1],
                resid.iter().map(|&r| two * r / n).collect(),
            )?;
            total.accumulate(&self.backward(&fwd, &d_pred)?)?;
            sparsity += fwd.sparsity();
            clips += 1;
        }
        Ok((sq / input.len() as f64, sparsity / clips as f64, total))
    }
}
