//! Layer-wise recurrent key-block partitioning of a video latent grid.
//!
//! Tokens are flattened T-major, then H, then W. A partition groups them
//! into key blocks along time only (1D), along height and width across all
//! frames (2D), or into local spatio-temporal volumes (3D). Layers cycle
//! through the three schemes with period 3.
//!
//! Extents that are not multiples of the block size produce a short final
//! block on that axis; block means always divide by the true block length.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Token grid and channel layout of one attention layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl LatentGeometry {
    pub fn new(frames: usize, height: usize, width: usize, hidden: usize, heads: usize) -> Result<Self> {
        let g = Self {
            frames,
            height,
            width,
            hidden,
            heads,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("hidden", self.hidden),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Geometry(format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Geometry(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    /// Flat token index of `(t, h, w)`.
    pub fn token(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.height + h) * self.width + w
    }

    /// Grid coordinates of a flat token index.
    pub fn coords(&self, token: usize) -> (usize, usize, usize) {
        let w = token % self.width;
        let h = (token / self.width) % self.height;
        let t = token / (self.width * self.height);
        (t, h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "1d")]
    Temporal1D,
    #[serde(rename = "2d")]
    Spatial2D,
    #[serde(rename = "3d")]
    SpatioTemporal3D,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::Temporal1D => "1d",
            Scheme::Spatial2D => "2d",
            Scheme::SpatioTemporal3D => "3d",
        }
    }

    /// Number of block sizes the scheme takes.
    pub fn arity(self) -> usize {
        match self {
            Scheme::Temporal1D => 1,
            Scheme::Spatial2D => 2,
            Scheme::SpatioTemporal3D => 3,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Partition scheme used by layer `layer`: 1D, 2D, 3D, repeating.
pub fn scheme_for_layer(layer: usize) -> Scheme {
    match layer % 3 {
        0 => Scheme::Temporal1D,
        1 => Scheme::Spatial2D,
        _ => Scheme::SpatioTemporal3D,
    }
}

/// A partition scheme together with its block sizes.
///
/// Serialized as `{"scheme": "1d"|"2d"|"3d", "block": [sizes...]}` where the
/// sizes are `[t]`, `[h, w]` or `[t, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub enum PartitionSpec {
    Temporal1D { t: usize },
    Spatial2D { h: usize, w: usize },
    SpatioTemporal3D { t: usize, h: usize, w: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    scheme: Scheme,
    block: Vec<usize>,
}

impl TryFrom<RawSpec> for PartitionSpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> Result<Self, String> {
        if raw.block.len() != raw.scheme.arity() {
            return Err(format!(
                "scheme {} takes {} block sizes, got {}",
                raw.scheme,
                raw.scheme.arity(),
                raw.block.len()
            ));
        }
        let b = &raw.block;
        Ok(match raw.scheme {
            Scheme::Temporal1D => PartitionSpec::Temporal1D { t: b[0] },
            Scheme::Spatial2D => PartitionSpec::Spatial2D { h: b[0], w: b[1] },
            Scheme::SpatioTemporal3D => PartitionSpec::SpatioTemporal3D {
                t: b[0],
                h: b[1],
                w: b[2],
            },
        })
    }
}

impl From<PartitionSpec> for RawSpec {
    fn from(spec: PartitionSpec) -> Self {
        let block = match spec {
            PartitionSpec::Temporal1D { t } => vec![t],
            PartitionSpec::Spatial2D { h, w } => vec![h, w],
            PartitionSpec::SpatioTemporal3D { t, h, w } => vec![t, h, w],
        };
        RawSpec {
            scheme: spec.scheme(),
            block,
        }
    }
}

impl PartitionSpec {
    pub fn scheme(&self) -> Scheme {
        match self {
            PartitionSpec::Temporal1D { .. } => Scheme::Temporal1D,
            PartitionSpec::Spatial2D { .. } => Scheme::Spatial2D,
            PartitionSpec::SpatioTemporal3D { .. } => Scheme::SpatioTemporal3D,
        }
    }

    /// Block extent along (T, H, W); axes the scheme does not split span the
    /// whole grid.
    pub fn axis_sizes(&self, geom: &LatentGeometry) -> [usize; 3] {
        match *self {
            PartitionSpec::Temporal1D { t } => [t, geom.height, geom.width],
            PartitionSpec::Spatial2D { h, w } => [geom.frames, h, w],
            PartitionSpec::SpatioTemporal3D { t, h, w } => [t, h, w],
        }
    }

    pub fn validate(&self, geom: &LatentGeometry) -> Result<()> {
        let sizes = self.axis_sizes(geom);
        for ((name, size), extent) in ["T", "H", "W"].iter().zip(sizes).zip(geom.extents()) {
            if size == 0 {
                return Err(Error::Partition(format!(
                    "{} block size along {name} must be at least 1",
                    self.scheme()
                )));
            }
            if size > extent {
                return Err(Error::Partition(format!(
                    "{} block size {size} exceeds {name} extent {extent}",
                    self.scheme()
                )));
            }
        }
        Ok(())
    }
}

/// Block sizes for the three schemes of the 1D-2D-3D layer cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPartitions {
    pub temporal: PartitionSpec,
    pub spatial: PartitionSpec,
    pub spatiotemporal: PartitionSpec,
}

impl LayerPartitions {
    pub fn new(specs: &[PartitionSpec]) -> Result<Self> {
        let find = |scheme: Scheme| -> Result<PartitionSpec> {
            let mut matching = specs.iter().filter(|s| s.scheme() == scheme);
            match (matching.next(), matching.next()) {
                (Some(s), None) => Ok(*s),
                (None, _) => Err(Error::Partition(format!("missing {scheme} partition"))),
                (Some(_), Some(_)) => {
                    Err(Error::Partition(format!("duplicate {scheme} partition")))
                }
            }
        };
        if specs.len() != 3 {
            return Err(Error::Partition(format!(
                "expected one partition per scheme, got {}",
                specs.len()
            )));
        }
        Ok(Self {
            temporal: find(Scheme::Temporal1D)?,
            spatial: find(Scheme::Spatial2D)?,
            spatiotemporal: find(Scheme::SpatioTemporal3D)?,
        })
    }

    pub fn spec(&self, scheme: Scheme) -> PartitionSpec {
        match scheme {
            Scheme::Temporal1D => self.temporal,
            Scheme::Spatial2D => self.spatial,
            Scheme::SpatioTemporal3D => self.spatiotemporal,
        }
    }

    pub fn for_layer(&self, layer: usize) -> PartitionSpec {
        self.spec(scheme_for_layer(layer))
    }

    pub fn iter(&self) -> impl Iterator<Item = PartitionSpec> {
        [self.temporal, self.spatial, self.spatiotemporal].into_iter()
    }

    pub fn validate(&self, geom: &LatentGeometry) -> Result<()> {
        self.iter().try_for_each(|s| s.validate(geom))
    }
}

/// Bijective assignment of tokens to key blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    scheme: Scheme,
    block_size: [usize; 3],
    axis_blocks: [usize; 3],
    token_to_block: Vec<usize>,
    block_tokens: Vec<Vec<usize>>,
}

impl BlockLayout {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Nominal block extent along (T, H, W).
    pub fn block_size(&self) -> [usize; 3] {
        self.block_size
    }

    /// Block counts along (T, H, W); 1 on axes the scheme does not split.
    pub fn axis_blocks(&self) -> [usize; 3] {
        self.axis_blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.block_tokens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_to_block.len()
    }

    pub fn block_of(&self, token: usize) -> usize {
        self.token_to_block[token]
    }

    pub fn token_to_block(&self) -> &[usize] {
        &self.token_to_block
    }

    /// Sorted flat token indices of block `b`.
    pub fn tokens(&self, b: usize) -> &[usize] {
        &self.block_tokens[b]
    }

    pub fn block_len(&self, b: usize) -> usize {
        self.block_tokens[b].len()
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.block_tokens.iter().map(Vec::len).collect()
    }

    /// Singleton blocks: one token per block, block id = token id.
    pub fn singletons(seq_len: usize) -> Self {
        Self {
            scheme: Scheme::SpatioTemporal3D,
            block_size: [1, 1, 1],
            axis_blocks: [1, 1, seq_len],
            token_to_block: (0..seq_len).collect(),
            block_tokens: (0..seq_len).map(|t| vec![t]).collect(),
        }
    }

    /// Same layout with block ids relabelled: old block `b` becomes
    /// `perm[b]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_blocks();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Partition(format!(
                "block permutation must be a permutation of 0..{n}"
            )));
        }
        let mut block_tokens = vec![Vec::new(); n];
        for (b, toks) in self.block_tokens.iter().enumerate() {
            block_tokens[perm[b]] = toks.clone();
        }
        Ok(Self {
            scheme: self.scheme,
            block_size: self.block_size,
            axis_blocks: self.axis_blocks,
            token_to_block: self.token_to_block.iter().map(|&b| perm[b]).collect(),
            block_tokens,
        })
    }
}

/// Assigns every token of the grid to a key block.
///
/// Token `(t, h, w)` lands in block `(t / bt, h / bh, w / bw)`, with block
/// ids enumerated T-major, then H, then W.
pub fn build_layout(geom: &LatentGeometry, spec: &PartitionSpec) -> Result<BlockLayout> {
    geom.validate()?;
    spec.validate(geom)?;
    let size = spec.axis_sizes(geom);
    let extents = geom.extents();
    let axis_blocks = [0, 1, 2].map(|a| extents[a].div_ceil(size[a]));
    let n_blocks = axis_blocks.iter().product();

    let mut token_to_block = Vec::with_capacity(geom.seq_len());
    let mut block_tokens = vec![Vec::new(); n_blocks];
    for t in 0..geom.frames {
        for h in 0..geom.height {
            for w in 0..geom.width {
                let b = ((t / size[0]) * axis_blocks[1] + h / size[1]) * axis_blocks[2] + w / size[2];
                block_tokens[b].push(token_to_block.len());
                token_to_block.push(b);
            }
        }
    }
    Ok(BlockLayout {
        scheme: spec.scheme(),
        block_size: size,
        axis_blocks,
        token_to_block,
        block_tokens,
    })
}

/// Mean key vector of every block: a `[num_blocks × head_dim]` matrix.
pub fn block_means<T: Scalar>(keys: &Tensor<T>, layout: &BlockLayout) -> Result<Tensor<T>> {
    let (s, dim) = keys.dims2()?;
    if s != layout.seq_len() {
        return Err(Error::Shape(format!(
            "key matrix has {s} rows but layout covers {} tokens",
            layout.seq_len()
        )));
    }
    let mut data = vec![T::zero(); layout.num_blocks() * dim];
    if dim > 0 {
        data.par_chunks_mut(dim).enumerate().for_each(|(b, out)| {
            let toks = layout.tokens(b);
            for &tok in toks {
                for (o, &k) in out.iter_mut().zip(keys.row(tok)) {
                    *o = *o + k;
                }
            }
            let n = T::from_usize(toks.len());
            for o in out.iter_mut() {
                *o = *o / n;
            }
        });
    }
    Ok(Tensor::new([layout.num_blocks(), dim], data)?)
}
