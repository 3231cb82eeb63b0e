//! Synthetic moving-blob videos.
//!
//! Each clip is a sum of 2-D Gaussian blobs on a periodic H×W canvas whose
//! centres move over the T frames. The regression target of token
//! `(t, h, w)` is the content of the same pixel one frame later.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::partition::LatentGeometry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Constant velocity.
    #[default]
    Translating,
    /// Circular orbit around the canvas centre.
    Rotating,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center_h: f64,
    pub center_w: f64,
    pub vel_h: f64,
    pub vel_w: f64,
    /// Orbit radius and angular velocity; only used by rotating motion.
    pub radius: f64,
    pub omega: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn still(center_h: f64, center_w: f64, sigma: f64) -> Self {
        Self {
            center_h,
            center_w,
            vel_h: 0.0,
            vel_w: 0.0,
            radius: 0.0,
            omega: 0.0,
            sigma,
            amplitude: 1.0,
        }
    }

    fn center(&self, motion: Motion, frame: f64) -> (f64, f64) {
        match motion {
            Motion::Translating => (
                self.center_h + self.vel_h * frame,
                self.center_w + self.vel_w * frame,
            ),
            Motion::Rotating => {
                let phase = self.omega * frame;
                (
                    self.center_h + self.radius * phase.sin(),
                    self.center_w + self.radius * phase.cos(),
                )
            }
        }
    }
}

/// Shortest signed distance on a ring of length `period`.
fn wrap(delta: f64, period: f64) -> f64 {
    delta - period * (delta / period).round()
}

/// Content of every token for frames `t + frame_offset`, flattened T-major.
pub fn render_blobs(geom: &LatentGeometry, blobs: &[Blob], motion: Motion, frame_offset: f64) -> Vec<f32> {
    let (hh, ww) = (geom.height as f64, geom.width as f64);
    let mut out = Vec::with_capacity(geom.seq_len());
    for t in 0..geom.frames {
        let centers: Vec<(f64, f64)> = blobs
            .iter()
            .map(|b| b.center(motion, t as f64 + frame_offset))
            .collect();
        for h in 0..geom.height {
            for w in 0..geom.width {
                let v: f64 = blobs
                    .iter()
                    .zip(&centers)
                    .map(|(b, &(ch, cw))| {
                        let dh = wrap(h as f64 - ch, hh);
                        let dw = wrap(w as f64 - cw, ww);
                        b.amplitude * (-(dh * dh + dw * dw) / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
                out.push(v as f32);
            }
        }
    }
    out
}

fn random_blob(rng: &mut ChaCha8Rng, geom: &LatentGeometry) -> Blob {
    let scale = geom.height.min(geom.width) as f64;
    Blob {
        center_h: rng.random_range(0.0..geom.height as f64),
        center_w: rng.random_range(0.0..geom.width as f64),
        vel_h: rng.random_range(-1.0..1.0),
        vel_w: rng.random_range(-1.0..1.0),
        radius: rng.random_range(0.15..0.35) * scale,
        omega: rng.random_range(0.3..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        sigma: rng.random_range(0.08..0.16) * scale,
        amplitude: rng.random_range(0.5..1.0),
    }
}

pub const BLOBS_PER_CLIP: usize = 2;

/// Blob parameters of a seeded batch, one `Vec<Blob>` per clip.
pub fn sample_blobs(seed: u64, geom: &LatentGeometry, batch: usize) -> Vec<Vec<Blob>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..BLOBS_PER_CLIP).map(|_| random_blob(&mut rng, geom)).collect())
        .collect()
}

/// Builds `(input, target)` tensors of shape `[batch, seq_len, 1]` from
/// explicit blobs.
pub fn batch_from_blobs(geom: &LatentGeometry, clips: &[Vec<Blob>], motion: Motion) -> (Tensor<f32>, Tensor<f32>) {
    let s = geom.seq_len();
    let mut input = Vec::with_capacity(clips.len() * s);
    let mut target = Vec::with_capacity(clips.len() * s);
    for blobs in clips {
        input.extend(render_blobs(geom, blobs, motion, 0.0));
        target.extend(render_blobs(geom, blobs, motion, 1.0));
    }
    (
        Tensor::new([clips.len(), s, 1], input).expect("finite blob field"),
        Tensor::new([clips.len(), s, 1], target).expect("finite blob field"),
    )
}

/// Deterministic batch of moving-blob clips; equal seeds give bitwise equal
/// tensors.
pub fn synth_video_batch(seed: u64, geom: &LatentGeometry, batch: usize, motion: Motion) -> (Tensor<f32>, Tensor<f32>) {
    batch_from_blobs(geom, &sample_blobs(seed, geom, batch), motion)
}

/// Fixed per-token coordinate features: for each axis a centred linear ramp
/// and one sine/cosine period across the extent.
pub fn position_features(geom: &LatentGeometry) -> Vec<[f32; POSITION_FEATURES]> {
    let ext = geom.extents();
    (0..geom.seq_len())
        .map(|tok| {
            let (t, h, w) = geom.coords(tok);
            let mut f = [0.0f32; POSITION_FEATURES];
            for (a, &x) in [t, h, w].iter().enumerate() {
                let u = x as f64 / ext[a] as f64;
                f[3 * a] = (2.0 * u - 1.0) as f32;
                f[3 * a + 1] = (2.0 * PI * u).sin() as f32;
                f[3 * a + 2] = (2.0 * PI * u).cos() as f32;
            }
            f
        })
        .collect()
}

pub const POSITION_FEATURES: usize = 9;
