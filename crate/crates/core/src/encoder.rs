//! Frozen convolutional feature encoder: a small seeded conv stack that
//! maps raster images to C×H×W feature grids. Weights are fixed at
//! construction and never updated by training.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels;
use crate::ppm::Image;

/// Channel count of the produced feature grids.
pub const FEATURE_CHANNELS: usize = 32;

/// Floor on the contrast normalization denominator. Feature magnitudes sit
/// well above this, so it only guards near-zero columns (fully dark
/// patches), which stay near zero instead of blowing up.
pub const NORM_EPS: f64 = 1e-9;

/// Dense C×H×W feature tensor, row-major within each channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(c: usize, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum EncoderError {
    SizeMismatch { expected: usize, got_w: usize, got_h: usize },
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::SizeMismatch { expected, got_w, got_h } => write!(
                f,
                "encoder expects a {expected}x{expected} image, got {got_w}x{got_h}"
            ),
        }
    }
}

impl std::error::Error for EncoderError {}

struct ConvLayer {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    /// out_c rows of length in_c·k·k.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn init<R: Rng>(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> ConvLayer {
        let fan_in = in_c * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_c * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        // Zero biases keep the stack positively homogeneous in pixel
        // intensity, which the final contrast normalization turns into
        // exact invariance to global illumination scaling.
        let bias = vec![0.0; out_c];
        ConvLayer { in_c, out_c, k, stride, pad, weight, bias }
    }

    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// im2col gather followed by a dot product per (output channel,
    /// position); padding reads as zero.
    fn forward(&self, input: &FeatureGrid) -> FeatureGrid {
        let (oh, ow) = (self.out_dim(input.h), self.out_dim(input.w));
        let patch_len = self.in_c * self.k * self.k;
        let mut patches = vec![0.0; oh * ow * patch_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = &mut patches[(oy * ow + ox) * patch_len..][..patch_len];
                let mut idx = 0;
                for ic in 0..self.in_c {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < input.h && (ix as usize) < input.w {
                                patch[idx] = input.at(ic, iy as usize, ix as usize);
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        let mut out = FeatureGrid::zeros(self.out_c, oh, ow);
        for oc in 0..self.out_c {
            let w_row = &self.weight[oc * patch_len..][..patch_len];
            let plane = &mut out.data[oc * oh * ow..][..oh * ow];
            for (pos, value) in plane.iter_mut().enumerate() {
                let patch = &patches[pos * patch_len..][..patch_len];
                *value = kernels::dot(w_row, patch) + self.bias[oc];
            }
        }
        out
    }
}

/// Frozen two-layer conv encoder: 3 → 16 (k5, stride 4) → ReLU →
/// 16 → 32 (k5, stride 2) → ReLU, followed by a parameter-free
/// per-position contrast normalization. A 64×64 input yields a 32×8×8
/// grid.
///
/// The normalization divides each spatial column by its channel RMS, so a
/// global illumination change — which scales every activation of the
/// bias-free stack by the same factor — cancels exactly. Trained backbones
/// owe much of their robustness to this kind of photometric stability;
/// random weights provide none of it on their own, so the stack supplies
/// it structurally.
pub struct Encoder {
    input_size: usize,
    layers: [ConvLayer; 2],
}

impl Encoder {
    pub fn new(input_size: usize, seed: u64) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [
            ConvLayer::init(3, 16, 5, 4, 2, &mut rng),
            ConvLayer::init(16, FEATURE_CHANNELS, 5, 2, 2, &mut rng),
        ];
        Encoder { input_size, layers }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Spatial side length of the output grid for this input size.
    pub fn grid_size(&self) -> usize {
        self.layers[1].out_dim(self.layers[0].out_dim(self.input_size))
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid, EncoderError> {
        if image.width != self.input_size || image.height != self.input_size {
            return Err(EncoderError::SizeMismatch {
                expected: self.input_size,
                got_w: image.width,
                got_h: image.height,
            });
        }
        // Planar RGB input grid from the interleaved image samples.
        let n = self.input_size;
        let mut grid = FeatureGrid::zeros(3, n, n);
        for y in 0..n {
            for x in 0..n {
                for ch in 0..3 {
                    grid.data[(ch * n + y) * n + x] = image.samples[(y * n + x) * 3 + ch];
                }
            }
        }
        let mut x = grid;
        for layer in &self.layers {
            x = layer.forward(&x);
            for v in &mut x.data {
                *v = v.max(0.0);
            }
        }
        // Contrast normalization: divide each spatial position by the RMS
        // of its channel column.
        let plane = x.h * x.w;
        for pos in 0..plane {
            let mut sq = 0.0;
            for c in 0..x.c {
                let v = x.data[c * plane + pos];
                sq += v * v;
            }
            let rms = (sq / x.c as f64).sqrt();
            let scale = 1.0 / rms.max(NORM_EPS);
            for c in 0..x.c {
                x.data[c * plane + pos] *= scale;
            }
        }
        Ok(x)
    }

    /// FNV-1a hash over the exact bit patterns of every weight and bias,
    /// used to prove the encoder stayed frozen across a training run.
    pub fn params_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for layer in &self.layers {
            layer.weight.iter().copied().for_each(&mut eat);
            layer.bias.iter().copied().for_each(&mut eat);
        }
        h
    }
}
