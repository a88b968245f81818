use ndarray::{Array4, ArrayView4};

use super::{DiffusionError, LatentVideo};

/// Toy stand-in for a VAE: `factor × factor` block means mapped affinely
/// from `[0, 1]` pixels to `[-1, 1]` latents, and nearest upsampling back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyVae {
    pub factor: usize,
}

impl Default for ToyVae {
    fn default() -> Self {
        Self { factor: 8 }
    }
}

impl ToyVae {
    /// `[T × H × W × 3]` frames to a `[T × 3 × H/f × W/f]` latent.
    pub fn encode(&self, frames: ArrayView4<'_, f32>) -> Result<LatentVideo, DiffusionError> {
        let (t, h, w, c) = frames.dim();
        let f = self.factor;
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(DiffusionError::Shape {
                context: "vae input".into(),
                expected: format!("[T, H, W, 3] with H, W multiples of {f}"),
                actual: format!("{:?}", frames.dim()),
            });
        }
        let norm = (f * f) as f64;
        let z = Array4::from_shape_fn((t, 3, h / f, w / f), |(ti, ch, y, x)| {
            let mut acc = 0.0f64;
            for dy in 0..f {
                for dx in 0..f {
                    acc += frames[[ti, y * f + dy, x * f + dx, ch]] as f64;
                }
            }
            (acc / norm - 0.5) * 2.0
        });
        LatentVideo::new(z)
    }

    /// Latent back to `[T × H' × W' × 3]` frames, clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentVideo) -> Array4<f32> {
        let (t, c, h, w) = z.z.dim();
        let f = self.factor;
        Array4::from_shape_fn((t, h * f, w * f, 3), |(ti, y, x, ch)| {
            let v = z.z[[ti, ch % c, y / f, x / f]];
            (0.5 + 0.5 * v).clamp(0.0, 1.0) as f32
        })
    }
}

/// Decode with the default toy VAE.
pub fn decode_latent(z: &LatentVideo) -> Array4<f32> {
    ToyVae::default().decode(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng_for, Stream};
    use rand::Rng;

    #[test]
    fn zero_latent_decodes_to_mid_gray() {
        let z = LatentVideo::new(Array4::zeros((2, 3, 2, 2))).unwrap();
        let frames = decode_latent(&z);
        assert_eq!(frames.dim(), (2, 16, 16, 3));
        assert!(frames.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn encode_decode_round_trips_in_range_latents() {
        let vae = ToyVae { factor: 4 };
        let mut rng = rng_for(1, Stream::Noise, 0);
        let z = Array4::from_shape_simple_fn((3, 3, 4, 5), || rng.random_range(-1.0..=1.0));
        let latent = LatentVideo::new(z.clone()).unwrap();
        let back = vae.encode(vae.decode(&latent).view()).unwrap();
        let max_err = back
            .z
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "max round-trip error {max_err}");
    }

    #[test]
    fn out_of_range_latents_clamp() {
        let z = LatentVideo::new(Array4::from_elem((1, 3, 1, 1), 5.0)).unwrap();
        assert!(decode_latent(&z).iter().all(|&p| p == 1.0));
    }
}
