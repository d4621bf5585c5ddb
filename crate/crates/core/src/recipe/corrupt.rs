//! Common image corruptions at three severities.
//!
//! Every kind draws its random field before looking at the magnitude, so the
//! same rng yields nested corruptions across severities.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VitpError};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    BrightnessContrast,
    GaussianNoise,
    GaussianBlur,
    SaltPepper,
    DataGaps,
    Translate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::BrightnessContrast,
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::SaltPepper,
        CorruptionKind::DataGaps,
        CorruptionKind::Translate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::BrightnessContrast => "brightness_contrast",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::SaltPepper => "salt_pepper",
            CorruptionKind::DataGaps => "data_gaps",
            CorruptionKind::Translate => "translate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| VitpError::Config(format!("unknown corruption kind {s:?}")))
    }

    /// Magnitudes for severities 1, 2, 3.
    pub fn magnitudes(self) -> [f64; 3] {
        match self {
            CorruptionKind::BrightnessContrast => [0.2, 0.4, 0.6],
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.16],
            CorruptionKind::GaussianBlur => [0.5, 1.0, 1.5],
            CorruptionKind::SaltPepper => [0.02, 0.05, 0.10],
            CorruptionKind::DataGaps => [0.06, 0.12, 0.25],
            CorruptionKind::Translate => [1.0, 2.0, 4.0],
        }
    }

    pub fn magnitude(self, severity: u8) -> Result<f64> {
        match severity {
            1..=3 => Ok(self.magnitudes()[usize::from(severity) - 1]),
            s => Err(VitpError::Config(format!("severity {s} outside 1..=3"))),
        }
    }
}

pub fn corrupt(image: &Image, kind: CorruptionKind, severity: u8, rng: &mut dyn RngCore) -> Result<Image> {
    let m = kind.magnitude(severity)?;
    Ok(corrupt_with_magnitude(image, None, kind, m, rng).0)
}

/// Applies a corruption with an explicit magnitude. A label mask (one entry
/// per pixel) moves along with geometric corruptions; vacated pixels become 0.
pub fn corrupt_with_magnitude(
    image: &Image,
    mask: Option<&[u8]>,
    kind: CorruptionKind,
    m: f64,
    rng: &mut dyn RngCore,
) -> (Image, Option<Vec<u8>>) {
    let (h, w) = (image.height(), image.width());
    let mask = mask.map(<[u8]>::to_vec);
    if m == 0.0 {
        return (image.clone(), mask);
    }
    let m32 = m as f32;
    match kind {
        CorruptionKind::BrightnessContrast => {
            (image.map(|v| (v - 0.5) * (1.0 - m32) + 0.5 + m32 / 3.0), mask)
        }
        CorruptionKind::GaussianNoise => {
            let data: Vec<f32> = image
                .data()
                .iter()
                .map(|&v| {
                    let z: f32 = StandardNormal.sample(rng);
                    v + m32 * z
                })
                .collect();
            (Image::new(h, w, data).expect("same dims"), mask)
        }
        CorruptionKind::GaussianBlur => (blur(image, m), mask),
        CorruptionKind::SaltPepper => {
            let pixels = h * w;
            let order = rand::seq::index::sample(rng, pixels, pixels).into_vec();
            let values: Vec<f32> = (0..pixels).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let flips = (m * pixels as f64).round() as usize;
            let mut out = image.clone();
            for &p in &order[..flips.min(pixels)] {
                out.set(p / w, p % w, [values[p]; 3]);
            }
            (out, mask)
        }
        CorruptionKind::DataGaps => {
            let cy = rng.random_range(0..h);
            let cx = rng.random_range(0..w);
            let side_y = ((m.sqrt() * h as f64).round() as usize).min(h);
            let side_x = ((m.sqrt() * w as f64).round() as usize).min(w);
            let y0 = cy.saturating_sub(side_y / 2).min(h - side_y);
            let x0 = cx.saturating_sub(side_x / 2).min(w - side_x);
            let mut out = image.clone();
            for y in y0..y0 + side_y {
                for x in x0..x0 + side_x {
                    out.set(y, x, [0.0; 3]);
                }
            }
            (out, mask)
        }
        CorruptionKind::Translate => {
            let dir = rng.random_range(0..4);
            let s = m.round() as i64;
            let (dy, dx) = [(0, s), (0, -s), (s, 0), (-s, 0)][dir];
            let mut out = Image::filled(h, w, [0.0; 3]);
            let mut shifted = mask.as_ref().map(|_| vec![0u8; h * w]);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                        continue;
                    }
                    let (sy, sx, y, x) = (sy as usize, sx as usize, y as usize, x as usize);
                    out.set(y, x, image.pixel(sy, sx));
                    if let (Some(dst), Some(src)) = (shifted.as_mut(), mask.as_ref()) {
                        dst[y * w + x] = src[sy * w + sx];
                    }
                }
            }
            (out, shifted)
        }
    }
}

fn blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / norm).collect();
    let (h, w) = (image.height() as i64, image.width() as i64);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let o = j as i64 - r;
                        let (yy, xx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += kv * src[((yy * w + xx) * 3 + c) as usize];
                    }
                    out[((y * w + x) * 3 + c) as usize] = acc;
                }
            }
        }
        out
    };
    let a = pass(image.data(), true);
    let b = pass(&a, false);
    Image::new(image.height(), image.width(), b).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn img() -> Image {
        Image::new(16, 16, (0..768).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap()
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let im = img();
        for k in CorruptionKind::ALL {
            let mut r = stream(0, Purpose::Corrupt, 0, 0);
            assert!(corrupt_with_magnitude(&im, None, k, 0.0, &mut r).0 == im, "{}", k.name());
        }
    }

    #[test]
    fn unknown_kind_and_severity() {
        assert!(CorruptionKind::parse("fog").is_err());
        assert!(CorruptionKind::GaussianBlur.magnitude(4).is_err());
    }

    #[test]
    fn data_gap_area_grows() {
        let im = Image::filled(32, 32, [1.0; 3]);
        let mut prev = 0;
        for s in 1..=3 {
            let mut r = stream(3, Purpose::Corrupt, 0, 0);
            let out = corrupt(&im, CorruptionKind::DataGaps, s, &mut r).unwrap();
            let zeros = out.data().iter().filter(|&&v| v == 0.0).count() / 3;
            assert!(zeros > prev);
            prev = zeros;
        }
    }
}
