use crate::error::{Result, VitpError};

/// RGB image with values in `[0, 1]`, stored height-major then width then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Values are clamped into `[0, 1]`; NaN is rejected.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(VitpError::Image("zero-sized image".into()));
        }
        if data.len() != height * width * 3 {
            return Err(VitpError::Image(format!(
                "{height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(VitpError::Image("NaN pixel".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image::new(height, width, data).expect("valid dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every channel value, clamping the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn grid(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(VitpError::Image(format!(
                "{}x{} is not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        Ok((self.height / patch, self.width / patch))
    }
}

/// Flattens non-overlapping patches in row-major grid order. Each row holds
/// one patch as `patch x patch x 3` values in pixel-row, pixel-col, channel order.
pub fn patchify(img: &Image, patch: usize) -> Result<Vec<f32>> {
    let (gh, gw) = img.grid(patch)?;
    let mut out = Vec::with_capacity(img.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * img.width + gx * patch) * 3;
                out.extend_from_slice(&img.data[start..start + patch * 3]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(rows: &[f32], height: usize, width: usize, patch: usize) -> Result<Image> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(VitpError::Image("dims not divisible by patch size".into()));
    }
    if rows.len() != height * width * 3 {
        return Err(VitpError::Image("patch matrix has the wrong size".into()));
    }
    let gw = width / patch;
    let mut data = vec![0.0; rows.len()];
    let per = patch * patch * 3;
    for (k, p) in rows.chunks(per).enumerate() {
        let (gy, gx) = (k / gw, k % gw);
        for py in 0..patch {
            let y = gy * patch + py;
            let start = (y * width + gx * patch) * 3;
            data[start..start + patch * 3].copy_from_slice(&p[py * patch * 3..(py + 1) * patch * 3]);
        }
    }
    Image::new(height, width, data)
}
