//! Low-light rendering under the multiplicative illumination model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensor::Tensor;

/// Positive per-pixel illumination `L`, stored as `[1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IllumMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl IllumMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::arg("illumination map size mismatch"));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::arg(format!("illumination {bad} must be positive")));
        }
        Ok(IllumMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("shape")
    }

    /// Rounds every value to `f32` precision for binary storage.
    pub fn quantized_f32(&self) -> IllumMap {
        IllumMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| *v as f32 as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IllumSpec {
    Constant(f64),
    /// Gaussian-blurred white noise rescaled to `[min, max]`.
    Smooth { min: f64, max: f64, blur_sigma: f64 },
}

impl Default for IllumSpec {
    fn default() -> Self {
        IllumSpec::Smooth {
            min: 0.05,
            max: 0.3,
            blur_sigma: 6.0,
        }
    }
}

impl IllumSpec {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        match *self {
            IllumSpec::Constant(c) if ok(c) => Ok(()),
            IllumSpec::Smooth { min, max, blur_sigma } if ok(min) && ok(max) && min <= max && blur_sigma > 0.0 => Ok(()),
            _ => Err(Error::arg(format!("illumination spec {self:?} outside (0, 1]"))),
        }
    }

    /// Draws an illumination field for an `h×w` frame.
    pub fn sample(&self, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<IllumMap> {
        self.validate()?;
        match *self {
            IllumSpec::Constant(c) => IllumMap::new(height, width, vec![c; height * width]),
            IllumSpec::Smooth { min, max, blur_sigma } => {
                let noise: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
                let blurred = gaussian_blur(&noise, height, width, blur_sigma);
                let lo = blurred.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = (hi - lo).max(1e-12);
                let data = blurred.iter().map(|v| min + (max - min) * (v - lo) / span).collect();
                IllumMap::new(height, width, data)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Read-noise standard deviation; draws are truncated at three sigma.
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma: 0.02 }
    }
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * src[y * w + clamp(x as isize + i, w)])
                .sum::<f64>()
                / ksum;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * tmp[clamp(y as isize + i, h) * w + x])
                .sum::<f64>()
                / ksum;
        }
    }
    out
}

/// `clip(image * L + noise, 0, 1)` for a given illumination map.
pub fn apply_illumination(image: &Image, illum: &IllumMap, noise: NoiseSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    if image.height() != illum.height() || image.width() != illum.width() {
        return Err(Error::arg("illumination map does not match image size"));
    }
    if !(0.0..=0.1).contains(&noise.sigma) {
        return Err(Error::arg(format!("noise sigma {} outside [0, 0.1]", noise.sigma)));
    }
    let hw = image.height() * image.width();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = if noise.sigma > 0.0 {
                noise.sigma * rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0)
            } else {
                0.0
            };
            (v * illum.data()[i % hw] + n).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(image.height(), image.width(), image.channels(), data)
}

/// Renders a night version of `image`, returning the illumination used.
pub fn darken(image: &Image, illum: &IllumSpec, noise: NoiseSpec, seed: u64) -> Result<(Image, IllumMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = illum.sample(image.height(), image.width(), &mut rng)?;
    let night = apply_illumination(image, &l, noise, &mut rng)?;
    Ok((night, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_illumination_without_noise_is_identity() {
        let img = Image::from_fn(20, 24, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap();
        let (night, l) = darken(&img, &IllumSpec::Constant(1.0), NoiseSpec { sigma: 0.0 }, 3).unwrap();
        assert_eq!(night, img);
        assert!(l.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn uniform_scaling() {
        let img = Image::filled(16, 16, 0.8).unwrap();
        let (night, _) = darken(&img, &IllumSpec::Constant(0.25), NoiseSpec { sigma: 0.0 }, 0).unwrap();
        assert!(night.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn smooth_field_in_range_and_mean_ratio() {
        let img = Image::from_fn(48, 48, |x, y| 0.5 + 0.3 * ((x as f64) * 0.4).sin() * ((y as f64) * 0.3).cos()).unwrap();
        let (night, l) = darken(&img, &IllumSpec::default(), NoiseSpec { sigma: 0.02 }, 9).unwrap();
        assert!(l.data().iter().all(|v| (0.05 - 1e-12..=0.3 + 1e-12).contains(v)));
        let ratio = night.mean() / img.mean();
        assert!((ratio - l.mean()).abs() <= 0.02, "ratio {ratio} vs mean L {}", l.mean());
    }

    #[test]
    fn rejects_out_of_range_illumination() {
        let img = Image::filled(16, 16, 0.5).unwrap();
        assert!(darken(&img, &IllumSpec::Constant(0.0), NoiseSpec::default(), 0).is_err());
        assert!(darken(&img, &IllumSpec::Constant(1.5), NoiseSpec::default(), 0).is_err());
        assert!(darken(&img, &IllumSpec::Constant(0.2), NoiseSpec { sigma: 0.2 }, 0).is_err());
    }

    #[test]
    fn noise_is_bounded_by_three_sigma() {
        let img = Image::filled(32, 32, 0.5).unwrap();
        let (night, l) = darken(&img, &IllumSpec::default(), NoiseSpec { sigma: 0.05 }, 4).unwrap();
        for (i, v) in night.data().iter().enumerate() {
            assert!((v - 0.5 * l.data()[i]).abs() <= 0.15 + 1e-12);
        }
    }
}
