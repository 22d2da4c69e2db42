//! Image quality metrics: MSE, PSNR and SSIM.
//!
//! All accumulation is done in f64; images are HWC tensors.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Dynamic range: 1.0 for [0,1] images, 255.0 for 8-bit.
    pub max_value: f64,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            max_value: 1.0,
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MetricConfig {
    pub fn with_max(max_value: f64) -> Self {
        MetricConfig {
            max_value,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_value > 0.0) {
            return Err(Error::InvalidArgument(format!("max_value must be positive, got {}", self.max_value)));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("SSIM window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

fn same_shape(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

pub fn mse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_shape(x, y)?;
    if x.is_empty() {
        return Err(Error::Shape("metric inputs are empty".into()));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// `10·log10(MAX²/MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>, cfg: &MetricConfig) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(psnr_from_mse(m, cfg.max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over valid window positions and channels.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    same_shape(x, y)?;
    let (h, w, c) = x.hwc()?;
    let win = cfg.window;
    if h < win || w < win {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {win}x{win} SSIM window"
        )));
    }
    let g = gaussian_window(win, cfg.sigma);
    let c1 = (cfg.k1 * cfg.max_value).powi(2);
    let c2 = (cfg.k2 * cfg.max_value).powi(2);
    let (oh, ow) = (h - win + 1, w - win + 1);

    // Separable filtering of the five local moments, per channel.
    let mut total = 0.0;
    let mut planes = [vec![0.0f64; h * w], vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    let mut rows = vec![0.0f64; h * ow];
    let mut filtered = [vec![0.0f64; oh * ow], vec![0.0; oh * ow], vec![0.0; oh * ow], vec![0.0; oh * ow], vec![0.0; oh * ow]];
    for ch in 0..c {
        for i in 0..h * w {
            let a = x.data()[i * c + ch] as f64;
            let b = y.data()[i * c + ch] as f64;
            planes[0][i] = a;
            planes[1][i] = b;
            planes[2][i] = a * a;
            planes[3][i] = b * b;
            planes[4][i] = a * b;
        }
        for (plane, out) in planes.iter().zip(filtered.iter_mut()) {
            for r in 0..h {
                for ox in 0..ow {
                    rows[r * ow + ox] = (0..win).map(|t| g[t] * plane[r * w + ox + t]).sum();
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    out[oy * ow + ox] = (0..win).map(|t| g[t] * rows[(oy + t) * ow + ox]).sum();
                }
            }
        }
        for i in 0..oh * ow {
            let (mx, my) = (filtered[0][i], filtered[1][i]);
            let sxx = filtered[2][i] - mx * mx;
            let syy = filtered[3][i] - my * my;
            let sxy = filtered[4][i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        }
    }
    Ok(total / (oh * ow * c) as f64)
}
