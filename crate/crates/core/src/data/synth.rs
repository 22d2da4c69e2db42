//! Procedural clean images and parametric degradations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DegradationKind, DegradationSpec, ImagePair, Task};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seed::{derive, stream};

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::InvalidArgument(format!("image size {size} must be a positive multiple of 8")));
    }
    Ok(())
}

/// `n` procedural RGB textures of `size x size`: a colour gradient overlaid
/// with sinusoids, smooth blobs and a few hard-edged shapes.
pub fn gen_clean(n: usize, size: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    check_size(size)?;
    Ok((0..n)
        .map(|i| clean_image(size, derive(seed, &[stream::CLEAN, i as u64])))
        .collect())
}

fn clean_image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut img = vec![0.0f64; size * size * 3];

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..2)
        .map(|_| Wave {
            fx: rng.random_range(-4.0..4.0) / s,
            fy: rng.random_range(-4.0..4.0) / s,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: std::array::from_fn(|_| rng.random_range(-0.12..0.12)),
        })
        .collect();

    struct Blob {
        cx: f64,
        cy: f64,
        r: f64,
        amp: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            r: rng.random_range(s / 8.0..s / 3.0),
            amp: std::array::from_fn(|_| rng.random_range(-0.3..0.3)),
        })
        .collect();

    struct Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        color: [f64; 3],
    }
    let rects: Vec<Rect> = (0..rng.random_range(1..=2))
        .map(|_| {
            let (x0, y0) = (rng.random_range(0.0..s * 0.7), rng.random_range(0.0..s * 0.7));
            let (w, h) = (rng.random_range(s * 0.15..s * 0.5), rng.random_range(s * 0.15..s * 0.5));
            Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
                color: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
            }
        })
        .collect();

    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((xf - s / 2.0) * dx + (yf - s / 2.0) * dy) / s + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let mut v = c0[c] * (1.0 - t) + c1[c] * t;
                for wv in &waves {
                    v += wv.amp[c] * (std::f64::consts::TAU * (wv.fx * xf + wv.fy * yf) + wv.phase).sin();
                }
                for b in &blobs {
                    let d2 = (xf - b.cx).powi(2) + (yf - b.cy).powi(2);
                    v += b.amp[c] * (-d2 / (2.0 * b.r * b.r)).exp();
                }
                for r in &rects {
                    if xf >= r.x0 && xf < r.x1 && yf >= r.y0 && yf < r.y1 {
                        v = r.color[c];
                    }
                }
                img[(y * size + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_fn(&[size, size, 3], |i| img[i] as f32)
}

/// Applies `spec` to a clean image; the result is clamped to [0,1].
pub fn degrade(clean: &Tensor<f32>, spec: &DegradationSpec) -> Result<ImagePair> {
    spec.validate()?;
    let (h, w, c) = clean.hwc()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[stream::DEGRADE]));
    let degraded = match spec.kind {
        DegradationKind::Noise { sigma } => {
            let mut out = clean.clone();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma / 255.0).expect("validated sigma");
                for v in out.data_mut() {
                    *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
            out
        }
        DegradationKind::Haze { airlight, transmission } => {
            clean.map(|v| (v as f64 * transmission + airlight * (1.0 - transmission)).clamp(0.0, 1.0) as f32)
        }
        DegradationKind::Rain {
            count,
            length,
            angle_deg,
            intensity,
        } => {
            let mut streaks = vec![0.0f64; h * w];
            let (sin, cos) = angle_deg.to_radians().sin_cos();
            for _ in 0..count {
                let x0: f64 = rng.random_range(0.0..w as f64);
                let y0: f64 = rng.random_range(0.0..h as f64);
                // Walk along the streak at sub-pixel steps; vertical is angle 0.
                let steps = (length * 2.0).ceil() as usize;
                for k in 0..=steps {
                    let d = k as f64 * 0.5;
                    let (x, y) = (x0 + d * sin, y0 + d * cos);
                    if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                        let px = &mut streaks[y as usize * w + x as usize];
                        *px = px.max(intensity);
                    }
                }
            }
            Tensor::from_fn(&[h, w, 3], |i| {
                (clean.data()[i] as f64 + streaks[i / 3]).clamp(0.0, 1.0) as f32
            })
        }
    };
    Ok(ImagePair {
        degraded,
        clean: clean.clone(),
        task: spec.kind.task(),
        source: String::new(),
        spec: Some(spec.clone()),
        copy: 0,
    })
}

/// Concrete per-image degradation for `task`, drawn from the recipe ranges.
pub fn sample_spec(task: Task, recipe: &super::DegradationRanges, index: usize, seed: u64) -> DegradationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::DEGRADE, task as u64, index as u64]));
    let kind = match task {
        Task::Denoise => DegradationKind::Noise {
            sigma: recipe.noise_sigmas[index % recipe.noise_sigmas.len()],
        },
        Task::Derain => DegradationKind::Rain {
            count: rng.random_range(recipe.rain_count.0..=recipe.rain_count.1),
            length: rng.random_range(recipe.rain_length.0..=recipe.rain_length.1),
            angle_deg: rng.random_range(recipe.rain_angle.0..=recipe.rain_angle.1),
            intensity: rng.random_range(recipe.rain_intensity.0..=recipe.rain_intensity.1),
        },
        Task::Dehaze => DegradationKind::Haze {
            airlight: rng.random_range(recipe.haze_airlight.0..=recipe.haze_airlight.1),
            transmission: rng.random_range(recipe.haze_transmission.0..=recipe.haze_transmission.1),
        },
    };
    DegradationSpec {
        kind,
        seed: rng.random(),
    }
}
