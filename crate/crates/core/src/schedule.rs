//! Per-epoch learning rate: linear warmup, then cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub eta_start: f64,
    pub eta_base: f64,
    pub eta_min: f64,
    /// Total epochs.
    pub j: usize,
    /// Warmup epochs.
    pub j_w: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta_start: 1e-6,
            eta_base: 2e-4,
            eta_min: 1e-6,
            j: 120,
            j_w: 15,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.eta_min
            && self.eta_min <= self.eta_base
            && 0.0 <= self.eta_start
            && self.eta_start <= self.eta_base
            && 0 < self.j_w
            && self.j_w < self.j;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 <= eta_min, eta_start <= eta_base and 0 < j_w < j (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Learning rate for epoch `t ∈ [0, j]`.
///
/// Warmup reaches `eta_base` at `t = j_w - 1`; the cosine branch starts at
/// `eta_base` for `t = j_w` and ends at `eta_min` for `t = j`. With a single
/// warmup epoch the warmup branch degenerates to `eta_base`.
pub fn lr_at(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if t > cfg.j {
        return Err(Error::InvalidArgument(format!("epoch {t} outside [0, {}]", cfg.j)));
    }
    let (jw, j) = (cfg.j_w as f64, cfg.j as f64);
    let t_f = t as f64;
    Ok(if t < cfg.j_w {
        if cfg.j_w == 1 {
            cfg.eta_base
        } else {
            cfg.eta_start + t_f / (jw - 1.0) * (cfg.eta_base - cfg.eta_start)
        }
    } else {
        cfg.eta_min
            + 0.5 * (cfg.eta_base - cfg.eta_min) * (1.0 + ((t_f - jw) * std::f64::consts::PI / (j - jw)).cos())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchors() {
        let cfg = ScheduleConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), cfg.eta_start);
        assert_eq!(lr_at(cfg.j_w - 1, &cfg).unwrap(), cfg.eta_base);
        assert!((lr_at(cfg.j_w, &cfg).unwrap() - cfg.eta_base).abs() <= 1e-15 * cfg.eta_base);
        assert!((lr_at(cfg.j, &cfg).unwrap() - cfg.eta_min).abs() < 1e-18);
        assert!(lr_at(cfg.j + 1, &cfg).is_err());
    }

    #[test]
    fn single_warmup_epoch() {
        let cfg = ScheduleConfig { j_w: 1, j: 10, ..Default::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), cfg.eta_base);
        assert_eq!(lr_at(1, &cfg).unwrap(), cfg.eta_base);
    }

    #[test]
    fn invalid_configs() {
        assert!(lr_at(0, &ScheduleConfig { j_w: 0, ..Default::default() }).is_err());
        assert!(lr_at(0, &ScheduleConfig { j_w: 120, ..Default::default() }).is_err());
        assert!(lr_at(0, &ScheduleConfig { eta_min: 1.0, ..Default::default() }).is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(j in 2usize..200, jw_frac in 0.0f64..1.0, start in 0.0f64..1e-4, min in 0.0f64..1e-4) {
            let j_w = 1 + ((j - 2) as f64 * jw_frac) as usize;
            let cfg = ScheduleConfig { eta_start: start, eta_base: 2e-4, eta_min: min, j, j_w };
            let lrs: Vec<f64> = (0..=j).map(|t| lr_at(t, &cfg).unwrap()).collect();
            let lo = start.min(min);
            for &v in &lrs {
                prop_assert!(v >= lo - 1e-18 && v <= cfg.eta_base * (1.0 + 1e-15));
            }
            for t in 1..j_w {
                prop_assert!(lrs[t] >= lrs[t - 1]);
            }
            for t in j_w + 1..=j {
                prop_assert!(lrs[t] <= lrs[t - 1]);
            }
            prop_assert!((lrs[j_w - 1] - cfg.eta_base).abs() <= 1e-15 * cfg.eta_base);
            prop_assert!((lrs[j_w] - cfg.eta_base).abs() <= 1e-15 * cfg.eta_base);
        }
    }
}
