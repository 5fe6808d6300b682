use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Cumulative signal fractions `alpha_bar[t]` for `t in 0..num_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from a beta range.
    ///
    /// `Linear` spaces betas evenly between `beta_start` and `beta_end`.
    /// `Cosine` uses the squared-cosine signal curve; the beta range is only
    /// validated, with per-step betas capped at 0.999.
    pub fn new(num_steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("num_steps must be positive"));
        }
        for (name, b) in [("beta_start", beta_start), ("beta_end", beta_end)] {
            if !(b > 0. && b < 1.) {
                return Err(Error::invalid(format!("{name} = {b} is outside (0, 1)")));
            }
        }
        if beta_start > beta_end {
            return Err(Error::invalid(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if num_steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..num_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |i: usize| {
                    let x = (i as f64 / num_steps as f64 + s) / (1. + s);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (0..num_steps)
                    .map(|i| (1. - f(i + 1) / f(i)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let mut acc = 1.;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1. - b;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    /// Wraps a precomputed table after validating it.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::invalid("empty alpha_bar table"));
        }
        if let Some(a) = alpha_bar.iter().find(|a| !(**a > 0. && **a <= 1.)) {
            return Err(Error::invalid(format!("alpha_bar entry {a} is outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("alpha_bar must be non-increasing"));
        }
        if alpha_bar.len() > 1 && alpha_bar[0] <= alpha_bar[alpha_bar.len() - 1] {
            return Err(Error::invalid("alpha_bar must decrease over the schedule"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {})", self.num_steps())))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("default schedule is valid")
    }
}
