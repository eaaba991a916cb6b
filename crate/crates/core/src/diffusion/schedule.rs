use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule and its derived products. Timesteps are 1-based in
/// every accessor; `t = 0` denotes the clean signal with `abar_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    rescaled: bool,
}

impl NoiseSchedule {
    /// Scaled-linear schedule: `sqrt(beta)` is linear between the endpoints.
    /// Endpoints are stored exactly as given.
    pub fn build(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::param(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (steps - 1) as f64;
        let mut beta: Vec<f64> = (0..steps)
            .map(|i| {
                let s = lo + (hi - lo) * i as f64 / last;
                s * s
            })
            .collect();
        beta[0] = beta_start;
        beta[steps - 1] = beta_end;
        Self::from_betas(beta)
    }

    /// Non-rescaled schedule from an explicit `beta` array.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::param("schedule needs at least 2 steps"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::param(format!("beta values must lie in (0, 1], found {b}")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sched = Self::from_parts(beta, alpha, alpha_bar, false);
        sched.check_decreasing()?;
        Ok(sched)
    }

    fn from_parts(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>, rescaled: bool) -> Self {
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            rescaled,
        }
    }

    fn check_decreasing(&self) -> Result<()> {
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Numeric("alpha_bar must be strictly decreasing".into()));
        }
        Ok(())
    }

    /// Zero-terminal-SNR rescale: shifts `sqrt(abar)` so the last step is
    /// zero and scales so the first step is unchanged, then recomputes
    /// `alpha_t = abar_t / abar_{t-1}` and `beta_t = 1 - alpha_t`.
    pub fn rescale_terminal(&self) -> Result<Self> {
        if self.rescaled {
            return Err(Error::Configuration("schedule is already rescaled".into()));
        }
        let first = self.sqrt_alpha_bar[0];
        let last = *self.sqrt_alpha_bar.last().unwrap();
        if !(first > last) {
            return Err(Error::Numeric(format!(
                "degenerate schedule: sqrt(abar_1) = {first} is not above sqrt(abar_T) = {last}"
            )));
        }
        let k = first / (first - last);
        let t_max = self.steps();
        let sab: Vec<f64> = self
            .sqrt_alpha_bar
            .iter()
            .enumerate()
            .map(|(i, &s)| match i {
                0 => first,
                i if i == t_max - 1 => 0.0,
                _ => (s - last) * k,
            })
            .collect();
        Self::from_sqrt_alpha_bar(sab)
    }

    /// Rescaled schedule defined directly by its `sqrt(abar)` ladder.
    fn from_sqrt_alpha_bar(sab: Vec<f64>) -> Result<Self> {
        let alpha_bar: Vec<f64> = sab.iter().map(|s| s * s).collect();
        let mut alpha = Vec::with_capacity(sab.len());
        let mut prev = 1.0;
        for &ab in &alpha_bar {
            alpha.push(ab / prev);
            prev = ab;
        }
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let out = Self {
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar: sab,
            sqrt_one_minus_alpha_bar,
            rescaled: true,
        };
        out.check_decreasing()?;
        Ok(out)
    }

    /// Builds a schedule from its configuration, rescaling if requested.
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        let s = Self::build(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        if cfg.rescale_terminal {
            s.rescale_terminal()
        } else {
            Ok(s)
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn is_rescaled(&self) -> bool {
        self.rescaled
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `abar_t`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.sqrt_alpha_bar[t - 1]
        }
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sqrt_one_minus_alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sqrt_alpha_bars(&self) -> &[f64] {
        &self.sqrt_alpha_bar
    }

    pub fn sqrt_one_minus_alpha_bars(&self) -> &[f64] {
        &self.sqrt_one_minus_alpha_bar
    }

    pub fn to_table(&self) -> ScheduleTable {
        ScheduleTable {
            format_version: ScheduleTable::VERSION,
            steps: self.steps(),
            beta: self.beta.clone(),
            sqrt_alpha_bar: self.rescaled.then(|| self.sqrt_alpha_bar.clone()),
            rescaled: self.rescaled,
        }
    }

    pub fn from_table(table: &ScheduleTable) -> Result<Self> {
        if table.format_version != ScheduleTable::VERSION {
            return Err(Error::Format {
                what: "schedule table",
                detail: format!("unsupported version {}", table.format_version),
            });
        }
        if table.beta.len() != table.steps {
            return Err(Error::Format {
                what: "schedule table",
                detail: format!("{} betas for {} steps", table.beta.len(), table.steps),
            });
        }
        match (&table.sqrt_alpha_bar, table.rescaled) {
            (Some(sab), true) => {
                if sab.len() != table.steps || sab.last() != Some(&0.0) {
                    return Err(Error::Format {
                        what: "schedule table",
                        detail: "rescaled ladder must have one entry per step and end at zero".into(),
                    });
                }
                Self::from_sqrt_alpha_bar(sab.clone())
            }
            (None, false) => Self::from_betas(table.beta.clone()),
            _ => Err(Error::Format {
                what: "schedule table",
                detail: "sqrt_alpha_bar is required exactly when rescaled is set".into(),
            }),
        }
    }
}

/// Human-readable serialized schedule: step count, the full `beta` array and
/// whether the terminal rescale was applied. Rescaled schedules also carry
/// their `sqrt(abar)` ladder so they reload bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleTable {
    pub format_version: u32,
    pub steps: usize,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqrt_alpha_bar: Option<Vec<f64>>,
    pub rescaled: bool,
}

impl ScheduleTable {
    pub const VERSION: u32 = 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rescale_terminal: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            rescale_terminal: true,
        }
    }
}
