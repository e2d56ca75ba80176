use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial value and clamp range of a learnable temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    pub init: f64,
    pub min: f64,
    pub max: f64,
}

impl TemperatureConfig {
    pub const fn new(init: f64, min: f64, max: f64) -> Self {
        TemperatureConfig { init, min, max }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min.is_finite()
            && self.max.is_finite()
            && self.init.is_finite()
            && self.min > 0.0
            && self.min <= self.init
            && self.init <= self.max;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "temperature needs 0 < min ≤ init ≤ max, got init={} min={} max={}",
                self.init, self.min, self.max
            )))
        }
    }
}

/// Learnable temperature `τ`, stored as `log τ` and clamped to `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    log_tau: f64,
    config: TemperatureConfig,
}

impl Temperature {
    pub fn new(config: TemperatureConfig) -> Result<Self> {
        config.validate()?;
        Ok(Temperature {
            log_tau: config.init.ln(),
            config,
        })
    }

    pub fn config(&self) -> TemperatureConfig {
        self.config
    }

    pub fn value(&self) -> f64 {
        // Compare in log space so a clamped value is exactly the bound.
        if self.log_tau <= self.config.min.ln() {
            self.config.min
        } else if self.log_tau >= self.config.max.ln() {
            self.config.max
        } else {
            self.log_tau.exp().clamp(self.config.min, self.config.max)
        }
    }

    pub fn log_value(&self) -> f64 {
        self.log_tau
    }

    /// Sets `log τ`, clamping `τ` into its bounds.
    pub fn set_log_value(&mut self, log_tau: f64) {
        let lo = self.config.min.ln();
        let hi = self.config.max.ln();
        self.log_tau = if log_tau.is_nan() { self.log_tau } else { log_tau.clamp(lo, hi) };
    }

    /// Converts `∂L/∂τ` into `∂L/∂log τ`.
    pub fn log_grad(&self, grad_tau: f64) -> f64 {
        grad_tau * self.value()
    }
}
