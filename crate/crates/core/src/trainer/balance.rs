use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancerConfig {
    /// Exponent on the convergence rate; 0 disables balancing.
    pub gamma: f64,
    pub floor: f64,
    pub cap: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        BalancerConfig { gamma: 1.0, floor: 0.2, cap: 5.0 }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("balancer.gamma", "must be finite and non-negative"));
        }
        if !(self.floor > 0.0) {
            return Err(Error::config("balancer.floor", "must be positive"));
        }
        if !(self.cap >= self.floor && self.cap.is_finite()) {
            return Err(Error::config("balancer.cap", "must be finite and at least the floor"));
        }
        Ok(())
    }
}

/// Per-task epoch-mean loss history plus the running sums of the current
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    pub config: BalancerConfig,
    /// At most the two most recent epoch means, oldest first.
    pub history: Vec<Vec<f64>>,
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BalancerState {
    pub fn new(config: BalancerConfig, tasks: usize) -> Result<Self> {
        config.validate()?;
        Ok(BalancerState {
            config,
            history: vec![Vec::new(); tasks],
            sums: vec![0.0; tasks],
            counts: vec![0; tasks],
        })
    }

    /// Adds one step loss of task `t` to the current epoch.
    pub fn record(&mut self, t: usize, loss: f64) {
        self.sums[t] += loss;
        self.counts[t] += 1;
    }

    /// Closes the epoch: every task seen in it gets its mean appended.
    pub fn end_epoch(&mut self) {
        for t in 0..self.sums.len() {
            if self.counts[t] > 0 {
                let h = &mut self.history[t];
                h.push(self.sums[t] / self.counts[t] as f64);
                if h.len() > 2 {
                    h.remove(0);
                }
            }
            self.sums[t] = 0.0;
            self.counts[t] = 0;
        }
    }

    /// Latest over previous epoch mean, or 1 without two entries.
    pub fn ratio(&self, t: usize) -> Result<f64> {
        let h = self.history.get(t).ok_or_else(|| Error::Invalid(format!("no balancer slot for task #{t}")))?;
        if h.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Invalid(format!("task #{t} has a non-positive recorded loss {h:?}")));
        }
        Ok(if h.len() < 2 { 1.0 } else { h[1] / h[0] })
    }

    pub fn weights(&self, q: usize, r: usize) -> Result<(f64, f64)> {
        balance_weights(&self.config, self.ratio(q)?, self.ratio(r)?)
    }
}

/// Pair weights from two convergence rates. The weights sum to 2 and the
/// slower task (larger rate) gets the larger share.
pub fn balance_weights(cfg: &BalancerConfig, rho_q: f64, rho_r: f64) -> Result<(f64, f64)> {
    if !(rho_q > 0.0 && rho_r > 0.0) {
        return Err(Error::Invalid(format!("convergence rates must be positive, got {rho_q} and {rho_r}")));
    }
    let raw = |rho: f64| rho.powf(cfg.gamma).clamp(cfg.floor, cfg.cap);
    let (a, b) = (raw(rho_q), raw(rho_r));
    if a == b {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * a / (a + b), 2.0 * b / (a + b)))
}
