use serde::{Deserialize, Serialize};

use crate::observation::{normalize_pixel, Observation, OBS_LEN};

/// Shape of the per-pixel preferred-outcome density. Both use unit scale and
/// are centred on the normalized goal pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferencePrior {
    #[default]
    Laplace,
    Gaussian,
}

/// A preferred outcome: the goal frame plus the density p̃(o) built on it.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalSpec {
    pub observation: Observation,
    pub prior: PreferencePrior,
}

const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl GoalSpec {
    pub fn new(observation: Observation, prior: PreferencePrior) -> Self {
        Self { observation, prior }
    }

    pub fn with_prior(mut self, prior: PreferencePrior) -> Self {
        self.prior = prior;
        self
    }

    /// Normalized goal pixels, the location parameter of the density.
    pub fn center(&self) -> Vec<f32> {
        self.observation.normalized()
    }

    /// log p̃(o) for an already normalized observation (length 12288).
    pub fn log_density(&self, normalized: &[f32]) -> f64 {
        assert_eq!(normalized.len(), OBS_LEN, "observation length");
        let center = self.observation.pixels().iter().map(|&p| normalize_pixel(p));
        match self.prior {
            PreferencePrior::Laplace => center
                .zip(normalized)
                .map(|(c, &x)| -((x - c).abs() as f64) - LN_2)
                .sum(),
            PreferencePrior::Gaussian => center
                .zip(normalized)
                .map(|(c, &x)| {
                    let d = (x - c) as f64;
                    -0.5 * d * d - HALF_LN_2PI
                })
                .sum(),
        }
    }

    pub fn log_density_of(&self, obs: &Observation) -> f64 {
        self.log_density(&obs.normalized())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplace_at_center() {
        let goal = GoalSpec::new(Observation::filled([12, 200, 90]), PreferencePrior::Laplace);
        let lp = goal.log_density(&goal.center());
        let expected = -(OBS_LEN as f64) * LN_2;
        assert!((lp - expected).abs() < 1e-6, "{lp} vs {expected}");
        assert!((lp + 8517.39).abs() < 0.01);
    }

    #[test]
    fn laplace_is_linear_in_abs_deviation() {
        let goal = GoalSpec::new(Observation::filled([0, 0, 0]), PreferencePrior::Laplace);
        let mut x = goal.center();
        let base = goal.log_density(&x);
        x[17] += 1.0;
        assert!((goal.log_density(&x) - (base - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn gaussian_shares_center() {
        let goal = GoalSpec::new(Observation::filled([30, 60, 90]), PreferencePrior::Gaussian);
        let at = goal.log_density(&goal.center());
        assert!((at + OBS_LEN as f64 * HALF_LN_2PI).abs() < 1e-6);
        let mut off = goal.center();
        off[0] += 0.1;
        assert!(goal.log_density(&off) < at);
    }
}
