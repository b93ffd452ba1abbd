//! Bayes-factor intrinsic reward baseline.
//!
//! The shaper is rewarded `lambda * (-ln rho)` where `rho` is the likelihood
//! of its action under its true role relative to the observer's belief
//! mixture. Actions that reveal the true role (`rho > 1`) are penalized.

use serde::{Deserialize, Serialize};

use crate::belief::validate_belief;
use crate::error::{check_len, DbosError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbmConfig {
    pub lambda: f64,
}

impl BbmConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(DbosError::Config(format!("bbm lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// `rho = pi_{z*}(a) / sum_z pi_z(a) b^z`, from log-likelihoods `ell`.
pub fn bayes_factor(ell: &[f64], belief: &[f64], z_star: usize) -> Result<f64> {
    check_len("bayes_factor", ell.len(), belief.len())?;
    if z_star >= ell.len() {
        return Err(DbosError::RoleOutOfRange {
            role: z_star,
            n_roles: ell.len(),
        });
    }
    validate_belief(belief)?;
    // factor out the largest log-likelihood so tiny probabilities stay representable
    let m = ell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mix: f64 = ell.iter().zip(belief).map(|(l, b)| (l - m).exp() * b).sum();
    if !(mix > 0.0) {
        return Err(DbosError::NonFinite {
            context: "bayes factor denominator",
            coordinate: z_star,
        });
    }
    Ok((ell[z_star] - m).exp() / mix)
}

pub fn intrinsic_reward(rho: f64, lambda: f64) -> f64 {
    lambda * -rho.ln()
}

/// Mean intrinsic reward over observers, each with its own likelihood vector
/// and belief row.
pub fn observer_mean_intrinsic(
    ells: &[Vec<f64>],
    beliefs: &[&[f64]],
    z_star: usize,
    lambda: f64,
) -> Result<f64> {
    check_len("observer_mean_intrinsic", ells.len(), beliefs.len())?;
    if ells.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (l, b) in ells.iter().zip(beliefs) {
        s += intrinsic_reward(bayes_factor(l, b, z_star)?, lambda);
    }
    Ok(s / ells.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_values() {
        let l = 0.3f64.ln();
        let rho = bayes_factor(&[l, l], &[0.5, 0.5], 0).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(intrinsic_reward(rho, 1.0).abs() < 1e-12);

        let rho = bayes_factor(&[0.8f64.ln(), 0.2f64.ln()], &[0.5, 0.5], 0).unwrap();
        assert!((rho - 1.6).abs() < 1e-12);
        assert!((intrinsic_reward(rho, 0.5) - (-0.2350018146228)).abs() < 1e-10);
        assert!((intrinsic_reward(0.5, 1.0) - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn one_hot_belief_on_true_role() {
        let rho = bayes_factor(&[-0.1, -3.0, -2.0], &[0.0, 1.0, 0.0], 1).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floored_likelihoods_stay_finite() {
        let rho = bayes_factor(&[-30.0, -30.0], &[0.5, 0.5], 1).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(BbmConfig::new(-1.0).is_err());
        assert!(BbmConfig::new(0.5).is_ok());
    }
}
