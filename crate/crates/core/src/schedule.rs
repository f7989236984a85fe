//! Variance-preserving cosine noise schedule and the deterministic sampler
//! arithmetic built on it.

use crate::error::{Result, SeasError};

/// Per-step signal/noise coefficients with alpha^2 + beta^2 = 1.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine ramp over `num_steps` discrete steps. alpha starts at exactly 1
    /// and decays almost to zero; the 0.995 factor keeps the final step away
    /// from the degenerate alpha = 0 point.
    pub fn cosine(num_steps: usize) -> Result<Self> {
        if num_steps < 2 {
            return Err(SeasError::Range(format!("schedule needs >= 2 steps, got {}", num_steps)));
        }
        let mut alpha = Vec::with_capacity(num_steps);
        let mut beta = Vec::with_capacity(num_steps);
        for t in 0..num_steps {
            let frac = t as f64 / (num_steps - 1) as f64;
            let angle = frac * 0.995 * std::f64::consts::FRAC_PI_2;
            alpha.push(angle.cos());
            beta.push(angle.sin());
        }
        Ok(NoiseSchedule { alpha, beta })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(SeasError::Range(format!("t {} out of schedule range {}", t, self.len())));
        }
        Ok(())
    }

    /// Map a noise-strength fraction in (0, 1] onto a discrete step.
    pub fn t_for_strength(&self, rho: f64) -> Result<usize> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(SeasError::Range(format!("noise strength {} outside (0, 1]", rho)));
        }
        Ok(((self.len() - 1) as f64 * rho).round() as usize)
    }
}

/// z_t = alpha_t * z + beta_t * eps.
pub fn forward_diffuse(z: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if z.len() != eps.len() {
        return Err(SeasError::Dimension(format!("latent {} vs noise {}", z.len(), eps.len())));
    }
    let (a, b) = (schedule.alpha(t), schedule.beta(t));
    Ok(z.iter().zip(eps).map(|(zi, ei)| a * zi + b * ei).collect())
}

/// Recover the clean-latent estimate from a noise prediction.
pub fn z0_estimate(z_t: &[f64], eps_hat: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if z_t.len() != eps_hat.len() {
        return Err(SeasError::Dimension(format!("latent {} vs noise {}", z_t.len(), eps_hat.len())));
    }
    let (a, b) = (schedule.alpha(t), schedule.beta(t));
    if a == 0.0 {
        return Err(SeasError::Range("alpha_t is zero, cannot invert".into()));
    }
    Ok(z_t.iter().zip(eps_hat).map(|(zi, ei)| (zi - b * ei) / a).collect())
}

/// One deterministic sampler update: re-noise the clean estimate to t_to.
/// With t_to = 0 this returns the clean estimate itself.
pub fn sample_step(noisy: &[f64], t_from: usize, t_to: usize, eps_hat: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t_from)?;
    schedule.check_t(t_to)?;
    if t_to >= t_from {
        return Err(SeasError::Range(format!("sampler must move down: {} -> {}", t_from, t_to)));
    }
    let z0 = z0_estimate(noisy, eps_hat, t_from, schedule)?;
    let (a, b) = (schedule.alpha(t_to), schedule.beta(t_to));
    Ok(z0.iter().zip(eps_hat).map(|(zi, ei)| a * zi + b * ei).collect())
}

/// The descending timestep ladder for a run of `steps` sampler updates,
/// starting at t_init and ending at 0. Length is steps + 1.
pub fn timesteps_descending(t_init: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(SeasError::Range("sampler needs at least one step".into()));
    }
    if t_init < steps {
        return Err(SeasError::Range(format!("t_init {} < step count {}", t_init, steps)));
    }
    let mut ts = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = (t_init as f64 * (1.0 - k as f64 / steps as f64)).round() as usize;
        ts.push(t);
    }
    *ts.last_mut().unwrap() = 0;
    for w in ts.windows(2) {
        if w[1] >= w[0] {
            return Err(SeasError::Range(format!("timestep ladder not strictly decreasing: {:?}", ts)));
        }
    }
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s.alpha(0) - 1.0).abs() < 1e-12);
        assert!(s.beta(0).abs() < 1e-12);
        assert!(s.alpha(999) < 0.05);
        for t in 1..1000 {
            assert!(s.alpha(t) < s.alpha(t - 1), "alpha not decreasing at {}", t);
            assert!(s.beta(t) > s.beta(t - 1), "beta not increasing at {}", t);
        }
        for t in 0..1000 {
            let r = s.alpha(t) * s.alpha(t) + s.beta(t) * s.beta(t);
            assert!((r - 1.0).abs() < 1e-12, "alpha^2+beta^2 = {} at {}", r, t);
        }
    }

    #[test]
    fn forward_diffuse_hand_case() {
        // alpha 0.6 / beta 0.8 sits between steps of the real schedule, so
        // build a two-step schedule holding those exact values
        let s = NoiseSchedule {
            alpha: vec![1.0, 0.6],
            beta: vec![0.0, 0.8],
        };
        let out = forward_diffuse(&[1.0, 2.0], 1, &[1.0, 1.0], &s).unwrap();
        assert_eq!(out, vec![1.4, 2.0]);
    }

    #[test]
    fn z0_round_trip_is_exact() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let z: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let eps: Vec<f64> = (0..32).map(|i| (i as f64 * 1.7).cos()).collect();
        for &t in &[1usize, 250, 500, 999] {
            let zt = forward_diffuse(&z, t, &eps, &s).unwrap();
            let back = z0_estimate(&zt, &eps, t, &s).unwrap();
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9, "round trip at t={}: {} vs {}", t, a, b);
            }
        }
    }

    #[test]
    fn sample_step_to_zero_returns_clean_estimate() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let z = vec![0.5, -1.25, 2.0];
        let eps = vec![0.1, 0.2, -0.3];
        let zt = forward_diffuse(&z, 400, &eps, &s).unwrap();
        let out = sample_step(&zt, 400, 0, &eps, &s).unwrap();
        for (a, b) in z.iter().zip(&out) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn timestep_ladder_well_formed() {
        let ts = timesteps_descending(999, 25).unwrap();
        assert_eq!(ts.len(), 26);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(timesteps_descending(10, 25).is_err());
    }

    #[test]
    fn out_of_range_t_rejected() {
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(forward_diffuse(&[1.0], 10, &[0.0], &s).is_err());
        assert!(s.t_for_strength(0.0).is_err());
        assert!(s.t_for_strength(1.5).is_err());
        assert_eq!(s.t_for_strength(1.0).unwrap(), 9);
    }
}
