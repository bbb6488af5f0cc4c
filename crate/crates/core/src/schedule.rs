//! Variance schedules, the forward marginal, and DDIM / DDPM reverse steps.
//!
//! Timesteps are 1-based: step `t` in `1..=T` has variance `betas[t - 1]`,
//! and `alpha_bar(0) == 1` is the clean-data boundary.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl VarianceSchedule {
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("T", "step count must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::param("beta_end", format!("{beta_end} not in (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} is smaller than beta_start {beta_start}"),
            ));
        }

        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if steps == 1 {
                    vec![beta_start]
                } else {
                    let span = (beta_end - beta_start) / (steps - 1) as f64;
                    (0..steps).map(|i| beta_start + span * i as f64).collect()
                }
            }
        };

        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for (i, beta) in betas.iter().enumerate() {
            alpha_bars.push(alpha_bars[i] * (1.0 - beta));
        }

        // Posterior standard deviation of q(x_{t-1} | x_t, x_0); zero at t = 1.
        let sigmas = betas
            .iter()
            .enumerate()
            .map(|(i, beta)| {
                let ab_t = alpha_bars[i + 1];
                let ab_prev = alpha_bars[i];
                (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
            })
            .collect();

        Ok(Self {
            betas,
            alpha_bars,
            sigmas,
        })
    }

    /// The default 1000-step linear schedule (beta from 1e-4 to 0.02).
    pub fn standard() -> Self {
        Self::build(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("valid default schedule")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products, length `T + 1`, starting at 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_index(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigmas[t - 1])
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::Index {
                index: t,
                min: 0,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Index {
                index: t,
                min: 1,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    /// Evenly spaced sub-sampled timesteps, largest first. The final
    /// transition of a chain goes from the last entry to `t = 0`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::param(
                "steps",
                format!("{steps} must be in [1, {total}]"),
            ));
        }
        Ok((0..steps).map(|i| (steps - i) * total / steps).collect())
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
pub fn forward_sample(x0: &[f64], t: usize, noise: &[f64], sched: &VarianceSchedule) -> Result<Vec<f64>> {
    check_dim(x0.len(), noise.len())?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

/// Predicted clean point from a noise estimate.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &VarianceSchedule) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps_hat.len())?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
}

/// Generalized DDIM update from `t` to `t_prev`; `eta = 0` is deterministic
/// and ignores `noise`.
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: &[f64],
    sched: &VarianceSchedule,
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::Ordering { t, t_prev });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param("eta", format!("{eta} not in [0, 1]")));
    }
    sched.check_step(t)?;
    check_dim(x_t.len(), eps_hat.len())?;

    let ab_t = sched.alpha_bars[t];
    let ab_prev = sched.alpha_bars[t_prev];
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;

    let sigma = if eta == 0.0 {
        0.0
    } else {
        check_dim(x_t.len(), noise.len())?;
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let a = ab_prev.sqrt();

    let mut out: Vec<f64> = x0.iter().zip(eps_hat).map(|(x, e)| a * x + dir * e).collect();
    if sigma > 0.0 {
        for (o, n) in out.iter_mut().zip(noise) {
            *o += sigma * n;
        }
    }
    Ok(out)
}

/// Ancestral step `t -> t - 1` with the posterior mean
/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)`.
/// Noise is added for every step except the last one (`t = 1`).
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    noise: &[f64],
    sched: &VarianceSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_dim(x_t.len(), eps_hat.len())?;
    check_dim(x_t.len(), noise.len())?;
    let beta = sched.betas[t - 1];
    let ab = sched.alpha_bars[t];
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let sigma = if t > 1 { sched.sigmas[t - 1] } else { 0.0 };
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((x, e), n)| inv_sqrt_alpha * (x - coef * e) + sigma * n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = VarianceSchedule::build(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bars().len(), 2);
        assert_eq!(s.alpha_bars()[0], 1.0);
        assert!((s.alpha_bars()[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_half_schedule() {
        let s = VarianceSchedule::build(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn standard_schedule_matches_direct_product() {
        let s = VarianceSchedule::build(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // independent recomputation of the betas and their product
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            prod *= 1.0 - beta;
        }
        let last = s.alpha_bars()[1000];
        assert!(((last - prod) / prod).abs() < 1e-10, "{last} vs {prod}");
        // frozen value of the product loop above
        assert!((last - 4.035_829_765_375_675e-5).abs() < 1e-12, "{last:e}");
    }

    #[test]
    fn rejects_bad_parameters() {
        let err = VarianceSchedule::build(0, 0.1, 0.2, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(err, Error::Parameter { field: "T", .. }));
        let err = VarianceSchedule::build(10, 0.0, 0.2, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(err, Error::Parameter { field: "beta_start", .. }));
        let err = VarianceSchedule::build(10, 0.3, 0.2, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(err, Error::Parameter { field: "beta_end", .. }));
        let err = VarianceSchedule::build(10, 0.1, 1.0, ScheduleKind::Linear).unwrap_err();
        assert!(matches!(err, Error::Parameter { field: "beta_end", .. }));
    }

    #[test]
    fn ddim_timesteps_descend_evenly() {
        let s = VarianceSchedule::standard();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[49], 20);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn forward_sample_boundaries() {
        let s = VarianceSchedule::standard();
        let x0 = [1.5, -2.0];
        assert_eq!(forward_sample(&x0, 0, &[0.3, 0.7], &s).unwrap(), x0.to_vec());
        let ab = s.alpha_bar(300).unwrap();
        let out = forward_sample(&x0, 300, &[0.0, 0.0], &s).unwrap();
        assert!((out[0] - ab.sqrt() * 1.5).abs() < 1e-15);
        assert!(matches!(
            forward_sample(&x0, 1001, &[0.0, 0.0], &s),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn ddim_terminal_step_returns_x0_prediction() {
        let s = VarianceSchedule::standard();
        let x = [0.4, -1.1];
        let eps = [0.2, 0.5];
        let x0 = predict_x0(&x, &eps, 40, &s).unwrap();
        let out = ddim_step(&x, &eps, 40, 0, 0.0, &[], &s).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn ddim_inverts_forward_sample() {
        let s = VarianceSchedule::standard();
        let x0 = [0.7, -0.3, 2.0];
        let noise = [1.2, -0.4, 0.05];
        for t in [1, 10, 500, 1000] {
            let xt = forward_sample(&x0, t, &noise, &s).unwrap();
            let back = ddim_step(&xt, &noise, t, 0, 0.0, &[], &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ddim_ordering_error() {
        let s = VarianceSchedule::standard();
        let err = ddim_step(&[0.0], &[0.0], 10, 10, 0.0, &[], &s).unwrap_err();
        assert_eq!(err, Error::Ordering { t: 10, t_prev: 10 });
    }

    #[test]
    fn ddim_eta_zero_is_bit_deterministic() {
        let s = VarianceSchedule::standard();
        let a = ddim_step(&[0.3, 0.9], &[0.1, -0.2], 700, 680, 0.0, &[5.0, 5.0], &s).unwrap();
        let b = ddim_step(&[0.3, 0.9], &[0.1, -0.2], 700, 680, 0.0, &[-9.0, 1.0], &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddpm_last_step_adds_no_noise() {
        let s = VarianceSchedule::standard();
        let a = ddpm_step(&[0.3], &[0.1], 1, &[100.0], &s).unwrap();
        let b = ddpm_step(&[0.3], &[0.1], 1, &[0.0], &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn ddpm_hand_computed_step() {
        // T = 2, beta = 0.5 both steps: alpha_bar = [1, 0.5, 0.25]
        let s = VarianceSchedule::build(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        // t = 2: mean = (x - 0.5 / sqrt(0.75) * e) / sqrt(0.5)
        //        sigma^2 = 0.5 * (1 - 0.5) / (1 - 0.25) = 1/3
        let (x, e, z) = (1.0, 0.4, 0.25);
        let mean = (1.0 - 0.5 / 0.75f64.sqrt() * 0.4) / 0.5f64.sqrt();
        let expected = mean + (1.0f64 / 3.0).sqrt() * 0.25;
        let out = ddpm_step(&[x], &[e], 2, &[z], &s).unwrap();
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((expected - 1.231_952_497_299_410).abs() < 1e-12, "{expected}");
    }
}
