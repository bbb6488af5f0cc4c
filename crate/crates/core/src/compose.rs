//! Noise-prediction composers: classifier-free guidance, compositional
//! (energy-based) fusion, naive negation and perpendicular negation.
//!
//! All composers work on score deltas `eps(x, t, c) - eps(x, t)`. Negative
//! prompt weights are magnitudes; the subtraction is explicit.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::oracle::EpsPrediction;
use crate::vector::{dot, norm_sq, sub};

/// Below this norm the projection direction is undefined and the input
/// passes through unprojected.
pub const PROJECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerConfig {
    pub guidance: f64,
    pub w_pos: f64,
    pub neg_weights: Vec<f64>,
}

impl ComposerConfig {
    pub fn new(guidance: f64, w_pos: f64, neg_weights: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            guidance,
            w_pos,
            neg_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::param("guidance", format!("{} must be >= 0", self.guidance)));
        }
        if !(self.w_pos > 0.0 && self.w_pos.is_finite()) {
            return Err(Error::param("w_pos", format!("{} must be > 0", self.w_pos)));
        }
        if let Some(w) = self.neg_weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::param(
                "neg_weights",
                format!("{w} is negative; weights are magnitudes"),
            ));
        }
        Ok(())
    }
}

/// Which composer a sampler applies at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposerKind {
    /// Classifier-free guidance on the positive prompt only.
    Cfg,
    /// Guidance followed by a plain subtraction of each negative delta.
    NaiveNegation,
    /// Guidance with each negative delta projected orthogonal to the positive one.
    PerpNeg,
}

impl ComposerKind {
    pub fn name(self) -> &'static str {
        match self {
            ComposerKind::Cfg => "cfg",
            ComposerKind::NaiveNegation => "naive_negation",
            ComposerKind::PerpNeg => "perp_neg",
        }
    }
}

/// Component of `e_i` orthogonal to `e_main`.
pub fn perpendicular_component(e_i: &[f64], e_main: &[f64]) -> Result<Vec<f64>> {
    check_dim(e_main.len(), e_i.len())?;
    let nn = norm_sq(e_main);
    if nn.sqrt() < PROJECTION_EPS {
        return Ok(e_i.to_vec());
    }
    let coef = dot(e_i, e_main) / nn;
    Ok(e_i.iter().zip(e_main).map(|(a, b)| a - coef * b).collect())
}

/// `(1 + tau) * eps_c - tau * eps_u`.
pub fn cfg_compose(eps_u: &[f64], eps_c: &[f64], tau: f64) -> Result<EpsPrediction> {
    check_dim(eps_u.len(), eps_c.len())?;
    Ok(eps_c
        .iter()
        .zip(eps_u)
        .map(|(c, u)| (1.0 + tau) * c - tau * u)
        .collect::<Vec<_>>()
        .into())
}

/// `eps_u + sum_i w_i (eps_i - eps_u)` with signed weights.
pub fn cebm_compose(eps_u: &[f64], eps_list: &[EpsPrediction], weights: &[f64]) -> Result<EpsPrediction> {
    check_dim(eps_list.len(), weights.len())?;
    let mut out = eps_u.to_vec();
    for (eps, w) in eps_list.iter().zip(weights) {
        check_dim(eps_u.len(), eps.len())?;
        for ((o, e), u) in out.iter_mut().zip(eps.iter()).zip(eps_u) {
            *o += w * (e - u);
        }
    }
    Ok(out.into())
}

fn check_negatives(eps_u: &[f64], eps_neg: &[EpsPrediction], cfg: &ComposerConfig) -> Result<()> {
    cfg.validate()?;
    check_dim(eps_neg.len(), cfg.neg_weights.len())?;
    for e in eps_neg {
        check_dim(eps_u.len(), e.len())?;
    }
    Ok(())
}

/// Guided positive prediction minus `w_i (eps_neg_i - eps_u)` for each negative.
pub fn naive_negation_compose(
    eps_u: &[f64],
    eps_pos: &[f64],
    eps_neg: &[EpsPrediction],
    cfg: &ComposerConfig,
) -> Result<EpsPrediction> {
    check_negatives(eps_u, eps_neg, cfg)?;
    let mut out = cfg_compose(eps_u, eps_pos, cfg.guidance)?.into_inner();
    for (e, w) in eps_neg.iter().zip(&cfg.neg_weights) {
        for ((o, n), u) in out.iter_mut().zip(e.iter()).zip(eps_u) {
            *o -= w * (n - u);
        }
    }
    Ok(out.into())
}

/// `eps_u + tau * (w_pos * d_pos - sum_i w_i * perp(d_i, d_pos))` where the
/// deltas are taken against `eps_u`.
pub fn perp_neg_compose(
    eps_u: &[f64],
    eps_pos: &[f64],
    eps_neg: &[EpsPrediction],
    cfg: &ComposerConfig,
) -> Result<EpsPrediction> {
    check_dim(eps_u.len(), eps_pos.len())?;
    check_negatives(eps_u, eps_neg, cfg)?;
    let d_pos = sub(eps_pos, eps_u);
    let mut guided: Vec<f64> = d_pos.iter().map(|d| cfg.w_pos * d).collect();
    for (e, w) in eps_neg.iter().zip(&cfg.neg_weights) {
        let perp = perpendicular_component(&sub(e, eps_u), &d_pos)?;
        for (g, p) in guided.iter_mut().zip(&perp) {
            *g -= w * p;
        }
    }
    Ok(eps_u
        .iter()
        .zip(&guided)
        .map(|(u, g)| u + cfg.guidance * g)
        .collect::<Vec<_>>()
        .into())
}

/// Coefficient of `(out - eps_u)` along `d_pos`, i.e.
/// `<out - eps_u, d_pos> / |d_pos|^2`.
pub fn main_coefficient(out: &[f64], eps_u: &[f64], eps_pos: &[f64]) -> f64 {
    let d_pos = sub(eps_pos, eps_u);
    dot(&sub(out, eps_u), &d_pos) / norm_sq(&d_pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> EpsPrediction {
        EpsPrediction(v.to_vec())
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn perpendicular_examples() {
        assert_eq!(perpendicular_component(&[3.0, 4.0], &[1.0, 0.0]).unwrap(), vec![0.0, 4.0]);
        assert_eq!(perpendicular_component(&[2.0, 5.0], &[2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            perpendicular_component(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap(),
            vec![1.0, 2.0, 0.0]
        );
    }

    #[test]
    fn perpendicular_zero_main_passes_through() {
        assert_eq!(perpendicular_component(&[1.0, -2.0], &[0.0, 1e-13]).unwrap(), vec![1.0, -2.0]);
        assert!(matches!(
            perpendicular_component(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_compose(&[0.3, 0.1], &[1.0, 2.0], 0.0).unwrap().0, vec![1.0, 2.0]);
        assert_eq!(cfg_compose(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap().0, vec![-1.0, 2.0]);
        let out = cfg_compose(&[0.0, 0.0], &[1.0, -2.0], 7.5).unwrap();
        assert!(close(&out, &[8.5, -17.0]));
    }

    #[test]
    fn cebm_examples() {
        let u = [0.2, -0.4];
        assert!(close(&cebm_compose(&u, &[e(&[1.0, 3.0])], &[1.0]).unwrap(), &[1.0, 3.0]));
        let c = e(&[0.7, 0.9]);
        assert!(close(&cebm_compose(&u, &[c.clone(), c], &[1.0, -1.0]).unwrap(), &u));
        let out = cebm_compose(&[0.0, 0.0], &[e(&[1.0, 0.0]), e(&[0.0, 1.0])], &[2.0, 3.0]).unwrap();
        assert_eq!(out.0, vec![2.0, 3.0]);
        assert!(cebm_compose(&u, &[e(&[1.0, 0.0])], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn naive_negation_examples() {
        let u = [0.1, 0.2];
        let pos = [1.0, -1.0];
        let cfg = ComposerConfig::new(3.0, 1.0, vec![]).unwrap();
        assert_eq!(
            naive_negation_compose(&u, &pos, &[], &cfg).unwrap(),
            cfg_compose(&u, &pos, 3.0).unwrap()
        );

        let tau = 2.5;
        let cfg = ComposerConfig::new(tau, 1.0, vec![1.0 + tau]).unwrap();
        let out = naive_negation_compose(&[0.0, 0.0], &pos, &[e(&pos)], &cfg).unwrap();
        assert!(close(&out, &[0.0, 0.0]));

        let cfg = ComposerConfig::new(0.0, 1.0, vec![1.0]).unwrap();
        let out = naive_negation_compose(&[0.0, 0.0], &[1.0, 0.0], &[e(&[1.0, 1.0])], &cfg).unwrap();
        assert_eq!(out.0, vec![0.0, -1.0]);
    }

    #[test]
    fn perp_neg_examples() {
        let zero = [0.0, 0.0];
        let pos = [0.6, -1.3];
        let cfg = ComposerConfig::new(4.0, 1.0, vec![]).unwrap();
        let alone = perp_neg_compose(&zero, &pos, &[], &cfg).unwrap();
        // with eps_u = 0 the perp-neg guidance scale matches cfg with tau - 1
        assert!(close(&alone, &cfg_compose(&zero, &pos, 3.0).unwrap()));

        let cfg = ComposerConfig::new(4.0, 1.0, vec![2.0]).unwrap();
        let parallel = perp_neg_compose(&zero, &pos, &[e(&[1.2, -2.6])], &cfg).unwrap();
        assert!(close(&parallel, &alone));

        let cfg = ComposerConfig::new(1.0, 1.0, vec![1.0]).unwrap();
        let out = perp_neg_compose(&zero, &[1.0, 0.0], &[e(&[1.0, 1.0])], &cfg).unwrap();
        assert_eq!(out.0, vec![1.0, -1.0]);
    }

    #[test]
    fn perp_neg_rejects_signed_weights() {
        let cfg = ComposerConfig {
            guidance: 1.0,
            w_pos: 1.0,
            neg_weights: vec![-1.5],
        };
        let err = perp_neg_compose(&[0.0], &[1.0], &[e(&[0.5])], &cfg).unwrap_err();
        assert!(matches!(err, Error::Parameter { field: "neg_weights", .. }));
        let cfg = ComposerConfig::new(1.0, 1.0, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            perp_neg_compose(&[0.0], &[1.0], &[e(&[0.5])], &cfg),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn overlap_collapses_naive_but_not_perp() {
        let u = [0.3, -0.1, 0.4];
        let pos = [1.0, 0.5, -0.2];
        let tau = 6.5;
        let plain = ComposerConfig::new(tau, 1.0, vec![]).unwrap();
        let neg = ComposerConfig::new(tau, 1.0, vec![1.0 + tau]).unwrap();
        let naive = naive_negation_compose(&u, &pos, &[e(&pos)], &neg).unwrap();
        // the guided delta cancels entirely
        assert!(close(&naive, &u));
        let perp_alone = perp_neg_compose(&u, &pos, &[], &plain).unwrap();
        let perp = perp_neg_compose(&u, &pos, &[e(&pos)], &neg).unwrap();
        assert_eq!(perp, perp_alone);
    }
}
