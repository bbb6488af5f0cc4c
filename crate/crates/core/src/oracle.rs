//! Analytic prompt-conditioned score model.
//!
//! Each prompt is a mixture over a shared set of isotropic Gaussian modes.
//! Under the forward process component `k` diffuses to
//! `N(sqrt(ab) * mu_k, (ab * s_k + 1 - ab) I)`, so the noised density and the
//! optimal noise predictor `-sqrt(1 - ab) * grad log q_t(x | c)` are exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::VarianceSchedule;
use crate::vector::log_sum_exp;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub id: String,
    pub mean: Vec<f64>,
    pub cov_scale: f64,
}

/// Mixture weights over the world's modes; the stand-in for a text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    weights: Vec<f64>,
}

impl PromptEmbedding {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::param("weights", "empty weight vector"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::param("weights", format!("entry {w} is not a finite nonnegative number")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::param("weights", format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights })
    }

    /// Renormalizes an arbitrary nonnegative vector with positive mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::param("weights", "cannot normalize a vector without positive mass"));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    /// One-hot embedding on mode `index`.
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut weights = vec![0.0; len];
        weights[index] = 1.0;
        Self { weights }
    }

    /// `r * self + (1 - r) * other`, renormalized.
    pub fn interpolate(&self, other: &Self, r: f64) -> Result<Self> {
        check_dim(self.weights.len(), other.weights.len())?;
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::param("r", format!("{r} not in [0, 1]")));
        }
        Self::normalized(
            self.weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| r * a + (1.0 - r) * b)
                .collect(),
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Deref for PromptEmbedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.weights
    }
}

/// A noise prediction vector at some `(x, t, condition)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsPrediction(pub Vec<f64>);

impl Deref for EpsPrediction {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for EpsPrediction {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl EpsPrediction {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Condition<'a> {
    Unconditional,
    Prompt(&'a str),
    Embedding(&'a PromptEmbedding),
}

/// On-disk world description.
///
/// ```toml
/// dim = 2
///
/// [[modes]]
/// id = "front"
/// mean = [0.0, 3.0]
/// cov_scale = 0.05
///
/// [prompts.back]
/// front = 0.7
/// back = 0.3
///
/// [prior]
/// back = 1.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub dim: usize,
    pub modes: Vec<Mode>,
    pub prompts: BTreeMap<String, BTreeMap<String, f64>>,
    pub prior: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct OracleWorld {
    dim: usize,
    modes: Vec<Mode>,
    labels: Vec<String>,
    embeddings: Vec<PromptEmbedding>,
    prior: Vec<f64>,
    unconditional: PromptEmbedding,
}

impl OracleWorld {
    /// Builds a world; `prompts` and `prior` are parallel to each other.
    pub fn new(
        dim: usize,
        modes: Vec<Mode>,
        prompts: Vec<(String, PromptEmbedding)>,
        prior: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::World("dim must be positive".into()));
        }
        if modes.is_empty() {
            return Err(Error::World("world has no modes".into()));
        }
        for m in &modes {
            if m.mean.len() != dim {
                return Err(Error::World(format!(
                    "mode `{}` has mean of length {}, expected {dim}",
                    m.id,
                    m.mean.len()
                )));
            }
            if !(m.cov_scale > 0.0 && m.cov_scale.is_finite()) {
                return Err(Error::World(format!("mode `{}` has non-positive cov_scale", m.id)));
            }
        }
        for (i, m) in modes.iter().enumerate() {
            if modes[..i].iter().any(|o| o.id == m.id) {
                return Err(Error::World(format!("duplicate mode id `{}`", m.id)));
            }
        }
        if prompts.is_empty() {
            return Err(Error::World("world has no prompts".into()));
        }
        if prompts.len() != prior.len() {
            return Err(Error::World("prior length differs from prompt count".into()));
        }
        for (label, emb) in &prompts {
            if emb.len() != modes.len() {
                return Err(Error::World(format!(
                    "prompt `{label}` weights {} modes, world has {}",
                    emb.len(),
                    modes.len()
                )));
            }
        }
        if prior.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::World("prior has a negative entry".into()));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::World(format!("prior sums to {total}, expected 1")));
        }

        let mut uncond = vec![0.0; modes.len()];
        for ((_, emb), p) in prompts.iter().zip(&prior) {
            for (u, w) in uncond.iter_mut().zip(emb.weights()) {
                *u += p * w;
            }
        }
        let unconditional = PromptEmbedding::normalized(uncond)?;
        let (labels, embeddings) = prompts.into_iter().unzip();

        Ok(Self {
            dim,
            modes,
            labels,
            embeddings,
            prior,
            unconditional,
        })
    }

    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        let index: BTreeMap<&str, usize> = spec
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.as_str(), i))
            .collect();
        let mut prompts = Vec::with_capacity(spec.prompts.len());
        for (label, table) in &spec.prompts {
            let mut weights = vec![0.0; spec.modes.len()];
            for (mode, w) in table {
                let i = index.get(mode.as_str()).ok_or_else(|| {
                    Error::World(format!("prompt `{label}` references unknown mode `{mode}`"))
                })?;
                weights[*i] = *w;
            }
            let emb = PromptEmbedding::new(weights)
                .map_err(|e| Error::World(format!("prompt `{label}`: {e}")))?;
            prompts.push((label.clone(), emb));
        }
        for label in spec.prior.keys() {
            if !spec.prompts.contains_key(label) {
                return Err(Error::World(format!("prior references unknown prompt `{label}`")));
            }
        }
        let prior = spec
            .prompts
            .keys()
            .map(|label| spec.prior.get(label).copied().unwrap_or(0.0))
            .collect();
        Self::new(spec.dim, spec.modes.clone(), prompts, prior)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: WorldSpec = toml::from_str(text).map_err(|e| Error::World(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn to_spec(&self) -> WorldSpec {
        let prompts = self
            .labels
            .iter()
            .zip(&self.embeddings)
            .map(|(label, emb)| {
                let table = self
                    .modes
                    .iter()
                    .zip(emb.weights())
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(m, w)| (m.id.clone(), *w))
                    .collect();
                (label.clone(), table)
            })
            .collect();
        let prior = self
            .labels
            .iter()
            .zip(&self.prior)
            .filter(|(_, p)| **p != 0.0)
            .map(|(l, p)| (l.clone(), *p))
            .collect();
        WorldSpec {
            dim: self.dim,
            modes: self.modes.clone(),
            prompts,
            prior,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode_index(&self, id: &str) -> Option<usize> {
        self.modes.iter().position(|m| m.id == id)
    }

    pub fn prompt_labels(&self) -> &[String] {
        &self.labels
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn embedding(&self, label: &str) -> Result<&PromptEmbedding> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| &self.embeddings[i])
            .ok_or_else(|| Error::Lookup {
                kind: "prompt",
                name: label.to_string(),
            })
    }

    fn prior_of(&self, label: &str) -> Result<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.prior[i])
            .ok_or_else(|| Error::Lookup {
                kind: "prompt",
                name: label.to_string(),
            })
    }

    /// Prior-weighted mixture of all prompt embeddings.
    pub fn unconditional(&self) -> &PromptEmbedding {
        &self.unconditional
    }

    pub fn resolve<'a>(&'a self, condition: Condition<'a>) -> Result<&'a PromptEmbedding> {
        let emb = match condition {
            Condition::Unconditional => &self.unconditional,
            Condition::Prompt(label) => self.embedding(label)?,
            Condition::Embedding(emb) => emb,
        };
        check_dim(self.modes.len(), emb.len())?;
        Ok(emb)
    }

    /// Per-component `(log weight + log N(x; m_k, v_k I))` at cumulative
    /// product `ab`; zero-weight components are `-inf`.
    fn component_log_terms(&self, weights: &[f64], x: &[f64], ab: f64) -> Vec<f64> {
        let sa = ab.sqrt();
        let d = self.dim as f64;
        self.modes
            .iter()
            .zip(weights)
            .map(|(m, &w)| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v = ab * m.cov_scale + 1.0 - ab;
                let r2: f64 = x
                    .iter()
                    .zip(&m.mean)
                    .map(|(xi, mi)| (xi - sa * mi).powi(2))
                    .sum();
                w.ln() - 0.5 * d * (2.0 * PI * v).ln() - 0.5 * r2 / v
            })
            .collect()
    }

    /// Log of the forward-diffused mixture density at `x`.
    pub fn log_noised_density(
        &self,
        embedding: &PromptEmbedding,
        x: &[f64],
        t: usize,
        sched: &VarianceSchedule,
    ) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        check_dim(self.modes.len(), embedding.len())?;
        let ab = sched.alpha_bar(t)?;
        Ok(log_sum_exp(&self.component_log_terms(embedding, x, ab)))
    }

    pub fn noised_density(
        &self,
        embedding: &PromptEmbedding,
        x: &[f64],
        t: usize,
        sched: &VarianceSchedule,
    ) -> Result<f64> {
        Ok(self.log_noised_density(embedding, x, t, sched)?.exp())
    }

    /// Posterior component probabilities of the noised mixture at `x`.
    pub fn responsibilities(&self, weights: &[f64], x: &[f64], ab: f64) -> Vec<f64> {
        let terms = self.component_log_terms(weights, x, ab);
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = terms.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= total);
        r
    }

    /// Optimal noise prediction `sqrt(1 - ab) * sum_k r_k (x - m_k) / v_k`.
    pub fn eps_pred(
        &self,
        condition: Condition<'_>,
        x: &[f64],
        t: usize,
        sched: &VarianceSchedule,
    ) -> Result<EpsPrediction> {
        let emb = self.resolve(condition)?;
        check_dim(self.dim, x.len())?;
        if t == 0 {
            return Err(Error::Index {
                index: t,
                min: 1,
                max: sched.num_steps(),
            });
        }
        let ab = sched.alpha_bar(t)?;
        Ok(EpsPrediction(self.eps_at(emb, x, ab)))
    }

    pub(crate) fn eps_at(&self, emb: &PromptEmbedding, x: &[f64], ab: f64) -> Vec<f64> {
        let resp = self.responsibilities(emb, x, ab);
        let sa = ab.sqrt();
        let mut out = vec![0.0; self.dim];
        for (m, r) in self.modes.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let v = ab * m.cov_scale + 1.0 - ab;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&m.mean) {
                *o += r * (xi - sa * mi) / v;
            }
        }
        let pre = (1.0 - ab).sqrt();
        out.iter_mut().for_each(|o| *o *= pre);
        out
    }

    /// `R(c1, c2) = p(c1, c2 | x) / (p(c1 | x) p(c2 | x))` on clean densities.
    ///
    /// Labels are treated as conditionally independent given the latent mode,
    /// so the pair posterior follows the product model
    /// `p(k | c1, c2) ∝ p(k | c1) p(k | c2) / p(k)` on components and
    /// `p(c1, c2 | x) = p(c1) p(c2) / p(x) * sum_k w1_k w2_k N_k(x) / u_k`.
    /// Identical labels name a single event, so `p(c, c | x) = p(c | x)`.
    pub fn overlap_ratio(&self, c1: &str, c2: &str, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let e1 = self.embedding(c1)?;
        let e2 = self.embedding(c2)?;
        let (p1, p2) = (self.prior_of(c1)?, self.prior_of(c2)?);

        let u = self.unconditional.weights();
        let log_px = log_sum_exp(&self.component_log_terms(u, x, 1.0));
        let log_post = |prior: f64, emb: &PromptEmbedding| {
            prior.ln() + log_sum_exp(&self.component_log_terms(emb, x, 1.0)) - log_px
        };
        let l1 = log_post(p1, e1);
        let l2 = log_post(p2, e2);
        if !l1.is_finite() || !l2.is_finite() || !log_px.is_finite() {
            return Err(Error::Degenerate(format!(
                "zero posterior or density at x for `{c1}` / `{c2}`"
            )));
        }
        if c1 == c2 {
            return Ok((-l1).exp());
        }

        // w1_k w2_k / u_k as a weight vector for the component terms
        let pair: Vec<f64> = e1
            .iter()
            .zip(e2.iter())
            .zip(u)
            .map(|((a, b), uk)| if *uk > 0.0 { a * b / uk } else { 0.0 })
            .collect();
        let log_joint =
            p1.ln() + p2.ln() + log_sum_exp(&self.component_log_terms(&pair, x, 1.0)) - log_px;
        Ok((log_joint - l1 - l2).exp())
    }

    /// Index of the component with the largest likelihood at `x`
    /// (uniform component weights); ties resolve to the lowest index.
    pub fn classify_index(&self, x: &[f64]) -> usize {
        let uniform = vec![1.0; self.modes.len()];
        let terms = self.component_log_terms(&uniform, x, 1.0);
        let mut best = 0;
        for (k, l) in terms.iter().enumerate().skip(1) {
            if *l > terms[best] {
                best = k;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::dist_sq;

    fn two_mode_world() -> OracleWorld {
        OracleWorld::from_toml_str(
            r#"
            dim = 2
            [[modes]]
            id = "a"
            mean = [-1.5, 0.5]
            cov_scale = 0.3
            [[modes]]
            id = "b"
            mean = [2.0, -1.0]
            cov_scale = 0.8
            [prompts.pa]
            a = 0.8
            b = 0.2
            [prompts.pb]
            a = 0.25
            b = 0.75
            [prior]
            pa = 0.4
            pb = 0.6
            "#,
        )
        .unwrap()
    }

    fn unimodal() -> OracleWorld {
        OracleWorld::new(
            3,
            vec![Mode {
                id: "m".into(),
                mean: vec![0.0; 3],
                cov_scale: 1.0,
            }],
            vec![("p".into(), PromptEmbedding::one_hot(1, 0))],
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn embedding_validation() {
        assert!(PromptEmbedding::new(vec![0.5, 0.5]).is_ok());
        assert!(PromptEmbedding::new(vec![0.5, 0.6]).is_err());
        assert!(PromptEmbedding::new(vec![1.5, -0.5]).is_err());
        let e = PromptEmbedding::normalized(vec![2.0, 6.0]).unwrap();
        assert_eq!(e.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn world_rejects_unknown_mode_reference() {
        let err = OracleWorld::from_toml_str(
            r#"
            dim = 1
            [[modes]]
            id = "a"
            mean = [0.0]
            cov_scale = 1.0
            [prompts.p]
            z = 1.0
            [prior]
            p = 1.0
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::World(_)));
    }

    #[test]
    fn density_at_t0_is_clean_mixture() {
        let w = two_mode_world();
        let s = VarianceSchedule::standard();
        let x = [0.3, -0.2];
        let emb = w.embedding("pa").unwrap();
        let clean: f64 = w
            .modes()
            .iter()
            .zip(emb.weights())
            .map(|(m, wk)| {
                let r2 = dist_sq(&x, &m.mean);
                wk * (-(r2) / (2.0 * m.cov_scale)).exp() / (2.0 * PI * m.cov_scale)
            })
            .sum();
        let got = w.noised_density(emb, &x, 0, &s).unwrap();
        assert!((got - clean).abs() < 1e-14);
    }

    #[test]
    fn unit_mode_density_is_standard_normal_for_all_t() {
        let w = unimodal();
        let s = VarianceSchedule::standard();
        let x = [0.5, -1.0, 0.25];
        let expected = (-0.5f64 * (0.25 + 1.0 + 0.0625)).exp() / (2.0 * PI).powf(1.5);
        for t in [0, 1, 250, 1000] {
            let got = w.noised_density(w.unconditional(), &x, t, &s).unwrap();
            assert!((got - expected).abs() < 1e-14, "t={t}");
        }
    }

    #[test]
    fn unit_mode_eps_is_scaled_x() {
        let w = unimodal();
        let s = VarianceSchedule::standard();
        let x = [0.5, -1.0, 0.25];
        for t in [1, 100, 999] {
            let ab = s.alpha_bar(t).unwrap();
            let eps = w.eps_pred(Condition::Prompt("p"), &x, t, &s).unwrap();
            for (e, xi) in eps.iter().zip(&x) {
                assert!((e - (1.0 - ab).sqrt() * xi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eps_vanishes_as_noise_vanishes() {
        let w = two_mode_world();
        let s = VarianceSchedule::standard();
        let eps = w.eps_pred(Condition::Unconditional, &[0.1, 0.2], 1, &s).unwrap();
        let bound = (1.0 - s.alpha_bar(1).unwrap()).sqrt();
        assert!(crate::vector::norm(&eps) < 50.0 * bound);
    }

    #[test]
    fn separated_mode_matches_single_mode_formula() {
        let modes = vec![
            Mode { id: "a".into(), mean: vec![-20.0, 0.0], cov_scale: 0.5 },
            Mode { id: "b".into(), mean: vec![20.0, 0.0], cov_scale: 0.5 },
        ];
        let w = OracleWorld::new(
            2,
            modes,
            vec![("p".into(), PromptEmbedding::new(vec![0.5, 0.5]).unwrap())],
            vec![1.0],
        )
        .unwrap();
        let s = VarianceSchedule::standard();
        let t = 200;
        let ab = s.alpha_bar(t).unwrap();
        let x = [ab.sqrt() * 20.0 + 0.1, -0.2];
        let v = ab * 0.5 + 1.0 - ab;
        let single: Vec<f64> = [x[0] - ab.sqrt() * 20.0, x[1]]
            .iter()
            .map(|d| (1.0 - ab).sqrt() * d / v)
            .collect();
        let eps = w.eps_pred(Condition::Prompt("p"), &x, t, &s).unwrap();
        for (a, b) in eps.iter().zip(&single) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unconditional_is_prior_weighted_embedding() {
        let w = two_mode_world();
        let s = VarianceSchedule::standard();
        let manual = PromptEmbedding::new(vec![0.4 * 0.8 + 0.6 * 0.25, 0.4 * 0.2 + 0.6 * 0.75]).unwrap();
        let x = [0.7, 0.1];
        let a = w.eps_pred(Condition::Unconditional, &x, 321, &s).unwrap();
        let b = w.eps_pred(Condition::Embedding(&manual), &x, 321, &s).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn unknown_prompt_is_lookup_error() {
        let w = two_mode_world();
        let s = VarianceSchedule::standard();
        let err = w.eps_pred(Condition::Prompt("nope"), &[0.0, 0.0], 5, &s).unwrap_err();
        assert!(matches!(err, Error::Lookup { .. }));
        let err = w.eps_pred(Condition::Unconditional, &[0.0], 5, &s).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn overlap_self_is_inverse_posterior() {
        let w = two_mode_world();
        let x = [0.2, 0.1];
        let r = w.overlap_ratio("pa", "pa", &x).unwrap();
        // direct Bayes from densities
        let s = VarianceSchedule::standard();
        let pa = w.noised_density(w.embedding("pa").unwrap(), &x, 0, &s).unwrap();
        let px = w.noised_density(w.unconditional(), &x, 0, &s).unwrap();
        let post = 0.4 * pa / px;
        assert!((r - 1.0 / post).abs() < 1e-12);
        assert!(r >= 1.0);
    }

    #[test]
    fn overlap_is_one_for_a_flat_prompt() {
        // a prompt with the same weights as the unconditional mixture carries
        // no information about the mode, so it is independent of any other
        let modes = vec![
            Mode { id: "a".into(), mean: vec![-1.0], cov_scale: 1.0 },
            Mode { id: "b".into(), mean: vec![1.0], cov_scale: 1.0 },
        ];
        let w = OracleWorld::new(
            1,
            modes,
            vec![
                ("flat".into(), PromptEmbedding::new(vec![0.5, 0.5]).unwrap()),
                ("left".into(), PromptEmbedding::new(vec![0.9, 0.1]).unwrap()),
                ("right".into(), PromptEmbedding::new(vec![0.1, 0.9]).unwrap()),
            ],
            vec![0.5, 0.25, 0.25],
        )
        .unwrap();
        for x in [-2.0, 0.0, 0.3, 1.7] {
            let r = w.overlap_ratio("flat", "left", &[x]).unwrap();
            assert!((r - 1.0).abs() < 1e-12, "x={x}: {r}");
        }
        // at the symmetry point the two opposing prompts are not independent
        let r = w.overlap_ratio("left", "right", &[0.0]).unwrap();
        assert!(r < 1.0);
    }

    #[test]
    fn overlap_matches_direct_density_evaluation() {
        let w = two_mode_world();
        let x = [0.4, -0.3];
        let n = |m: &Mode| {
            (-dist_sq(&x, &m.mean) / (2.0 * m.cov_scale)).exp() / (2.0 * PI * m.cov_scale)
        };
        let (na, nb) = (n(&w.modes()[0]), n(&w.modes()[1]));
        let (w1, w2) = ([0.8, 0.2], [0.25, 0.75]);
        let u = [0.4 * 0.8 + 0.6 * 0.25, 0.4 * 0.2 + 0.6 * 0.75];
        let px = u[0] * na + u[1] * nb;
        let p1 = 0.4 * (w1[0] * na + w1[1] * nb) / px;
        let p2 = 0.6 * (w2[0] * na + w2[1] * nb) / px;
        let joint = 0.4 * 0.6 * (w1[0] * w2[0] * na / u[0] + w1[1] * w2[1] * nb / u[1]) / px;
        let expected = joint / (p1 * p2);
        let got = w.overlap_ratio("pa", "pb", &x).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn overlap_degenerate_prior() {
        let w = OracleWorld::new(
            1,
            vec![Mode { id: "a".into(), mean: vec![0.0], cov_scale: 1.0 }],
            vec![
                ("p".into(), PromptEmbedding::one_hot(1, 0)),
                ("q".into(), PromptEmbedding::one_hot(1, 0)),
            ],
            vec![1.0, 0.0],
        )
        .unwrap();
        assert!(matches!(w.overlap_ratio("p", "q", &[0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn classify_ties_go_to_lowest_index() {
        let modes = vec![
            Mode { id: "a".into(), mean: vec![-1.0, 0.0], cov_scale: 0.2 },
            Mode { id: "b".into(), mean: vec![1.0, 0.0], cov_scale: 0.2 },
        ];
        let w = OracleWorld::new(
            2,
            modes,
            vec![("p".into(), PromptEmbedding::new(vec![0.5, 0.5]).unwrap())],
            vec![1.0],
        )
        .unwrap();
        assert_eq!(w.classify_index(&[0.0, 0.3]), 0);
        assert_eq!(w.classify_index(&[1.0, 0.0]), 1);
        assert_eq!(w.classify_index(&[-1.0, 0.0]), 0);
    }

    #[test]
    fn spec_round_trip() {
        let w = two_mode_world();
        let again = OracleWorld::from_spec(&w.to_spec()).unwrap();
        assert_eq!(again.to_spec(), w.to_spec());
    }
}
