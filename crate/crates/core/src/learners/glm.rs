//! Parametric estimator for payoffs of the form `mu(theta * x)`.
//!
//! The parameter is the root of the weighted quasi-likelihood score
//! `sum w_s a_s (mu(a_s theta) - X_s)` with `w_s = 1 / sigma_s^2`, clipped to
//! `[theta_min, theta_max]`. The unit demand is `mu^-1(alpha) / theta`, so a
//! confidence interval on `theta` maps to one on the unit demand.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::env::PayoffKind;
use crate::error::{Error, Result};

/// Known link function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Tanh,
    Algebraic,
}

impl Link {
    pub fn from_payoff(kind: PayoffKind) -> Option<Self> {
        match kind {
            PayoffKind::Tanh => Some(Link::Tanh),
            PayoffKind::Algebraic => Some(Link::Algebraic),
            PayoffKind::Logistic => None,
        }
    }

    pub fn mu(self, z: f64) -> f64 {
        match self {
            Link::Tanh => z.tanh(),
            Link::Algebraic => 1.0 - 1.0 / (1.0 + z),
        }
    }

    pub fn mu_dot(self, z: f64) -> f64 {
        match self {
            Link::Tanh => {
                let c = z.cosh();
                if c.is_finite() {
                    1.0 / (c * c)
                } else {
                    0.0
                }
            }
            Link::Algebraic => 1.0 / ((1.0 + z) * (1.0 + z)),
        }
    }

    pub fn mu_inv(self, y: f64) -> f64 {
        match self {
            Link::Tanh => y.atanh(),
            Link::Algebraic => y / (1.0 - y),
        }
    }

    /// Infimum of the derivative on `[0, z]`. Both links are concave on the
    /// positive half-line, so it sits at the right end.
    pub fn inf_mu_dot(self, z: f64) -> f64 {
        self.mu_dot(z)
    }
}

/// Where the curvature constant in the confidence radius comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", content = "value", rename_all = "snake_case")]
pub enum KappaSource {
    /// Slope infimum over arguments in `[0, udmax]`.
    Literal,
    /// Slope infimum over arguments in `[0, theta_max * udmax]`.
    ThetaCap,
    Value(f64),
}

/// How the lower end of the parameter interval is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LowerRule {
    /// `max(theta_min, theta_hat - beta / A)`
    #[default]
    Floor,
    /// `min(theta_min, theta_hat - beta / A)`, which pins the upper unit
    /// demand bound at `mu^-1(alpha) / theta_min` or above.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmParams {
    pub link: Link,
    pub alpha: f64,
    pub udmax: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub kappa: KappaSource,
    pub n_agents: usize,
    pub delta: f64,
    pub beta_scale: f64,
    pub lower_rule: LowerRule,
}

impl GlmParams {
    /// Defaults: `theta_min = mu^-1(alpha) / udmax`, `theta_max = 1000 theta_min`.
    pub fn new(link: Link, alpha: f64, udmax: f64, n_agents: usize) -> Self {
        let theta_min = link.mu_inv(alpha) / udmax;
        Self {
            link,
            alpha,
            udmax,
            theta_min,
            theta_max: 1000.0 * theta_min,
            kappa: KappaSource::Literal,
            n_agents,
            delta: 1e-3,
            beta_scale: 1.0,
            lower_rule: LowerRule::Floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("threshold {} outside (0,1)", self.alpha));
        }
        if !(self.udmax > 0.0 && self.udmax.is_finite()) {
            return bad(format!("udmax {} must be positive", self.udmax));
        }
        if !(self.theta_min > 0.0 && self.theta_max > self.theta_min && self.theta_max.is_finite()) {
            return bad(format!(
                "need 0 < theta_min < theta_max, got {} and {}",
                self.theta_min, self.theta_max
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0,1)", self.delta));
        }
        if !(self.beta_scale >= 0.0 && self.beta_scale.is_finite()) {
            return bad(format!("beta_scale {} must be non-negative", self.beta_scale));
        }
        if self.n_agents == 0 {
            return bad("no agents".into());
        }
        if let KappaSource::Value(k) = self.kappa {
            if !(k > 0.0 && k.is_finite()) {
                return bad(format!("kappa {k} must be positive"));
            }
        }
        Ok(())
    }

    pub fn kappa_value(&self) -> f64 {
        match self.kappa {
            KappaSource::Literal => self.link.inf_mu_dot(self.udmax),
            KappaSource::ThetaCap => self.link.inf_mu_dot(self.theta_max * self.udmax),
            KappaSource::Value(k) => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub a: f64,
    pub x: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmInterval {
    pub theta_hat: f64,
    pub theta_lb: f64,
    pub theta_ub: f64,
    pub ud_lb: f64,
    pub ud_ub: f64,
}

#[derive(Debug, Clone)]
pub struct GlmState {
    params: GlmParams,
    kappa: f64,
    data: Vec<Observation>,
    a2_sum: f64,
    last_theta: Option<f64>,
    interval: Option<GlmInterval>,
}

/// `floor(5 sqrt(q) / 6)`
pub fn rprime_glm(q: u64) -> u64 {
    (5.0 * (q as f64).sqrt() / 6.0).floor() as u64
}

/// Confidence radius for `samples` points.
pub fn glm_beta_for(kappa: f64, n_agents: usize, samples: usize, delta: f64, beta_scale: f64) -> f64 {
    let s = samples as f64;
    let inner = (n_agents as f64 * PI * PI * s * s / (6.0 * delta)).ln();
    beta_scale * (5.0 / kappa) * inner.max(0.0).sqrt()
}

/// Parameter and unit-demand intervals from an estimate, its information
/// `A` and a radius `beta`.
pub fn glm_interval_from(
    theta_hat: f64,
    a: f64,
    beta: f64,
    theta_min: f64,
    mu_inv_alpha: f64,
    udmax: f64,
    rule: LowerRule,
) -> GlmInterval {
    if a <= 0.0 {
        return GlmInterval {
            theta_hat,
            theta_lb: theta_min,
            theta_ub: f64::INFINITY,
            ud_lb: 0.0,
            ud_ub: udmax,
        };
    }
    let r = beta / a;
    let theta_ub = theta_hat + r;
    let raw_lb = theta_hat - r;
    let theta_lb = match rule {
        LowerRule::Floor => raw_lb.max(theta_min),
        LowerRule::Literal => raw_lb.min(theta_min),
    };
    let ud_ub = if theta_lb > 0.0 {
        (mu_inv_alpha / theta_lb).clamp(0.0, udmax)
    } else {
        udmax
    };
    let ud_lb = (mu_inv_alpha / theta_ub).clamp(0.0, udmax);
    GlmInterval {
        theta_hat,
        theta_lb,
        theta_ub,
        ud_lb,
        ud_ub: ud_ub.max(ud_lb),
    }
}

impl GlmState {
    pub fn new(params: GlmParams) -> Result<Self> {
        params.validate()?;
        let kappa = params.kappa_value();
        if kappa.is_nan() || kappa <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "slope infimum underflows to {kappa}; pick a kappa value"
            )));
        }
        Ok(Self {
            params,
            kappa,
            data: Vec::new(),
            a2_sum: 0.0,
            last_theta: None,
            interval: None,
        })
    }

    pub fn params(&self) -> &GlmParams {
        &self.params
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn data(&self) -> &[Observation] {
        &self.data
    }

    pub fn record(&mut self, a: f64, x: f64, sigma: f64) -> Result<()> {
        if !(a >= 0.0 && a <= self.params.udmax) {
            return Err(Error::InvalidArgument(format!(
                "allocation per unit load {a} outside [0, {}]",
                self.params.udmax
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise scale must be positive, got {sigma}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("reward {x} is not finite")));
        }
        self.data.push(Observation { a, x, sigma });
        self.a2_sum += a * a / (sigma * sigma);
        if self.a2_sum > 0.0 {
            let theta = self.theta_estimate()?;
            self.last_theta = Some(theta);
            self.interval = Some(self.interval_at(theta, self.glm_beta()));
        }
        Ok(())
    }

    /// `sqrt(sum a^2 / sigma^2)`
    pub fn glm_a(&self) -> f64 {
        self.a2_sum.sqrt()
    }

    pub fn glm_beta(&self) -> f64 {
        let p = &self.params;
        glm_beta_for(self.kappa, p.n_agents, self.data.len(), p.delta, p.beta_scale)
    }

    fn score(&self, theta: f64) -> (f64, f64) {
        let link = self.params.link;
        let mut g = 0.0;
        let mut dg = 0.0;
        for o in &self.data {
            let w = o.a / (o.sigma * o.sigma);
            let z = o.a * theta;
            g += w * (link.mu(z) - o.x);
            dg += w * o.a * link.mu_dot(z);
        }
        (g, dg)
    }

    /// Clipped root of the score equation.
    pub fn theta_estimate(&self) -> Result<f64> {
        let scale: f64 = self.data.iter().map(|o| o.a / (o.sigma * o.sigma)).sum();
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::Estimation("no data with a positive allocation".into()));
        }
        let tol = 1e-10 * scale;
        let (mut lo, mut hi) = (self.params.theta_min, self.params.theta_max);
        let (g_lo, _) = self.score(lo);
        if g_lo >= 0.0 {
            return Ok(lo);
        }
        let (g_hi, _) = self.score(hi);
        if g_hi <= 0.0 {
            // every reward sits at or above the fitted curve at theta_max
            return Ok(hi);
        }
        // the score is increasing in theta, so [lo, hi] brackets the root
        let start = self.last_theta.unwrap_or(lo + 1.0);
        let mut theta = if start > lo && start < hi { start } else { 0.5 * (lo + hi) };
        for _ in 0..200 {
            let (g, dg) = self.score(theta);
            if g.abs() <= tol {
                return Ok(theta);
            }
            if g < 0.0 {
                lo = theta;
            } else {
                hi = theta;
            }
            let newton = theta - g / dg;
            theta = if dg > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                return Ok(theta);
            }
        }
        // bisection fallback on what is left of the bracket
        for _ in 0..2000 {
            let mid = 0.5 * (lo + hi);
            let (g, _) = self.score(mid);
            if g.abs() <= tol || hi - lo <= 4.0 * f64::EPSILON * hi {
                return Ok(mid);
            }
            if g < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Err(Error::Numerical(format!(
            "score root not isolated in [{lo}, {hi}]"
        )))
    }

    fn interval_at(&self, theta: f64, beta: f64) -> GlmInterval {
        let p = &self.params;
        glm_interval_from(
            theta,
            self.glm_a(),
            beta,
            p.theta_min,
            p.link.mu_inv(p.alpha),
            p.udmax,
            p.lower_rule,
        )
    }

    /// Interval from the current data; the trivial one if nothing informative
    /// has been seen.
    pub fn glm_interval(&self) -> GlmInterval {
        match self.interval {
            Some(iv) => iv,
            None => self.interval_at(self.params.theta_min, 0.0),
        }
    }

    /// Interval with the radius rescaled by `factor`, from the cached estimate.
    pub fn interval_scaled(&self, factor: f64) -> GlmInterval {
        match self.last_theta {
            Some(theta) => self.interval_at(theta, self.glm_beta() * factor),
            None => self.glm_interval(),
        }
    }

    pub fn ud_ub(&self) -> f64 {
        self.glm_interval().ud_ub
    }

    pub fn ud_lb(&self) -> f64 {
        self.glm_interval().ud_lb
    }

    /// Recommendation for round-by-round allocation: the upper bound.
    pub fn recommend(&self) -> f64 {
        self.ud_ub()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(link: Link, theta_min: f64) -> GlmParams {
        GlmParams {
            theta_min,
            theta_max: 1e6,
            ..GlmParams::new(link, 0.9, 1.0, 1)
        }
    }

    #[test]
    fn single_point_inversion() {
        let mut s = GlmState::new(params(Link::Tanh, 0.1)).unwrap();
        s.record(0.5, 1f64.tanh(), 0.1).unwrap();
        assert!((s.theta_estimate().unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_recovery() {
        for link in [Link::Tanh, Link::Algebraic] {
            let mut s = GlmState::new(params(link, 0.1)).unwrap();
            for &a in &[0.05, 0.1, 0.2, 0.3, 0.45] {
                s.record(a, link.mu(3.0 * a), 0.05).unwrap();
            }
            assert!((s.theta_estimate().unwrap() - 3.0).abs() < 1e-8, "{link:?}");
        }
    }

    #[test]
    fn clipped_at_floor() {
        let mut s = GlmState::new(params(Link::Tanh, 2.0)).unwrap();
        for &a in &[0.1, 0.3, 0.5] {
            s.record(a, (1.0 * a).tanh(), 0.1).unwrap();
        }
        assert_eq!(s.theta_estimate().unwrap(), 2.0);
    }

    #[test]
    fn saturated_rewards_clip_at_ceiling() {
        let mut s = GlmState::new(params(Link::Tanh, 0.1)).unwrap();
        s.record(0.5, 1.0, 0.1).unwrap();
        assert_eq!(s.theta_estimate().unwrap(), 1e6);
    }

    #[test]
    fn zero_allocation_data_cannot_estimate() {
        let mut s = GlmState::new(params(Link::Tanh, 0.1)).unwrap();
        assert!(matches!(s.theta_estimate(), Err(Error::Estimation(_))));
        s.record(0.0, 0.0, 0.1).unwrap();
        assert!(matches!(s.theta_estimate(), Err(Error::Estimation(_))));
        let iv = s.glm_interval();
        assert_eq!((iv.ud_lb, iv.ud_ub), (0.0, 1.0));
    }

    #[test]
    fn rejects_zero_sigma_and_out_of_range() {
        let mut s = GlmState::new(params(Link::Tanh, 0.1)).unwrap();
        assert!(s.record(0.5, 0.4, 0.0).is_err());
        assert!(s.record(1.5, 0.4, 0.1).is_err());
        assert!(s.data().is_empty());
    }

    #[test]
    fn information() {
        let mut s = GlmState::new(params(Link::Tanh, 0.1)).unwrap();
        assert_eq!(s.glm_a(), 0.0);
        s.record(0.5, 0.7, 0.1).unwrap();
        assert!((s.glm_a() - 5.0).abs() < 1e-12);
        s.record(0.5, 0.7, 0.1).unwrap();
        assert!((s.glm_a() - 5.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn radius() {
        // n pi^2 s^2 / (6 delta) = e  with n = 1, s = 1
        let delta = PI * PI / (6.0 * std::f64::consts::E);
        assert!((glm_beta_for(1.0, 1, 1, delta, 1.0) - 5.0).abs() < 1e-12);
        assert!(glm_beta_for(1.0, 5, 20, 1e-3, 1.0) > glm_beta_for(1.0, 5, 10, 1e-3, 1.0));
        let full = glm_beta_for(0.7, 5, 10, 1e-3, 1.0);
        assert!((glm_beta_for(0.7, 5, 10, 1e-3, 0.2) - full / 5.0).abs() < 1e-12);
    }

    #[test]
    fn interval_example() {
        let iv = glm_interval_from(2.0, 5.0, 1.0, 0.1, 1.0, 1.0, LowerRule::Floor);
        assert!((iv.theta_lb - 1.8).abs() < 1e-12);
        assert!((iv.theta_ub - 2.2).abs() < 1e-12);
        assert!((iv.ud_lb - 0.4545).abs() < 1e-4);
        assert!((iv.ud_ub - 0.5556).abs() < 1e-4);

        let iv = glm_interval_from(2.0, 5.0, 0.0, 0.1, 1.0, 1.0, LowerRule::Floor);
        assert_eq!(iv.ud_lb, 0.5);
        assert_eq!(iv.ud_ub, 0.5);

        let iv = glm_interval_from(2.0, 1.0, 10.0, 0.5, 1.0, 1.0, LowerRule::Floor);
        assert_eq!(iv.theta_lb, 0.5);
        assert_eq!(iv.ud_ub, 1.0);
        let iv = glm_interval_from(2.0, 1.0, 1.0, 1.5, 1.0, 1.0, LowerRule::Floor);
        assert_eq!(iv.theta_lb, 1.5);
        assert!((iv.ud_ub - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn literal_lower_rule_pins_the_upper_bound() {
        let iv = glm_interval_from(20.0, 100.0, 1.0, 2.0, 1.0, 1.0, LowerRule::Literal);
        assert_eq!(iv.theta_lb, 2.0);
        assert_eq!(iv.ud_ub, 0.5);
    }

    #[test]
    fn bracket_lengths() {
        assert_eq!(rprime_glm(1), 0);
        assert_eq!(rprime_glm(4), 1);
        assert_eq!(rprime_glm(36), 5);
    }

    #[test]
    fn kappa_sources() {
        let p = GlmParams::new(Link::Tanh, 0.9, 1e-4, 3);
        assert!((p.kappa_value() - 1.0).abs() < 1e-7);
        let cap = GlmParams {
            kappa: KappaSource::ThetaCap,
            ..p.clone()
        };
        assert!(cap.kappa_value() < 1e-100);
        let v = GlmParams {
            kappa: KappaSource::Value(0.25),
            ..p
        };
        assert_eq!(v.kappa_value(), 0.25);
    }

    proptest! {
        #[test]
        fn residual_vanishes_at_interior_root(
            theta in 0.5f64..20.0,
            pts in prop::collection::vec((0.01f64..1.0, -0.05f64..0.05, 0.01f64..0.3), 1..30),
        ) {
            let mut s = GlmState::new(params(Link::Algebraic, 0.1)).unwrap();
            for &(a, noise, sigma) in &pts {
                let x = (Link::Algebraic.mu(theta * a) + noise).clamp(0.0, 1.0);
                s.record(a, x, sigma).unwrap();
            }
            let est = s.theta_estimate().unwrap();
            if est > 0.1 && est < 1e6 {
                let (g, _) = s.score(est);
                let scale: f64 = pts.iter().map(|&(a, _, sg)| a / (sg * sg)).sum();
                prop_assert!(g.abs() <= 1e-8 * scale);
            }
        }

        #[test]
        fn smaller_radius_never_widens(
            pts in prop::collection::vec((0.01f64..1.0, 0.0f64..1.0, 0.05f64..0.5), 1..20),
            f1 in 0.0f64..1.0, f2 in 0.0f64..1.0,
        ) {
            let mut s = GlmState::new(params(Link::Tanh, 0.1)).unwrap();
            for &(a, x, sg) in &pts {
                s.record(a, x, sg).unwrap();
            }
            let (small, big) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let i_small = s.interval_scaled(small);
            let i_big = s.interval_scaled(big);
            prop_assert!(i_small.ud_lb >= i_big.ud_lb);
            prop_assert!(i_small.ud_ub <= i_big.ud_ub);
        }
    }
}
