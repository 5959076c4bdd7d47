//! Experiment configuration files.
//!
//! A config is a flat list of `key = value` lines; per-agent fields take a
//! bracketed list. Unknown keys are rejected and every other problem is
//! collected into one [`Error::Config`] that names each offending field.
//!
//! ```text
//! name = "tanh-5"
//! n_agents = 5
//! method = "all"
//! payoff = "tanh"
//! thresholds = 0.9
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{AgentProfile, FeedbackMode, PayoffKind, PayoffSpec};
use crate::error::{Error, FieldError, Result};
use crate::learners::{KappaSource, Link, LowerRule};
use crate::mechanism::{LearnerSettings, MechanismKind, Scenario};
use crate::mmf::ENTITLEMENT_SUM_TOL;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum KappaRaw {
    Word(String),
    Value(f64),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    n_agents: Option<i64>,
    entitlements: Option<toml::Value>,
    horizon: Option<i64>,
    method: Option<OneOrMany<String>>,
    feedback: Option<String>,
    gaussian_sigma: Option<f64>,
    payoff: Option<String>,
    unit_demands: Option<toml::Value>,
    unit_demand_range: Option<Vec<f64>>,
    thresholds: Option<OneOrMany<f64>>,
    load_range: Option<Vec<f64>>,
    udmax: Option<f64>,
    #[serde(rename = "L")]
    l: Option<OneOrMany<f64>>,
    theta_min: Option<f64>,
    theta_max: Option<f64>,
    kappa: Option<KappaRaw>,
    glm_lower: Option<String>,
    delta: Option<f64>,
    beta_scale: Option<f64>,
    glm_beta_scale: Option<f64>,
    tree_beta_scale: Option<f64>,
    runs: Option<i64>,
    seed: Option<i64>,
    detail_stride: Option<i64>,
}

/// Feedback choice before it is matched to a method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackChoice {
    /// Deterministic for the deterministic learners, Bernoulli otherwise.
    Auto,
    Fixed(FeedbackMode),
}

impl FeedbackChoice {
    pub fn for_method(self, kind: MechanismKind) -> FeedbackMode {
        match self {
            FeedbackChoice::Auto => kind.default_feedback(),
            FeedbackChoice::Fixed(m) => m,
        }
    }
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n_agents: usize,
    pub entitlements: Vec<f64>,
    pub horizon: u64,
    pub methods: Vec<MechanismKind>,
    pub feedback: FeedbackChoice,
    pub payoff: PayoffKind,
    pub unit_demands: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub load_range: (f64, f64),
    pub udmax: f64,
    /// Payoff variation bound per agent; derived from each payoff if unset.
    pub lipschitz: Option<Vec<f64>>,
    pub learners: LearnerSettings,
    pub runs: u64,
    pub seed: u64,
    /// Write every `detail_stride`-th round (and the last) to the agent CSV.
    pub detail_stride: u64,
}

pub const DEFAULT_HORIZON: u64 = 2000;
pub const DEFAULT_RUNS: u64 = 5;
pub const DEFAULT_UDMAX: f64 = 2e-4;
pub const DEFAULT_UNIT_DEMAND_RANGE: (f64, f64) = (1e-6, 1e-4);
pub const DEFAULT_LOAD_RANGE: (f64, f64) = (5000.0, 15000.0);
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// `n` points evenly spaced on a log scale over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(vec![syntax_error(&e)]))?;
    build(raw)
}

fn syntax_error(e: &toml::de::Error) -> FieldError {
    let msg = e.message().to_string();
    let field = msg
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .unwrap_or("<file>")
        .to_string();
    FieldError::new(field, msg)
}

struct Collector(Vec<FieldError>);

impl Collector {
    fn push(&mut self, field: &str, msg: impl Into<String>) {
        self.0.push(FieldError::new(field, msg));
    }

    fn count(&mut self, field: &str, v: Option<i64>, default: i64, min: i64) -> u64 {
        let v = v.unwrap_or(default);
        if v < min {
            self.push(field, format!("must be at least {min}, got {v}"));
            return min.max(0) as u64;
        }
        v as u64
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be positive, got {v}"));
        }
    }
}

fn per_agent(c: &mut Collector, field: &str, v: Option<OneOrMany<f64>>, n: usize) -> Option<Vec<f64>> {
    match v? {
        OneOrMany::One(x) => Some(vec![x; n]),
        OneOrMany::Many(xs) => {
            if xs.len() != n {
                c.push(field, format!("expected {n} values, got {}", xs.len()));
                None
            } else {
                Some(xs)
            }
        }
    }
}

fn numbers(c: &mut Collector, field: &str, items: Vec<toml::Value>) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.into_iter().enumerate() {
        match v {
            toml::Value::Float(x) => out.push(x),
            toml::Value::Integer(x) => out.push(x as f64),
            other => {
                c.push(field, format!("entry {i} is not a number: {other}"));
                return None;
            }
        }
    }
    Some(out)
}

fn pair(c: &mut Collector, field: &str, v: Option<Vec<f64>>, default: (f64, f64)) -> (f64, f64) {
    match v {
        None => default,
        Some(xs) if xs.len() == 2 => {
            if !(xs[0] > 0.0 && xs[0] <= xs[1] && xs[1].is_finite()) {
                c.push(field, format!("need 0 < lo <= hi, got [{}, {}]", xs[0], xs[1]));
            }
            (xs[0], xs[1])
        }
        Some(xs) => {
            c.push(field, format!("expected [lo, hi], got {} values", xs.len()));
            default
        }
    }
}

fn build(raw: RawConfig) -> Result<ExperimentConfig> {
    let mut c = Collector(Vec::new());

    let name = raw.name.unwrap_or_else(|| "experiment".into());
    let n_agents = raw.n_agents.unwrap_or(0);
    if raw.n_agents.is_none() {
        c.push("n_agents", "is required");
    } else if n_agents < 1 {
        c.push("n_agents", format!("must be at least 1, got {n_agents}"));
    }
    let n = n_agents.max(0) as usize;

    let entitlements = match raw.entitlements {
        None => vec![1.0 / n.max(1) as f64; n],
        Some(toml::Value::String(s)) if s == "equal" => vec![1.0 / n.max(1) as f64; n],
        Some(toml::Value::Array(items)) => numbers(&mut c, "entitlements", items).unwrap_or_default(),
        Some(other) => {
            c.push("entitlements", format!("expected \"equal\" or a list, got {other}"));
            Vec::new()
        }
    };
    if n > 0 && !entitlements.is_empty() {
        if entitlements.len() != n {
            c.push("entitlements", format!("expected {n} values, got {}", entitlements.len()));
        } else if let Some((i, e)) = entitlements.iter().enumerate().find(|(_, e)| !(**e > 0.0 && e.is_finite())) {
            c.push("entitlements", format!("entry {i} must be positive, got {e}"));
        } else {
            let sum: f64 = entitlements.iter().sum();
            if (sum - 1.0).abs() > ENTITLEMENT_SUM_TOL {
                c.push("entitlements", format!("must sum to 1, got {sum}"));
            }
        }
    }

    let horizon = c.count("horizon", raw.horizon, DEFAULT_HORIZON as i64, 1);
    let runs = c.count("runs", raw.runs, DEFAULT_RUNS as i64, 1);
    let seed = c.count("seed", raw.seed, 0, 0);
    let detail_stride = c.count("detail_stride", raw.detail_stride, 1, 1);

    let methods: Vec<String> = match raw.method {
        None => MechanismKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        Some(OneOrMany::One(s)) if s == "all" => MechanismKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        Some(OneOrMany::One(s)) => vec![s],
        Some(OneOrMany::Many(v)) => v,
    };
    let mut kinds = Vec::new();
    for s in methods {
        match s.parse::<MechanismKind>() {
            Ok(k) if !kinds.contains(&k) => kinds.push(k),
            Ok(k) => c.push("method", format!("{k} listed twice")),
            Err(e) => c.push("method", e.to_string()),
        }
    }

    let udmax = raw.udmax.unwrap_or(DEFAULT_UDMAX);
    c.positive("udmax", udmax);

    let payoff = match raw.payoff.as_deref().unwrap_or("tanh") {
        "tanh" => PayoffKind::Tanh,
        "algebraic" => PayoffKind::Algebraic,
        "logistic" => PayoffKind::Logistic,
        other => {
            c.push("payoff", format!("unknown payoff family {other:?}"));
            PayoffKind::Tanh
        }
    };

    let range = pair(&mut c, "unit_demand_range", raw.unit_demand_range, DEFAULT_UNIT_DEMAND_RANGE);
    let unit_demands = match raw.unit_demands {
        None => log_spaced(range.0, range.1, n),
        Some(toml::Value::String(s)) if s == "log_spaced" => log_spaced(range.0, range.1, n),
        Some(toml::Value::Array(items)) => {
            let v = numbers(&mut c, "unit_demands", items).unwrap_or_default();
            if v.len() != n {
                c.push("unit_demands", format!("expected {n} values, got {}", v.len()));
            }
            v
        }
        Some(other) => {
            c.push("unit_demands", format!("expected \"log_spaced\" or a list, got {other}"));
            Vec::new()
        }
    };
    for (i, &w) in unit_demands.iter().enumerate() {
        if !(w > 0.0 && w <= udmax) {
            c.push("unit_demands", format!("entry {i} = {w} must lie in (0, udmax = {udmax}]"));
        }
    }

    let thresholds = per_agent(&mut c, "thresholds", raw.thresholds, n).unwrap_or_else(|| vec![DEFAULT_THRESHOLD; n]);
    for (i, &a) in thresholds.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) {
            c.push("thresholds", format!("entry {i} = {a} must lie in (0, 1)"));
        } else if payoff == PayoffKind::Logistic && a <= 0.5 {
            c.push("thresholds", format!("entry {i} = {a}: logistic payoffs need thresholds above 0.5"));
        }
    }

    let load_range = pair(&mut c, "load_range", raw.load_range, DEFAULT_LOAD_RANGE);

    let lipschitz = per_agent(&mut c, "L", raw.l, n);
    if let Some(ls) = &lipschitz {
        for (i, &l) in ls.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                c.push("L", format!("entry {i} must be positive, got {l}"));
            }
        }
    }

    let mut learners = LearnerSettings::default();
    if let Some(d) = raw.delta {
        if !(d > 0.0 && d < 1.0) {
            c.push("delta", format!("must lie in (0, 1), got {d}"));
        }
        learners.delta = d;
    }
    if let Some(b) = raw.beta_scale {
        learners.glm_beta_scale = b;
        learners.tree_beta_scale = b;
    }
    if let Some(b) = raw.glm_beta_scale {
        learners.glm_beta_scale = b;
    }
    if let Some(b) = raw.tree_beta_scale {
        learners.tree_beta_scale = b;
    }
    if !(learners.glm_beta_scale >= 0.0 && learners.glm_beta_scale.is_finite()) {
        c.push("glm_beta_scale", format!("must be non-negative, got {}", learners.glm_beta_scale));
    }
    if !(learners.tree_beta_scale > 0.0 && learners.tree_beta_scale.is_finite()) {
        c.push("tree_beta_scale", format!("must be positive, got {}", learners.tree_beta_scale));
    }
    if let Some(t) = raw.theta_min {
        c.positive("theta_min", t);
        learners.theta_min = Some(t);
    }
    if let Some(t) = raw.theta_max {
        c.positive("theta_max", t);
        if let Some(lo) = raw.theta_min {
            if t <= lo {
                c.push("theta_max", format!("must exceed theta_min = {lo}, got {t}"));
            }
        }
        learners.theta_max = Some(t);
    }
    learners.kappa = match raw.kappa {
        None => KappaSource::Literal,
        Some(KappaRaw::Word(w)) if w == "literal" => KappaSource::Literal,
        Some(KappaRaw::Word(w)) if w == "theta_cap" => KappaSource::ThetaCap,
        Some(KappaRaw::Word(w)) => {
            c.push("kappa", format!("expected \"literal\", \"theta_cap\" or a number, got {w:?}"));
            KappaSource::Literal
        }
        Some(KappaRaw::Value(v)) => {
            c.positive("kappa", v);
            KappaSource::Value(v)
        }
    };
    learners.lower_rule = match raw.glm_lower.as_deref() {
        None | Some("floor") => LowerRule::Floor,
        Some("literal") => LowerRule::Literal,
        Some(other) => {
            c.push("glm_lower", format!("expected \"floor\" or \"literal\", got {other:?}"));
            LowerRule::Floor
        }
    };
    learners.tree_l = None;

    let feedback = match raw.feedback.as_deref().unwrap_or("auto") {
        "auto" => FeedbackChoice::Auto,
        "deterministic" => FeedbackChoice::Fixed(FeedbackMode::Deterministic),
        "bernoulli_aggregate" => FeedbackChoice::Fixed(FeedbackMode::BernoulliAggregate),
        "gaussian" => match raw.gaussian_sigma {
            Some(s) if s > 0.0 && s.is_finite() => FeedbackChoice::Fixed(FeedbackMode::Gaussian { sigma: s }),
            Some(s) => {
                c.push("gaussian_sigma", format!("must be positive, got {s}"));
                FeedbackChoice::Auto
            }
            None => {
                c.push("gaussian_sigma", "is required with gaussian feedback");
                FeedbackChoice::Auto
            }
        },
        other => {
            c.push("feedback", format!("unknown feedback mode {other:?}"));
            FeedbackChoice::Auto
        }
    };
    for &k in &kinds {
        if let Err(e) = k.check_feedback(feedback.for_method(k)) {
            c.push("feedback", e.to_string());
        }
        if matches!(k, MechanismKind::GlmSp | MechanismKind::GlmNsp) && Link::from_payoff(payoff).is_none() {
            c.push("method", format!("{k} needs tanh or algebraic payoffs"));
        }
    }

    if !c.0.is_empty() {
        return Err(Error::Config(c.0));
    }
    let cfg = ExperimentConfig {
        name,
        n_agents: n,
        entitlements,
        horizon,
        methods: kinds,
        feedback,
        payoff,
        unit_demands,
        thresholds,
        load_range,
        udmax,
        lipschitz,
        learners,
        runs,
        seed,
        detail_stride,
    };
    // payoff back-solving can still fail, e.g. for a threshold out of reach
    cfg.profiles()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Ground-truth profiles; every agent truthful.
    pub fn profiles(&self) -> Result<Vec<AgentProfile>> {
        (0..self.n_agents)
            .map(|i| {
                let mut spec =
                    PayoffSpec::with_unit_demand(self.payoff, self.unit_demands[i], self.thresholds[i], self.udmax)
                        .map_err(|e| Error::Config(vec![FieldError::new("unit_demands", e.to_string())]))?;
                if let Some(ls) = &self.lipschitz {
                    spec = spec.with_lipschitz(ls[i]);
                }
                Ok(AgentProfile::new(self.entitlements[i], spec))
            })
            .collect()
    }

    /// Scenario for one `(method, run)` cell.
    pub fn scenario(&self, kind: MechanismKind, run: u64) -> Result<Scenario> {
        Ok(Scenario {
            profiles: self.profiles()?,
            horizon: self.horizon,
            feedback: self.feedback.for_method(kind),
            load_range: self.load_range,
            udmax: self.udmax,
            learners: self.learners.clone(),
            seed: self.seed,
            run,
            digest: self.digest(),
        })
    }

    /// Applies command-line overrides and re-checks what they touch.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        runs: Option<u64>,
        methods: Option<Vec<MechanismKind>>,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(r) = runs {
            if r == 0 {
                errors.push(FieldError::new("runs", "must be at least 1"));
            }
            self.runs = r;
        }
        if let Some(m) = methods {
            if m.is_empty() {
                errors.push(FieldError::new("method", "no method given"));
            }
            for &k in &m {
                if let Err(e) = k.check_feedback(self.feedback.for_method(k)) {
                    errors.push(FieldError::new("feedback", e.to_string()));
                }
            }
            self.methods = m;
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
