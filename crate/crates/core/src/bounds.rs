//! Closed-form lower bounds, their preconditions, and the intermediate
//! quantities of the regret argument (optimal gap, regret identity).

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::instances::{assumption_check, AssumptionReport, Regime};
use crate::instances::{exact_depth, horizon_power, Family};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("theorem {0} is not a {1} bound")]
    WrongKind(TheoremId, &'static str),
    #[error("missing input {1} for theorem {0}")]
    MissingInput(TheoremId, &'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

type Result<T> = std::result::Result<T, BoundError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoremId {
    RegretS3,
    RegretS4,
    RegretTree,
    RegretTreeRelaxed,
    RegretStationary,
    BpiS4,
    BpiTree,
    BpiTreeRelaxed,
    BpiStationary,
    PacTree,
    PacTreeRelaxed,
}

impl TheoremId {
    pub const ALL: [TheoremId; 11] = [
        TheoremId::RegretS3,
        TheoremId::RegretS4,
        TheoremId::RegretTree,
        TheoremId::RegretTreeRelaxed,
        TheoremId::RegretStationary,
        TheoremId::BpiS4,
        TheoremId::BpiTree,
        TheoremId::BpiTreeRelaxed,
        TheoremId::BpiStationary,
        TheoremId::PacTree,
        TheoremId::PacTreeRelaxed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TheoremId::RegretS3 => "regret-s3",
            TheoremId::RegretS4 => "regret-s4",
            TheoremId::RegretTree => "regret-tree",
            TheoremId::RegretTreeRelaxed => "regret-tree-relaxed",
            TheoremId::RegretStationary => "regret-stationary",
            TheoremId::BpiS4 => "bpi-s4",
            TheoremId::BpiTree => "bpi-tree",
            TheoremId::BpiTreeRelaxed => "bpi-tree-relaxed",
            TheoremId::BpiStationary => "bpi-stationary",
            TheoremId::PacTree => "pac-tree",
            TheoremId::PacTreeRelaxed => "pac-tree-relaxed",
        }
    }

    pub fn is_regret(self) -> bool {
        matches!(
            self,
            TheoremId::RegretS3
                | TheoremId::RegretS4
                | TheoremId::RegretTree
                | TheoremId::RegretTreeRelaxed
                | TheoremId::RegretStationary
        )
    }
}

impl std::fmt::Display for TheoremId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TheoremId {
    type Err = BoundError;

    fn from_str(s: &str) -> Result<Self> {
        TheoremId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| BoundError::InvalidInput(format!("unknown theorem id {s:?}")))
    }
}

/// Inputs of a bound; each theorem reads the fields it needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub num_states: Option<usize>,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub name: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundReport {
    pub theorem_id: TheoremId,
    pub inputs: BoundInputs,
    /// The formula clipped at zero.
    pub value: f64,
    /// The formula as written, possibly negative.
    pub raw_value: f64,
    pub preconditions: Vec<Precondition>,
    pub formula: String,
}

impl BoundReport {
    pub fn all_passed(&self) -> bool {
        self.preconditions.iter().all(|p| p.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Precondition> {
        self.preconditions.iter().filter(|p| !p.passed)
    }
}

struct Builder {
    id: TheoremId,
    inputs: BoundInputs,
    checks: Vec<Precondition>,
}

impl Builder {
    fn new(id: TheoremId, inputs: BoundInputs) -> Self {
        Self { id, inputs, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool) {
        self.checks.push(Precondition { name: name.into(), passed });
    }

    fn unresolved_constant(&mut self) {
        self.check("absolute constant unspecified; evaluated with c = 1", false);
    }

    fn finish(mut self, raw_value: f64, formula: &str) -> BoundReport {
        if raw_value < 0.0 {
            self.check("nonnegative", false);
        }
        BoundReport {
            theorem_id: self.id,
            inputs: self.inputs,
            value: raw_value.max(0.0),
            raw_value,
            preconditions: self.checks,
            formula: formula.to_string(),
        }
    }
}

fn need<T>(id: TheoremId, x: Option<T>, name: &'static str) -> Result<T> {
    x.ok_or(BoundError::MissingInput(id, name))
}

/// Whether the tree construction has an exact depth `d` with `H >= 3d`.
fn full_tree_assumption(s: usize, a: usize, h: usize) -> bool {
    s >= 6 && a >= 2 && exact_depth(s - 3, a).is_some_and(|d| h >= 3 * d)
}

fn full_tree_exists(s: usize, a: usize) -> bool {
    s >= 6 && a >= 2 && exact_depth(s - 3, a).is_some()
}

/// `min(S, A^(H/3 - 2))`.
pub fn relaxed_state_factor(s: usize, a: usize, h: usize) -> f64 {
    (s as f64).min(horizon_power(a, h))
}

/// Number of arms of the regret argument for a family.
fn arm_count(family: Family, hbar: usize, leaves: usize, a: usize) -> Option<f64> {
    let (hbar, leaves, a) = (hbar as f64, leaves as f64, a as f64);
    match family {
        Family::Tree => Some(hbar * leaves * a),
        Family::TreeStationary => Some(leaves * a),
        Family::S3Stationary => Some(a),
        Family::S4Stage => Some(hbar * a),
        Family::S4Bpi => None,
    }
}

/// Maximizer of the pre-optimization regret bound and whether it is a
/// valid gap (at most 1/4).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonChoice {
    pub eps: f64,
    pub feasible: bool,
}

/// `eps = (1/(2 sqrt 2)) (1 - 1/K) sqrt(K / T)` with `K` the number of arms
/// (`Hbar L A` for the tree, `L A` stationary, `A` for s3, `Hbar A` for s4).
pub fn optimal_epsilon(family: Family, hbar: usize, leaves: usize, num_actions: usize, episodes: u64) -> Result<EpsilonChoice> {
    let k = arm_count(family, hbar, leaves, num_actions)
        .ok_or_else(|| BoundError::InvalidInput(format!("family {family} has no regret argument")))?;
    if episodes == 0 || k <= 0.0 {
        return Err(BoundError::InvalidInput("T and the arm count must be positive".into()));
    }
    let eps = (1.0 - 1.0 / k) * (k / episodes as f64).sqrt() / (2.0 * std::f64::consts::SQRT_2);
    Ok(EpsilonChoice { eps, feasible: eps <= 0.25 })
}

/// The averaged regret bound before optimizing over `eps`:
/// `T W eps (1 - 1/K - sqrt(2) eps sqrt(K T) / K)`.
pub fn averaged_regret_bound(window: usize, eps: f64, arms: usize, episodes: u64) -> f64 {
    let (k, t) = (arms as f64, episodes as f64);
    t * window as f64 * eps * (1.0 - 1.0 / k - std::f64::consts::SQRT_2 * eps * (k * t).sqrt() / k)
}

/// Rewarded stages an optimal policy collects in a family.
pub fn reward_window(family: Family, horizon: usize, hbar: usize, depth: usize) -> Result<usize> {
    let used = match family {
        Family::Tree => hbar + depth,
        Family::TreeStationary => depth,
        Family::S3Stationary => 1,
        Family::S4Stage | Family::S4Bpi => hbar + 1,
    };
    horizon
        .checked_sub(used)
        .ok_or_else(|| BoundError::InvalidInput(format!("horizon {horizon} shorter than {used}")))
}

/// Expected regret `T W eps (1 - E[N]/T)` implied by the expected number of
/// visits to the boosted arm.
pub fn regret_identity(
    family: Family,
    horizon: usize,
    hbar: usize,
    depth: usize,
    eps: f64,
    episodes: u64,
    expected_arm_count: f64,
) -> Result<f64> {
    let t = episodes as f64;
    if !(0.0..=t).contains(&expected_arm_count) {
        return Err(BoundError::InvalidInput(format!("expected count {expected_arm_count} not in [0, {t}]")));
    }
    let w = reward_window(family, horizon, hbar, depth)? as f64;
    Ok(t * w * eps * (1.0 - expected_arm_count / t))
}

/// Leaf count of the full tree, `(1 - 1/A)(S - 3) + 1/A`.
fn full_tree_leaves(s: usize, a: usize) -> f64 {
    let a = a as f64;
    (1.0 - 1.0 / a) * (s as f64 - 3.0) + 1.0 / a
}

pub fn regret_bound(id: TheoremId, horizon: usize, num_states: usize, num_actions: usize, episodes: u64) -> Result<BoundReport> {
    if !id.is_regret() {
        return Err(BoundError::WrongKind(id, "regret"));
    }
    evaluate(
        id,
        &BoundInputs {
            horizon,
            num_states: Some(num_states),
            num_actions,
            episodes: Some(episodes),
            eps: None,
            delta: None,
        },
    )
}

pub fn bpi_bound(id: TheoremId, horizon: usize, num_states: usize, num_actions: usize, eps: f64, delta: f64) -> Result<BoundReport> {
    if id.is_regret() {
        return Err(BoundError::WrongKind(id, "BPI/PAC"));
    }
    evaluate(
        id,
        &BoundInputs {
            horizon,
            num_states: Some(num_states),
            num_actions,
            episodes: None,
            eps: Some(eps),
            delta: Some(delta),
        },
    )
}

/// Evaluates any theorem on a set of inputs.
pub fn evaluate(id: TheoremId, inputs: &BoundInputs) -> Result<BoundReport> {
    let h = inputs.horizon;
    let a = inputs.num_actions;
    let (hf, af) = (h as f64, a as f64);
    let mut b = Builder::new(id, *inputs);
    if id.is_regret() {
        let t = need(id, inputs.episodes, "T")?;
        let tf = t as f64;
        let s = match id {
            TheoremId::RegretS3 | TheoremId::RegretS4 => inputs.num_states.unwrap_or(0),
            _ => need(id, inputs.num_states, "S")?,
        };
        let sf = s as f64;
        let report = match id {
            TheoremId::RegretS3 => {
                b.check("A >= 2", a >= 2);
                b.check("H >= 2", h >= 2);
                b.check("T >= 2A", t >= 2 * a as u64);
                let eps = optimal_epsilon(Family::S3Stationary, 1, 1, a.max(2), t.max(1))?;
                b.check("eps <= 1/4", eps.feasible);
                b.finish(hf * (af * tf).sqrt() / (32.0 * 2f64.sqrt()), "H sqrt(A T) / (32 sqrt 2)")
            }
            TheoremId::RegretS4 => {
                b.check("H >= 4", h >= 4);
                b.check("T >= HA", t >= (h * a) as u64);
                let eps = (1.0 - 2.0 / (hf * af)) * (hf * af / tf).sqrt() / 4.0;
                b.check("eps <= 1/4", eps <= 0.25);
                b.finish((hf.powi(3) * af * tf).sqrt() / 128.0, "sqrt(H^3 A T) / 128")
            }
            TheoremId::RegretTree => {
                b.check("S >= 6, A >= 2, S = 3 + (A^d - 1)/(A - 1), H >= 3d", full_tree_assumption(s, a, h));
                b.check("T >= HSA", t >= (h * s * a) as u64);
                if s >= 6 && a >= 2 {
                    let leaves = full_tree_leaves(s, a);
                    let k = (hf / 3.0) * leaves * af;
                    let eps = (1.0 - 1.0 / k) * (k / tf).sqrt() / (2.0 * 2f64.sqrt());
                    b.check("eps <= 1/4", eps <= 0.25);
                }
                b.finish((hf.powi(3) * sf * af * tf).sqrt() / (48.0 * 6f64.sqrt()), "sqrt(H^3 S A T) / (48 sqrt 6)")
            }
            TheoremId::RegretTreeRelaxed => {
                b.check("S >= 11", s >= 11);
                b.check("A >= 4", a >= 4);
                b.check("H >= 6", h >= 6);
                b.check("T >= HSA", t >= (h * s * a) as u64);
                b.unresolved_constant();
                let factor = relaxed_state_factor(s, a, h);
                b.finish(factor.sqrt() * (hf.powi(3) * af * tf).sqrt(), "c3 sqrt(min(S, A^(H/3-2))) sqrt(H^3 A T)")
            }
            TheoremId::RegretStationary => {
                b.check("S >= 6, A >= 2, S = 3 + (A^d - 1)/(A - 1)", full_tree_exists(s, a));
                b.check("T >= HSA", t >= (h * s * a) as u64);
                b.unresolved_constant();
                b.finish((hf * hf * sf * af * tf).sqrt(), "c sqrt(H^2 S A T)")
            }
            _ => unreachable!(),
        };
        return Ok(report);
    }

    let eps = need(id, inputs.eps, "eps")?;
    let delta = need(id, inputs.delta, "delta")?;
    if !(eps > 0.0) {
        return Err(BoundError::InvalidInput(format!("eps = {eps} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(BoundError::InvalidInput(format!("delta = {delta} not in (0, 1)")));
    }
    let s = match id {
        TheoremId::BpiS4 => inputs.num_states.unwrap_or(0),
        _ => need(id, inputs.num_states, "S")?,
    };
    let sf = s as f64;
    let log_inv_delta = (1.0 / delta).ln();
    let base = hf.powi(3) * af / (eps * eps);
    let report = match id {
        TheoremId::BpiS4 => {
            b.check("H >= 4", h >= 4);
            b.check("eps <= (H/2 - 1)/8", eps <= (hf / 2.0 - 1.0) / 8.0);
            b.check("delta < 1/2.4", 2.4 * delta < 1.0);
            b.finish(base * (1.0 / (2.4 * delta)).ln() / 1024.0, "H^3 A / eps^2 log(1/(2.4 delta)) / 1024")
        }
        TheoremId::BpiTree | TheoremId::PacTree => {
            b.check("S >= 6, A >= 2, S = 3 + (A^d - 1)/(A - 1), H >= 3d", full_tree_assumption(s, a, h));
            b.check("H >= 4", h >= 4);
            b.check("eps <= H/24", eps <= hf / 24.0);
            b.check("delta <= 1/16", delta <= 1.0 / 16.0);
            if id == TheoremId::BpiTree {
                b.finish(base * sf * log_inv_delta / 3456.0, "H^3 S A / eps^2 log(1/delta) / 3456")
            } else {
                b.finish(base * sf * log_inv_delta / 6912.0 - 1.0, "H^3 S A / eps^2 log(1/delta) / 6912 - 1")
            }
        }
        TheoremId::BpiTreeRelaxed | TheoremId::PacTreeRelaxed => {
            b.check("S >= 11", s >= 11);
            b.check("A >= 4", a >= 4);
            b.check("H >= 6", h >= 6);
            b.check("eps <= H/24", eps <= hf / 24.0);
            b.check("delta <= 1/16", delta <= 1.0 / 16.0);
            b.unresolved_constant();
            let factor = relaxed_state_factor(s, a, h);
            if id == TheoremId::BpiTreeRelaxed {
                b.finish(factor * base * log_inv_delta, "c1 min(S, A^(H/3-2)) H^3 A / eps^2 log(1/delta)")
            } else {
                b.finish(factor * base * log_inv_delta - 1.0, "c2 min(S, A^(H/3-2)) H^3 A / eps^2 log(1/delta) - 1")
            }
        }
        TheoremId::BpiStationary => {
            b.check("S >= 6, A >= 2, S = 3 + (A^d - 1)/(A - 1)", full_tree_exists(s, a));
            b.check("eps <= H/24", eps <= hf / 24.0);
            b.check("delta <= 1/16", delta <= 1.0 / 16.0);
            b.unresolved_constant();
            b.finish(sf * af * hf * hf / (eps * eps) * log_inv_delta, "c S A H^2 / eps^2 log(1/delta)")
        }
        _ => unreachable!(),
    };
    Ok(report)
}
