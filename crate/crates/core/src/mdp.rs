//! Tabular episodic MDPs: representation, validation, planning, occupancy
//! measures, trajectory likelihoods and seeded simulation.
//!
//! Stages are 0-based throughout this module: an episode visits stages
//! `0..H`, the kernel `p[h]` moves the process from stage `h` to `h + 1`
//! (so there are `H - 1` kernels), and `r[h]` is collected at stage `h`.
//! The final stage's action is recorded in trajectories but has no
//! probabilistic weight in the episode history.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;

/// Tolerance for probability rows and simplex checks.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("action {action} out of range at stage {stage} (A = {num_actions})")]
    ActionOutOfRange {
        stage: usize,
        action: usize,
        num_actions: usize,
    },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Finite-horizon MDP `(S, A, H, mu, p, r)` with dense kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp")]
pub struct Mdp {
    #[serde(rename = "S")]
    num_states: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    mu: Vec<f64>,
    /// `p[h][s][a][s']`, `h < H - 1`.
    p: Vec<Vec<Vec<Vec<f64>>>>,
    /// `r[h][s][a]`, `h < H`.
    r: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct RawMdp {
    #[serde(rename = "S")]
    num_states: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    mu: Vec<f64>,
    p: Vec<Vec<Vec<Vec<f64>>>>,
    r: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    names: Option<Vec<String>>,
}

impl TryFrom<RawMdp> for Mdp {
    type Error = MdpError;

    fn try_from(raw: RawMdp) -> Result<Self, Self::Error> {
        let mdp = Mdp::new(raw.num_states, raw.num_actions, raw.horizon, raw.mu, raw.p, raw.r)?;
        match raw.names {
            Some(names) => mdp.with_names(names),
            None => Ok(mdp),
        }
    }
}

impl Mdp {
    /// Builds an MDP after checking that every array has the declared shape.
    ///
    /// Numerical validity (row sums, reward range) is not enforced here; use
    /// [`Mdp::validate`].
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mu: Vec<f64>,
        p: Vec<Vec<Vec<Vec<f64>>>>,
        r: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, MdpError> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(MdpError::Dimension(format!(
                "S, A and H must be positive (got S={num_states}, A={num_actions}, H={horizon})"
            )));
        }
        if mu.len() != num_states {
            return Err(MdpError::Dimension(format!("mu has {} entries, expected {num_states}", mu.len())));
        }
        if p.len() != horizon - 1 {
            return Err(MdpError::Dimension(format!("p has {} stages, expected H-1 = {}", p.len(), horizon - 1)));
        }
        for (h, stage) in p.iter().enumerate() {
            if stage.len() != num_states {
                return Err(MdpError::Dimension(format!("p[{h}] has {} states", stage.len())));
            }
            for (s, row) in stage.iter().enumerate() {
                if row.len() != num_actions {
                    return Err(MdpError::Dimension(format!("p[{h}][{s}] has {} actions", row.len())));
                }
                if let Some(a) = row.iter().position(|next| next.len() != num_states) {
                    return Err(MdpError::Dimension(format!("p[{h}][{s}][{a}] is not a length-S vector")));
                }
            }
        }
        if r.len() != horizon {
            return Err(MdpError::Dimension(format!("r has {} stages, expected H = {horizon}", r.len())));
        }
        for (h, stage) in r.iter().enumerate() {
            if stage.len() != num_states || stage.iter().any(|row| row.len() != num_actions) {
                return Err(MdpError::Dimension(format!("r[{h}] is not S x A")));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            mu,
            p,
            r,
            names: None,
        })
    }

    /// Attaches human-readable state labels.
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self, MdpError> {
        if names.len() != self.num_states {
            return Err(MdpError::Dimension(format!(
                "{} state names for {} states",
                names.len(),
                self.num_states
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.mu
    }

    /// Next-state distribution `p_h(. | s, a)` for `h < H - 1`.
    pub fn kernel(&self, h: usize, s: usize, a: usize) -> &[f64] {
        &self.p[h][s][a]
    }

    pub fn kernels(&self) -> &[Vec<Vec<Vec<f64>>>] {
        &self.p
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.r[h][s][a]
    }

    pub fn rewards(&self) -> &[Vec<Vec<f64>>] {
        &self.r
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// Label of state `s`, falling back to its index.
    pub fn state_label(&self, s: usize) -> String {
        match &self.names {
            Some(names) => names[s].clone(),
            None => s.to_string(),
        }
    }

    /// True when `p_h` does not depend on `h`.
    pub fn is_stationary(&self) -> bool {
        self.p.windows(2).all(|w| w[0] == w[1])
    }

    /// Rows `(h, s, a)` at which the kernels of `self` and `other` differ.
    pub fn kernel_diff(&self, other: &Mdp) -> Result<Vec<(usize, usize, usize)>, MdpError> {
        self.check_same_shape(other)?;
        let mut rows = Vec::new();
        for h in 0..self.horizon - 1 {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    if self.p[h][s][a] != other.p[h][s][a] {
                        rows.push((h, s, a));
                    }
                }
            }
        }
        Ok(rows)
    }

    pub(crate) fn check_same_shape(&self, other: &Mdp) -> Result<(), MdpError> {
        if (self.num_states, self.num_actions, self.horizon) != (other.num_states, other.num_actions, other.horizon) {
            return Err(MdpError::Dimension(format!(
                "(S, A, H) = ({}, {}, {}) vs ({}, {}, {})",
                self.num_states, self.num_actions, self.horizon, other.num_states, other.num_actions, other.horizon
            )));
        }
        Ok(())
    }

    /// Checks row normalization, signs and the reward range.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        let mu_sum: f64 = self.mu.iter().sum();
        if !((mu_sum - 1.0).abs() <= PROB_TOL) {
            issues.push(ValidationIssue::InitialDistSum { sum: mu_sum });
        }
        for (s, &m) in self.mu.iter().enumerate() {
            if m < 0.0 {
                issues.push(ValidationIssue::NegativeInitialMass { state: s, value: m });
            }
        }
        for (h, stage) in self.p.iter().enumerate() {
            for (s, row) in stage.iter().enumerate() {
                for (a, next) in row.iter().enumerate() {
                    let sum: f64 = next.iter().sum();
                    if !((sum - 1.0).abs() <= PROB_TOL) {
                        issues.push(ValidationIssue::KernelRowSum { stage: h, state: s, action: a, sum });
                    }
                    for (s2, &q) in next.iter().enumerate() {
                        if q < 0.0 {
                            issues.push(ValidationIssue::NegativeKernelEntry {
                                stage: h,
                                state: s,
                                action: a,
                                next_state: s2,
                                value: q,
                            });
                        }
                    }
                }
            }
        }
        for (h, stage) in self.r.iter().enumerate() {
            for (s, row) in stage.iter().enumerate() {
                for (a, &value) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&value) {
                        issues.push(ValidationIssue::RewardOutOfRange { stage: h, state: s, action: a, value });
                    }
                }
            }
        }
        ValidationReport { issues }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ValidationIssue {
    InitialDistSum { sum: f64 },
    NegativeInitialMass { state: usize, value: f64 },
    KernelRowSum { stage: usize, state: usize, action: usize, sum: f64 },
    NegativeKernelEntry { stage: usize, state: usize, action: usize, next_state: usize, value: f64 },
    RewardOutOfRange { stage: usize, state: usize, action: usize, value: f64 },
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::InitialDistSum { sum } => write!(f, "initial distribution sums to {sum}"),
            Self::NegativeInitialMass { state, value } => write!(f, "mu[{state}] = {value} is negative"),
            Self::KernelRowSum { stage, state, action, sum } => {
                write!(f, "kernel row (h={stage}, s={state}, a={action}) sums to {sum}")
            }
            Self::NegativeKernelEntry { stage, state, action, next_state, value } => write!(
                f,
                "kernel entry p[{stage}][{state}][{action}][{next_state}] = {value} is negative"
            ),
            Self::RewardOutOfRange { stage, state, action, value } => {
                write!(f, "reward r[{stage}][{state}][{action}] = {value} outside [0, 1]")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Stage-dependent stochastic policy `pi[h][s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct MarkovPolicy {
    #[serde(rename = "S")]
    num_states: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    pi: Vec<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct RawPolicy {
    #[serde(rename = "S")]
    num_states: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    pi: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<RawPolicy> for MarkovPolicy {
    type Error = MdpError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        let pol = MarkovPolicy::from_probs(raw.pi)?;
        if (pol.num_states, pol.num_actions, pol.horizon) != (raw.num_states, raw.num_actions, raw.horizon) {
            return Err(MdpError::Dimension("declared S/A/H disagree with pi".into()));
        }
        Ok(pol)
    }
}

impl MarkovPolicy {
    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let row = vec![1.0 / num_actions as f64; num_actions];
        Self {
            num_states,
            num_actions,
            horizon,
            pi: vec![vec![row; num_states]; horizon],
        }
    }

    /// Deterministic policy from `actions[h][s]`.
    pub fn deterministic(actions: &[Vec<usize>], num_actions: usize) -> Result<Self, MdpError> {
        let horizon = actions.len();
        let num_states = actions.first().map_or(0, Vec::len);
        let mut pi = Vec::with_capacity(horizon);
        for (h, stage) in actions.iter().enumerate() {
            if stage.len() != num_states {
                return Err(MdpError::Dimension(format!("stage {h} has {} states", stage.len())));
            }
            let mut rows = Vec::with_capacity(num_states);
            for &a in stage {
                if a >= num_actions {
                    return Err(MdpError::ActionOutOfRange { stage: h, action: a, num_actions });
                }
                let mut row = vec![0.0; num_actions];
                row[a] = 1.0;
                rows.push(row);
            }
            pi.push(rows);
        }
        Self::from_probs(pi)
    }

    /// Wraps explicit action distributions after checking each row.
    pub fn from_probs(pi: Vec<Vec<Vec<f64>>>) -> Result<Self, MdpError> {
        let horizon = pi.len();
        let num_states = pi.first().map_or(0, Vec::len);
        let num_actions = pi.first().and_then(|st| st.first()).map_or(0, Vec::len);
        if horizon == 0 || num_states == 0 || num_actions == 0 {
            return Err(MdpError::Dimension("empty policy".into()));
        }
        for (h, stage) in pi.iter().enumerate() {
            if stage.len() != num_states {
                return Err(MdpError::Dimension(format!("stage {h} has {} states", stage.len())));
            }
            for (s, row) in stage.iter().enumerate() {
                if row.len() != num_actions {
                    return Err(MdpError::Dimension(format!("pi[{h}][{s}] has {} actions", row.len())));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&x| x < 0.0) || !((sum - 1.0).abs() <= PROB_TOL) {
                    return Err(MdpError::InvalidPolicy(format!("pi[{h}][{s}] is not a distribution (sum {sum})")));
                }
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            pi,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn probs(&self, h: usize, s: usize) -> &[f64] {
        &self.pi[h][s]
    }

    /// The action taken at `(h, s)` when that row is a point mass.
    pub fn action(&self, h: usize, s: usize) -> Option<usize> {
        let row = &self.pi[h][s];
        let a = row.iter().position(|&x| x == 1.0)?;
        row.iter().enumerate().all(|(b, &x)| b == a || x == 0.0).then_some(a)
    }

    pub fn is_deterministic(&self) -> bool {
        (0..self.horizon).all(|h| (0..self.num_states).all(|s| self.action(h, s).is_some()))
    }

    pub fn sample(&self, h: usize, s: usize, rng: &mut SimRng) -> usize {
        sample_index(&self.pi[h][s], rng)
    }

    pub fn check_matches(&self, mdp: &Mdp) -> Result<(), MdpError> {
        if (self.num_states, self.num_actions, self.horizon) != (mdp.num_states, mdp.num_actions, mdp.horizon) {
            return Err(MdpError::Dimension(format!(
                "policy is (S, A, H) = ({}, {}, {}) but MDP is ({}, {}, {})",
                self.num_states, self.num_actions, self.horizon, mdp.num_states, mdp.num_actions, mdp.horizon
            )));
        }
        Ok(())
    }
}

/// One sampled episode. `states`, `actions` and `rewards` have length `H`
/// for simulated episodes; enumerated histories omit the last action.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    #[serde(default)]
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Self {
        Self { states, actions, rewards: Vec::new() }
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    /// `v[h][s]`
    pub v: Vec<Vec<f64>>,
    /// `q[h][s][a]`
    pub q: Vec<Vec<Vec<f64>>>,
    /// `sum_s mu(s) v[0][s]`
    pub rho: f64,
}

fn q_backup(mdp: &Mdp, h: usize, s: usize, a: usize, v_next: Option<&[f64]>) -> f64 {
    let mut q = mdp.r[h][s][a];
    if let Some(v_next) = v_next {
        q += mdp.p[h][s][a].iter().zip(v_next).map(|(p, v)| p * v).sum::<f64>();
    }
    q
}

fn start_value(mdp: &Mdp, v0: &[f64]) -> f64 {
    mdp.mu.iter().zip(v0).map(|(m, v)| m * v).sum()
}

/// Exact value of a Markov policy by backward recursion.
pub fn evaluate_policy(mdp: &Mdp, pol: &MarkovPolicy) -> Result<ValueTable, MdpError> {
    pol.check_matches(mdp)?;
    let (ns, na, hz) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut v = vec![vec![0.0; ns]; hz];
    let mut q = vec![vec![vec![0.0; na]; ns]; hz];
    for h in (0..hz).rev() {
        for s in 0..ns {
            for a in 0..na {
                q[h][s][a] = q_backup(mdp, h, s, a, (h + 1 < hz).then(|| v[h + 1].as_slice()));
            }
            v[h][s] = pol.pi[h][s].iter().zip(&q[h][s]).map(|(p, q)| p * q).sum();
        }
    }
    let rho = start_value(mdp, &v[0]);
    Ok(ValueTable { v, q, rho })
}

/// Bellman-optimal values and a greedy deterministic policy.
///
/// Ties go to the lowest action index.
pub fn optimal_values(mdp: &Mdp) -> (ValueTable, MarkovPolicy) {
    let (ns, na, hz) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut v = vec![vec![0.0; ns]; hz];
    let mut q = vec![vec![vec![0.0; na]; ns]; hz];
    let mut greedy = vec![vec![0usize; ns]; hz];
    for h in (0..hz).rev() {
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let value = q_backup(mdp, h, s, a, (h + 1 < hz).then(|| v[h + 1].as_slice()));
                q[h][s][a] = value;
                if value > best {
                    best = value;
                    greedy[h][s] = a;
                }
            }
            v[h][s] = best;
        }
    }
    let rho = start_value(mdp, &v[0]);
    let pol = MarkovPolicy::deterministic(&greedy, na).expect("greedy actions are in range");
    (ValueTable { v, q, rho }, pol)
}

/// Stage-wise state-action distribution of a Markov policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    /// `d[h][s][a] = P(S_h = s, A_h = a)` in one episode.
    pub d: Vec<Vec<Vec<f64>>>,
    /// `T * d` when an episode budget was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_counts: Option<Vec<Vec<Vec<f64>>>>,
}

impl OccupancyTable {
    pub fn state_mass(&self, h: usize, s: usize) -> f64 {
        self.d[h][s].iter().sum()
    }

    pub fn stage_mass(&self, h: usize) -> f64 {
        self.d[h].iter().flatten().sum()
    }
}

/// Forward recursion `d_{h+1}(s') = sum d_h(s) pi(a|s,h) p_h(s'|s,a)`.
pub fn occupancy(mdp: &Mdp, pol: &MarkovPolicy, episodes: Option<u64>) -> Result<OccupancyTable, MdpError> {
    pol.check_matches(mdp)?;
    let (ns, na, hz) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut d = vec![vec![vec![0.0; na]; ns]; hz];
    let mut state_dist = mdp.mu.clone();
    for h in 0..hz {
        for s in 0..ns {
            for a in 0..na {
                d[h][s][a] = state_dist[s] * pol.pi[h][s][a];
            }
        }
        if h + 1 < hz {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let w = d[h][s][a];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(&mdp.p[h][s][a]) {
                        *n += w * p;
                    }
                }
            }
            state_dist = next;
        }
    }
    let expected_counts = episodes.map(|t| {
        d.iter()
            .map(|st| st.iter().map(|row| row.iter().map(|x| t as f64 * x).collect()).collect())
            .collect()
    });
    Ok(OccupancyTable { d, expected_counts })
}

/// Draws an index from a probability vector with one uniform variate.
pub(crate) fn sample_index(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// What a decision rule sees at each step of an episode.
#[derive(Clone, Copy, Debug)]
pub struct Step<'a> {
    pub stage: usize,
    pub state: usize,
    /// States visited so far in this episode, including the current one.
    pub states: &'a [usize],
    /// Actions taken so far in this episode.
    pub actions: &'a [usize],
}

/// Samples one episode, querying `decide` for every action.
///
/// The same generator state and decision rule always give the same
/// trajectory.
pub fn simulate_episode<F>(mdp: &Mdp, rng: &mut SimRng, mut decide: F) -> Result<Trajectory, MdpError>
where
    F: FnMut(&Step<'_>, &mut SimRng) -> usize,
{
    let hz = mdp.horizon;
    let mut states = Vec::with_capacity(hz);
    let mut actions = Vec::with_capacity(hz);
    let mut rewards = Vec::with_capacity(hz);
    let mut s = sample_index(&mdp.mu, rng);
    for h in 0..hz {
        states.push(s);
        let step = Step {
            stage: h,
            state: s,
            states: &states,
            actions: &actions,
        };
        let a = decide(&step, rng);
        if a >= mdp.num_actions {
            return Err(MdpError::ActionOutOfRange {
                stage: h,
                action: a,
                num_actions: mdp.num_actions,
            });
        }
        actions.push(a);
        rewards.push(mdp.r[h][s][a]);
        if h + 1 < hz {
            s = sample_index(&mdp.p[h][s][a], rng);
        }
    }
    Ok(Trajectory { states, actions, rewards })
}

/// A possibly history-dependent learner interacting over many episodes.
pub trait Agent {
    fn act(&mut self, step: &Step<'_>, rng: &mut SimRng) -> usize;

    /// Called once per finished episode.
    fn end_episode(&mut self, _trajectory: &Trajectory) {}
}

/// Runs a Markov policy as an [`Agent`].
#[derive(Clone, Copy, Debug)]
pub struct PolicyAgent<'a>(pub &'a MarkovPolicy);

impl Agent for PolicyAgent<'_> {
    fn act(&mut self, step: &Step<'_>, rng: &mut SimRng) -> usize {
        self.0.sample(step.stage, step.state, rng)
    }
}

/// Plays one episode with `agent` and lets it observe the outcome.
pub fn run_agent_episode<G: Agent + ?Sized>(mdp: &Mdp, agent: &mut G, rng: &mut SimRng) -> Result<Trajectory, MdpError> {
    let traj = simulate_episode(mdp, rng, |step, rng| agent.act(step, rng))?;
    agent.end_episode(&traj);
    Ok(traj)
}

/// Log-probability of the episode history `(s_1, a_1, ..., s_H)` under
/// `mdp` and `pol`; `-inf` for impossible histories.
pub fn trajectory_log_prob(mdp: &Mdp, pol: &MarkovPolicy, traj: &Trajectory) -> Result<f64, MdpError> {
    pol.check_matches(mdp)?;
    let hz = mdp.horizon;
    if traj.states.len() != hz || traj.actions.len() + 1 < hz {
        return Err(MdpError::Dimension(format!(
            "trajectory has {} states and {} actions for H = {hz}",
            traj.states.len(),
            traj.actions.len()
        )));
    }
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let s0 = traj.states[0];
    if s0 >= ns {
        return Ok(f64::NEG_INFINITY);
    }
    let mut lp = mdp.mu[s0].ln();
    for h in 0..hz - 1 {
        let (s, a, s_next) = (traj.states[h], traj.actions[h], traj.states[h + 1]);
        if a >= na || s_next >= ns {
            return Ok(f64::NEG_INFINITY);
        }
        lp += pol.pi[h][s][a].ln() + mdp.p[h][s][a][s_next].ln();
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    /// Absorbing good/bad pair behind a coin flip at stage 0.
    fn coin_mdp(h: usize, bias: f64) -> Mdp {
        // states: 0 start, 1 good, 2 bad
        let row = |s: usize, a: usize| -> Vec<f64> {
            match s {
                0 if a == 0 => vec![0.0, 0.5 + bias, 0.5 - bias],
                0 => vec![0.0, 0.5, 0.5],
                1 => vec![0.0, 1.0, 0.0],
                _ => vec![0.0, 0.0, 1.0],
            }
        };
        let p = (0..h - 1).map(|_| (0..3).map(|s| (0..2).map(|a| row(s, a)).collect()).collect()).collect();
        let r = (0..h).map(|_| vec![vec![0.0; 2], vec![1.0; 2], vec![0.0; 2]]).collect();
        Mdp::new(3, 2, h, vec![1.0, 0.0, 0.0], p, r).unwrap()
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(Mdp::new(2, 1, 2, vec![1.0], vec![], vec![]).is_err());
        assert!(Mdp::new(0, 1, 1, vec![], vec![], vec![]).is_err());
        let ok = Mdp::new(1, 1, 1, vec![1.0], vec![], vec![vec![vec![0.0]]]);
        assert!(ok.is_ok());
    }

    #[test]
    fn validate_flags_bad_row_and_reward() {
        let m = coin_mdp(3, 0.0);
        assert!(m.validate().is_valid());

        let mut bad = m.clone();
        bad.p[1][0][1] = vec![0.0, 0.4, 0.4];
        let report = bad.validate();
        assert_eq!(
            report.issues,
            vec![ValidationIssue::KernelRowSum { stage: 1, state: 0, action: 1, sum: 0.8 }]
        );

        let mut bad = m.clone();
        bad.r[2][1][0] = 1.5;
        let report = bad.validate();
        assert!(matches!(
            report.issues.as_slice(),
            [ValidationIssue::RewardOutOfRange { stage: 2, state: 1, action: 0, .. }]
        ));
    }

    #[test]
    fn uniform_policy_on_fair_coin() {
        for h in 2..7 {
            let m = coin_mdp(h, 0.0);
            let vt = evaluate_policy(&m, &MarkovPolicy::uniform(3, 2, h)).unwrap();
            assert_abs_diff_eq!(vt.rho, (h as f64 - 1.0) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn optimal_prefers_biased_action_and_breaks_ties_low() {
        let m = coin_mdp(4, 0.1);
        let (vt, pol) = optimal_values(&m);
        assert_abs_diff_eq!(vt.rho, 3.0 * 0.6, epsilon = 1e-12);
        assert_eq!(pol.action(0, 0), Some(0));
        // absorbing states: both actions tie
        assert_eq!(pol.action(1, 1), Some(0));
        assert!(pol.is_deterministic());
    }

    #[test]
    fn zero_reward_gives_zero_value() {
        let m = coin_mdp(3, 0.2);
        let zero = Mdp::new(3, 2, 3, m.mu.clone(), m.p.clone(), vec![vec![vec![0.0; 2]; 3]; 3]).unwrap();
        let vt = evaluate_policy(&zero, &MarkovPolicy::uniform(3, 2, 3)).unwrap();
        assert_eq!(vt.rho, 0.0);
    }

    #[test]
    fn occupancy_counts_for_dirac_start() {
        let m = coin_mdp(3, 0.0);
        let occ = occupancy(&m, &MarkovPolicy::uniform(3, 2, 3), Some(100)).unwrap();
        assert_abs_diff_eq!(occ.state_mass(1, 1), 0.5, epsilon = 1e-15);
        assert_eq!(occ.expected_counts.as_ref().unwrap()[0][0][0], 50.0);
    }

    #[test]
    fn log_prob_of_short_trajectory() {
        let m = coin_mdp(2, 0.0);
        let pol = MarkovPolicy::uniform(3, 2, 2);
        let traj = Trajectory::new(vec![0, 1], vec![1, 0]);
        assert_abs_diff_eq!(trajectory_log_prob(&m, &pol, &traj).unwrap(), 0.25f64.ln(), epsilon = 1e-15);

        let impossible = Trajectory::new(vec![0, 0], vec![0, 0]);
        assert_eq!(trajectory_log_prob(&m, &pol, &impossible).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn deterministic_chain_has_log_prob_zero() {
        let m = coin_mdp(4, 0.0);
        let det = Mdp::new(
            3,
            2,
            4,
            vec![0.0, 1.0, 0.0],
            m.p.clone(),
            m.r.clone(),
        )
        .unwrap();
        let pol = MarkovPolicy::deterministic(&vec![vec![1, 1, 1]; 4], 2).unwrap();
        let traj = Trajectory::new(vec![1; 4], vec![1; 4]);
        assert_eq!(trajectory_log_prob(&det, &pol, &traj).unwrap(), 0.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let m = coin_mdp(5, 0.1);
        let pol = MarkovPolicy::uniform(3, 2, 5);
        let run = |seed| {
            let mut rng = substream(seed, &[3]);
            simulate_episode(&m, &mut rng, |st, rng| pol.sample(st.stage, st.state, rng)).unwrap()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn out_of_range_action_is_an_error() {
        let m = coin_mdp(3, 0.0);
        let mut rng = substream(0, &[]);
        let err = simulate_episode(&m, &mut rng, |_, _| 2).unwrap_err();
        assert!(matches!(err, MdpError::ActionOutOfRange { action: 2, .. }));
    }

    #[test]
    fn json_round_trip() {
        let m = coin_mdp(3, 0.125).with_names(vec!["s1".into(), "sg".into(), "sb".into()]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"S\":3") && text.contains("\"mu\""));
        let back: Mdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);

        let pol = MarkovPolicy::uniform(3, 2, 3);
        let back: MarkovPolicy = serde_json::from_str(&serde_json::to_string(&pol).unwrap()).unwrap();
        assert_eq!(back, pol);

        assert!(serde_json::from_str::<Mdp>(r#"{"S":2,"A":1,"H":1,"mu":[1.0],"p":[],"r":[[[0.0]]]}"#).is_err());
    }
}
