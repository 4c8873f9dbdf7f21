//! KL divergences: Bernoulli and categorical primitives, the classical
//! inequalities used by the lower-bound arguments, and the divergence
//! between the laws of T-episode histories under two MDPs.
//!
//! All logarithms are natural. The Monte Carlo estimator averages the
//! log-likelihood ratio of sampled histories; since the ratio only involves
//! kernel factors (the policy factors cancel), its expectation under the
//! first MDP is the trajectory KL even for history-dependent learners.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{self, Agent, MarkovPolicy, Mdp, MdpError, Trajectory};
use crate::rng::{substream, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfoError {
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("not a probability vector: {0}")]
    NotProbability(String),
    #[error("MDPs are not comparable: {0}")]
    Structural(String),
    #[error("enumeration needs about {terms:.3e} terms, above the limit of {limit:.0e}")]
    TooLarge { terms: f64, limit: f64 },
    #[error("second MDP gives zero probability to p[{stage}][{state}][{action}][{next_state}], which the first visits")]
    AbsoluteContinuity {
        stage: usize,
        state: usize,
        action: usize,
        next_state: usize,
    },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

type Result<T> = std::result::Result<T, InfoError>;

/// Largest number of nominal terms brute-force enumeration will attempt.
pub const ENUMERATION_LIMIT: f64 = 1e7;

fn check_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(InfoError::OutOfRange(format!("{name} = {x} not in [0, 1]")))
    }
}

/// `x log(x / y)` with `0 log(0/y) = 0` and `x log(x/0) = +inf`.
fn xlogxy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

/// `kl(p, q) = KL(Bernoulli(p), Bernoulli(q))` in nats.
pub fn kl_bernoulli(p: f64, q: f64) -> Result<f64> {
    check_unit("p", p)?;
    check_unit("q", q)?;
    if p == q {
        return Ok(0.0);
    }
    Ok((xlogxy(p, q) + xlogxy(1.0 - p, 1.0 - q)).max(0.0))
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > mdp::PROB_TOL {
        return Err(InfoError::NotProbability(format!("{name} (sum {sum})")));
    }
    Ok(())
}

/// `sum_i P_i log(P_i / Q_i)`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(InfoError::LengthMismatch(p.len(), q.len()));
    }
    check_simplex("P", p)?;
    check_simplex("Q", q)?;
    Ok(kl_rows(p, q))
}

fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    if p == q {
        return 0.0;
    }
    p.iter().zip(q).map(|(&x, &y)| xlogxy(x, y)).sum::<f64>().max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Pinsker: `(p - q)^2 <= kl(p, q) / 2`.
pub fn pinsker_check(p: f64, q: f64) -> Result<InequalityCheck> {
    let lhs = (p - q).powi(2);
    let rhs = kl_bernoulli(p, q)? / 2.0;
    Ok(InequalityCheck { lhs, rhs, holds: lhs <= rhs })
}

/// `(kl(1/2, 1/2 + eps), 4 eps^2)` for `eps` in `[0, 1/4]`.
pub fn kl_epsilon_bound(eps: f64) -> Result<(f64, f64)> {
    if !(0.0..=0.25).contains(&eps) {
        return Err(InfoError::OutOfRange(format!("eps = {eps} not in [0, 1/4]")));
    }
    Ok((kl_bernoulli(0.5, 0.5 + eps)?, 4.0 * eps * eps))
}

/// `(kl(p, q), (1 - p) log(1/(1 - q)) - log 2)`; the first dominates.
pub fn kl_delta_bound(p: f64, q: f64) -> Result<(f64, f64)> {
    check_unit("p", p)?;
    check_unit("q", q)?;
    if q == 1.0 {
        return Err(InfoError::OutOfRange("q = 1".into()));
    }
    let rhs = -(1.0 - p) * (1.0 - q).ln() - std::f64::consts::LN_2;
    Ok((kl_bernoulli(p, q)?, rhs))
}

/// `(kl(delta, 1 - delta), log(1/(2.4 delta)))` for `delta` in `(0, 1)`.
pub fn kl_complement_bound(delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(InfoError::OutOfRange(format!("delta = {delta} not in (0, 1)")));
    }
    Ok((kl_bernoulli(delta, 1.0 - delta)?, (1.0 / (2.4 * delta)).ln()))
}

/// One differing kernel row and its contribution to the trajectory KL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KlEntry {
    /// 0-based stage.
    pub stage: usize,
    pub state: usize,
    pub action: usize,
    pub expected_count: f64,
    #[serde(with = "crate::serde_inf")]
    pub row_kl: f64,
    /// `expected_count * row_kl`, with `0 * inf = 0`.
    #[serde(with = "crate::serde_inf")]
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KlBreakdown {
    #[serde(with = "crate::serde_inf")]
    pub total: f64,
    pub per_entry: Vec<KlEntry>,
}

impl KlBreakdown {
    /// Rows that make the divergence infinite.
    pub fn infinite_entries(&self) -> impl Iterator<Item = &KlEntry> {
        self.per_entry.iter().filter(|e| e.contribution.is_infinite())
    }
}

fn check_comparable(m: &Mdp, m2: &Mdp) -> Result<()> {
    m.check_same_shape(m2)?;
    if m.initial_dist() != m2.initial_dist() {
        return Err(InfoError::Structural("initial distributions differ".into()));
    }
    if m.rewards() != m2.rewards() {
        return Err(InfoError::Structural("rewards differ".into()));
    }
    Ok(())
}

/// Trajectory KL for a fixed Markov policy over `episodes` episodes:
/// `sum_{h,s,a} T d_h(s,a) KL(p_h(.|s,a), p2_h(.|s,a))`.
pub fn trajectory_kl_exact(m: &Mdp, m2: &Mdp, pol: &MarkovPolicy, episodes: u64) -> Result<KlBreakdown> {
    check_comparable(m, m2)?;
    let occ = mdp::occupancy(m, pol, Some(episodes))?;
    let counts = occ.expected_counts.expect("episode count supplied");
    let mut per_entry = Vec::new();
    let mut total = 0.0;
    for (h, s, a) in m.kernel_diff(m2)? {
        let row_kl = kl_rows(m.kernel(h, s, a), m2.kernel(h, s, a));
        let expected_count = counts[h][s][a];
        let contribution = if expected_count == 0.0 { 0.0 } else { expected_count * row_kl };
        total += contribution;
        per_entry.push(KlEntry {
            stage: h,
            state: s,
            action: a,
            expected_count,
            row_kl,
            contribution,
        });
    }
    Ok(KlBreakdown { total, per_entry })
}

/// A single-episode history `(s_1, a_1, ..., a_{H-1}, s_H)` with its
/// log-probabilities under two MDPs.
#[derive(Clone, Debug)]
pub struct WeightedHistory {
    pub trajectory: Trajectory,
    pub log_p1: f64,
    pub log_p2: f64,
}

fn check_enumerable(m: &Mdp, episodes: u64) -> Result<()> {
    let (s, a, h) = (m.num_states() as f64, m.num_actions() as f64, m.horizon() as f64);
    let t = episodes as f64;
    let terms = (s * a).powf((h - 1.0) * t) * s.powf(t);
    if terms > ENUMERATION_LIMIT {
        return Err(InfoError::TooLarge { terms, limit: ENUMERATION_LIMIT });
    }
    Ok(())
}

/// All single-episode histories with positive probability under `m`, or
/// under either MDP when `union` is set.
pub fn enumerate_histories(m: &Mdp, m2: &Mdp, pol: &MarkovPolicy, union: bool) -> Result<Vec<WeightedHistory>> {
    check_comparable(m, m2)?;
    pol.check_matches(m)?;
    let mut out = Vec::new();
    let mut states = Vec::with_capacity(m.horizon());
    let mut actions = Vec::with_capacity(m.horizon());
    for s0 in 0..m.num_states() {
        let (l1, l2) = (m.initial_dist()[s0].ln(), m2.initial_dist()[s0].ln());
        states.push(s0);
        extend_history(m, m2, pol, union, &mut states, &mut actions, l1, l2, &mut out);
        states.pop();
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn extend_history(
    m: &Mdp,
    m2: &Mdp,
    pol: &MarkovPolicy,
    union: bool,
    states: &mut Vec<usize>,
    actions: &mut Vec<usize>,
    l1: f64,
    l2: f64,
    out: &mut Vec<WeightedHistory>,
) {
    let alive = if union { l1 > f64::NEG_INFINITY || l2 > f64::NEG_INFINITY } else { l1 > f64::NEG_INFINITY };
    if !alive {
        return;
    }
    let h = states.len() - 1;
    if h + 1 == m.horizon() {
        out.push(WeightedHistory {
            trajectory: Trajectory::new(states.clone(), actions.clone()),
            log_p1: l1,
            log_p2: l2,
        });
        return;
    }
    let s = states[h];
    for a in 0..m.num_actions() {
        let lpi = pol.probs(h, s)[a].ln();
        if lpi == f64::NEG_INFINITY {
            continue;
        }
        actions.push(a);
        for s_next in 0..m.num_states() {
            let n1 = l1 + lpi + m.kernel(h, s, a)[s_next].ln();
            let n2 = l2 + lpi + m2.kernel(h, s, a)[s_next].ln();
            states.push(s_next);
            extend_history(m, m2, pol, union, states, actions, n1, n2, out);
            states.pop();
        }
        actions.pop();
    }
}

/// Visits every `episodes`-tuple of histories in odometer order.
fn for_each_tuple(histories: &[WeightedHistory], episodes: u64, mut f: impl FnMut(&[usize])) {
    let t = episodes as usize;
    if histories.is_empty() {
        return;
    }
    let mut idx = vec![0usize; t];
    loop {
        f(&idx);
        let mut k = 0;
        loop {
            if k == t {
                return;
            }
            idx[k] += 1;
            if idx[k] < histories.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Trajectory KL by summing `P log(P / P2)` over every `episodes`-tuple of
/// single-episode histories.
pub fn trajectory_kl_brute_force(m: &Mdp, m2: &Mdp, pol: &MarkovPolicy, episodes: u64) -> Result<f64> {
    check_enumerable(m, episodes)?;
    let histories = enumerate_histories(m, m2, pol, false)?;
    let mut total = 0.0;
    for_each_tuple(&histories, episodes, |idx| {
        let (mut l1, mut l2) = (0.0, 0.0);
        for &i in idx {
            l1 += histories[i].log_p1;
            l2 += histories[i].log_p2;
        }
        total += if l2 == f64::NEG_INFINITY { f64::INFINITY } else { l1.exp() * (l1 - l2) };
    });
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub reps: usize,
}

/// Sample mean and standard error of per-run values in a fixed order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn log_ratio(m: &Mdp, m2: &Mdp, traj: &Trajectory) -> Result<f64> {
    let mut acc = 0.0;
    for h in 0..m.horizon() - 1 {
        let (s, a, s_next) = (traj.states[h], traj.actions[h], traj.states[h + 1]);
        let (p, q) = (m.kernel(h, s, a)[s_next], m2.kernel(h, s, a)[s_next]);
        if p == q {
            continue;
        }
        if q == 0.0 {
            return Err(InfoError::AbsoluteContinuity { stage: h, state: s, action: a, next_state: s_next });
        }
        acc += (p / q).ln();
    }
    Ok(acc)
}

/// Monte Carlo trajectory KL for an arbitrary (possibly adaptive) learner.
///
/// Each replication builds a fresh agent with `make_agent`, runs it for
/// `episodes` episodes in `m` on the substream `(seed, rep)`, and records the
/// summed kernel log-likelihood ratio against `m2`.
pub fn trajectory_kl_monte_carlo<F, G>(
    m: &Mdp,
    m2: &Mdp,
    make_agent: F,
    episodes: u64,
    reps: usize,
    seed: u64,
) -> Result<McEstimate>
where
    F: Fn() -> G + Sync,
    G: Agent,
{
    check_comparable(m, m2)?;
    if reps == 0 {
        return Err(InfoError::OutOfRange("at least one replication is needed".into()));
    }
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng: SimRng = substream(seed, &[rep as u64]);
            let mut agent = make_agent();
            let mut total = 0.0;
            for _ in 0..episodes {
                let traj = mdp::run_agent_episode(m, &mut agent, &mut rng)?;
                total += log_ratio(m, m2, &traj)?;
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    let (estimate, stderr) = mean_stderr(&values);
    Ok(McEstimate { estimate, stderr, reps })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContractionCheck {
    pub mean1: f64,
    pub mean2: f64,
    pub kl_of_means: f64,
    #[serde(with = "crate::serde_inf")]
    pub traj_kl: f64,
    pub holds: bool,
}

/// Checks `kl(E1[Z], E2[Z]) <= KL(P1, P2)` for a `[0, 1]`-valued functional
/// of the `episodes`-episode history, computing both means by enumeration.
pub fn kl_contraction_check<Z>(m: &Mdp, m2: &Mdp, pol: &MarkovPolicy, episodes: u64, z: Z) -> Result<ContractionCheck>
where
    Z: Fn(&[&Trajectory]) -> f64,
{
    check_enumerable(m, episodes)?;
    let histories = enumerate_histories(m, m2, pol, true)?;
    let (mut mean1, mut mean2) = (0.0, 0.0);
    let mut bad_value = None;
    let mut tuple = Vec::with_capacity(episodes as usize);
    for_each_tuple(&histories, episodes, |idx| {
        let (mut l1, mut l2) = (0.0, 0.0);
        tuple.clear();
        for &i in idx {
            l1 += histories[i].log_p1;
            l2 += histories[i].log_p2;
            tuple.push(&histories[i].trajectory);
        }
        let value = z(&tuple);
        if !(0.0..=1.0).contains(&value) {
            bad_value = Some(value);
        }
        mean1 += l1.exp() * value;
        mean2 += l2.exp() * value;
    });
    if let Some(v) = bad_value {
        return Err(InfoError::OutOfRange(format!("functional returned {v} outside [0, 1]")));
    }
    let (mean1, mean2) = (mean1.clamp(0.0, 1.0), mean2.clamp(0.0, 1.0));
    let kl_of_means = kl_bernoulli(mean1, mean2)?;
    let traj_kl = trajectory_kl_exact(m, m2, pol, episodes)?.total;
    Ok(ContractionCheck {
        mean1,
        mean2,
        kl_of_means,
        traj_kl,
        holds: kl_of_means <= traj_kl * (1.0 + 1e-12) + 1e-12,
    })
}

/// Number of visits to `(stage, state, action)` across episodes.
pub fn visit_count(histories: &[&Trajectory], stage: usize, state: usize, action: usize) -> usize {
    histories
        .iter()
        .filter(|t| t.states.get(stage) == Some(&state) && t.actions.get(stage) == Some(&action))
        .count()
}

/// `Z = N / T` for the visit count of one row.
pub fn visit_fraction(stage: usize, state: usize, action: usize) -> impl Fn(&[&Trajectory]) -> f64 {
    move |hs| visit_count(hs, stage, state, action) as f64 / hs.len().max(1) as f64
}

/// `Z = 1{N / T > 1/2}` for the visit count of one row.
pub fn majority_event(stage: usize, state: usize, action: usize) -> impl Fn(&[&Trajectory]) -> f64 {
    move |hs| if 2 * visit_count(hs, stage, state, action) > hs.len() { 1.0 } else { 0.0 }
}
