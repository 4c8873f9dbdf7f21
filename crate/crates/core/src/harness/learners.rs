//! Reference learners.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::instances::{Arm, HardClass};
use crate::mdp::{self, Agent, MarkovPolicy, Mdp, Step, Trajectory};
use crate::rng::SimRng;

use super::HarnessError;

pub const DEFAULT_BPI_CAP: u64 = 1_000_000;

fn one() -> f64 {
    1.0
}

fn default_cap() -> u64 {
    DEFAULT_BPI_CAP
}

/// A learner and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerSpec {
    /// Uniformly random action at every step.
    Uniform,
    /// Optimistic model-based planning with bonus `bonus * H / sqrt(n)`.
    OptimisticQ {
        #[serde(default = "one")]
        bonus: f64,
    },
    /// Always plays the policy reaching one fixed arm.
    FixedArm { arm: Arm },
    /// Round-robin over arm policies with an anytime Hoeffding stopping rule.
    BpiUniform {
        /// Multiplies every confidence width.
        #[serde(default = "one")]
        confidence_scale: f64,
        #[serde(default = "default_cap")]
        max_episodes: u64,
    },
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Uniform => "uniform",
            LearnerSpec::OptimisticQ { .. } => "optimistic-q",
            LearnerSpec::FixedArm { .. } => "fixed-arm",
            LearnerSpec::BpiUniform { .. } => "bpi-uniform",
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = match self {
            LearnerSpec::OptimisticQ { bonus } => *bonus > 0.0,
            LearnerSpec::BpiUniform { confidence_scale, max_episodes } => *confidence_scale > 0.0 && *max_episodes > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("learner {} needs positive hyperparameters", self.name())))
        }
    }

    /// Builds a fresh regret learner for the given class.
    pub fn regret_agent(&self, class: &HardClass) -> Result<Box<dyn Agent + Send>, HarnessError> {
        self.validate()?;
        let s = class.spec();
        let na = s.num_actions;
        Ok(match self {
            LearnerSpec::Uniform => Box::new(UniformAgent::new(na)),
            LearnerSpec::OptimisticQ { bonus } => {
                Box::new(OptimisticQ::new(class.num_states(), na, s.horizon, *bonus))
            }
            LearnerSpec::FixedArm { arm } => Box::new(PolicyOwner(class.arm_policy(arm)?)),
            LearnerSpec::BpiUniform { .. } => {
                return Err(HarnessError::Config("bpi-uniform is not a regret learner".into()));
            }
        })
    }
}

/// Catalog of built-in learners with default hyperparameters.
pub fn builtin_learners() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::Uniform,
        LearnerSpec::OptimisticQ { bonus: 1.0 },
        LearnerSpec::BpiUniform {
            confidence_scale: 1.0,
            max_episodes: DEFAULT_BPI_CAP,
        },
    ]
}

#[derive(Clone, Debug)]
pub struct UniformAgent {
    num_actions: usize,
}

impl UniformAgent {
    pub fn new(num_actions: usize) -> Self {
        Self { num_actions }
    }
}

impl Agent for UniformAgent {
    fn act(&mut self, _step: &Step<'_>, rng: &mut SimRng) -> usize {
        rng.gen_range(0..self.num_actions)
    }
}

/// Owns a Markov policy and plays it.
#[derive(Clone, Debug)]
pub struct PolicyOwner(pub MarkovPolicy);

impl Agent for PolicyOwner {
    fn act(&mut self, step: &Step<'_>, rng: &mut SimRng) -> usize {
        self.0.sample(step.stage, step.state, rng)
    }
}

/// Tabular optimistic learner: plans each episode on the empirical model
/// with a visit-count bonus, values clipped at the remaining horizon.
#[derive(Clone, Debug)]
pub struct OptimisticQ {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    bonus: f64,
    visits: Vec<Vec<Vec<u64>>>,
    next_counts: Vec<Vec<Vec<Vec<u64>>>>,
    reward_sums: Vec<Vec<Vec<f64>>>,
    greedy: Vec<Vec<usize>>,
}

impl OptimisticQ {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, bonus: f64) -> Self {
        let mut agent = Self {
            num_states,
            num_actions,
            horizon,
            bonus,
            visits: vec![vec![vec![0; num_actions]; num_states]; horizon],
            next_counts: vec![vec![vec![vec![0; num_states]; num_actions]; num_states]; horizon.saturating_sub(1)],
            reward_sums: vec![vec![vec![0.0; num_actions]; num_states]; horizon],
            greedy: vec![vec![0; num_states]; horizon],
        };
        agent.plan();
        agent
    }

    fn plan(&mut self) {
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut v_next = vec![0.0; ns];
        let mut v = vec![0.0; ns];
        for h in (0..hz).rev() {
            let cap = (hz - h) as f64;
            for s in 0..ns {
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0;
                for a in 0..na {
                    let n = self.visits[h][s][a];
                    let q = if n == 0 {
                        cap
                    } else {
                        let nf = n as f64;
                        let mut q = self.reward_sums[h][s][a] / nf + self.bonus * hz as f64 / nf.sqrt();
                        if h + 1 < hz {
                            let counts = &self.next_counts[h][s][a];
                            q += counts.iter().zip(&v_next).map(|(&c, &x)| c as f64 * x).sum::<f64>() / nf;
                        }
                        q.min(cap)
                    };
                    if q > best {
                        best = q;
                        best_a = a;
                    }
                }
                v[s] = best;
                self.greedy[h][s] = best_a;
            }
            std::mem::swap(&mut v, &mut v_next);
        }
    }
}

impl Agent for OptimisticQ {
    fn act(&mut self, step: &Step<'_>, _rng: &mut SimRng) -> usize {
        self.greedy[step.stage][step.state]
    }

    fn end_episode(&mut self, traj: &Trajectory) {
        for h in 0..self.horizon {
            let (s, a) = (traj.states[h], traj.actions[h]);
            self.visits[h][s][a] += 1;
            self.reward_sums[h][s][a] += traj.rewards[h];
            if h + 1 < self.horizon {
                self.next_counts[h][s][a][traj.states[h + 1]] += 1;
            }
        }
        self.plan();
    }
}

/// Outcome of one best-policy-identification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BpiOutcome {
    pub tau: u64,
    pub capped: bool,
    pub recommended_arm: Arm,
    pub recommended: MarkovPolicy,
}

/// Round-robin identification over the arm policies of `class`.
///
/// The episode return of an arm policy is `W` times a Bernoulli variable
/// whose mean is `1/2` plus that arm's boost, so arms are compared on
/// `return / W`. With `n` samples per arm and `K` arms the confidence
/// radius is `scale * sqrt(log(2 K n (n + 1) / delta) / (2 n))`; the run
/// stops once the empirical best arm's lower bound exceeds every other
/// arm's upper bound minus `eps / W`.
pub fn run_bpi_uniform(
    class: &HardClass,
    mdp: &Mdp,
    eps: f64,
    delta: f64,
    confidence_scale: f64,
    max_episodes: u64,
    rng: &mut SimRng,
) -> Result<BpiOutcome, HarnessError> {
    let arms = class.all_arms();
    let policies = arms.iter().map(|a| class.arm_policy(a)).collect::<Result<Vec<_>, _>>()?;
    let k = arms.len();
    let w = class.reward_window() as f64;
    let slack = eps / w;
    let mut sums = vec![0.0; k];
    let mut n: u64 = 0;
    let mut tau: u64 = 0;
    loop {
        for (j, pol) in policies.iter().enumerate() {
            let traj = mdp::simulate_episode(mdp, rng, |st, rng| pol.sample(st.stage, st.state, rng))?;
            sums[j] += traj.total_reward() / w;
            tau += 1;
        }
        n += 1;
        let nf = n as f64;
        let radius = confidence_scale * ((2.0 * k as f64 * nf * (nf + 1.0) / delta).ln() / (2.0 * nf)).sqrt();
        let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
        let best = (0..k).fold(0, |b, j| if means[j] > means[b] { j } else { b });
        let separated = (0..k).all(|j| j == best || means[best] - radius > means[j] + radius - slack);
        let capped = !separated && tau + k as u64 > max_episodes;
        if separated || capped {
            return Ok(BpiOutcome {
                tau,
                capped,
                recommended_arm: arms[best],
                recommended: policies[best].clone(),
            });
        }
    }
}
