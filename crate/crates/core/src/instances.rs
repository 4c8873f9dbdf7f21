//! Hard MDP families: the waiting-state tree, its stage-independent
//! variant, and the compact three- and four-state constructions.
//!
//! Stages in [`HardInstanceParams`] and [`Arm`] are 1-based so that arm
//! ranges read naturally (`h* in 1+d ..= Hbar+d`). Leaves and actions are
//! 0-based. The waiting action is action 0; any other action leaves the
//! waiting state.
//!
//! The waiting state may be kept through stage `Hbar` and must be left at
//! that stage, so the first non-waiting state is reached at stage
//! `Hbar + 1` at the latest. This keeps every arm stage reachable and makes
//! exactly one arm site visited per episode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{MarkovPolicy, Mdp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstanceError {
    #[error("invalid tree shape: {0}")]
    Shape(String),
    #[error("invalid parameters: {0}")]
    Params(String),
}

type Result<T> = std::result::Result<T, InstanceError>;

fn params_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(InstanceError::Params(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Tree,
    TreeStationary,
    #[serde(alias = "s3")]
    S3Stationary,
    #[serde(alias = "s4")]
    S4Stage,
    S4Bpi,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Tree,
        Family::TreeStationary,
        Family::S3Stationary,
        Family::S4Stage,
        Family::S4Bpi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Tree => "tree",
            Family::TreeStationary => "tree-stationary",
            Family::S3Stationary => "s3-stationary",
            Family::S4Stage => "s4-stage",
            Family::S4Bpi => "s4-bpi",
        }
    }

    fn has_waiting_state(self) -> bool {
        matches!(self, Family::Tree | Family::S4Stage | Family::S4Bpi)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = InstanceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Family::Tree),
            "tree-stationary" => Ok(Family::TreeStationary),
            "s3" | "s3-stationary" => Ok(Family::S3Stationary),
            "s4" | "s4-stage" => Ok(Family::S4Stage),
            "s4-bpi" => Ok(Family::S4Bpi),
            other => params_err(format!("unknown family {other:?}")),
        }
    }
}

/// Layout of the A-ary tree between the root and the leaves.
///
/// Nodes are numbered breadth-first from the root (node 0). Leaves all sit
/// at level `depth - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TreeShape {
    pub num_actions: usize,
    pub node_parents: Vec<Option<usize>>,
    /// Per node, the child reached by each action; empty for leaves.
    pub children_by_action: Vec<Vec<usize>>,
    pub depth: usize,
    pub leaves: Vec<usize>,
    /// Tree states that did not fit and were folded into the bad state.
    pub merged_states: usize,
    pub full: bool,
}

/// Number of nodes in a full A-ary tree with `d` levels, if it fits.
fn full_tree_nodes(a: usize, d: usize) -> Option<usize> {
    let mut total: usize = 0;
    let mut level: usize = 1;
    for _ in 0..d {
        total = total.checked_add(level)?;
        level = level.checked_mul(a)?;
    }
    Some(total)
}

/// Smallest `d >= 1` with `A^d >= n (A - 1) + 1`.
pub fn relaxed_depth(n: usize, a: usize) -> usize {
    let target = (n as u128) * (a as u128 - 1) + 1;
    let mut d = 1;
    let mut pow = a as u128;
    while pow < target {
        pow *= a as u128;
        d += 1;
    }
    d
}

/// `d` with `n = (A^d - 1)/(A - 1)`, when such an integer exists.
pub fn exact_depth(n: usize, a: usize) -> Option<usize> {
    let d = relaxed_depth(n, a);
    (full_tree_nodes(a, d) == Some(n)).then_some(d)
}

impl TreeShape {
    /// Complete A-ary tree on `n` nodes filled level by level.
    pub fn balanced(n: usize, a: usize) -> Result<Self> {
        if n == 0 || a < 2 {
            return Err(InstanceError::Shape(format!("balanced tree needs n >= 1 and A >= 2 (n={n}, A={a})")));
        }
        let children: Vec<Vec<usize>> = (0..n).map(|i| (a * i + 1..(a * i + a + 1).min(n)).collect()).collect();
        Ok(Self::from_children(children, a, 0))
    }

    /// Relabels a rooted tree breadth-first and fills per-action children.
    fn from_children(children: Vec<Vec<usize>>, a: usize, merged_states: usize) -> Self {
        let n = children.len();
        let mut order = Vec::with_capacity(n);
        let mut new_id = vec![usize::MAX; n];
        order.push(0);
        new_id[0] = 0;
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &c in &children[v] {
                new_id[c] = order.len();
                order.push(c);
            }
        }
        let mut node_parents = vec![None; n];
        let mut children_by_action = vec![Vec::new(); n];
        let mut level = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            let kids: Vec<usize> = children[old].iter().map(|&c| new_id[c]).collect();
            for &k in &kids {
                node_parents[k] = Some(new);
                level[k] = level[new] + 1;
            }
            if !kids.is_empty() {
                children_by_action[new] = (0..a).map(|act| kids[act % kids.len()]).collect();
            }
        }
        let leaves: Vec<usize> = (0..n).filter(|&v| children_by_action[v].is_empty()).collect();
        let depth = leaves.iter().map(|&v| level[v]).max().unwrap_or(0) + 1;
        let full = full_tree_nodes(a, depth) == Some(n) && leaves.iter().all(|&v| level[v] == depth - 1);
        Self {
            num_actions: a,
            node_parents,
            children_by_action,
            depth,
            leaves,
            merged_states,
            full,
        }
    }

    /// Tree using at most `budget` nodes whose leaves share one level.
    ///
    /// Uses the full tree when `budget` is a full-tree size. Otherwise a
    /// balanced tree on half the budget is grown to the target depth by
    /// single-child chains, and the unused states are reported as merged.
    pub fn with_budget(budget: usize, a: usize) -> Result<Self> {
        if budget == 0 || a < 2 {
            return Err(InstanceError::Shape(format!("need a positive node budget and A >= 2 (budget={budget}, A={a})")));
        }
        if exact_depth(budget, a).is_some() {
            return Self::balanced(budget, a);
        }
        let d = relaxed_depth(budget, a);
        let base = (budget / 2).max(1);
        let mut children: Vec<Vec<usize>> = (0..base).map(|i| (a * i + 1..(a * i + a + 1).min(base)).collect()).collect();
        let mut level = vec![0usize; base];
        for i in 1..base {
            level[i] = level[(i - 1) / a] + 1;
        }
        for leaf in 0..base {
            if !children[leaf].is_empty() {
                continue;
            }
            let mut tip = leaf;
            for _ in level[leaf]..d - 1 {
                let next = children.len();
                children.push(Vec::new());
                children[tip].push(next);
                tip = next;
            }
        }
        let nodes = children.len();
        if nodes > budget {
            return Err(InstanceError::Shape(format!("relaxed tree needs {nodes} nodes but only {budget} are available")));
        }
        let shape = Self::from_children(children, a, budget - nodes);
        debug_assert_eq!(shape.depth, d);
        Ok(shape)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_parents.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children_by_action[node].is_empty()
    }

    pub fn child(&self, node: usize, action: usize) -> Option<usize> {
        self.children_by_action[node].get(action).copied()
    }

    pub fn node_level(&self, mut node: usize) -> usize {
        let mut level = 0;
        while let Some(p) = self.node_parents[node] {
            node = p;
            level += 1;
        }
        level
    }

    /// Root-to-leaf actions leading to leaf number `leaf`, lowest action
    /// index at each branching.
    pub fn path_actions(&self, leaf: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut node = self.leaves[leaf];
        while let Some(p) = self.node_parents[node] {
            let act = self.children_by_action[p].iter().position(|&c| c == node).expect("child listed under parent");
            path.push(act);
            node = p;
        }
        path.reverse();
        path
    }
}

/// Tree layout for `S` total states (the tree gets `S - 3` of them).
pub fn build_tree_shape(num_states: usize, num_actions: usize, relaxed: bool) -> Result<TreeShape> {
    if num_states < 6 {
        return Err(InstanceError::Shape(format!("S = {num_states} < 6")));
    }
    if num_actions < 2 {
        return Err(InstanceError::Shape(format!("A = {num_actions} < 2")));
    }
    let budget = num_states - 3;
    if exact_depth(budget, num_actions).is_none() && !relaxed {
        return Err(InstanceError::Shape(format!(
            "no integer d with S - 3 = (A^d - 1)/(A - 1) for S = {num_states}, A = {num_actions}"
        )));
    }
    TreeShape::with_budget(budget, num_actions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FullTree,
    RelaxedTree,
    ExponentialCap,
    Unsupported,
}

/// Which tree construction applies to `(S, A, H)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssumptionReport {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub regime: Regime,
    /// Depth from the state count alone, `ceil(log_A((S-3)(A-1)+1))`.
    pub formula_depth: usize,
    pub full_tree_exists: bool,
    pub horizon_ok: bool,
    /// Depth of the tree actually built.
    pub depth: usize,
    pub leaves: usize,
    pub tree_nodes: usize,
    /// `S` outside the capped regime, `ceil(A^(H/3 - 2))` inside it.
    pub effective_states: usize,
    /// `min(S, A^(H/3 - 2))`, the state factor of the relaxed bounds.
    pub bound_state_factor: f64,
    pub notes: Vec<String>,
}

/// `A^(H/3 - 2)` computed exactly when the exponent is an integer.
pub fn horizon_power(num_actions: usize, horizon: usize) -> f64 {
    let a = num_actions as f64;
    if horizon % 3 == 0 {
        a.powi(horizon as i32 / 3 - 2)
    } else {
        a.powf(horizon as f64 / 3.0 - 2.0)
    }
}

fn horizon_cap(num_actions: usize, horizon: usize) -> usize {
    let x = horizon_power(num_actions, horizon);
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn tree_for(num_states: usize, num_actions: usize, horizon: usize) -> (AssumptionReport, Option<TreeShape>) {
    let mut report = AssumptionReport {
        num_states,
        num_actions,
        horizon,
        regime: Regime::Unsupported,
        formula_depth: 0,
        full_tree_exists: false,
        horizon_ok: false,
        depth: 0,
        leaves: 0,
        tree_nodes: 0,
        effective_states: num_states,
        bound_state_factor: (num_states as f64).min(horizon_power(num_actions.max(1), horizon)),
        notes: Vec::new(),
    };
    if num_states < 6 || num_actions < 2 {
        report.notes.push("requires S >= 6 and A >= 2".into());
        return (report, None);
    }
    let budget = num_states - 3;
    report.formula_depth = relaxed_depth(budget, num_actions);
    report.full_tree_exists = exact_depth(budget, num_actions).is_some();
    report.horizon_ok = horizon >= 3 * report.formula_depth;
    let shape = if report.horizon_ok {
        report.regime = if report.full_tree_exists { Regime::FullTree } else { Regime::RelaxedTree };
        TreeShape::with_budget(budget, num_actions)
    } else {
        report.regime = Regime::ExponentialCap;
        let cap = horizon_cap(num_actions, horizon);
        report.effective_states = cap;
        report.notes.push(format!("H < 3d: tree capped at {cap} states"));
        TreeShape::with_budget(budget.min(cap).max(1), num_actions)
    };
    match shape {
        Ok(shape) => {
            report.depth = shape.depth;
            report.leaves = shape.num_leaves();
            report.tree_nodes = shape.num_nodes();
            (report, Some(shape))
        }
        Err(e) => {
            report.notes.push(e.to_string());
            report.regime = Regime::Unsupported;
            (report, None)
        }
    }
}

/// Reports the applicable regime and the effective depth, leaf count and
/// state count for the tree family.
pub fn assumption_check(num_states: usize, num_actions: usize, horizon: usize) -> AssumptionReport {
    tree_for(num_states, num_actions, horizon).0
}

/// One boosted kernel row: stage (1-based), leaf and action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub stage: usize,
    #[serde(default)]
    pub leaf: usize,
    pub action: usize,
}

impl Arm {
    pub fn new(stage: usize, leaf: usize, action: usize) -> Self {
        Self { stage, leaf, action }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.stage, self.leaf, self.action)
    }
}

/// Selects a single member of a hard class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardInstanceParams {
    pub family: Family,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "Hbar", default = "one")]
    pub hbar: usize,
    /// Kernel gap: the boost of the arm row (for `s4-bpi`, the reference
    /// boost; alternatives get twice this).
    pub eps: f64,
    #[serde(default)]
    pub arm: Option<Arm>,
    #[serde(rename = "refArm", default, skip_serializing_if = "Option::is_none")]
    pub ref_arm: Option<Arm>,
}

fn one() -> usize {
    1
}

/// A whole hard class: the reference member plus one member per arm.
pub type ClassSpec = HardInstanceParams;

/// Where an arm's boosted row lives in the emitted [`Mdp`] (0-based stage).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArmSite {
    pub stage: usize,
    pub state: usize,
    pub action: usize,
}

/// Resolved geometry of a hard class; builds its members and arm policies.
#[derive(Clone, Debug, PartialEq)]
pub struct HardClass {
    spec: HardInstanceParams,
    tree: Option<TreeShape>,
    report: Option<AssumptionReport>,
}

const S_W: usize = 0;

impl HardClass {
    /// Checks the class-level parameters; `spec.arm` is ignored.
    pub fn new(spec: &ClassSpec) -> Result<Self> {
        let mut spec = spec.clone();
        spec.arm = None;
        let a = spec.num_actions;
        let hz = spec.horizon;
        if !(spec.eps >= 0.0) {
            return params_err(format!("eps = {} must be nonnegative", spec.eps));
        }
        if !spec.family.has_waiting_state() {
            spec.hbar = 1;
        }
        let (tree, report) = match spec.family {
            Family::Tree => {
                let (report, shape) = tree_for(spec.num_states, a, hz);
                let Some(shape) = shape else {
                    return params_err(format!("no tree for S={}, A={a}, H={hz}: {}", spec.num_states, report.notes.join("; ")));
                };
                (Some(shape), Some(report))
            }
            Family::TreeStationary => (Some(build_tree_shape(spec.num_states, a, true)?), None),
            Family::S3Stationary => {
                spec.num_states = 3;
                (None, None)
            }
            Family::S4Stage | Family::S4Bpi => {
                spec.num_states = 4;
                (None, None)
            }
        };
        let class = Self { spec, tree, report };
        class.check()?;
        Ok(class)
    }

    fn check(&self) -> Result<()> {
        let s = &self.spec;
        let (a, hz, hbar, eps) = (s.num_actions, s.horizon, s.hbar, s.eps);
        if a < 2 {
            return params_err(format!("A = {a} < 2"));
        }
        let eps_max = match s.family {
            Family::Tree => 0.5,
            Family::S4Bpi => 0.125,
            _ => 0.25,
        };
        if eps > eps_max {
            return params_err(format!("eps = {eps} exceeds {eps_max} for family {}", s.family));
        }
        match s.family {
            Family::Tree => {
                let d = self.depth();
                if hbar < 1 || hbar + d + 1 > hz {
                    return params_err(format!("need 1 <= Hbar <= H - d - 1 (Hbar={hbar}, H={hz}, d={d})"));
                }
            }
            Family::TreeStationary => {
                if hz < self.depth() + 1 {
                    return params_err(format!("need H >= d + 1 (H={hz}, d={})", self.depth()));
                }
            }
            Family::S3Stationary => {
                if hz < 2 {
                    return params_err(format!("H = {hz} < 2"));
                }
            }
            Family::S4Stage | Family::S4Bpi => {
                if hz < 4 {
                    return params_err(format!("H = {hz} < 4"));
                }
                if hbar < 1 || hbar + 2 > hz {
                    return params_err(format!("need 1 <= Hbar <= H - 2 (Hbar={hbar}, H={hz})"));
                }
            }
        }
        match (s.family, s.ref_arm) {
            (Family::S4Bpi, Some(r)) => self.check_arm(&r)?,
            (Family::S4Bpi, None) => return params_err("s4-bpi needs a reference arm"),
            (_, Some(_)) => return params_err(format!("family {} takes no reference arm", s.family)),
            _ => {}
        }
        Ok(())
    }

    fn check_arm(&self, arm: &Arm) -> Result<()> {
        let (lo, hi) = self.visit_stages();
        if arm.stage < lo || arm.stage > hi {
            return params_err(format!("arm stage {} outside {lo}..={hi}", arm.stage));
        }
        if arm.leaf >= self.num_leaves() {
            return params_err(format!("arm leaf {} out of range (L = {})", arm.leaf, self.num_leaves()));
        }
        if arm.action >= self.spec.num_actions {
            return params_err(format!("arm action {} out of range (A = {})", arm.action, self.spec.num_actions));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ClassSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn tree(&self) -> Option<&TreeShape> {
        self.tree.as_ref()
    }

    pub fn assumption_report(&self) -> Option<&AssumptionReport> {
        self.report.as_ref()
    }

    /// Tree depth `d`; the compact families count as `d = 1`.
    pub fn depth(&self) -> usize {
        self.tree.as_ref().map_or(1, |t| t.depth)
    }

    pub fn num_leaves(&self) -> usize {
        self.tree.as_ref().map_or(1, TreeShape::num_leaves)
    }

    /// Number of states of the emitted MDPs.
    pub fn num_states(&self) -> usize {
        match self.spec.family {
            Family::Tree => self.tree.as_ref().unwrap().num_nodes() + 3,
            Family::TreeStationary => self.tree.as_ref().unwrap().num_nodes() + 2,
            Family::S3Stationary => 3,
            Family::S4Stage | Family::S4Bpi => 4,
        }
    }

    /// 1-based stages at which a leaf (or `s1`) can be occupied.
    pub fn visit_stages(&self) -> (usize, usize) {
        let s = &self.spec;
        match s.family {
            Family::Tree => (1 + self.depth(), s.hbar + self.depth()),
            Family::TreeStationary => (self.depth(), self.depth()),
            Family::S3Stationary => (1, 1),
            Family::S4Stage | Family::S4Bpi => (2, s.hbar + 1),
        }
    }

    /// Number of rewarded stages an optimal policy collects.
    pub fn reward_window(&self) -> usize {
        let s = &self.spec;
        match s.family {
            Family::Tree => s.horizon - s.hbar - self.depth(),
            Family::TreeStationary => s.horizon - self.depth(),
            Family::S3Stationary => s.horizon - 1,
            Family::S4Stage | Family::S4Bpi => s.horizon - s.hbar - 1,
        }
    }

    /// First rewarded stage (1-based).
    pub fn first_reward_stage(&self) -> usize {
        self.spec.horizon - self.reward_window() + 1
    }

    pub fn good_state(&self) -> usize {
        self.num_states() - 2
    }

    pub fn bad_state(&self) -> usize {
        self.num_states() - 1
    }

    fn tree_offset(&self) -> usize {
        match self.spec.family {
            Family::Tree => 1,
            _ => 0,
        }
    }

    /// MDP state index of leaf number `leaf` (or of `s1`).
    pub fn leaf_state(&self, leaf: usize) -> usize {
        match self.spec.family {
            Family::Tree | Family::TreeStationary => self.tree.as_ref().unwrap().leaves[leaf] + self.tree_offset(),
            Family::S3Stationary => 0,
            Family::S4Stage | Family::S4Bpi => 1,
        }
    }

    pub fn leaf_states(&self) -> Vec<usize> {
        (0..self.num_leaves()).map(|l| self.leaf_state(l)).collect()
    }

    /// Every arm of the geometry in lexicographic order.
    pub fn all_arms(&self) -> Vec<Arm> {
        let (lo, hi) = self.visit_stages();
        let mut arms = Vec::new();
        for stage in lo..=hi {
            for leaf in 0..self.num_leaves() {
                for action in 0..self.spec.num_actions {
                    arms.push(Arm { stage, leaf, action });
                }
            }
        }
        arms
    }

    /// Arms defining alternative members (all arms except the reference).
    pub fn alternative_arms(&self) -> Vec<Arm> {
        let reference = self.spec.ref_arm;
        self.all_arms().into_iter().filter(|a| Some(*a) != reference).collect()
    }

    pub fn site(&self, arm: &Arm) -> ArmSite {
        ArmSite {
            stage: arm.stage - 1,
            state: self.leaf_state(arm.leaf),
            action: arm.action,
        }
    }

    /// Member parameters: the reference first, then one per arm.
    pub fn members(&self) -> Vec<HardInstanceParams> {
        let mut out = vec![self.spec.clone()];
        out.extend(self.alternative_arms().into_iter().map(|arm| HardInstanceParams {
            arm: Some(arm),
            ..self.spec.clone()
        }));
        out
    }

    /// Builds the member selected by `arm` (`None` for the reference).
    pub fn instance(&self, arm: Option<Arm>) -> Result<Mdp> {
        if let Some(arm) = &arm {
            self.check_arm(arm)?;
            if Some(*arm) == self.spec.ref_arm {
                return params_err(format!("arm {arm} coincides with the reference arm"));
            }
        }
        let s = &self.spec;
        let (ns, na, hz) = (self.num_states(), s.num_actions, s.horizon);
        let good = self.good_state();
        let bad = self.bad_state();
        let first_reward = self.first_reward_stage() - 1;
        let boosts = self.boosts(arm);
        let mut p = vec![vec![vec![vec![0.0; ns]; na]; ns]; hz.saturating_sub(1)];
        for (h, stage) in p.iter_mut().enumerate() {
            for a in 0..na {
                stage[good][a][good] = 1.0;
                stage[bad][a][bad] = 1.0;
            }
            match s.family {
                Family::Tree | Family::S4Stage | Family::S4Bpi => {
                    // root and s1 both sit at index 1; 1-based stage h+1 may
                    // stay only while h+1 < Hbar
                    for a in 0..na {
                        let stay = a == 0 && h + 1 < s.hbar;
                        stage[S_W][a][if stay { S_W } else { 1 }] = 1.0;
                    }
                }
                _ => {}
            }
            if let Some(tree) = &self.tree {
                let off = self.tree_offset();
                for node in 0..tree.num_nodes() {
                    if !tree.is_leaf(node) {
                        for a in 0..na {
                            stage[node + off][a][tree.child(node, a).unwrap() + off] = 1.0;
                        }
                    }
                }
            }
            for leaf in 0..self.num_leaves() {
                let state = self.leaf_state(leaf);
                for a in 0..na {
                    let delta: f64 = boosts
                        .iter()
                        .filter(|(site, _)| site.state == state && site.action == a && (self.is_stationary() || site.stage == h))
                        .map(|(_, g)| g)
                        .sum();
                    stage[state][a][good] = 0.5 + delta;
                    stage[state][a][bad] = 0.5 - delta;
                }
            }
        }
        let mut r = vec![vec![vec![0.0; na]; ns]; hz];
        for stage in r.iter_mut().skip(first_reward) {
            stage[good] = vec![1.0; na];
        }
        let mut mu = vec![0.0; ns];
        mu[0] = 1.0;
        Mdp::new(ns, na, hz, mu, p, r)
            .and_then(|m| m.with_names(self.state_names()))
            .map_err(|e| InstanceError::Params(e.to_string()))
    }

    /// Builds the member described by `params`, which must belong to this class.
    pub fn build(&self, params: &HardInstanceParams) -> Result<Mdp> {
        let mut reference = params.clone();
        reference.arm = None;
        let resolved = HardClass::new(&reference)?;
        if resolved.spec != self.spec {
            return params_err("parameters do not belong to this class");
        }
        self.instance(params.arm)
    }

    fn is_stationary(&self) -> bool {
        matches!(self.spec.family, Family::TreeStationary | Family::S3Stationary)
    }

    fn boosts(&self, arm: Option<Arm>) -> Vec<(ArmSite, f64)> {
        let eps = self.spec.eps;
        let mut out = Vec::new();
        if self.spec.family == Family::S4Bpi {
            out.push((self.site(&self.spec.ref_arm.unwrap()), eps));
            if let Some(arm) = arm {
                out.push((self.site(&arm), 2.0 * eps));
            }
        } else if let Some(arm) = arm {
            out.push((self.site(&arm), eps));
        }
        out
    }

    fn state_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_states());
        match self.spec.family {
            Family::S3Stationary => names.push("s1".to_string()),
            Family::S4Stage | Family::S4Bpi => {
                names.push("s_w".to_string());
                names.push("s1".to_string());
            }
            Family::Tree | Family::TreeStationary => {
                if self.spec.family == Family::Tree {
                    names.push("s_w".to_string());
                }
                let tree = self.tree.as_ref().unwrap();
                let mut leaf_no = 0;
                for node in 0..tree.num_nodes() {
                    if tree.is_leaf(node) {
                        names.push(format!("leaf{leaf_no}"));
                        leaf_no += 1;
                    } else if node == 0 {
                        names.push("s_root".to_string());
                    } else {
                        names.push(format!("node{node}"));
                    }
                }
                if tree.num_nodes() == 1 {
                    names.last_mut().unwrap().push_str("/s_root");
                }
            }
        }
        names.push("s_g".to_string());
        names.push("s_b".to_string());
        names
    }

    /// Deterministic policy that plays `arm`: waits just long enough, walks
    /// the tree to the arm's leaf and takes the arm's action there.
    ///
    /// Every other row plays action 0.
    pub fn arm_policy(&self, arm: &Arm) -> Result<MarkovPolicy> {
        self.check_arm(arm)?;
        let (ns, hz) = (self.num_states(), self.spec.horizon);
        let mut actions = vec![vec![0usize; ns]; hz];
        // 1-based stage at which the walk from the entry state starts
        let entry_stage = arm.stage + 1 - self.depth();
        if self.spec.family.has_waiting_state() {
            // leave at entry_stage - 1
            actions[entry_stage - 2][S_W] = 1;
        }
        if let Some(tree) = &self.tree {
            let off = self.tree_offset();
            let mut node = 0;
            for (k, &act) in tree.path_actions(arm.leaf).iter().enumerate() {
                actions[entry_stage - 1 + k][node + off] = act;
                node = tree.child(node, act).unwrap();
            }
        }
        actions[arm.stage - 1][self.leaf_state(arm.leaf)] = arm.action;
        MarkovPolicy::deterministic(&actions, self.spec.num_actions).map_err(|e| InstanceError::Params(e.to_string()))
    }

    /// Which arm site, if any, a trajectory visits.
    pub fn visited_arm(&self, states: &[usize], actions: &[usize]) -> Option<Arm> {
        let (lo, hi) = self.visit_stages();
        let leaves = self.leaf_states();
        for stage in lo..=hi.min(states.len()) {
            let s = states[stage - 1];
            if let Some(leaf) = leaves.iter().position(|&l| l == s) {
                if let Some(&action) = actions.get(stage - 1) {
                    return Some(Arm { stage, leaf, action });
                }
            }
        }
        None
    }
}

/// Members of the class described by `spec`, reference first.
pub fn enumerate_class(spec: &ClassSpec) -> Result<Vec<HardInstanceParams>> {
    Ok(HardClass::new(spec)?.members())
}

/// Builds the member described by `params`.
pub fn build_instance(params: &HardInstanceParams) -> Result<Mdp> {
    HardClass::new(params)?.instance(params.arm)
}

pub fn make_tree_instance(params: &HardInstanceParams) -> Result<Mdp> {
    if params.family != Family::Tree {
        return params_err(format!("expected family tree, got {}", params.family));
    }
    build_instance(params)
}

fn compact_params(family: Family, a: usize, h: usize, hbar: usize, eps: f64) -> HardInstanceParams {
    HardInstanceParams {
        family,
        num_states: if family == Family::S3Stationary { 3 } else { 4 },
        num_actions: a,
        horizon: h,
        hbar,
        eps,
        arm: None,
        ref_arm: None,
    }
}

pub fn make_s3_stationary(num_actions: usize, horizon: usize, arm_action: Option<usize>, eps: f64) -> Result<Mdp> {
    let mut p = compact_params(Family::S3Stationary, num_actions, horizon, 1, eps);
    p.arm = arm_action.map(|action| Arm { stage: 1, leaf: 0, action });
    build_instance(&p)
}

/// `arm` is `(h*, a*)` with a 1-based stage.
pub fn make_s4_stage(num_actions: usize, horizon: usize, hbar: usize, arm: Option<(usize, usize)>, eps: f64) -> Result<Mdp> {
    let mut p = compact_params(Family::S4Stage, num_actions, horizon, hbar, eps);
    p.arm = arm.map(|(stage, action)| Arm { stage, leaf: 0, action });
    build_instance(&p)
}

pub fn make_s4_bpi(
    num_actions: usize,
    horizon: usize,
    hbar: usize,
    ref_arm: (usize, usize),
    arm: Option<(usize, usize)>,
    eps_tilde: f64,
) -> Result<Mdp> {
    let mut p = compact_params(Family::S4Bpi, num_actions, horizon, hbar, eps_tilde);
    p.ref_arm = Some(Arm { stage: ref_arm.0, leaf: 0, action: ref_arm.1 });
    p.arm = arm.map(|(stage, action)| Arm { stage, leaf: 0, action });
    build_instance(&p)
}

/// `arm` is `(leaf, action)`; the boost applies at every stage.
pub fn make_stationary_tree(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    arm: Option<(usize, usize)>,
    eps: f64,
) -> Result<Mdp> {
    let class = HardClass::new(&HardInstanceParams {
        family: Family::TreeStationary,
        num_states,
        num_actions,
        horizon,
        hbar: 1,
        eps,
        arm: None,
        ref_arm: None,
    })?;
    let d = class.depth();
    class.instance(arm.map(|(leaf, action)| Arm { stage: d, leaf, action }))
}

/// Kernel gap that turns a BPI accuracy `eps` into the class gap:
/// `2 eps / W` for the tree and `eps / W` for `s4-bpi`, where `W` is the
/// reward window.
pub fn bpi_gap(family: Family, eps: f64, window: usize) -> f64 {
    match family {
        Family::S4Bpi => eps / window as f64,
        _ => 2.0 * eps / window as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{evaluate_policy, occupancy, optimal_values};
    use approx::assert_abs_diff_eq;

    fn tree_spec(s: usize, a: usize, h: usize, hbar: usize, eps: f64) -> ClassSpec {
        HardInstanceParams {
            family: Family::Tree,
            num_states: s,
            num_actions: a,
            horizon: h,
            hbar,
            eps,
            arm: None,
            ref_arm: None,
        }
    }

    #[test]
    fn small_full_trees() {
        let t = build_tree_shape(6, 2, false).unwrap();
        assert_eq!((t.depth, t.num_nodes(), t.num_leaves()), (2, 3, 2));
        assert!(t.full);
        let t = build_tree_shape(10, 2, false).unwrap();
        assert_eq!((t.depth, t.num_leaves()), (3, 4));
        let t = build_tree_shape(16, 3, false).unwrap();
        assert_eq!((t.depth, t.num_leaves()), (3, 9));
    }

    #[test]
    fn relaxed_depth_formula() {
        assert!(build_tree_shape(11, 2, false).is_err());
        let t = build_tree_shape(11, 2, true).unwrap();
        assert_eq!(t.depth, 4);
        assert!(t.num_nodes() <= 8);
        assert_eq!(t.merged_states + t.num_nodes(), 8);
        assert!(t.leaves.iter().all(|&l| t.node_level(l) == 3));
    }

    #[test]
    fn shape_errors() {
        assert!(build_tree_shape(5, 2, true).is_err());
        assert!(build_tree_shape(6, 1, true).is_err());
    }

    #[test]
    fn relaxed_trees_fit_and_have_enough_leaves() {
        for s in 6..=400 {
            for a in 2..=6 {
                let t = build_tree_shape(s, a, true).unwrap();
                assert!(t.num_nodes() <= s - 3, "S={s} A={a}");
                assert!(8 * t.num_leaves() >= s - 3, "S={s} A={a} L={}", t.num_leaves());
                let d = relaxed_depth(s - 3, a);
                assert_eq!(t.depth, d, "S={s} A={a}");
                assert!(t.leaves.iter().all(|&l| t.node_level(l) == d - 1));
            }
        }
    }

    #[test]
    fn assumption_regimes() {
        let r = assumption_check(6, 2, 6);
        assert_eq!((r.regime, r.depth, r.horizon_ok), (Regime::FullTree, 2, true));
        let r = assumption_check(11, 2, 24);
        assert_eq!((r.regime, r.depth), (Regime::RelaxedTree, 4));
        let r = assumption_check(1000, 2, 9);
        assert_eq!((r.regime, r.effective_states), (Regime::ExponentialCap, 2));
        assert_eq!(assumption_check(4, 2, 9).regime, Regime::Unsupported);
    }

    #[test]
    fn tree_class_counts_and_order() {
        let members = enumerate_class(&tree_spec(6, 2, 9, 3, 0.1)).unwrap();
        assert_eq!(members.len(), 13);
        assert!(members[0].arm.is_none());
        let arms: Vec<Arm> = members[1..].iter().map(|m| m.arm.unwrap()).collect();
        let mut sorted = arms.clone();
        sorted.sort();
        assert_eq!(arms, sorted);
        assert_eq!(arms[0], Arm::new(3, 0, 0));
        assert_eq!(arms[11], Arm::new(5, 1, 1));
    }

    #[test]
    fn tree_state_layout() {
        let class = HardClass::new(&tree_spec(6, 2, 9, 3, 0.1)).unwrap();
        let m = class.instance(None).unwrap();
        let names = m.names().unwrap();
        assert_eq!(names, ["s_w", "s_root", "leaf0", "leaf1", "s_g", "s_b"]);
        assert_eq!(class.leaf_states(), vec![2, 3]);
    }

    #[test]
    fn tree_arm_differs_in_one_row() {
        let class = HardClass::new(&tree_spec(6, 2, 9, 3, 0.1)).unwrap();
        let m0 = class.instance(None).unwrap();
        for arm in class.all_arms() {
            let m = class.instance(Some(arm)).unwrap();
            assert!(m.validate().is_valid());
            let site = class.site(&arm);
            assert_eq!(m0.kernel_diff(&m).unwrap(), vec![(site.stage, site.state, site.action)]);
            let row = m.kernel(site.stage, site.state, site.action);
            assert_eq!((row[4], row[5]), (0.6, 0.4));
        }
    }

    #[test]
    fn tree_optimal_value_and_arm_policies() {
        let class = HardClass::new(&tree_spec(6, 2, 9, 3, 0.1)).unwrap();
        for arm in class.all_arms() {
            let m = class.instance(Some(arm)).unwrap();
            let (vt, _) = optimal_values(&m);
            assert_abs_diff_eq!(vt.rho, 4.0 * 0.6, epsilon = 1e-12);
            let pol = class.arm_policy(&arm).unwrap();
            assert_abs_diff_eq!(evaluate_policy(&m, &pol).unwrap().rho, 2.4, epsilon = 1e-12);
            let occ = occupancy(&m, &pol, None).unwrap();
            let site = class.site(&arm);
            assert_eq!(occ.d[site.stage][site.state][site.action], 1.0);
        }
    }

    #[test]
    fn waiting_state_must_be_left_by_hbar() {
        let class = HardClass::new(&tree_spec(6, 2, 9, 3, 0.0)).unwrap();
        let m = class.instance(None).unwrap();
        // always choosing the waiting action still reaches a leaf by stage Hbar + d
        let pol = MarkovPolicy::deterministic(&vec![vec![0; 6]; 9], 2).unwrap();
        let occ = occupancy(&m, &pol, None).unwrap();
        let leaves = class.leaf_states();
        let total: f64 = (2..5).map(|h| leaves.iter().map(|&l| occ.state_mass(h, l)).sum::<f64>()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(evaluate_policy(&m, &pol).unwrap().rho, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn hbar_range_is_enforced() {
        assert!(HardClass::new(&tree_spec(6, 2, 9, 6, 0.1)).is_ok());
        assert!(HardClass::new(&tree_spec(6, 2, 9, 7, 0.1)).is_err());
        assert!(HardClass::new(&tree_spec(6, 2, 9, 0, 0.1)).is_err());
        assert!(HardClass::new(&tree_spec(6, 2, 9, 3, 0.6)).is_err());
    }

    #[test]
    fn s3_values() {
        for h in 2..6 {
            let m = make_s3_stationary(3, h, Some(2), 0.2).unwrap();
            assert!(m.is_stationary());
            assert_abs_diff_eq!(optimal_values(&m).0.rho, (h as f64 - 1.0) * 0.7, epsilon = 1e-12);
            let m0 = make_s3_stationary(3, h, None, 0.2).unwrap();
            let pol = MarkovPolicy::uniform(3, 3, h);
            assert_abs_diff_eq!(evaluate_policy(&m0, &pol).unwrap().rho, (h as f64 - 1.0) / 2.0, epsilon = 1e-12);
        }
        assert!(make_s3_stationary(1, 3, None, 0.1).is_err());
        assert!(make_s3_stationary(2, 3, None, 0.3).is_err());
    }

    #[test]
    fn s4_reward_and_values() {
        let m = make_s4_stage(2, 8, 3, Some((3, 1)), 0.1).unwrap();
        assert_abs_diff_eq!(optimal_values(&m).0.rho, 4.0 * 0.6, epsilon = 1e-12);
        for h in 0..8 {
            let rewarded = m.rewards()[h].iter().flatten().any(|&x| x > 0.0);
            assert_eq!(rewarded, h >= 4, "stage {h}");
        }
        assert_eq!(enumerate_class(&compact_params(Family::S4Stage, 2, 8, 4, 0.1)).unwrap().len(), 9);
        assert!(make_s4_stage(2, 3, 1, None, 0.1).is_err());
        assert!(make_s4_stage(2, 8, 3, Some((5, 0)), 0.1).is_err());
    }

    #[test]
    fn s4_bpi_members() {
        let m0 = make_s4_bpi(2, 8, 3, (2, 0), None, 0.075).unwrap();
        let m1 = make_s4_bpi(2, 8, 3, (2, 0), Some((4, 1)), 0.075).unwrap();
        assert_abs_diff_eq!(optimal_values(&m1).0.rho, 4.0 * (0.5 + 0.15), epsilon = 1e-12);
        assert_abs_diff_eq!(optimal_values(&m0).0.rho, 4.0 * (0.5 + 0.075), epsilon = 1e-12);
        let diff = m0.kernel_diff(&m1).unwrap();
        assert_eq!(diff, vec![(3, 1, 1)]);
        assert!(make_s4_bpi(2, 8, 3, (2, 0), Some((2, 0)), 0.075).is_err());
        assert!(make_s4_bpi(2, 8, 3, (2, 0), None, 0.2).is_err());
        assert_abs_diff_eq!(bpi_gap(Family::S4Bpi, 0.3, 4), 0.075);
    }

    #[test]
    fn stationary_tree() {
        let m = make_stationary_tree(10, 2, 7, Some((2, 1)), 0.2).unwrap();
        assert!(m.is_stationary());
        assert_eq!(m.num_states(), 9);
        assert_abs_diff_eq!(optimal_values(&m).0.rho, 4.0 * 0.7, epsilon = 1e-12);
        let m0 = make_stationary_tree(10, 2, 7, None, 0.2).unwrap();
        assert_eq!(m0.kernel_diff(&m).unwrap().len(), 6);
    }

    #[test]
    fn capped_regime_builds() {
        let class = HardClass::new(&tree_spec(40, 2, 9, 2, 0.1)).unwrap();
        assert_eq!(class.assumption_report().unwrap().regime, Regime::ExponentialCap);
        let m = class.instance(Some(class.all_arms()[0])).unwrap();
        assert!(m.validate().is_valid());
        assert_abs_diff_eq!(
            optimal_values(&m).0.rho,
            (9 - 2 - class.depth()) as f64 * 0.6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn params_json_round_trip() {
        let mut p = tree_spec(6, 2, 9, 3, 0.1);
        p.arm = Some(Arm::new(4, 1, 0));
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"Hbar\":3"));
        let back: HardInstanceParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let alias: HardInstanceParams =
            serde_json::from_str(r#"{"family":"s3","S":3,"A":4,"H":5,"eps":0.1}"#).unwrap();
        assert_eq!(alias.family, Family::S3Stationary);
    }
}
