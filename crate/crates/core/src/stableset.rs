//! Pasting-stable families of measures and local per-step penalties.
//!
//! A rectangular family fixes, at every non-terminal node, a set of one-step
//! transition choices together with a nonnegative cost per choice. The set of
//! measures obtained by selecting one choice per node is closed under pasting
//! by construction, and the induced penalty of a selection measure — the
//! expected sum of per-step costs — is local and additive across intermediate
//! stopping times (the sums telescope). Backward recursion over the choices
//! therefore builds a time-consistent dynamic risk measure.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::probspace::{
    atom_cover, cond_expectation, node_cover, Measure, RandomVariable, ScenarioTree, StoppingTime,
    stopping_time_label,
};
use crate::riskcore::{DynamicRisk, ExtReal, PenaltyFn, PenaltyRv};

/// Tolerance for recognizing a one-step transition vector as a member of a
/// choice set.
pub const CHOICE_MATCH_TOL: f64 = 1e-9;

/// The measure using `r`'s transitions strictly before `sigma` and `q`'s from
/// `sigma` on, so that `E_S(f | F_nu) = E_R(E_Q(f | F_sigma) | F_nu)`.
///
/// The defining identity is verified on the spanning battery of leaf
/// indicators before the measure is returned.
pub fn paste(
    tree: &ScenarioTree,
    q: &Measure,
    r: &Measure,
    nu: &StoppingTime,
    sigma: &StoppingTime,
) -> Result<Measure> {
    if !nu.precedes(tree, sigma) {
        return Err(Error::OrderViolation(format!(
            "{} does not precede {}",
            stopping_time_label(tree, nu),
            stopping_time_label(tree, sigma)
        )));
    }
    let cover = node_cover(tree, sigma);
    let mut edge = r.edges().to_vec();
    for node in 0..tree.node_count() {
        if let Some(parent) = tree.parent(node) {
            if cover[parent].is_some() {
                edge[node] = q.edge(node);
            }
        }
    }
    let pasted = Measure::from_edges(tree, edge)?;

    // E_S(f|F_nu) must equal E_R(E_Q(f|F_sigma)|F_nu) for every leaf indicator
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;
    for leaf in 0..horizon.atom_count() {
        let f = RandomVariable::indicator(horizon.clone(), leaf, 1.0);
        let lhs = cond_expectation(tree, &pasted, &f, nu)?;
        let inner = cond_expectation(tree, q, &f, sigma)?;
        let rhs = cond_expectation(tree, r, &inner, nu)?;
        for (k, &a) in nu.atoms().iter().enumerate() {
            if pasted.mass(tree, a) > 0.0 && r.mass(tree, a) > 0.0 {
                let d = (lhs.value(k) - rhs.value(k)).abs();
                if d > 1e-12 {
                    return Err(Error::InvalidMeasure {
                        node: tree.id(a).into(),
                        reason: format!("pasting identity violated by {d:.3e}"),
                    });
                }
            }
        }
    }
    Ok(pasted)
}

/// A paste of two members that is not itself a member.
#[derive(Debug, Clone)]
pub struct MissingPaste {
    pub q_index: usize,
    pub r_index: usize,
    pub nu: String,
    pub sigma: String,
    pub measure: Measure,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub stable: bool,
    pub missing: Vec<MissingPaste>,
}

/// Checks closure under pasting of an explicit list of measures (all required
/// to be equivalent to the reference) at the given `(nu, sigma)` pairs.
pub fn check_stable(
    tree: &ScenarioTree,
    measures: &[Measure],
    st_pairs: &[(StoppingTime, StoppingTime)],
) -> Result<StabilityReport> {
    if measures.is_empty() {
        return Err(Error::InvalidModel("empty measure list".into()));
    }
    for (i, m) in measures.iter().enumerate() {
        if !m.is_equivalent(tree) {
            return Err(Error::InvalidMeasure {
                node: format!("member {i}"),
                reason: "stability is defined for measures equivalent to the reference".into(),
            });
        }
    }
    let mut missing = Vec::new();
    for (qi, q) in measures.iter().enumerate() {
        for (ri, r) in measures.iter().enumerate() {
            for (nu, sigma) in st_pairs {
                let s = paste(tree, q, r, nu, sigma)?;
                if !measures.iter().any(|m| m.approx_eq(&s, 1e-12)) {
                    missing.push(MissingPaste {
                        q_index: qi,
                        r_index: ri,
                        nu: stopping_time_label(tree, nu),
                        sigma: stopping_time_label(tree, sigma),
                        measure: s,
                    });
                }
            }
        }
    }
    Ok(StabilityReport {
        stable: missing.is_empty(),
        missing,
    })
}

#[derive(Debug, Clone)]
pub struct LocalityReport {
    pub local: bool,
    pub max_violation: f64,
    /// `(pair index, atom id)` of the worst violation.
    pub witness: Option<(usize, String)>,
}

/// Checks locality of a penalty function: wherever two measures have the same
/// conditional law below a `sigma`-atom, their penalties must agree on that
/// atom (within 1e-12).
pub fn check_local(
    penalty: &dyn PenaltyFn,
    pairs: &[(Measure, Measure)],
    st_pairs: &[(StoppingTime, StoppingTime)],
) -> Result<LocalityReport> {
    let tree = penalty.tree();
    let mut max_violation: f64 = 0.0;
    let mut witness = None;
    for (pi, (q1, q2)) in pairs.iter().enumerate() {
        for (sigma, tau) in st_pairs {
            let cover = atom_cover(tree, sigma, tau)?;
            let a1 = penalty.penalty(q1, sigma, tau)?;
            let a2 = penalty.penalty(q2, sigma, tau)?;
            for (k, &a) in sigma.atoms().iter().enumerate() {
                if q1.mass(tree, a) <= 0.0 || q2.mass(tree, a) <= 0.0 {
                    continue;
                }
                // conditional laws agree below the atom?
                let laws_agree = tau
                    .atoms()
                    .iter()
                    .zip(&cover)
                    .filter(|(_, &c)| c == k)
                    .all(|(&m, _)| {
                        (q1.seg_mass(tree, a, m) - q2.seg_mass(tree, a, m)).abs() <= 1e-12
                    });
                if !laws_agree {
                    continue;
                }
                let v = match (a1.value(k), a2.value(k)) {
                    (ExtReal::Finite(x), ExtReal::Finite(y)) => (x - y).abs(),
                    (ExtReal::Inf, ExtReal::Inf) => 0.0,
                    _ => f64::INFINITY,
                };
                if v > max_violation {
                    max_violation = v;
                    witness = Some((pi, tree.id(a).to_string()));
                }
            }
        }
    }
    Ok(LocalityReport {
        local: max_violation <= 1e-12,
        max_violation,
        witness,
    })
}

/// One admissible one-step transition vector with its cost.
#[derive(Debug, Clone)]
pub struct Choice {
    /// Probability over the node's children, in child order.
    pub probs: Vec<f64>,
    pub cost: f64,
}

/// The choice structure at one node.
#[derive(Debug, Clone)]
pub enum NodeChoices {
    Finite(Vec<Choice>),
    /// Binary nodes only: the probability of the first child ranges over
    /// `[lo, hi]` at cost `b * (2q - 1)^2`.
    Interval { lo: f64, hi: f64, b: f64 },
}

/// On-disk rectangular family description, keyed by node id. Nodes not listed
/// default to the single reference choice at zero cost.
#[derive(Debug, Clone, Deserialize)]
pub struct RectangularSpec {
    pub nodes: BTreeMap<String, NodeChoiceSpec>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NodeChoiceSpec {
    pub choices: ChoicesSpec,
    #[serde(default)]
    pub penalty: Option<PenaltyKindSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ChoicesSpec {
    Finite(Vec<Vec<f64>>),
    Interval { interval: [f64; 2] },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PenaltyKindSpec {
    Zero(String),
    Weighted { b: f64 },
}

/// Per-node one-step choice sets with per-choice costs.
///
/// Every selection of one choice per node is a measure; the family of all
/// selections is closed under pasting by construction (stability is
/// structural, not enumerated).
#[derive(Debug, Clone)]
pub struct RectangularFamily {
    choices: Vec<Option<NodeChoices>>,
}

impl RectangularFamily {
    pub fn from_node_choices(
        tree: &ScenarioTree,
        choices: Vec<Option<NodeChoices>>,
    ) -> Result<Self> {
        if choices.len() != tree.node_count() {
            return Err(Error::InvalidModel(
                "one choice set per node required".into(),
            ));
        }
        for (node, c) in choices.iter().enumerate() {
            let children = tree.children(node);
            match c {
                None => {
                    if !children.is_empty() {
                        return Err(Error::InvalidModel(format!(
                            "empty choice set at node `{}`",
                            tree.id(node)
                        )));
                    }
                }
                Some(NodeChoices::Finite(list)) => {
                    if children.is_empty() {
                        return Err(Error::InvalidModel(format!(
                            "leaf `{}` cannot carry choices",
                            tree.id(node)
                        )));
                    }
                    if list.is_empty() {
                        return Err(Error::InvalidModel(format!(
                            "empty choice set at node `{}`",
                            tree.id(node)
                        )));
                    }
                    for ch in list {
                        if ch.probs.len() != children.len() {
                            return Err(Error::InvalidModel(format!(
                                "choice arity mismatch at node `{}`",
                                tree.id(node)
                            )));
                        }
                        let s: f64 = ch.probs.iter().sum();
                        if (s - 1.0).abs() > 1e-12
                            || ch.probs.iter().any(|&p| !(0.0..=1.0).contains(&p))
                        {
                            return Err(Error::InvalidModel(format!(
                                "choice at node `{}` is not a probability vector",
                                tree.id(node)
                            )));
                        }
                        if ch.cost < 0.0 || !ch.cost.is_finite() {
                            return Err(Error::InvalidModel(format!(
                                "negative cost at node `{}`",
                                tree.id(node)
                            )));
                        }
                    }
                }
                Some(NodeChoices::Interval { lo, hi, b }) => {
                    if children.len() != 2 {
                        return Err(Error::InvalidModel(format!(
                            "interval choices need a binary node, got `{}`",
                            tree.id(node)
                        )));
                    }
                    if !(0.0..=1.0).contains(lo) || !(0.0..=1.0).contains(hi) || lo > hi {
                        return Err(Error::InvalidModel(format!(
                            "invalid interval at node `{}`",
                            tree.id(node)
                        )));
                    }
                    if *b < 0.0 || !b.is_finite() {
                        return Err(Error::InvalidModel(format!(
                            "negative cost weight at node `{}`",
                            tree.id(node)
                        )));
                    }
                }
            }
        }
        Ok(RectangularFamily { choices })
    }

    /// The family containing only the reference transitions, at zero cost.
    pub fn reference(tree: &ScenarioTree) -> Self {
        let choices = (0..tree.node_count())
            .map(|n| {
                let children = tree.children(n);
                if children.is_empty() {
                    None
                } else {
                    Some(NodeChoices::Finite(vec![Choice {
                        probs: children.iter().map(|&c| tree.ref_edge(c)).collect(),
                        cost: 0.0,
                    }]))
                }
            })
            .collect();
        RectangularFamily { choices }
    }

    /// Interval `[1/2 - delta, 1/2 + delta]` with cost weight `b` at every
    /// node of a binary tree.
    pub fn interval_symmetric(tree: &ScenarioTree, delta: f64, b: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&delta) {
            return Err(Error::InvalidModel(format!(
                "interval radius {delta} outside [0, 0.5]"
            )));
        }
        let choices = (0..tree.node_count())
            .map(|n| {
                if tree.is_leaf(n) {
                    None
                } else {
                    Some(NodeChoices::Interval {
                        lo: 0.5 - delta,
                        hi: 0.5 + delta,
                        b,
                    })
                }
            })
            .collect();
        Self::from_node_choices(tree, choices)
    }

    pub fn from_spec(tree: &ScenarioTree, spec: &RectangularSpec) -> Result<Self> {
        let mut choices: Vec<Option<NodeChoices>> = (0..tree.node_count())
            .map(|n| {
                let children = tree.children(n);
                (!children.is_empty()).then(|| {
                    NodeChoices::Finite(vec![Choice {
                        probs: children.iter().map(|&c| tree.ref_edge(c)).collect(),
                        cost: 0.0,
                    }])
                })
            })
            .collect();
        for (id, node_spec) in &spec.nodes {
            let node = tree.index_of(id).ok_or_else(|| {
                Error::InvalidModel(format!("unknown node `{id}` in rectangular spec"))
            })?;
            let b = match &node_spec.penalty {
                None | Some(PenaltyKindSpec::Zero(_)) => 0.0,
                Some(PenaltyKindSpec::Weighted { b }) => *b,
            };
            let parsed = match &node_spec.choices {
                ChoicesSpec::Interval { interval } => NodeChoices::Interval {
                    lo: interval[0],
                    hi: interval[1],
                    b,
                },
                ChoicesSpec::Finite(list) => NodeChoices::Finite(
                    list.iter()
                        .map(|probs| {
                            let cost = if b == 0.0 {
                                0.0
                            } else {
                                // binary tilt cost b * (2q - 1)^2
                                if probs.len() != 2 {
                                    return Err(Error::InvalidModel(format!(
                                        "weighted cost needs binary choices at `{id}`"
                                    )));
                                }
                                let h = 2.0 * probs[0] - 1.0;
                                b * h * h
                            };
                            Ok(Choice {
                                probs: probs.clone(),
                                cost,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            choices[node] = Some(parsed);
        }
        Self::from_node_choices(tree, choices)
    }

    pub fn choices_at(&self, node: usize) -> Option<&NodeChoices> {
        self.choices[node].as_ref()
    }

    /// Normalization: every node must admit a zero-cost choice, so that the
    /// induced risk measure vanishes on the zero position.
    pub fn require_zero_cost_choice(&self, tree: &ScenarioTree) -> Result<()> {
        for (node, c) in self.choices.iter().enumerate() {
            let ok = match c {
                None => true,
                Some(NodeChoices::Finite(list)) => list.iter().any(|ch| ch.cost <= 1e-12),
                Some(NodeChoices::Interval { lo, hi, b }) => {
                    *b <= 1e-12 || (*lo <= 0.5 && 0.5 <= *hi)
                }
            };
            if !ok {
                return Err(Error::InvalidModel(format!(
                    "no zero-cost choice at node `{}`",
                    tree.id(node)
                )));
            }
        }
        Ok(())
    }

    /// The cost of the one-step transition `q` takes at `node`, or `inf` when
    /// that transition is not an admissible choice.
    pub fn step_cost(&self, tree: &ScenarioTree, q: &Measure, node: usize) -> ExtReal {
        let children = tree.children(node);
        match &self.choices[node] {
            None => ExtReal::Finite(0.0),
            Some(NodeChoices::Finite(list)) => list
                .iter()
                .find(|ch| {
                    ch.probs
                        .iter()
                        .zip(children)
                        .all(|(&p, &c)| (p - q.edge(c)).abs() <= CHOICE_MATCH_TOL)
                })
                .map_or(ExtReal::Inf, |ch| ExtReal::Finite(ch.cost)),
            Some(NodeChoices::Interval { lo, hi, b }) => {
                let q0 = q.edge(children[0]);
                if q0 + CHOICE_MATCH_TOL < *lo || q0 - CHOICE_MATCH_TOL > *hi {
                    ExtReal::Inf
                } else {
                    let h = 2.0 * q0 - 1.0;
                    ExtReal::Finite(b * h * h)
                }
            }
        }
    }
}

fn maximize_step(choices: &NodeChoices, child_values: &[f64]) -> f64 {
    match choices {
        NodeChoices::Finite(list) => list
            .iter()
            .map(|ch| {
                ch.probs
                    .iter()
                    .zip(child_values)
                    .map(|(&p, &v)| p * v)
                    .sum::<f64>()
                    - ch.cost
            })
            .fold(f64::NEG_INFINITY, f64::max),
        NodeChoices::Interval { lo, hi, b } => {
            let f = |q: f64| {
                let h = 2.0 * q - 1.0;
                q * child_values[0] + (1.0 - q) * child_values[1] - b * h * h
            };
            if *b == 0.0 {
                // linear objective: attained at an endpoint
                f(*lo).max(f(*hi))
            } else {
                // strictly concave in q: ternary search
                let (mut lo, mut hi) = (*lo, *hi);
                while hi - lo > 1e-13 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if f(m1) < f(m2) {
                        lo = m1;
                    } else {
                        hi = m2;
                    }
                }
                f(0.5 * (lo + hi))
            }
        }
    }
}

/// The dynamic risk measure built from a rectangular family by backward
/// recursion over the one-step choices.
#[derive(Debug, Clone)]
pub struct StableSetRisk {
    tree: ScenarioTree,
    family: RectangularFamily,
}

/// Validates normalization and wraps the family into its recursion-built
/// dynamic risk measure.
pub fn build_risk_from_stable(
    tree: ScenarioTree,
    family: RectangularFamily,
) -> Result<StableSetRisk> {
    family.require_zero_cost_choice(&tree)?;
    Ok(StableSetRisk { tree, family })
}

impl StableSetRisk {
    pub fn family(&self) -> &RectangularFamily {
        &self.family
    }

    /// Backward values on every node weakly above the anchor of `x`, with
    /// terminal condition `-x`.
    fn backward_values(&self, x: &RandomVariable) -> Result<Vec<Option<f64>>> {
        let tree = &self.tree;
        let tau = x.anchor();
        let mut values: Vec<Option<f64>> = vec![None; tree.node_count()];
        for (&a, &v) in tau.atoms().iter().zip(x.values()) {
            values[a] = Some(-v);
        }
        let cover = node_cover(tree, tau);
        let mut order: Vec<usize> = (0..tree.node_count()).collect();
        order.sort_by_key(|&n| std::cmp::Reverse(tree.time(n)));
        for n in order {
            if cover[n].is_some() || tree.is_leaf(n) {
                continue; // at or below the terminal antichain
            }
            let child_values = tree
                .children(n)
                .iter()
                .map(|&c| {
                    values[c].ok_or_else(|| {
                        Error::InvalidStoppingTime(format!(
                            "terminal antichain does not cover node `{}`",
                            tree.id(c)
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let choices = self.family.choices_at(n).expect("non-leaf has choices");
            values[n] = Some(maximize_step(choices, &child_values));
        }
        Ok(values)
    }
}

impl DynamicRisk for StableSetRisk {
    fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    fn risk(&self, x: &RandomVariable, sigma: &StoppingTime) -> Result<RandomVariable> {
        if !sigma.precedes(&self.tree, x.anchor()) {
            return Err(Error::OrderViolation(format!(
                "{} does not precede {}",
                stopping_time_label(&self.tree, sigma),
                stopping_time_label(&self.tree, x.anchor())
            )));
        }
        let values = self.backward_values(x)?;
        let out = sigma
            .atoms()
            .iter()
            .map(|&a| {
                values[a].ok_or_else(|| {
                    Error::InvalidStoppingTime(format!(
                        "no recursion value at atom `{}`",
                        self.tree.id(a)
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        RandomVariable::new(sigma.clone(), out)
    }

    fn tag(&self) -> &'static str {
        "stable-set"
    }
}

/// The induced penalty of a selection measure: the expected sum of per-step
/// costs over the window, infinite for measures that leave the choice sets.
pub struct StableSetPenalty {
    tree: ScenarioTree,
    family: RectangularFamily,
}

impl StableSetPenalty {
    pub fn new(tree: ScenarioTree, family: RectangularFamily) -> Self {
        StableSetPenalty { tree, family }
    }
}

impl PenaltyFn for StableSetPenalty {
    fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    fn penalty(&self, q: &Measure, nu: &StoppingTime, tau: &StoppingTime) -> Result<PenaltyRv> {
        let tree = &self.tree;
        if !nu.precedes(tree, tau) {
            return Err(Error::OrderViolation(format!(
                "{} does not precede {}",
                stopping_time_label(tree, nu),
                stopping_time_label(tree, tau)
            )));
        }
        let tau_cover = node_cover(tree, tau);
        let mut values = Vec::with_capacity(nu.atom_count());
        for &a in nu.atoms() {
            if q.mass(tree, a) <= 0.0 {
                values.push(ExtReal::Finite(0.0));
                continue;
            }
            // nodes strictly above the tau antichain, weakly below the atom
            let mut total = 0.0;
            let mut infinite = false;
            let mut stack = vec![a];
            while let Some(n) = stack.pop() {
                if tau_cover[n].is_some() {
                    continue; // reached the window's end
                }
                let w = q.seg_mass(tree, a, n);
                if w > 0.0 {
                    match self.family.step_cost(tree, q, n) {
                        ExtReal::Finite(c) => total += w * c,
                        ExtReal::Inf => {
                            infinite = true;
                            break;
                        }
                    }
                }
                stack.extend(tree.children(n).iter().copied());
            }
            values.push(if infinite {
                ExtReal::Inf
            } else {
                ExtReal::Finite(total)
            });
        }
        PenaltyRv::new(nu.clone(), values)
    }
}

/// A martingale-difference family on a symmetric binary tree: one-step
/// densities `1 + H * dM` with `|H| <= phi` and per-step cost `b * H^2` (the
/// discrete bracket increment weighted by `b`).
#[derive(Debug, Clone)]
pub struct DiscreteMartingaleFamily {
    /// Tilt bound per node; must satisfy `0 <= phi < 1` at non-leaf nodes.
    pub phi: Vec<f64>,
    /// Cost weight per node, nonnegative.
    pub b: Vec<f64>,
}

impl DiscreteMartingaleFamily {
    pub fn uniform(tree: &ScenarioTree, phi: f64, b: f64) -> Result<Self> {
        Self::new(
            tree,
            vec![phi; tree.node_count()],
            vec![b; tree.node_count()],
        )
    }

    pub fn new(tree: &ScenarioTree, phi: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if !tree.is_binomial_symmetric() {
            return Err(Error::InvalidModel(
                "martingale families need a symmetric binary tree".into(),
            ));
        }
        if phi.len() != tree.node_count() || b.len() != tree.node_count() {
            return Err(Error::InvalidModel(
                "one phi and one b value per node required".into(),
            ));
        }
        for n in 0..tree.node_count() {
            if tree.is_leaf(n) {
                continue;
            }
            if !(0.0..1.0).contains(&phi[n]) {
                return Err(Error::InvalidModel(format!(
                    "phi must satisfy 0 <= phi < 1 for positive densities, got {} at `{}`",
                    phi[n],
                    tree.id(n)
                )));
            }
            if b[n] < 0.0 || !b[n].is_finite() {
                return Err(Error::InvalidModel(format!(
                    "b must be nonnegative, got {} at `{}`",
                    b[n],
                    tree.id(n)
                )));
            }
        }
        Ok(DiscreteMartingaleFamily { phi, b })
    }
}

/// The rectangular family generated by a martingale-difference family: the
/// one-step set `{ q = (1 + H)/2 : |H| <= phi }` at cost `b * H^2`.
pub fn from_martingale_family(
    tree: &ScenarioTree,
    fam: &DiscreteMartingaleFamily,
) -> Result<RectangularFamily> {
    let choices = (0..tree.node_count())
        .map(|n| {
            (!tree.is_leaf(n)).then(|| NodeChoices::Interval {
                lo: 0.5 * (1.0 - fam.phi[n]),
                hi: 0.5 * (1.0 + fam.phi[n]),
                b: fam.b[n],
            })
        })
        .collect();
    RectangularFamily::from_node_choices(tree, choices)
}

/// One selected measure with its per-node step costs.
#[derive(Debug, Clone)]
pub struct Selection {
    pub measure: Measure,
    /// Cost incurred at each node's step (zero at leaves).
    pub cost: Vec<f64>,
}

/// Enumerates selection measures of the family; interval choice sets are
/// sampled on `interval_points` evenly spaced values (endpoints included).
pub fn enumerate_selections(
    tree: &ScenarioTree,
    family: &RectangularFamily,
    interval_points: usize,
) -> Result<Vec<Selection>> {
    let mut per_node: Vec<Vec<Choice>> = Vec::with_capacity(tree.node_count());
    for n in 0..tree.node_count() {
        match family.choices_at(n) {
            None => per_node.push(Vec::new()),
            Some(NodeChoices::Finite(list)) => per_node.push(list.clone()),
            Some(NodeChoices::Interval { lo, hi, b }) => {
                let k = interval_points.max(2);
                let list = (0..k)
                    .map(|i| {
                        let q = if hi > lo {
                            lo + (hi - lo) * (i as f64) / ((k - 1) as f64)
                        } else {
                            *lo
                        };
                        let h = 2.0 * q - 1.0;
                        Choice {
                            probs: vec![q, 1.0 - q],
                            cost: b * h * h,
                        }
                    })
                    .collect();
                per_node.push(list);
            }
        }
    }
    let active: Vec<usize> = (0..tree.node_count())
        .filter(|&n| !per_node[n].is_empty())
        .collect();
    let total: usize = active.iter().map(|&n| per_node[n].len()).product();
    if total > 500_000 {
        return Err(Error::InvalidModel(format!(
            "selection enumeration of {total} measures is too large"
        )));
    }
    let mut selections = Vec::with_capacity(total);
    let mut idx = vec![0usize; active.len()];
    loop {
        let mut edge = vec![1.0; tree.node_count()];
        let mut cost = vec![0.0; tree.node_count()];
        for (pos, &n) in active.iter().enumerate() {
            let ch = &per_node[n][idx[pos]];
            for (&c, &p) in tree.children(n).iter().zip(&ch.probs) {
                edge[c] = p;
            }
            cost[n] = ch.cost;
        }
        selections.push(Selection {
            measure: Measure::from_edges(tree, edge)?,
            cost,
        });
        let mut k = 0;
        loop {
            if k == active.len() {
                return Ok(selections);
            }
            idx[k] += 1;
            if idx[k] < per_node[active[k]].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probspace::DEFAULT_TOL;

    #[test]
    fn paste_is_idempotent_and_multiplicative() {
        let tree = ScenarioTree::binomial(2);
        let q = Measure::homogeneous_binary(&tree, 0.7).unwrap();
        let r = Measure::homogeneous_binary(&tree, 0.3).unwrap();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();

        let same = paste(&tree, &q, &q, &t0, &t1).unwrap();
        assert!(same.approx_eq(&q, 1e-15));

        let s = paste(&tree, &q, &r, &t0, &t1).unwrap();
        let uu = tree.index_of("uu").unwrap();
        assert!((s.mass(&tree, uu) - 0.3 * 0.7).abs() < 1e-15);

        // nu = sigma = 0 pastes everything from q
        let all_q = paste(&tree, &q, &r, &t0, &t0).unwrap();
        assert!(all_q.approx_eq(&q, 1e-15));
    }

    #[test]
    fn homogeneous_pair_is_not_stable() {
        let tree = ScenarioTree::binomial(2);
        let measures = vec![
            Measure::homogeneous_binary(&tree, 0.3).unwrap(),
            Measure::homogeneous_binary(&tree, 0.7).unwrap(),
        ];
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let report = check_stable(&tree, &measures, &[(t0, t1)]).unwrap();
        assert!(!report.stable);
        assert!(!report.missing.is_empty());
        // the missing paste mixes the two one-step probabilities
        let m = &report.missing[0].measure;
        let u = tree.index_of("u").unwrap();
        let uu = tree.index_of("uu").unwrap();
        assert_ne!(m.edge(u), m.edge(uu));
    }

    #[test]
    fn reference_singleton_is_stable() {
        let tree = ScenarioTree::binomial(2);
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let report =
            check_stable(&tree, &[tree.reference_measure()], &[(t0, t1)]).unwrap();
        assert!(report.stable);
    }

    #[test]
    fn selection_closure_is_stable() {
        let tree = ScenarioTree::binomial(2);
        let family = RectangularFamily::from_node_choices(
            &tree,
            (0..tree.node_count())
                .map(|n| {
                    (!tree.is_leaf(n)).then(|| {
                        NodeChoices::Finite(vec![
                            Choice {
                                probs: vec![0.4, 0.6],
                                cost: 0.0,
                            },
                            Choice {
                                probs: vec![0.6, 0.4],
                                cost: 0.0,
                            },
                        ])
                    })
                })
                .collect(),
        )
        .unwrap();
        let measures: Vec<Measure> = enumerate_selections(&tree, &family, 2)
            .unwrap()
            .into_iter()
            .map(|s| s.measure)
            .collect();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        let report = check_stable(
            &tree,
            &measures,
            &[(t0.clone(), t1.clone()), (t0, t2.clone()), (t1, t2)],
        )
        .unwrap();
        assert!(report.stable);
    }

    #[test]
    fn per_step_penalty_is_local_and_global_penalty_is_not() {
        let tree = ScenarioTree::binomial(2);
        let family = from_martingale_family(
            &tree,
            &DiscreteMartingaleFamily::uniform(&tree, 0.4, 1.0).unwrap(),
        )
        .unwrap();
        let penalty = StableSetPenalty::new(tree.clone(), family);

        // agree below u, differ below d
        let mut e1 = tree.reference_measure().edges().to_vec();
        let mut e2 = e1.clone();
        let du = tree.index_of("du").unwrap();
        let dd = tree.index_of("dd").unwrap();
        e1[du] = 0.6;
        e1[dd] = 0.4;
        e2[du] = 0.3;
        e2[dd] = 0.7;
        let q1 = Measure::from_edges(&tree, e1).unwrap();
        let q2 = Measure::from_edges(&tree, e2).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        let report = check_local(
            &penalty,
            &[(q1.clone(), q2.clone())],
            &[(t1.clone(), t2.clone())],
        )
        .unwrap();
        assert!(report.local, "violation {}", report.max_violation);

        struct TotalVariation {
            tree: ScenarioTree,
        }
        impl PenaltyFn for TotalVariation {
            fn tree(&self) -> &ScenarioTree {
                &self.tree
            }
            fn penalty(
                &self,
                q: &Measure,
                nu: &StoppingTime,
                _tau: &StoppingTime,
            ) -> Result<PenaltyRv> {
                let p = self.tree.reference_measure();
                let tv: f64 = self
                    .tree
                    .leaves()
                    .iter()
                    .map(|&l| (q.mass(&self.tree, l) - p.mass(&self.tree, l)).abs())
                    .sum::<f64>()
                    * 0.5;
                PenaltyRv::new(
                    nu.clone(),
                    vec![ExtReal::Finite(tv); nu.atom_count()],
                )
            }
        }
        let tv = TotalVariation { tree: tree.clone() };
        let report = check_local(&tv, &[(q1, q2)], &[(t1, t2)]).unwrap();
        assert!(!report.local);
        assert_eq!(report.witness.as_ref().unwrap().1, "u");
    }

    #[test]
    fn zero_penalty_is_local() {
        let tree = ScenarioTree::binomial(2);
        let family = RectangularFamily::interval_symmetric(&tree, 0.2, 0.0).unwrap();
        let penalty = StableSetPenalty::new(tree.clone(), family);
        let q1 = Measure::homogeneous_binary(&tree, 0.4).unwrap();
        let q2 = Measure::homogeneous_binary(&tree, 0.6).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        let report = check_local(&penalty, &[(q1, q2)], &[(t1, t2)]).unwrap();
        assert!(report.local);
    }

    #[test]
    fn reference_family_recursion_is_expectation() {
        let tree = ScenarioTree::binomial(2);
        let d = build_risk_from_stable(tree.clone(), RectangularFamily::reference(&tree)).unwrap();
        let x = RandomVariable::at_time(&tree, 2, vec![4.0, 2.0, 1.0, 3.0]).unwrap();
        for t in 0..2 {
            let sigma = StoppingTime::deterministic(&tree, t).unwrap();
            let rho = d.risk(&x, &sigma).unwrap();
            let e = cond_expectation(&tree, &tree.reference_measure(), &x.neg(), &sigma).unwrap();
            assert!(rho.max_abs_diff(&e).unwrap() < 1e-15);
        }
    }

    #[test]
    fn normalization_requires_zero_cost() {
        let tree = ScenarioTree::binomial(1);
        // interval [0.6, 0.8] with b > 0 has no zero-cost choice
        let family = RectangularFamily::from_node_choices(
            &tree,
            (0..tree.node_count())
                .map(|n| {
                    (!tree.is_leaf(n)).then(|| NodeChoices::Interval {
                        lo: 0.6,
                        hi: 0.8,
                        b: 1.0,
                    })
                })
                .collect(),
        )
        .unwrap();
        assert!(build_risk_from_stable(tree, family).is_err());
    }

    #[test]
    fn martingale_family_interval_and_cost() {
        let tree = ScenarioTree::binomial(2);
        let fam = DiscreteMartingaleFamily::uniform(&tree, 0.4, 1.0).unwrap();
        let rect = from_martingale_family(&tree, &fam).unwrap();
        match rect.choices_at(tree.root()).unwrap() {
            NodeChoices::Interval { lo, hi, b } => {
                assert!((lo - 0.3).abs() < 1e-15);
                assert!((hi - 0.7).abs() < 1e-15);
                assert_eq!(*b, 1.0);
            }
            _ => panic!("expected interval"),
        }
        // H = 0.4 tilts q to 0.7 at cost b H^2 = 0.16
        let q = Measure::homogeneous_binary(&tree, 0.7).unwrap();
        match rect.step_cost(&tree, &q, tree.root()) {
            ExtReal::Finite(c) => assert!((c - 0.16).abs() < 1e-12),
            ExtReal::Inf => panic!("tilt within bounds"),
        }
        // phi must stay below one
        assert!(DiscreteMartingaleFamily::uniform(&tree, 1.0, 0.0).is_err());
    }

    #[test]
    fn phi_zero_family_is_reference_only() {
        let tree = ScenarioTree::binomial(2);
        let fam = DiscreteMartingaleFamily::uniform(&tree, 0.0, 3.0).unwrap();
        let rect = from_martingale_family(&tree, &fam).unwrap();
        let d = build_risk_from_stable(tree.clone(), rect).unwrap();
        let x = RandomVariable::at_time(&tree, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let rho = d.risk(&x, &t0).unwrap();
        let e = cond_expectation(&tree, &tree.reference_measure(), &x.neg(), &t0).unwrap();
        assert!((rho.value(0) - e.value(0)).abs() < 1e-12);
    }

    #[test]
    fn selection_penalty_matches_expected_step_costs() {
        let tree = ScenarioTree::binomial(2);
        let fam = DiscreteMartingaleFamily::uniform(&tree, 0.4, 1.0).unwrap();
        let rect = from_martingale_family(&tree, &fam).unwrap();
        let penalty = StableSetPenalty::new(tree.clone(), rect);
        let q = Measure::homogeneous_binary(&tree, 0.7).unwrap();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        let a = penalty.penalty(&q, &t0, &t2).unwrap();
        // cost 0.16 at each of the two steps on every path
        assert!((a.value(0).finite().unwrap() - 0.32).abs() < 1e-12);

        // a measure outside the interval is infinitely penalized
        let far = Measure::homogeneous_binary(&tree, 0.9).unwrap();
        assert!(penalty.penalty(&far, &t0, &t2).unwrap().value(0).is_inf());
        let _ = DEFAULT_TOL;
    }
}
