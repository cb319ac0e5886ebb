//! Finite filtered probability spaces realized as scenario trees.
//!
//! A [`ScenarioTree`] carries everything at once: the sample space (its
//! leaves), the filtration (nodes at depth `t` are the atoms of `F_t`) and
//! the reference probability `P` (strictly positive transition probabilities
//! on edges). A [`StoppingTime`] is an antichain of nodes whose subtrees
//! cover every leaf; the stop nodes are the atoms of `F_sigma`. A
//! [`RandomVariable`] anchored at a stopping time holds one value per atom,
//! and a [`Measure`] is any `Q << P` given by per-edge transition
//! probabilities (zeros allowed).

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Children transition probabilities must sum to one within this tolerance.
pub const EDGE_SUM_TOL: f64 = 1e-12;
/// Total leaf mass of a measure must equal one within this tolerance.
pub const LEAF_MASS_TOL: f64 = 1e-10;
/// Default tolerance for comparisons of computed real values.
pub const DEFAULT_TOL: f64 = 1e-9;

/// On-disk description of a scenario tree.
///
/// `p` is the reference transition probability of the edge from the node's
/// parent and must be absent (or null) exactly for the root.
#[derive(Debug, Clone, Deserialize)]
pub struct TreeSpec {
    pub levels: usize,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub time: usize,
    pub parent: Option<String>,
    pub p: Option<f64>,
}

/// A finite scenario tree with uniform integer time grid `0..=T`.
///
/// Node depth equals its time index, all leaves sit at the horizon `T`, and
/// every reference edge probability is strictly positive, so `P` has full
/// support and any valid [`Measure`] is automatically absolutely continuous
/// with respect to it.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    levels: usize,
    ids: Vec<String>,
    times: Vec<usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    ref_edge: Vec<f64>,
    // depth-first preorder position and exclusive subtree end, used for
    // ancestor tests and the canonical atom order
    dfs_pos: Vec<usize>,
    dfs_end: Vec<usize>,
    by_time: Vec<Vec<usize>>,
    leaves: Vec<usize>,
    index_of: BTreeMap<String, usize>,
}

impl ScenarioTree {
    /// Builds and validates a tree from its spec.
    pub fn from_spec(spec: &TreeSpec) -> Result<Self> {
        if spec.levels == 0 {
            return Err(Error::InvalidTree {
                node: String::new(),
                reason: "levels must be at least 1".into(),
            });
        }
        let n = spec.nodes.len();
        if n == 0 {
            return Err(Error::InvalidTree {
                node: String::new(),
                reason: "no nodes".into(),
            });
        }
        let mut index_of = BTreeMap::new();
        for (i, node) in spec.nodes.iter().enumerate() {
            if index_of.insert(node.id.clone(), i).is_some() {
                return Err(Error::InvalidTree {
                    node: node.id.clone(),
                    reason: "duplicate node id".into(),
                });
            }
        }
        let mut parent = vec![None; n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut ref_edge = vec![1.0; n];
        let mut root = None;
        for (i, node) in spec.nodes.iter().enumerate() {
            match (&node.parent, node.p) {
                (None, _) => {
                    if node.time != 0 {
                        return Err(Error::InvalidTree {
                            node: node.id.clone(),
                            reason: "root must be at time 0".into(),
                        });
                    }
                    if root.replace(i).is_some() {
                        return Err(Error::InvalidTree {
                            node: node.id.clone(),
                            reason: "more than one root".into(),
                        });
                    }
                }
                (Some(pid), p) => {
                    let pi = *index_of.get(pid).ok_or_else(|| Error::InvalidTree {
                        node: node.id.clone(),
                        reason: format!("unknown parent `{pid}`"),
                    })?;
                    if spec.nodes[pi].time + 1 != node.time {
                        return Err(Error::InvalidTree {
                            node: node.id.clone(),
                            reason: "node time must be parent time + 1".into(),
                        });
                    }
                    let p = p.ok_or_else(|| Error::InvalidTree {
                        node: node.id.clone(),
                        reason: "missing edge probability".into(),
                    })?;
                    if !(p > 0.0) || !p.is_finite() {
                        return Err(Error::InvalidTree {
                            node: node.id.clone(),
                            reason: "P must have full support (edge probability must be > 0)"
                                .into(),
                        });
                    }
                    parent[i] = Some(pi);
                    children[pi].push(i);
                    ref_edge[i] = p;
                }
            }
        }
        let root = root.ok_or_else(|| Error::InvalidTree {
            node: String::new(),
            reason: "no root".into(),
        })?;

        let horizon = spec.levels - 1;
        for (i, node) in spec.nodes.iter().enumerate() {
            if node.time > horizon {
                return Err(Error::InvalidTree {
                    node: node.id.clone(),
                    reason: format!("time {} beyond horizon {horizon}", node.time),
                });
            }
            if children[i].is_empty() {
                if node.time != horizon {
                    return Err(Error::InvalidTree {
                        node: node.id.clone(),
                        reason: format!("leaf must be at the horizon {horizon}"),
                    });
                }
            } else {
                let s: f64 = children[i].iter().map(|&c| ref_edge[c]).sum();
                if (s - 1.0).abs() > EDGE_SUM_TOL {
                    return Err(Error::InvalidTree {
                        node: node.id.clone(),
                        reason: format!("children probabilities sum to {s}, expected 1"),
                    });
                }
            }
        }

        let mut tree = ScenarioTree {
            levels: spec.levels,
            ids: spec.nodes.iter().map(|s| s.id.clone()).collect(),
            times: spec.nodes.iter().map(|s| s.time).collect(),
            parent,
            children,
            ref_edge,
            dfs_pos: vec![0; n],
            dfs_end: vec![0; n],
            by_time: Vec::new(),
            leaves: Vec::new(),
            index_of,
        };
        tree.index_topology(root)?;
        Ok(tree)
    }

    /// Symmetric binomial tree with `periods` steps; children of `x` are
    /// named `xu` and `xd` (the root is `root` and its children are `u`, `d`),
    /// and every edge has probability 1/2. The first child is the up move.
    pub fn binomial(periods: usize) -> Self {
        Self::regular(periods, &["u", "d"], &[0.5, 0.5])
    }

    /// Regular tree where every non-leaf node has the same branch labels and
    /// reference probabilities.
    pub fn regular(periods: usize, labels: &[&str], probs: &[f64]) -> Self {
        assert_eq!(labels.len(), probs.len());
        let mut nodes = vec![NodeSpec {
            id: "root".into(),
            time: 0,
            parent: None,
            p: None,
        }];
        let mut frontier: Vec<String> = vec!["root".into()];
        for t in 1..=periods {
            let mut next = Vec::new();
            for pid in &frontier {
                for (label, &p) in labels.iter().zip(probs) {
                    let id = if pid == "root" {
                        (*label).to_string()
                    } else {
                        format!("{pid}{label}")
                    };
                    nodes.push(NodeSpec {
                        id: id.clone(),
                        time: t,
                        parent: Some(pid.clone()),
                        p: Some(p),
                    });
                    next.push(id);
                }
            }
            frontier = next;
        }
        Self::from_spec(&TreeSpec {
            levels: periods + 1,
            nodes,
        })
        .expect("regular tree is valid")
    }

    fn index_topology(&mut self, root: usize) -> Result<()> {
        // iterative preorder, children in listed order
        let mut stack = vec![root];
        let mut order = Vec::with_capacity(self.ids.len());
        while let Some(n) = stack.pop() {
            order.push(n);
            for &c in self.children[n].iter().rev() {
                stack.push(c);
            }
        }
        if order.len() != self.ids.len() {
            return Err(Error::InvalidTree {
                node: String::new(),
                reason: "nodes unreachable from the root".into(),
            });
        }
        for (pos, &n) in order.iter().enumerate() {
            self.dfs_pos[n] = pos;
        }
        // subtree of n occupies the half-open dfs interval [pos, end)
        for &n in order.iter().rev() {
            let mut end = self.dfs_pos[n] + 1;
            for &c in &self.children[n] {
                end = end.max(self.dfs_end[c]);
            }
            self.dfs_end[n] = end;
        }
        self.by_time = vec![Vec::new(); self.levels];
        for &n in &order {
            self.by_time[self.times[n]].push(n);
            if self.children[n].is_empty() {
                self.leaves.push(n);
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    /// Largest time index `T`.
    pub fn horizon(&self) -> usize {
        self.levels - 1
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn root(&self) -> usize {
        self.by_time[0][0]
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index_of.get(id).copied()
    }

    pub fn time(&self, node: usize) -> usize {
        self.times[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    /// Nodes at time `t` in canonical depth-first order.
    pub fn nodes_at(&self, t: usize) -> &[usize] {
        &self.by_time[t]
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    /// Reference transition probability of the edge into `node` (1 for the root).
    pub fn ref_edge(&self, node: usize) -> f64 {
        self.ref_edge[node]
    }

    pub fn dfs_pos(&self, node: usize) -> usize {
        self.dfs_pos[node]
    }

    pub fn is_ancestor_or_self(&self, anc: usize, node: usize) -> bool {
        self.dfs_pos[anc] <= self.dfs_pos[node] && self.dfs_pos[node] < self.dfs_end[anc]
    }

    /// True if every non-leaf node has exactly two equiprobable children.
    pub fn is_binomial_symmetric(&self) -> bool {
        self.ids.iter().enumerate().all(|(n, _)| {
            self.is_leaf(n)
                || (self.children[n].len() == 2
                    && self
                        .children[n]
                        .iter()
                        .all(|&c| (self.ref_edge[c] - 0.5).abs() <= EDGE_SUM_TOL))
        })
    }

    /// The reference measure `P`.
    pub fn reference_measure(&self) -> Measure {
        Measure {
            edge: self.ref_edge.clone(),
        }
    }
}

/// A stopping time as an antichain of stop nodes covering every leaf.
///
/// Its atoms (the atoms of `F_sigma`) are exactly the stop nodes, kept in
/// canonical depth-first order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoppingTime {
    stops: Vec<usize>,
}

impl StoppingTime {
    /// The deterministic time `t`: stops at every node of that level.
    pub fn deterministic(tree: &ScenarioTree, t: usize) -> Result<Self> {
        if t > tree.horizon() {
            return Err(Error::InvalidStoppingTime(format!(
                "time {t} beyond horizon {}",
                tree.horizon()
            )));
        }
        Ok(StoppingTime {
            stops: tree.nodes_at(t).to_vec(),
        })
    }

    /// Builds a stopping time from stop nodes, validating the antichain and
    /// coverage properties.
    pub fn from_indices(tree: &ScenarioTree, mut stops: Vec<usize>) -> Result<Self> {
        stops.sort_by_key(|&n| tree.dfs_pos(n));
        for w in stops.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidStoppingTime(format!(
                    "duplicate stop node `{}`",
                    tree.id(w[0])
                )));
            }
            if tree.is_ancestor_or_self(w[0], w[1]) {
                return Err(Error::InvalidStoppingTime(format!(
                    "not an antichain: `{}` is an ancestor of `{}`",
                    tree.id(w[0]),
                    tree.id(w[1])
                )));
            }
        }
        let st = StoppingTime { stops };
        for &leaf in tree.leaves() {
            if st.atom_containing(tree, leaf).is_none() {
                return Err(Error::InvalidStoppingTime(format!(
                    "leaf `{}` not covered by any stop node",
                    tree.id(leaf)
                )));
            }
        }
        Ok(st)
    }

    pub fn from_node_ids(tree: &ScenarioTree, ids: &[&str]) -> Result<Self> {
        let stops = ids
            .iter()
            .map(|id| {
                tree.index_of(id)
                    .ok_or_else(|| Error::InvalidStoppingTime(format!("unknown node `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(tree, stops)
    }

    /// Atoms of `F_sigma` in canonical depth-first order.
    pub fn atoms(&self) -> &[usize] {
        &self.stops
    }

    pub fn atom_count(&self) -> usize {
        self.stops.len()
    }

    pub fn atom_ids<'t>(&self, tree: &'t ScenarioTree) -> Vec<&'t str> {
        self.stops.iter().map(|&n| tree.id(n)).collect()
    }

    /// Index (into `atoms`) of the atom whose subtree contains `node`, if any.
    pub fn atom_containing(&self, tree: &ScenarioTree, node: usize) -> Option<usize> {
        self.stops
            .iter()
            .position(|&s| tree.is_ancestor_or_self(s, node))
    }

    /// `Some(t)` when the stopping time is the deterministic time `t`.
    pub fn deterministic_time(&self, tree: &ScenarioTree) -> Option<usize> {
        let t = tree.time(self.stops[0]);
        (self.stops.len() == tree.nodes_at(t).len()
            && self.stops.iter().all(|&n| tree.time(n) == t))
        .then_some(t)
    }

    /// Pointwise order: `self <= other` iff every atom of `other` lies weakly
    /// below an atom of `self`.
    pub fn precedes(&self, tree: &ScenarioTree, other: &StoppingTime) -> bool {
        other
            .stops
            .iter()
            .all(|&n| self.atom_containing(tree, n).is_some())
    }

    /// Pushes every stop node down by `d` levels (capped at the leaves).
    pub fn delay(&self, tree: &ScenarioTree, d: usize) -> StoppingTime {
        let mut stops = Vec::new();
        for &s in &self.stops {
            let target = (tree.time(s) + d).min(tree.horizon());
            let mut stack = vec![s];
            while let Some(n) = stack.pop() {
                if tree.time(n) == target || tree.is_leaf(n) {
                    stops.push(n);
                } else {
                    stack.extend(tree.children(n).iter().copied());
                }
            }
        }
        stops.sort_by_key(|&n| tree.dfs_pos(n));
        StoppingTime { stops }
    }

    fn descr(&self, tree: &ScenarioTree) -> String {
        match self.deterministic_time(tree) {
            Some(t) => format!("t={t}"),
            None => format!("{{{}}}", self.atom_ids(tree).join(",")),
        }
    }
}

/// Short human-readable label for a stopping time, used in reports.
pub fn stopping_time_label(tree: &ScenarioTree, st: &StoppingTime) -> String {
    st.descr(tree)
}

/// For each atom of `fine`, the index of the `coarse` atom containing it.
/// Fails when `coarse <= fine` does not hold.
pub fn atom_cover(
    tree: &ScenarioTree,
    coarse: &StoppingTime,
    fine: &StoppingTime,
) -> Result<Vec<usize>> {
    fine.atoms()
        .iter()
        .map(|&n| {
            coarse.atom_containing(tree, n).ok_or_else(|| {
                Error::OrderViolation(format!(
                    "atom `{}` not below any atom of the earlier stopping time",
                    tree.id(n)
                ))
            })
        })
        .collect()
}

/// For every node, the index of the `sigma` atom whose subtree contains it
/// (`None` for nodes strictly above the antichain).
pub fn node_cover(tree: &ScenarioTree, sigma: &StoppingTime) -> Vec<Option<usize>> {
    let mut cover = vec![None; tree.node_count()];
    for (k, &s) in sigma.atoms().iter().enumerate() {
        let mut stack = vec![s];
        while let Some(n) = stack.pop() {
            cover[n] = Some(k);
            stack.extend(tree.children(n).iter().copied());
        }
    }
    cover
}

/// An essentially bounded random variable measurable at its anchor: one
/// finite value per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVariable {
    anchor: StoppingTime,
    values: Vec<f64>,
}

impl RandomVariable {
    pub fn new(anchor: StoppingTime, values: Vec<f64>) -> Result<Self> {
        if values.len() != anchor.atom_count() {
            return Err(Error::AnchorMismatch(format!(
                "{} values for {} atoms",
                values.len(),
                anchor.atom_count()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::AnchorMismatch(format!("non-finite value {v}")));
        }
        Ok(RandomVariable { anchor, values })
    }

    /// Values listed in the canonical depth-first order of the atoms of time `t`.
    pub fn at_time(tree: &ScenarioTree, t: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(StoppingTime::deterministic(tree, t)?, values)
    }

    pub fn constant(anchor: StoppingTime, c: f64) -> Self {
        let n = anchor.atom_count();
        RandomVariable {
            anchor,
            values: vec![c; n],
        }
    }

    /// `scale * 1_A` for the atom at index `k`.
    pub fn indicator(anchor: StoppingTime, k: usize, scale: f64) -> Self {
        let mut values = vec![0.0; anchor.atom_count()];
        values[k] = scale;
        RandomVariable { anchor, values }
    }

    pub fn anchor(&self) -> &StoppingTime {
        &self.anchor
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, atom: usize) -> f64 {
        self.values[atom]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RandomVariable {
            anchor: self.anchor.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &RandomVariable, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.anchor != other.anchor {
            return Err(Error::AnchorMismatch(
                "operands anchored at different stopping times".into(),
            ));
        }
        Ok(RandomVariable {
            anchor: self.anchor.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &RandomVariable) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &RandomVariable) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    /// Reinterprets a coarse variable at a finer stopping time (constant on
    /// each coarse atom).
    pub fn lift(&self, tree: &ScenarioTree, fine: &StoppingTime) -> Result<Self> {
        let cover = atom_cover(tree, &self.anchor, fine)?;
        Ok(RandomVariable {
            anchor: fine.clone(),
            values: cover.iter().map(|&k| self.values[k]).collect(),
        })
    }

    /// Re-anchors at an earlier stopping time a variable that is (up to
    /// `tol`) constant on each coarse atom, keeping the first value seen.
    pub fn coarsen(
        &self,
        tree: &ScenarioTree,
        coarse: &StoppingTime,
        tol: f64,
    ) -> Result<Self> {
        let cover = atom_cover(tree, coarse, &self.anchor)?;
        let mut values = vec![f64::NAN; coarse.atom_count()];
        for (&k, &v) in cover.iter().zip(&self.values) {
            if values[k].is_nan() {
                values[k] = v;
            } else if (values[k] - v).abs() > tol {
                return Err(Error::AnchorMismatch(format!(
                    "variable is not measurable at the coarser stopping time \
                     (spread {} at atom `{}`)",
                    (values[k] - v).abs(),
                    tree.id(coarse.atoms()[k])
                )));
            }
        }
        RandomVariable::new(coarse.clone(), values)
    }

    pub fn max_abs_diff(&self, other: &RandomVariable) -> Result<f64> {
        if self.anchor != other.anchor {
            return Err(Error::AnchorMismatch(
                "comparing variables at different anchors".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// True when `self <= other + tol` at every atom.
    pub fn le(&self, other: &RandomVariable, tol: f64) -> Result<bool> {
        if self.anchor != other.anchor {
            return Err(Error::AnchorMismatch(
                "comparing variables at different anchors".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .all(|(a, b)| *a <= *b + tol))
    }
}

/// `X 1_A + Y 1_{A^c}` where `A` is the `sigma`-atom at index `atom`; both
/// variables must share their (finer) anchor.
pub fn blend_on_atom(
    tree: &ScenarioTree,
    x: &RandomVariable,
    y: &RandomVariable,
    sigma: &StoppingTime,
    atom: usize,
) -> Result<RandomVariable> {
    let cover = atom_cover(tree, sigma, x.anchor())?;
    x.zip_with(y, |_, _| 0.0)?; // anchor check
    let values = x
        .values()
        .iter()
        .zip(y.values())
        .zip(&cover)
        .map(|((&a, &b), &k)| if k == atom { a } else { b })
        .collect();
    RandomVariable::new(x.anchor().clone(), values)
}

/// On-disk measure description: transition probabilities that override the
/// reference ones edge by edge (keyed by the child node id).
#[derive(Debug, Clone, Deserialize)]
pub struct MeasureSpec {
    pub edges: BTreeMap<String, f64>,
}

/// A probability measure `Q << P` by per-edge transition probabilities.
///
/// Zeros are allowed; children probabilities must sum to one wherever the
/// measure has positive mass, and conditional expectations at null atoms are
/// zero by convention (such atoms are excluded from all `Q`-a.s. assertions).
#[derive(Debug, Clone)]
pub struct Measure {
    edge: Vec<f64>,
}

impl Measure {
    /// Starts from the reference transitions and overrides the listed edges.
    pub fn from_spec(tree: &ScenarioTree, spec: &MeasureSpec) -> Result<Self> {
        let mut edge = tree.reference_measure().edge;
        for (id, &p) in &spec.edges {
            let n = tree.index_of(id).ok_or_else(|| Error::InvalidMeasure {
                node: id.clone(),
                reason: "unknown node".into(),
            })?;
            if tree.parent(n).is_none() {
                return Err(Error::InvalidMeasure {
                    node: id.clone(),
                    reason: "root has no incoming edge".into(),
                });
            }
            edge[n] = p;
        }
        Self::from_edges(tree, edge)
    }

    /// Validates per-node transition sums (where mass is positive) and the
    /// total leaf mass.
    pub fn from_edges(tree: &ScenarioTree, edge: Vec<f64>) -> Result<Self> {
        if edge.len() != tree.node_count() {
            return Err(Error::InvalidMeasure {
                node: String::new(),
                reason: "one transition probability per node required".into(),
            });
        }
        for (n, &p) in edge.iter().enumerate() {
            if !(0.0..=1.0 + EDGE_SUM_TOL).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidMeasure {
                    node: tree.id(n).into(),
                    reason: format!("transition probability {p} outside [0, 1]"),
                });
            }
        }
        let m = Measure { edge };
        for n in 0..tree.node_count() {
            if !tree.is_leaf(n) && m.mass(tree, n) > 0.0 {
                let s: f64 = tree.children(n).iter().map(|&c| m.edge[c]).sum();
                if (s - 1.0).abs() > EDGE_SUM_TOL {
                    return Err(Error::InvalidMeasure {
                        node: tree.id(n).into(),
                        reason: format!("children probabilities sum to {s}, expected 1"),
                    });
                }
            }
        }
        let total: f64 = tree.leaves().iter().map(|&l| m.mass(tree, l)).sum();
        if (total - 1.0).abs() > LEAF_MASS_TOL {
            return Err(Error::InvalidMeasure {
                node: tree.id(tree.root()).into(),
                reason: format!("leaf masses sum to {total}, expected 1"),
            });
        }
        Ok(m)
    }

    /// Binary tree measure with the same up-probability at every node.
    pub fn homogeneous_binary(tree: &ScenarioTree, q_up: f64) -> Result<Self> {
        let mut edge = vec![1.0; tree.node_count()];
        for n in 0..tree.node_count() {
            let ch = tree.children(n);
            if ch.is_empty() {
                continue;
            }
            if ch.len() != 2 {
                return Err(Error::InvalidMeasure {
                    node: tree.id(n).into(),
                    reason: "homogeneous binary measure needs a binary tree".into(),
                });
            }
            edge[ch[0]] = q_up;
            edge[ch[1]] = 1.0 - q_up;
        }
        Self::from_edges(tree, edge)
    }

    /// Point mass on the path to `leaf`.
    pub fn dirac(tree: &ScenarioTree, leaf: usize) -> Result<Self> {
        let mut edge = vec![0.0; tree.node_count()];
        edge[tree.root()] = 1.0;
        let mut n = leaf;
        while let Some(p) = tree.parent(n) {
            edge[n] = 1.0;
            n = p;
        }
        Self::from_edges(tree, edge)
    }

    /// Transition probability of the edge into `node`.
    pub fn edge(&self, node: usize) -> f64 {
        self.edge[node]
    }

    pub fn edges(&self) -> &[f64] {
        &self.edge
    }

    /// Unconditional mass of `node`: product of edge probabilities from the root.
    pub fn mass(&self, tree: &ScenarioTree, node: usize) -> f64 {
        let mut m = 1.0;
        let mut n = node;
        while let Some(p) = tree.parent(n) {
            m *= self.edge[n];
            if m == 0.0 {
                return 0.0;
            }
            n = p;
        }
        m
    }

    /// Conditional mass of `node` given its ancestor: product of the edges in
    /// between.
    pub fn seg_mass(&self, tree: &ScenarioTree, anc: usize, node: usize) -> f64 {
        debug_assert!(tree.is_ancestor_or_self(anc, node));
        let mut m = 1.0;
        let mut n = node;
        while n != anc {
            m *= self.edge[n];
            n = tree.parent(n).expect("anc is an ancestor");
        }
        m
    }

    /// Restriction to `F_sigma`: the mass of each atom, in canonical order.
    pub fn restrict(&self, tree: &ScenarioTree, sigma: &StoppingTime) -> Vec<f64> {
        sigma
            .atoms()
            .iter()
            .map(|&n| self.mass(tree, n))
            .collect()
    }

    /// True when every transition probability is strictly positive (the
    /// measure is equivalent to `P`).
    pub fn is_equivalent(&self, tree: &ScenarioTree) -> bool {
        (0..tree.node_count()).all(|n| tree.parent(n).is_none() || self.edge[n] > 0.0)
    }

    pub fn approx_eq(&self, other: &Measure, tol: f64) -> bool {
        self.edge
            .iter()
            .zip(&other.edge)
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// `E_Q(X | F_sigma)` for `X` anchored at a later stopping time.
///
/// At a `sigma`-atom with positive `Q`-mass this is the `Q`-weighted average
/// of `X` over the atoms of the anchor below it; at `Q`-null atoms the value
/// is 0 by convention.
pub fn cond_expectation(
    tree: &ScenarioTree,
    q: &Measure,
    x: &RandomVariable,
    sigma: &StoppingTime,
) -> Result<RandomVariable> {
    let cover = atom_cover(tree, sigma, x.anchor())?;
    let atoms = sigma.atoms();
    let mut num = vec![0.0; atoms.len()];
    let mut den = vec![0.0; atoms.len()];
    for ((&fine, &k), &v) in x.anchor().atoms().iter().zip(&cover).zip(x.values()) {
        let w = q.seg_mass(tree, atoms[k], fine);
        num[k] += w * v;
        den[k] += w;
    }
    let values = atoms
        .iter()
        .zip(num.iter().zip(&den))
        .map(|(&a, (&s, &d))| {
            if d > 0.0 && q.mass(tree, a) > 0.0 {
                s / d
            } else {
                0.0
            }
        })
        .collect();
    RandomVariable::new(sigma.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_leaf() -> ScenarioTree {
        ScenarioTree::binomial(1)
    }

    fn four_leaf() -> ScenarioTree {
        ScenarioTree::binomial(2)
    }

    #[test]
    fn one_period_tree_atoms() {
        let tree = two_leaf();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        assert_eq!(t1.atom_ids(&tree), vec!["u", "d"]);
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        assert_eq!(t0.atom_ids(&tree), vec!["root"]);
    }

    #[test]
    fn binomial_leaf_masses() {
        let tree = four_leaf();
        let p = tree.reference_measure();
        for &l in tree.leaves() {
            assert!((p.mass(&tree, l) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn full_support_is_enforced() {
        let spec = TreeSpec {
            levels: 2,
            nodes: vec![
                NodeSpec {
                    id: "root".into(),
                    time: 0,
                    parent: None,
                    p: None,
                },
                NodeSpec {
                    id: "u".into(),
                    time: 1,
                    parent: Some("root".into()),
                    p: Some(1.0),
                },
                NodeSpec {
                    id: "d".into(),
                    time: 1,
                    parent: Some("root".into()),
                    p: Some(0.0),
                },
            ],
        };
        let err = ScenarioTree::from_spec(&spec).unwrap_err();
        assert!(err.to_string().contains("full support"), "{err}");
    }

    #[test]
    fn malformed_parentage_is_rejected() {
        let spec = TreeSpec {
            levels: 2,
            nodes: vec![
                NodeSpec {
                    id: "root".into(),
                    time: 0,
                    parent: None,
                    p: None,
                },
                NodeSpec {
                    id: "u".into(),
                    time: 1,
                    parent: Some("nope".into()),
                    p: Some(1.0),
                },
            ],
        };
        assert!(ScenarioTree::from_spec(&spec).is_err());
    }

    #[test]
    fn mixed_stopping_time_atoms() {
        let tree = four_leaf();
        // stop at u at time 1, else at time 2
        let st = StoppingTime::from_node_ids(&tree, &["u", "du", "dd"]).unwrap();
        assert_eq!(st.atom_ids(&tree), vec!["u", "du", "dd"]);
        assert!(st.deterministic_time(&tree).is_none());
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        assert!(t0.precedes(&tree, &st));
        assert!(st.precedes(&tree, &t2));
        assert!(!st.precedes(&tree, &StoppingTime::deterministic(&tree, 1).unwrap()));
    }

    #[test]
    fn antichain_violations_are_rejected() {
        let tree = four_leaf();
        assert!(StoppingTime::from_node_ids(&tree, &["u", "uu", "du", "dd"]).is_err());
        // missing coverage of the d subtree
        assert!(StoppingTime::from_node_ids(&tree, &["u"]).is_err());
    }

    #[test]
    fn cond_expectation_time_zero_symmetric() {
        let tree = two_leaf();
        let x = RandomVariable::at_time(&tree, 1, vec![1.0, -1.0]).unwrap();
        let p = tree.reference_measure();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let e = cond_expectation(&tree, &p, &x, &t0).unwrap();
        assert!(e.value(0).abs() < 1e-15);
    }

    #[test]
    fn cond_expectation_weighted_average() {
        let tree = four_leaf();
        let x = RandomVariable::at_time(&tree, 2, vec![4.0, 2.0, 1.0, 3.0]).unwrap();
        let p = tree.reference_measure();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let e = cond_expectation(&tree, &p, &x, &t1).unwrap();
        assert_eq!(e.values(), &[3.0, 2.0]);
    }

    #[test]
    fn cond_expectation_null_atom_convention() {
        let tree = two_leaf();
        let q = Measure::homogeneous_binary(&tree, 0.0).unwrap();
        let x = RandomVariable::at_time(&tree, 1, vec![5.0, 7.0]).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let e = cond_expectation(&tree, &q, &x, &t1).unwrap();
        // projection at the Q-positive atom, 0 at the null atom
        assert_eq!(e.values(), &[0.0, 7.0]);
    }

    #[test]
    fn restrict_examples() {
        let tree = four_leaf();
        let q = Measure::homogeneous_binary(&tree, 0.3).unwrap();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        assert_eq!(q.restrict(&tree, &t0), vec![1.0]);
        let r = q.restrict(&tree, &t1);
        assert!((r[0] - 0.3).abs() < 1e-15 && (r[1] - 0.7).abs() < 1e-15);

        // two measures differing only after time 1 restrict identically at time 1
        let mut edge = q.edges().to_vec();
        let uu = tree.index_of("uu").unwrap();
        let ud = tree.index_of("ud").unwrap();
        edge[uu] = 0.9;
        edge[ud] = 0.1;
        let q2 = Measure::from_edges(&tree, edge).unwrap();
        assert_eq!(q.restrict(&tree, &t1), q2.restrict(&tree, &t1));
    }

    #[test]
    fn lift_and_blend() {
        let tree = four_leaf();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        let z = RandomVariable::new(t1.clone(), vec![1.0, 2.0]).unwrap();
        let lifted = z.lift(&tree, &t2).unwrap();
        assert_eq!(lifted.values(), &[1.0, 1.0, 2.0, 2.0]);

        let x = RandomVariable::constant(t2.clone(), 9.0);
        let y = RandomVariable::constant(t2.clone(), -9.0);
        let b = blend_on_atom(&tree, &x, &y, &t1, 0).unwrap();
        assert_eq!(b.values(), &[9.0, 9.0, -9.0, -9.0]);
    }

    #[test]
    fn measure_spec_overrides_reference() {
        let tree = four_leaf();
        let mut edges = BTreeMap::new();
        edges.insert("u".to_string(), 0.3);
        edges.insert("d".to_string(), 0.7);
        let q = Measure::from_spec(&tree, &MeasureSpec { edges }).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        assert_eq!(q.restrict(&tree, &t1), vec![0.3, 0.7]);
        // unspecified edges keep the reference probabilities
        assert_eq!(q.edge(tree.index_of("uu").unwrap()), 0.5);
    }

    #[test]
    fn invalid_measure_sums_are_rejected() {
        let tree = two_leaf();
        let mut edges = BTreeMap::new();
        edges.insert("u".to_string(), 0.6);
        edges.insert("d".to_string(), 0.6);
        assert!(Measure::from_spec(&tree, &MeasureSpec { edges }).is_err());
    }

    #[test]
    fn delay_caps_at_leaves() {
        let tree = four_leaf();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        assert_eq!(
            t0.delay(&tree, 1),
            StoppingTime::deterministic(&tree, 1).unwrap()
        );
        assert_eq!(
            t0.delay(&tree, 5),
            StoppingTime::deterministic(&tree, 2).unwrap()
        );
    }
}
