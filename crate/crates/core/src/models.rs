//! Concrete dynamic risk measures: the entropic family with multiplicative
//! thresholds, and one-step backward recursions driven by a convex generator
//! on symmetric binomial trees.
//!
//! The entropic measure is evaluated in closed form under the reference
//! measure; its minimal penalty is the conditional relative entropy shifted
//! by the log-threshold. The recursion models carry the slope of the two-point
//! martingale representation into a driver `g(t, z)`, which reproduces the
//! entropic measure in the quadratic case (as the step size shrinks) and the
//! rectangular worst case exactly in the `mu |z|` case.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::probspace::{
    node_cover, Measure, RandomVariable, ScenarioTree, StoppingTime, stopping_time_label,
};
use crate::riskcore::{
    DualFamily, DualMember, DynamicRisk, ExtReal, Penalty, PenaltyFn, PenaltyRv,
};

/// Threshold family `g_{s,t}`, stored through its logarithm.
#[derive(Debug, Clone)]
pub enum Thresholds {
    /// `log g_{s,t} = lambda * (t - s)`; the additive (consistent) family.
    Lambda(f64),
    /// Explicit table of `log g_{s,t}` per pair `s <= t`.
    Table(BTreeMap<(usize, usize), f64>),
}

/// The entropic risk measure `(1/alpha) [ln E(e^{-alpha X} | F_s) - ln g_{s,t}]`.
#[derive(Debug, Clone)]
pub struct EntropicSpec {
    alpha: f64,
    thresholds: Thresholds,
}

/// On-disk entropic description.
#[derive(Debug, Clone, Deserialize)]
pub struct EntropicSpecJson {
    pub alpha: f64,
    pub log_g: LogGSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LogGSpec {
    Lambda { lambda: f64 },
    Pairs { pairs: BTreeMap<String, f64> },
}

impl EntropicSpec {
    pub fn new(alpha: f64, thresholds: Thresholds) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidModel(format!(
                "risk aversion must be positive, got {alpha}"
            )));
        }
        if let Thresholds::Table(table) = &thresholds {
            for (&(s, t), &v) in table {
                if s > t {
                    return Err(Error::InvalidModel(format!(
                        "threshold pair ({s},{t}) out of order"
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "log threshold at ({s},{t}) must be finite"
                    )));
                }
                if s == t && v != 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "g must be 1 on the diagonal, got log g = {v} at ({s},{s})"
                    )));
                }
            }
        }
        Ok(EntropicSpec { alpha, thresholds })
    }

    /// Normalized entropic measure (`g = 1`).
    pub fn standard(alpha: f64) -> Result<Self> {
        Self::exponential(alpha, 0.0)
    }

    /// The additive family `g_{s,t} = e^{lambda (t - s)}`.
    pub fn exponential(alpha: f64, lambda: f64) -> Result<Self> {
        Self::new(alpha, Thresholds::Lambda(lambda))
    }

    /// A stationary threshold `g_{s,t} = h(t - s)` tabulated up to `horizon`.
    pub fn from_gap_fn(alpha: f64, horizon: usize, h: impl Fn(usize) -> f64) -> Result<Self> {
        let mut table = BTreeMap::new();
        for s in 0..=horizon {
            for t in s..=horizon {
                let g = h(t - s);
                if !(g > 0.0) || !g.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "threshold must be strictly positive, got {g} at gap {}",
                        t - s
                    )));
                }
                table.insert((s, t), g.ln());
            }
        }
        Self::new(alpha, Thresholds::Table(table))
    }

    pub fn from_json(spec: &EntropicSpecJson) -> Result<Self> {
        let thresholds = match &spec.log_g {
            LogGSpec::Lambda { lambda } => Thresholds::Lambda(*lambda),
            LogGSpec::Pairs { pairs } => {
                let mut table = BTreeMap::new();
                for (key, &v) in pairs {
                    let (s, t) = key.split_once(',').ok_or_else(|| {
                        Error::InvalidModel(format!("threshold key `{key}` is not `s,t`"))
                    })?;
                    let parse = |x: &str| {
                        x.trim().parse::<usize>().map_err(|_| {
                            Error::InvalidModel(format!("threshold key `{key}` is not `s,t`"))
                        })
                    };
                    table.insert((parse(s)?, parse(t)?), v);
                }
                Thresholds::Table(table)
            }
        };
        Self::new(spec.alpha, thresholds)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn log_g(&self, s: usize, t: usize) -> Result<f64> {
        if s > t {
            return Err(Error::InvalidModel(format!(
                "threshold requested for s={s} > t={t}"
            )));
        }
        match &self.thresholds {
            Thresholds::Lambda(l) => Ok(l * (t - s) as f64),
            Thresholds::Table(table) => table.get(&(s, t)).copied().ok_or_else(|| {
                Error::InvalidModel(format!("no threshold tabulated for ({s},{t})"))
            }),
        }
    }
}

fn deterministic_anchor_time(tree: &ScenarioTree, tau: &StoppingTime) -> Result<usize> {
    tau.deterministic_time(tree).ok_or_else(|| {
        Error::Unsupported(format!(
            "entropic thresholds need a deterministic horizon, got {}",
            stopping_time_label(tree, tau)
        ))
    })
}

/// Closed-form entropic evaluation under the reference measure. `sigma` may
/// be a genuine stopping time (the threshold is read per atom at its time);
/// the anchor of `x` must be deterministic.
pub fn entropic_eval(
    tree: &ScenarioTree,
    spec: &EntropicSpec,
    x: &RandomVariable,
    sigma: &StoppingTime,
) -> Result<RandomVariable> {
    let tau = x.anchor();
    if !sigma.precedes(tree, tau) {
        return Err(Error::OrderViolation(format!(
            "{} does not precede {}",
            stopping_time_label(tree, sigma),
            stopping_time_label(tree, tau)
        )));
    }
    let t_end = deterministic_anchor_time(tree, tau)?;
    let p = tree.reference_measure();
    let cover = crate::probspace::atom_cover(tree, sigma, tau)?;
    let alpha = spec.alpha;
    let mut values = Vec::with_capacity(sigma.atom_count());
    for (k, &a) in sigma.atoms().iter().enumerate() {
        // log-sum-exp with max shift for stability
        let mut shift = f64::NEG_INFINITY;
        for ((&m, &c), &v) in tau.atoms().iter().zip(&cover).zip(x.values()) {
            if c == k {
                shift = shift.max(-alpha * v);
                let _ = m;
            }
        }
        let mut acc = 0.0;
        for ((&m, &c), &v) in tau.atoms().iter().zip(&cover).zip(x.values()) {
            if c == k {
                acc += p.seg_mass(tree, a, m) * (-alpha * v - shift).exp();
            }
        }
        let lse = acc.ln() + shift;
        values.push((lse - spec.log_g(tree.time(a), t_end)?) / alpha);
    }
    RandomVariable::new(sigma.clone(), values)
}

/// The entropic dynamic risk measure.
#[derive(Debug, Clone)]
pub struct EntropicRisk {
    tree: ScenarioTree,
    spec: EntropicSpec,
}

impl EntropicRisk {
    pub fn new(tree: ScenarioTree, spec: EntropicSpec) -> Self {
        EntropicRisk { tree, spec }
    }

    pub fn spec(&self) -> &EntropicSpec {
        &self.spec
    }
}

impl DynamicRisk for EntropicRisk {
    fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    fn risk(&self, x: &RandomVariable, sigma: &StoppingTime) -> Result<RandomVariable> {
        entropic_eval(&self.tree, &self.spec, x, sigma)
    }

    fn tag(&self) -> &'static str {
        "entropic"
    }
}

/// Minimal penalty of the entropic measure: the conditional relative entropy
/// of `q` over the window plus the log-threshold, scaled by `1/alpha`. The
/// threshold enters with a plus sign: lowering the risk by `ln(g)/alpha`
/// raises every penalty by the same amount in the dual. Zero at `q`-null
/// atoms by convention.
pub fn entropic_penalty(
    tree: &ScenarioTree,
    spec: &EntropicSpec,
    q: &Measure,
    sigma: &StoppingTime,
    tau: &StoppingTime,
) -> Result<PenaltyRv> {
    if !sigma.precedes(tree, tau) {
        return Err(Error::OrderViolation(format!(
            "{} does not precede {}",
            stopping_time_label(tree, sigma),
            stopping_time_label(tree, tau)
        )));
    }
    let t_end = deterministic_anchor_time(tree, tau)?;
    let p = tree.reference_measure();
    let cover = crate::probspace::atom_cover(tree, sigma, tau)?;
    let mut values = Vec::with_capacity(sigma.atom_count());
    for (k, &a) in sigma.atoms().iter().enumerate() {
        if q.mass(tree, a) <= 0.0 {
            values.push(ExtReal::Finite(0.0));
            continue;
        }
        let mut rel_ent = 0.0;
        for (&m, &c) in tau.atoms().iter().zip(&cover) {
            if c == k {
                let qm = q.seg_mass(tree, a, m);
                if qm > 0.0 {
                    rel_ent += qm * (qm / p.seg_mass(tree, a, m)).ln();
                }
            }
        }
        values.push(ExtReal::Finite(
            (rel_ent + spec.log_g(tree.time(a), t_end)?) / spec.alpha,
        ));
    }
    PenaltyRv::new(sigma.clone(), values)
}

/// The entropic minimal penalty as a [`PenaltyFn`].
#[derive(Debug, Clone)]
pub struct EntropicPenalty {
    tree: ScenarioTree,
    spec: EntropicSpec,
}

impl EntropicPenalty {
    pub fn new(tree: ScenarioTree, spec: EntropicSpec) -> Self {
        EntropicPenalty { tree, spec }
    }
}

impl PenaltyFn for EntropicPenalty {
    fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    fn penalty(&self, q: &Measure, nu: &StoppingTime, tau: &StoppingTime) -> Result<PenaltyRv> {
        entropic_penalty(&self.tree, &self.spec, q, nu, tau)
    }
}

/// A dual family representing the entropic measure on a sample of measures:
/// the reference measure plus the given extras, each carrying its closed-form
/// penalty per atom.
pub fn entropic_dual_family(
    tree: &ScenarioTree,
    spec: &EntropicSpec,
    sigma: &StoppingTime,
    tau: &StoppingTime,
    extras: &[Measure],
) -> Result<DualFamily> {
    let mut members = Vec::with_capacity(extras.len() + 1);
    for q in std::iter::once(&tree.reference_measure()).chain(extras) {
        let pen = entropic_penalty(tree, spec, q, sigma, tau)?;
        let map = sigma
            .atoms()
            .iter()
            .zip(pen.values())
            .map(|(&a, &v)| (tree.id(a).to_string(), v))
            .collect();
        members.push(DualMember {
            measure: q.clone(),
            penalty: Penalty::PerAtom(map),
        });
    }
    DualFamily::new(members)
}

/// Log-additivity report for a threshold family.
#[derive(Debug, Clone)]
pub struct ThresholdReport {
    pub consistent: bool,
    /// Largest additivity defect `|log g_{r,t} - log g_{r,s} - log g_{s,t}|`.
    pub defect: f64,
    pub worst: (usize, usize, usize),
}

/// Checks `log g_{r,t} = log g_{r,s} + log g_{s,t}` over all triples up to the
/// horizon; exact additivity (within 1e-12) is the consistency criterion for
/// the entropic family.
pub fn threshold_is_consistent(spec: &EntropicSpec, horizon: usize) -> Result<ThresholdReport> {
    let mut defect: f64 = 0.0;
    let mut worst = (0, 0, 0);
    for r in 0..=horizon {
        for s in r..=horizon {
            for t in s..=horizon {
                let d = (spec.log_g(r, t)? - spec.log_g(r, s)? - spec.log_g(s, t)?).abs();
                if d > defect {
                    defect = d;
                    worst = (r, s, t);
                }
            }
        }
    }
    Ok(ThresholdReport {
        consistent: defect <= 1e-12,
        defect,
        worst,
    })
}

/// Generator of a one-step backward recursion, acting on the slope of the
/// two-point martingale representation.
#[derive(Debug, Clone)]
pub enum DriverKind {
    Zero,
    /// `g(z) = mu |z|`.
    Abs { mu: f64 },
    /// `g(z) = (alpha / 2) z^2`.
    Quad { alpha: f64 },
    /// Piecewise-linear convex interpolation of `(z, g)` points.
    Table { points: Vec<(f64, f64)> },
}

#[derive(Debug, Clone)]
pub struct DriverSpec {
    kind: DriverKind,
    dt: f64,
    zero_at_zero: bool,
}

/// On-disk driver description.
#[derive(Debug, Clone, Deserialize)]
pub struct DriverSpecJson {
    pub kind: String,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub dt: f64,
    #[serde(default)]
    pub points: Option<Vec<(f64, f64)>>,
}

impl DriverSpec {
    pub fn new(kind: DriverKind, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidDriver(format!(
                "step size must be positive, got {dt}"
            )));
        }
        match &kind {
            DriverKind::Abs { mu } if *mu < 0.0 || !mu.is_finite() => {
                return Err(Error::InvalidDriver(format!("mu must be nonnegative, got {mu}")));
            }
            DriverKind::Quad { alpha } if *alpha < 0.0 || !alpha.is_finite() => {
                return Err(Error::InvalidDriver(format!(
                    "alpha must be nonnegative, got {alpha}"
                )));
            }
            DriverKind::Table { points } => {
                if points.len() < 2 {
                    return Err(Error::InvalidDriver(
                        "table driver needs at least two points".into(),
                    ));
                }
                for w in points.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::InvalidDriver(
                            "table points must have strictly increasing z".into(),
                        ));
                    }
                }
                // convexity spot check on the tabulated grid
                for w in points.windows(3) {
                    let s1 = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                    let s2 = (w[2].1 - w[1].1) / (w[2].0 - w[1].0);
                    if s2 < s1 - 1e-12 {
                        return Err(Error::InvalidDriver(
                            "table driver is not convex on its grid".into(),
                        ));
                    }
                }
            }
            _ => {}
        }
        let mut spec = DriverSpec {
            kind,
            dt,
            zero_at_zero: true,
        };
        spec.zero_at_zero = spec.eval(0, 0.0).abs() <= 1e-12;
        Ok(spec)
    }

    pub fn from_json(json: &DriverSpecJson) -> Result<Self> {
        let kind = match json.kind.as_str() {
            "zero" => DriverKind::Zero,
            "abs" => DriverKind::Abs {
                mu: json.mu.ok_or_else(|| {
                    Error::InvalidDriver("abs driver needs field `mu`".into())
                })?,
            },
            "quad" => DriverKind::Quad {
                alpha: json.alpha.ok_or_else(|| {
                    Error::InvalidDriver("quad driver needs field `alpha`".into())
                })?,
            },
            "table" => DriverKind::Table {
                points: json.points.clone().ok_or_else(|| {
                    Error::InvalidDriver("table driver needs field `points`".into())
                })?,
            },
            other => {
                return Err(Error::InvalidDriver(format!(
                    "unknown driver kind `{other}`"
                )))
            }
        };
        Self::new(kind, json.dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn kind(&self) -> &DriverKind {
        &self.kind
    }

    /// True when constants pass through the recursion unchanged.
    pub fn vanishes_at_zero(&self) -> bool {
        self.zero_at_zero
    }

    /// `g(t, z)`; all built-in kinds are time-homogeneous.
    pub fn eval(&self, _t_idx: usize, z: f64) -> f64 {
        match &self.kind {
            DriverKind::Zero => 0.0,
            DriverKind::Abs { mu } => mu * z.abs(),
            DriverKind::Quad { alpha } => 0.5 * alpha * z * z,
            DriverKind::Table { points } => {
                let first = points.first().unwrap();
                let last = points.last().unwrap();
                if z <= first.0 {
                    let s = (points[1].1 - first.1) / (points[1].0 - first.0);
                    return first.1 + s * (z - first.0);
                }
                if z >= last.0 {
                    let prev = &points[points.len() - 2];
                    let s = (last.1 - prev.1) / (last.0 - prev.0);
                    return last.1 + s * (z - last.0);
                }
                let i = points.partition_point(|p| p.0 <= z).max(1);
                let (z0, g0) = points[i - 1];
                let (z1, g1) = points[i.min(points.len() - 1)];
                g0 + (g1 - g0) * (z - z0) / (z1 - z0)
            }
        }
    }

    pub fn is_convex_on_grid(&self, zs: &[f64]) -> bool {
        let mut prev_slope = f64::NEG_INFINITY;
        for w in zs.windows(2) {
            let s = (self.eval(0, w[1]) - self.eval(0, w[0])) / (w[1] - w[0]);
            if s < prev_slope - 1e-12 {
                return false;
            }
            prev_slope = s;
        }
        true
    }
}

/// Solution of the backward recursion: value and slope per node.
#[derive(Debug, Clone)]
pub struct BsdeProcess {
    /// Value at every node (indexed by node).
    pub y: Vec<f64>,
    /// Representation slope at every non-terminal node (zero at leaves).
    pub z: Vec<f64>,
}

fn require_binomial(tree: &ScenarioTree) -> Result<()> {
    if !tree.is_binomial_symmetric() {
        return Err(Error::InvalidDriver(
            "the recursion needs a symmetric binary tree".into(),
        ));
    }
    Ok(())
}

/// Solves the backward recursion with terminal condition `xi` (anchored at
/// the horizon): `y = xi` at the leaves, and one step back
/// `z = (y_up - y_down) / (2 sqrt(dt))`, `y = (y_up + y_down)/2 + g(t, z) dt`.
/// The first child of each node is the up move.
pub fn solve_bsde(
    tree: &ScenarioTree,
    driver: &DriverSpec,
    xi: &RandomVariable,
) -> Result<BsdeProcess> {
    require_binomial(tree)?;
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;
    if xi.anchor() != &horizon {
        return Err(Error::InvalidDriver(
            "terminal condition must be anchored at the horizon".into(),
        ));
    }
    let sqrt_dt = driver.dt().sqrt();
    let mut y = vec![0.0; tree.node_count()];
    let mut z = vec![0.0; tree.node_count()];
    for (&l, &v) in horizon.atoms().iter().zip(xi.values()) {
        y[l] = v;
    }
    for t in (0..tree.horizon()).rev() {
        for &n in tree.nodes_at(t) {
            let up = y[tree.children(n)[0]];
            let down = y[tree.children(n)[1]];
            let slope = (up - down) / (2.0 * sqrt_dt);
            z[n] = slope;
            y[n] = 0.5 * (up + down) + driver.eval(t, slope) * driver.dt();
        }
    }
    Ok(BsdeProcess { y, z })
}

/// The dynamic risk measure induced by a driver: the recursion is run on the
/// negated position, so that a zero driver reproduces the conditional
/// expectation of `-X` and constants pass through whenever `g(t, 0) = 0`.
#[derive(Debug, Clone)]
pub struct BsdeRisk {
    tree: ScenarioTree,
    driver: DriverSpec,
}

impl BsdeRisk {
    pub fn new(tree: ScenarioTree, driver: DriverSpec) -> Result<Self> {
        require_binomial(&tree)?;
        Ok(BsdeRisk { tree, driver })
    }

    pub fn driver(&self) -> &DriverSpec {
        &self.driver
    }
}

impl DynamicRisk for BsdeRisk {
    fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    fn risk(&self, x: &RandomVariable, sigma: &StoppingTime) -> Result<RandomVariable> {
        let tree = &self.tree;
        let tau = x.anchor();
        if !sigma.precedes(tree, tau) {
            return Err(Error::OrderViolation(format!(
                "{} does not precede {}",
                stopping_time_label(tree, sigma),
                stopping_time_label(tree, tau)
            )));
        }
        // recursion between tau and sigma with terminal -x
        let cover = node_cover(tree, tau);
        let mut values: Vec<Option<f64>> = vec![None; tree.node_count()];
        for (&a, &v) in tau.atoms().iter().zip(x.values()) {
            values[a] = Some(-v);
        }
        let sqrt_dt = self.driver.dt().sqrt();
        for t in (0..tree.horizon()).rev() {
            for &n in tree.nodes_at(t) {
                if cover[n].is_some() || tree.is_leaf(n) {
                    continue;
                }
                let ch = tree.children(n);
                if let (Some(up), Some(down)) = (values[ch[0]], values[ch[1]]) {
                    let slope = (up - down) / (2.0 * sqrt_dt);
                    values[n] =
                        Some(0.5 * (up + down) + self.driver.eval(t, slope) * self.driver.dt());
                }
            }
        }
        let out = sigma
            .atoms()
            .iter()
            .map(|&a| {
                values[a].ok_or_else(|| {
                    Error::InvalidStoppingTime(format!(
                        "no recursion value at atom `{}`",
                        tree.id(a)
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        RandomVariable::new(sigma.clone(), out)
    }

    fn tag(&self) -> &'static str {
        "bsde"
    }
}

/// Root value of the driver recursion on a recombining symmetric lattice with
/// `n` steps of size `dt`; `terminal[j]` is the value after `j` up moves.
/// Mathematically identical to the tree recursion whenever the terminal data
/// depends on the path only through its endpoint.
pub fn lattice_driver_root(n: usize, dt: f64, driver: &DriverSpec, terminal: &[f64]) -> f64 {
    assert_eq!(terminal.len(), n + 1);
    let sqrt_dt = dt.sqrt();
    let mut y = terminal.to_vec();
    for t in (0..n).rev() {
        for j in 0..=t {
            let up = y[j + 1];
            let down = y[j];
            let z = (up - down) / (2.0 * sqrt_dt);
            y[j] = 0.5 * (up + down) + driver.eval(t, z) * dt;
        }
        y.truncate(t + 1);
    }
    y[0]
}

/// Root value of the exact entropic recursion on the same lattice.
pub fn lattice_entropic_root(n: usize, alpha: f64, terminal: &[f64]) -> f64 {
    let mut y = terminal.to_vec();
    for t in (0..n).rev() {
        for j in 0..=t {
            let up = y[j + 1];
            let down = y[j];
            let shift = up.max(down);
            y[j] = ((0.5 * ((alpha * (up - shift)).exp() + (alpha * (down - shift)).exp())).ln()
                + alpha * shift)
                / alpha;
        }
        y.truncate(t + 1);
    }
    y[0]
}

/// Root risk `rho_{0,T}(X)` of the driver recursion on a lattice, for a
/// terminal position given by `payoff` of the scaled endpoint
/// `x = (2 j - n) sqrt(dt)`.
pub fn lattice_risk_pair(
    n: usize,
    dt: f64,
    driver: &DriverSpec,
    alpha: f64,
    payoff: impl Fn(f64) -> f64,
) -> (f64, f64) {
    let sqrt_dt = dt.sqrt();
    let terminal: Vec<f64> = (0..=n)
        .map(|j| -payoff((2.0 * j as f64 - n as f64) * sqrt_dt))
        .collect();
    (
        lattice_driver_root(n, dt, driver, &terminal),
        lattice_entropic_root(n, alpha, &terminal),
    )
}
