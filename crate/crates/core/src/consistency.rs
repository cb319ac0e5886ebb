//! Checkers for dynamic risk measures: composition across stopping times,
//! the additive cocycle identity of minimal penalties, the supermartingale
//! and restriction properties, zero-penalty measures, non-degeneracy and
//! risk-process verification.
//!
//! Each checker reports the maximal residual it observed together with a
//! witness. Batteries are finite, so a pass is falsification-grade evidence
//! while a fail is a certified counterexample. Atoms where a penalty term is
//! infinite are skipped and counted, matching the finiteness hypotheses of
//! the statements being checked.

use crate::battery::{default_battery, sample_measures};
use crate::error::{Error, Result};
use crate::probspace::{
    atom_cover, Measure, RandomVariable, ScenarioTree, StoppingTime, stopping_time_label,
};
use crate::report::{CheckCase, ConsistencyReport};
use crate::riskcore::{
    evaluate_dual, minimal_penalty_lp, DualFamily, DynamicRisk, ExtReal, PenaltyFn,
};

fn triple_labels(tree: &ScenarioTree, sts: &[&StoppingTime]) -> Vec<String> {
    sts.iter().map(|st| stopping_time_label(tree, st)).collect()
}

fn require_chain(tree: &ScenarioTree, chain: &[&StoppingTime]) -> Result<()> {
    for w in chain.windows(2) {
        if !w[0].precedes(tree, w[1]) {
            return Err(Error::OrderViolation(format!(
                "{} does not precede {}",
                stopping_time_label(tree, w[0]),
                stopping_time_label(tree, w[1])
            )));
        }
    }
    Ok(())
}

/// Residual of the composition rule for one position:
/// `max_atoms | rho_{nu,tau}(X) - rho_{nu,sigma}(-rho_{sigma,tau}(X)) |`.
pub fn check_time_consistency_case(
    d: &dyn DynamicRisk,
    x: &RandomVariable,
    label: impl Into<String>,
    nu: &StoppingTime,
    sigma: &StoppingTime,
) -> Result<CheckCase> {
    let tree = d.tree();
    let tau = x.anchor();
    require_chain(tree, &[nu, sigma, tau])?;
    let direct = d.risk(x, nu)?;
    let inner = d.risk(x, sigma)?;
    let composed = d.risk(&inner.neg(), nu)?;
    let mut residual = 0.0;
    let mut witness = None;
    for (k, &a) in nu.atoms().iter().enumerate() {
        let r = (direct.value(k) - composed.value(k)).abs();
        if r > residual {
            residual = r;
            witness = Some(tree.id(a).to_string());
        }
    }
    Ok(
        CheckCase::new(triple_labels(tree, &[nu, sigma, tau]), label, residual)
            .with_witness(witness),
    )
}

/// Composition check over triples with a seeded default battery per triple.
pub fn check_time_consistency(
    d: &dyn DynamicRisk,
    triples: &[(StoppingTime, StoppingTime, StoppingTime)],
    seed: u64,
    size: usize,
    tol: f64,
) -> Result<ConsistencyReport> {
    let tree = d.tree();
    let mut cases = Vec::new();
    for (nu, sigma, tau) in triples {
        let battery = default_battery(tree, tau, seed, size);
        for (i, x) in battery.iter().enumerate() {
            cases.push(check_time_consistency_case(d, x, format!("X{i}"), nu, sigma)?);
        }
    }
    Ok(ConsistencyReport::from_cases(cases, tol))
}

/// Residual of the additive penalty identity for one measure and one triple:
/// `max over q-positive nu-atoms | a_{nu,tau} - a_{nu,sigma} - E_q(a_{sigma,tau} | F_nu) |`.
/// Atoms where any term is infinite are skipped and listed.
pub fn check_cocycle_case(
    penalty: &dyn PenaltyFn,
    q: &Measure,
    label: impl Into<String>,
    nu: &StoppingTime,
    sigma: &StoppingTime,
    tau: &StoppingTime,
) -> Result<CheckCase> {
    let tree = penalty.tree();
    require_chain(tree, &[nu, sigma, tau])?;
    let a_nt = penalty.penalty(q, nu, tau)?;
    let a_ns = penalty.penalty(q, nu, sigma)?;
    let a_st = penalty.penalty(q, sigma, tau)?;
    let cover = atom_cover(tree, nu, sigma)?;
    let mut residual = 0.0;
    let mut witness = None;
    let mut skipped = Vec::new();
    for (k, &a) in nu.atoms().iter().enumerate() {
        if q.mass(tree, a) <= 0.0 {
            continue;
        }
        let (whole, first) = match (a_nt.value(k), a_ns.value(k)) {
            (ExtReal::Finite(x), ExtReal::Finite(y)) => (x, y),
            _ => {
                skipped.push(tree.id(a).to_string());
                continue;
            }
        };
        let mut tail = 0.0;
        let mut tail_finite = true;
        for (j, &s) in sigma.atoms().iter().enumerate() {
            if cover[j] != k {
                continue;
            }
            let w = q.seg_mass(tree, a, s);
            if w <= 0.0 {
                continue;
            }
            match a_st.value(j) {
                ExtReal::Finite(v) => tail += w * v,
                ExtReal::Inf => {
                    tail_finite = false;
                    break;
                }
            }
        }
        if !tail_finite {
            skipped.push(tree.id(a).to_string());
            continue;
        }
        let r = (whole - first - tail).abs();
        if r > residual {
            residual = r;
            witness = Some(tree.id(a).to_string());
        }
    }
    Ok(
        CheckCase::new(triple_labels(tree, &[nu, sigma, tau]), label, residual)
            .with_witness(witness)
            .with_skipped(skipped),
    )
}

/// Cocycle check over sampled measures and triples.
pub fn check_cocycle(
    penalty: &dyn PenaltyFn,
    q_samples: &[Measure],
    triples: &[(StoppingTime, StoppingTime, StoppingTime)],
    tol: f64,
) -> Result<ConsistencyReport> {
    let mut cases = Vec::new();
    for (qi, q) in q_samples.iter().enumerate() {
        for (nu, sigma, tau) in triples {
            cases.push(check_cocycle_case(
                penalty,
                q,
                format!("Q{qi}"),
                nu,
                sigma,
                tau,
            )?);
        }
    }
    Ok(ConsistencyReport::from_cases(cases, tol))
}

/// Positive part of the supermartingale defect for one position:
/// `max over q-positive nu-atoms ( E_q(rho_{sigma,tau}(X) + a_{sigma,tau} | F_nu)
///  - rho_{nu,tau}(X) - a_{nu,tau} )_+`.
///
/// The case is skipped (zero residual, all atoms listed) when the penalty over
/// the whole window is infinite somewhere `q`-positive, matching the
/// finiteness hypothesis of the inequality.
pub fn check_supermartingale_case(
    d: &dyn DynamicRisk,
    penalty: &dyn PenaltyFn,
    q: &Measure,
    x: &RandomVariable,
    label: impl Into<String>,
    nu: &StoppingTime,
    sigma: &StoppingTime,
) -> Result<CheckCase> {
    let tree = d.tree();
    let tau = x.anchor();
    require_chain(tree, &[nu, sigma, tau])?;
    let labels = triple_labels(tree, &[nu, sigma, tau]);
    let a_nt = penalty.penalty(q, nu, tau)?;
    let finiteness_ok = nu
        .atoms()
        .iter()
        .zip(a_nt.values())
        .all(|(&a, v)| q.mass(tree, a) <= 0.0 || !v.is_inf());
    if !finiteness_ok {
        return Ok(CheckCase::new(labels, label, 0.0)
            .with_skipped(nu.atom_ids(tree).iter().map(|s| s.to_string()).collect()));
    }
    let rho_nt = d.risk(x, nu)?;
    let rho_st = d.risk(x, sigma)?;
    let a_st = penalty.penalty(q, sigma, tau)?;
    let cover = atom_cover(tree, nu, sigma)?;
    let mut residual = 0.0;
    let mut witness = None;
    let mut skipped = Vec::new();
    for (k, &a) in nu.atoms().iter().enumerate() {
        if q.mass(tree, a) <= 0.0 {
            continue;
        }
        let mut lhs = 0.0;
        let mut finite = true;
        for (j, &s) in sigma.atoms().iter().enumerate() {
            if cover[j] != k {
                continue;
            }
            let w = q.seg_mass(tree, a, s);
            if w <= 0.0 {
                continue;
            }
            match a_st.value(j) {
                ExtReal::Finite(v) => lhs += w * (rho_st.value(j) + v),
                ExtReal::Inf => {
                    finite = false;
                    break;
                }
            }
        }
        if !finite {
            skipped.push(tree.id(a).to_string());
            continue;
        }
        let rhs = rho_nt.value(k) + a_nt.value(k).finite().expect("checked finite");
        let r = (lhs - rhs).max(0.0);
        if r > residual {
            residual = r;
            witness = Some(tree.id(a).to_string());
        }
    }
    Ok(CheckCase::new(labels, label, residual)
        .with_witness(witness)
        .with_skipped(skipped))
}

/// Supermartingale check over sampled measures, triples and a seeded battery.
pub fn check_supermartingale(
    d: &dyn DynamicRisk,
    penalty: &dyn PenaltyFn,
    q_samples: &[Measure],
    triples: &[(StoppingTime, StoppingTime, StoppingTime)],
    seed: u64,
    size: usize,
    tol: f64,
) -> Result<ConsistencyReport> {
    let tree = d.tree();
    let mut cases = Vec::new();
    for (qi, q) in q_samples.iter().enumerate() {
        for (nu, sigma, tau) in triples {
            let battery = default_battery(tree, tau, seed, size);
            for (i, x) in battery.iter().enumerate() {
                cases.push(check_supermartingale_case(
                    d,
                    penalty,
                    q,
                    x,
                    format!("Q{qi},X{i}"),
                    nu,
                    sigma,
                )?);
            }
        }
    }
    Ok(ConsistencyReport::from_cases(cases, tol))
}

/// Residual of the restriction identity for one `F_sigma`-measurable
/// position: `| rho_{nu,sigma}(Z) - rho_{nu,tau}(Z + rho_{sigma,tau}(0)) |`.
pub fn check_restriction_case(
    d: &dyn DynamicRisk,
    z: &RandomVariable,
    label: impl Into<String>,
    nu: &StoppingTime,
    tau: &StoppingTime,
) -> Result<CheckCase> {
    let tree = d.tree();
    let sigma = z.anchor();
    require_chain(tree, &[nu, sigma, tau])?;
    let lhs = d.risk(z, nu)?;
    let zero = RandomVariable::constant(tau.clone(), 0.0);
    let rho0 = d.risk(&zero, sigma)?;
    let shifted = z.add(&rho0)?.lift(tree, tau)?;
    let rhs = d.risk(&shifted, nu)?;
    let mut residual = 0.0;
    let mut witness = None;
    for (k, &a) in nu.atoms().iter().enumerate() {
        let r = (lhs.value(k) - rhs.value(k)).abs();
        if r > residual {
            residual = r;
            witness = Some(tree.id(a).to_string());
        }
    }
    Ok(
        CheckCase::new(triple_labels(tree, &[nu, sigma, tau]), label, residual)
            .with_witness(witness),
    )
}

/// Restriction check over triples with seeded `F_sigma`-measurable batteries.
pub fn check_restriction(
    d: &dyn DynamicRisk,
    triples: &[(StoppingTime, StoppingTime, StoppingTime)],
    seed: u64,
    size: usize,
    tol: f64,
) -> Result<ConsistencyReport> {
    let tree = d.tree();
    let mut cases = Vec::new();
    for (nu, sigma, tau) in triples {
        let battery = default_battery(tree, sigma, seed, size);
        for (i, z) in battery.iter().enumerate() {
            cases.push(check_restriction_case(d, z, format!("Z{i}"), nu, tau)?);
        }
    }
    Ok(ConsistencyReport::from_cases(cases, tol))
}

/// Splits an acceptable position `X` into `(Y, Z)` with `Y + Z = X` exactly,
/// `Z = X + rho_{sigma,tau}(X)` carrying zero risk over `[sigma, tau]`, and
/// `Y` acceptable over `[nu, sigma]` at every `q`-positive atom.
pub fn decompose_acceptable(
    d: &dyn DynamicRisk,
    x: &RandomVariable,
    q: &Measure,
    nu: &StoppingTime,
    sigma: &StoppingTime,
    tol: f64,
) -> Result<(RandomVariable, RandomVariable)> {
    let tree = d.tree();
    let tau = x.anchor();
    require_chain(tree, &[nu, sigma, tau])?;
    let rho = d.risk(x, nu)?;
    for (k, &a) in nu.atoms().iter().enumerate() {
        if q.mass(tree, a) > 0.0 && rho.value(k) > tol {
            return Err(Error::NotAcceptable {
                atom: tree.id(a).to_string(),
            });
        }
    }
    let mid = d.risk(x, sigma)?;
    let z = x.add(&mid.lift(tree, tau)?)?;
    let y = x.sub(&z)?;
    Ok((y, z))
}

/// Partial enumeration of the zero-penalty measures of a family at the whole
/// horizon: members whose penalty vanishes at the root, plus any candidate
/// whose exact minimal penalty vanishes there. The convex set itself is not
/// enumerable; this returns its known generators and tested candidates.
pub fn zero_penalty_set(
    tree: &ScenarioTree,
    family: &DualFamily,
    candidates: &[Measure],
    tol: f64,
) -> Result<Vec<Measure>> {
    let t0 = StoppingTime::deterministic(tree, 0)?;
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;
    let root = tree.root();
    let mut min_root = f64::INFINITY;
    let mut out: Vec<Measure> = Vec::new();
    for member in family.members() {
        if let ExtReal::Finite(c) = member.penalty.at(tree, root)? {
            min_root = min_root.min(c);
            if c.abs() <= tol {
                out.push(member.measure.clone());
            }
        }
    }
    if !(min_root.abs() <= tol) {
        return Err(Error::InvalidFamily(format!(
            "family is not normalized at the root: min penalty is {min_root}"
        )));
    }
    for q in candidates {
        let lp = minimal_penalty_lp(tree, family, q, &t0, &horizon)?;
        if let ExtReal::Finite(v) = lp.value(0) {
            if v.abs() <= tol && !out.iter().any(|m| m.approx_eq(q, 1e-12)) {
                out.push(q.clone());
            }
        }
    }
    Ok(out)
}

/// Per-outcome degeneracy scan: an elementary outcome is flagged when the
/// risk of every tested scaling of its indicator stays at zero. On a finite
/// tree singletons are exhaustive: by monotonicity a failing event implies a
/// failing singleton.
#[derive(Debug, Clone)]
pub struct DegeneracyReport {
    pub non_degenerate: bool,
    /// First flagged outcome, if any.
    pub witness: Option<String>,
    /// Most negative risk value seen per leaf (in canonical order).
    pub best_per_leaf: Vec<f64>,
}

pub fn check_nondegenerate(
    d: &dyn DynamicRisk,
    lambdas: &[f64],
    tol: f64,
) -> Result<DegeneracyReport> {
    let tree = d.tree();
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;
    let t0 = StoppingTime::deterministic(tree, 0)?;
    let lambdas = if lambdas.is_empty() {
        &[1.0, 4.0, 16.0, 64.0]
    } else {
        lambdas
    };
    let mut witness = None;
    let mut best_per_leaf = Vec::with_capacity(horizon.atom_count());
    for k in 0..horizon.atom_count() {
        let mut best = f64::INFINITY;
        for &l in lambdas {
            let x = RandomVariable::indicator(horizon.clone(), k, l);
            let rho = d.risk(&x, &t0)?;
            best = best.min(rho.value(0));
        }
        if best >= -tol && witness.is_none() {
            witness = Some(tree.id(horizon.atoms()[k]).to_string());
        }
        best_per_leaf.push(best);
    }
    Ok(DegeneracyReport {
        non_degenerate: witness.is_none(),
        witness,
        best_per_leaf,
    })
}

/// Outcome of the zero-penalty equivalence check.
#[derive(Debug, Clone, PartialEq)]
pub enum M0Verdict {
    /// Every zero-penalty measure has full support.
    Equivalent,
    /// A prerequisite (normalization, time consistency, non-degeneracy)
    /// failed, so the equivalence statement does not apply.
    HypothesesViolated(String),
    /// Hypotheses hold yet a zero-penalty measure misses a leaf: a genuine
    /// falsification of the pipeline.
    Falsified { measure_index: usize, leaf: String },
}

/// Checks that every enumerated zero-penalty measure of a normalized,
/// time-consistent, non-degenerate family has strictly positive mass at every
/// leaf. Prerequisite failures are reported as such rather than as
/// falsifications.
pub fn check_m0_equivalence(
    tree: &ScenarioTree,
    family: &DualFamily,
    candidates: &[Measure],
    seed: u64,
    tol: f64,
) -> Result<M0Verdict> {
    let d = crate::riskcore::DualFamilyRisk::new(tree.clone(), family.clone());
    let t0 = StoppingTime::deterministic(tree, 0)?;
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;

    let zero = RandomVariable::constant(horizon.clone(), 0.0);
    let rho0 = evaluate_dual(tree, family, &zero, &t0)?;
    if rho0.value(0).abs() > tol {
        return Ok(M0Verdict::HypothesesViolated(format!(
            "not normalized: rho(0) = {}",
            rho0.value(0)
        )));
    }

    let degeneracy = check_nondegenerate(&d, &[], tol)?;
    if !degeneracy.non_degenerate {
        return Ok(M0Verdict::HypothesesViolated(format!(
            "degenerate (witness {})",
            degeneracy.witness.unwrap_or_default()
        )));
    }

    let mut triples = Vec::new();
    for t in 1..tree.horizon() {
        triples.push((
            t0.clone(),
            StoppingTime::deterministic(tree, t)?,
            horizon.clone(),
        ));
    }
    if !triples.is_empty() {
        let report = check_time_consistency(&d, &triples, seed, 12, tol)?;
        if !report.passed() {
            return Ok(M0Verdict::HypothesesViolated(format!(
                "not time consistent: residual {}",
                report.max_residual()
            )));
        }
    }

    let zps = zero_penalty_set(tree, family, candidates, tol)?;
    for (i, q) in zps.iter().enumerate() {
        for &l in tree.leaves() {
            if q.mass(tree, l) <= 0.0 {
                return Ok(M0Verdict::Falsified {
                    measure_index: i,
                    leaf: tree.id(l).to_string(),
                });
            }
        }
    }
    Ok(M0Verdict::Equivalent)
}

/// The full risk process of a position and its supermartingale verification
/// under a zero-penalty measure.
#[derive(Debug, Clone)]
pub struct RiskProcessReport {
    /// `V(n) = rho_{t(n),T}(X)(n)` for every node, indexed by node.
    pub node_values: Vec<f64>,
    /// Largest positive part of `E_q(V at children | n) - V(n)` over
    /// `q`-positive non-leaf nodes.
    pub supermartingale_violation: f64,
    pub witness: Option<String>,
    /// `E_q(V at sigma_m)` along the delayed stopping times, latest first
    /// delay down to the base stopping time (repeated once at the end).
    pub stopping_values: Vec<f64>,
    /// True when the stopping-time expectations stabilize exactly once the
    /// delayed sequence reaches its base.
    pub stabilized: bool,
}

impl RiskProcessReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.supermartingale_violation <= tol && self.stabilized
    }
}

/// Computes the node-indexed risk process of `x` (anchored at the horizon),
/// verifies the one-step supermartingale inequality under `q` at every
/// `q`-positive node, and follows the process expectation along a decreasing
/// sequence of stopping times down to `sigma`.
///
/// `q` must carry zero penalty at the root over the whole horizon.
pub fn risk_process(
    d: &dyn DynamicRisk,
    penalty: &dyn PenaltyFn,
    x: &RandomVariable,
    q: &Measure,
    sigma: &StoppingTime,
    tol: f64,
) -> Result<RiskProcessReport> {
    let tree = d.tree();
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;
    if x.anchor() != &horizon {
        return Err(Error::AnchorMismatch(
            "risk process positions are anchored at the horizon".into(),
        ));
    }
    let t0 = StoppingTime::deterministic(tree, 0)?;
    let root_penalty = penalty.penalty(q, &t0, &horizon)?.value(0);
    match root_penalty {
        ExtReal::Finite(v) if v.abs() <= tol => {}
        other => {
            return Err(Error::NotZeroPenalty(format!(
                "penalty at the root is {other}"
            )))
        }
    }

    let mut node_values = vec![0.0; tree.node_count()];
    for t in 0..=tree.horizon() {
        let st = StoppingTime::deterministic(tree, t)?;
        let rho = d.risk(x, &st)?;
        for (&n, &v) in st.atoms().iter().zip(rho.values()) {
            node_values[n] = v;
        }
    }

    let mut violation: f64 = 0.0;
    let mut witness = None;
    for n in 0..tree.node_count() {
        if tree.is_leaf(n) || q.mass(tree, n) <= 0.0 {
            continue;
        }
        let expected: f64 = tree
            .children(n)
            .iter()
            .map(|&c| q.edge(c) * node_values[c])
            .sum();
        let gap = expected - node_values[n];
        if gap > violation {
            violation = gap;
            witness = Some(tree.id(n).to_string());
        }
    }

    // decreasing sequence of stopping times: delays T, T-1, ..., 1, 0, 0
    let mut stopping_values = Vec::new();
    let mut delays: Vec<usize> = (0..=tree.horizon()).rev().collect();
    delays.push(0);
    for &dly in &delays {
        let st = sigma.delay(tree, dly);
        let e: f64 = st
            .atoms()
            .iter()
            .map(|&n| q.mass(tree, n) * node_values[n])
            .sum();
        stopping_values.push(e);
    }
    let m = stopping_values.len();
    let stabilized = stopping_values[m - 1] == stopping_values[m - 2];

    Ok(RiskProcessReport {
        node_values,
        supermartingale_violation: violation,
        witness,
        stopping_values,
        stabilized,
    })
}

/// All deterministic triples `0 <= nu <= sigma <= tau <= T`.
pub fn deterministic_triples(
    tree: &ScenarioTree,
) -> Result<Vec<(StoppingTime, StoppingTime, StoppingTime)>> {
    let mut triples = Vec::new();
    for nu in 0..=tree.horizon() {
        for sigma in nu..=tree.horizon() {
            for tau in sigma..=tree.horizon() {
                triples.push((
                    StoppingTime::deterministic(tree, nu)?,
                    StoppingTime::deterministic(tree, sigma)?,
                    StoppingTime::deterministic(tree, tau)?,
                ));
            }
        }
    }
    Ok(triples)
}

/// Deterministic triples plus a few seeded genuinely random stopping-time
/// chains ending at the horizon.
pub fn mixed_triples(
    tree: &ScenarioTree,
    seed: u64,
    extra: usize,
) -> Result<Vec<(StoppingTime, StoppingTime, StoppingTime)>> {
    use rand::SeedableRng;
    let mut triples = deterministic_triples(tree)?;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let t0 = StoppingTime::deterministic(tree, 0)?;
    let horizon = StoppingTime::deterministic(tree, tree.horizon())?;
    for _ in 0..extra {
        let sigma = crate::battery::random_stopping_time(tree, 0.5, &mut rng);
        triples.push((t0.clone(), sigma, horizon.clone()));
    }
    Ok(triples)
}

/// Convenience wrapper: samples measures around the generators and runs the
/// cocycle check on all deterministic triples.
pub fn check_cocycle_sampled(
    penalty: &dyn PenaltyFn,
    generators: &[Measure],
    seed: u64,
    n_samples: usize,
    tol: f64,
) -> Result<ConsistencyReport> {
    let tree = penalty.tree();
    let mut qs = generators.to_vec();
    qs.extend(sample_measures(tree, generators, seed, n_samples)?);
    let triples = deterministic_triples(tree)?;
    check_cocycle(penalty, &qs, &triples, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EntropicPenalty, EntropicRisk, EntropicSpec};
    use crate::riskcore::{DualFamilyRisk, DualMember, Penalty};

    fn entropic(tree: &ScenarioTree, alpha: f64, lambda: f64) -> EntropicRisk {
        EntropicRisk::new(
            tree.clone(),
            EntropicSpec::exponential(alpha, lambda).unwrap(),
        )
    }

    #[test]
    fn exponential_thresholds_compose() {
        let tree = ScenarioTree::binomial(2);
        let d = entropic(&tree, 1.0, 0.1);
        let triples = deterministic_triples(&tree).unwrap();
        let report = check_time_consistency(&d, &triples, 11, 10, 1e-9).unwrap();
        assert!(report.passed(), "residual {}", report.max_residual());
    }

    #[test]
    fn affine_threshold_defect_is_log_four_thirds() {
        let tree = ScenarioTree::binomial(2);
        let spec = EntropicSpec::from_gap_fn(1.0, 2, |d| 1.0 + d as f64).unwrap();
        let d = EntropicRisk::new(tree.clone(), spec);
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let x = RandomVariable::at_time(&tree, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let case = check_time_consistency_case(&d, &x, "X", &t0, &t1).unwrap();
        let ln43 = (4.0f64 / 3.0).ln();
        assert!((case.residual - ln43).abs() < 1e-12);
    }

    #[test]
    fn entropic_cocycle_is_the_entropy_chain_rule() {
        let tree = ScenarioTree::binomial(2);
        let penalty = EntropicPenalty::new(tree.clone(), EntropicSpec::standard(1.0).unwrap());
        let report =
            check_cocycle_sampled(&penalty, &[tree.reference_measure()], 3, 8, 1e-9).unwrap();
        assert!(report.passed(), "residual {}", report.max_residual());
    }

    #[test]
    fn affine_cocycle_defect_matches_consistency_defect() {
        let tree = ScenarioTree::binomial(2);
        let spec = EntropicSpec::from_gap_fn(1.0, 2, |d| 1.0 + d as f64).unwrap();
        let penalty = EntropicPenalty::new(tree.clone(), spec);
        let q = Measure::homogeneous_binary(&tree, 0.6).unwrap();
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let t2 = StoppingTime::deterministic(&tree, 2).unwrap();
        let case = check_cocycle_case(&penalty, &q, "Q", &t0, &t1, &t2).unwrap();
        let ln43 = (4.0f64 / 3.0).ln();
        assert!((case.residual - ln43).abs() < 1e-12);
    }

    #[test]
    fn decompose_round_trip() {
        let tree = ScenarioTree::binomial(2);
        let d = entropic(&tree, 1.0, 0.0);
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let p = tree.reference_measure();
        // a sure gain is acceptable and its zero-risk part is the mean
        // adjustment: Z = X + rho(X) = 0 for constants
        let x = RandomVariable::at_time(&tree, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (y, z) = decompose_acceptable(&d, &x, &p, &t0, &t1, 1e-9).unwrap();
        assert_eq!(y.add(&z).unwrap().values(), x.values());
        assert!(z.values().iter().all(|v| v.abs() < 1e-12));
        let rho_z = d.risk(&z, &t1).unwrap();
        assert!(rho_z.values().iter().all(|v| v.abs() < 1e-12));
        let y_at_mid = y.coarsen(&tree, &t1, 1e-12).unwrap();
        let rho_y = d.risk(&y_at_mid, &t0).unwrap();
        assert!(rho_y.value(0) <= 1e-9);
    }

    #[test]
    fn unacceptable_position_is_rejected_with_witness() {
        let tree = ScenarioTree::binomial(2);
        let d = entropic(&tree, 1.0, 0.0);
        let t0 = StoppingTime::deterministic(&tree, 0).unwrap();
        let t1 = StoppingTime::deterministic(&tree, 1).unwrap();
        let p = tree.reference_measure();
        let x = RandomVariable::at_time(&tree, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        match decompose_acceptable(&d, &x, &p, &t0, &t1, 1e-9) {
            Err(Error::NotAcceptable { atom }) => assert_eq!(atom, "root"),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_dirac_family_is_flagged() {
        let tree = ScenarioTree::binomial(1);
        let u = tree.leaves()[0];
        let family = DualFamily::new(vec![DualMember {
            measure: Measure::dirac(&tree, u).unwrap(),
            penalty: Penalty::zero(),
        }])
        .unwrap();
        let d = DualFamilyRisk::new(tree.clone(), family.clone());
        let report = check_nondegenerate(&d, &[], 1e-9).unwrap();
        assert!(!report.non_degenerate);
        assert_eq!(report.witness.as_deref(), Some("d"));

        let verdict = check_m0_equivalence(&tree, &family, &[], 1, 1e-9).unwrap();
        match verdict {
            M0Verdict::HypothesesViolated(reason) => {
                assert!(reason.contains("degenerate"), "{reason}")
            }
            other => panic!("expected hypotheses violated, got {other:?}"),
        }
    }

    #[test]
    fn expectation_under_reference_is_nondegenerate() {
        let tree = ScenarioTree::binomial(1);
        let family = DualFamily::new(vec![DualMember {
            measure: tree.reference_measure(),
            penalty: Penalty::zero(),
        }])
        .unwrap();
        let d = DualFamilyRisk::new(tree.clone(), family);
        let report = check_nondegenerate(&d, &[], 1e-9).unwrap();
        assert!(report.non_degenerate);
    }

    #[test]
    fn risk_process_of_a_constant_is_a_martingale() {
        let tree = ScenarioTree::binomial(2);
        let d = entropic(&tree, 1.0, 0.0);
        let penalty = EntropicPenalty::new(tree.clone(), EntropicSpec::standard(1.0).unwrap());
        let x = RandomVariable::at_time(&tree, 2, vec![2.0; 4]).unwrap();
        let sigma = StoppingTime::deterministic(&tree, 1).unwrap();
        let report =
            risk_process(&d, &penalty, &x, &tree.reference_measure(), &sigma, 1e-9).unwrap();
        assert!(report.node_values.iter().all(|v| (v + 2.0).abs() < 1e-12));
        assert!(report.supermartingale_violation <= 1e-12);
        assert!(report.stabilized);
    }

    #[test]
    fn risk_process_rejects_positive_penalty_measures() {
        let tree = ScenarioTree::binomial(2);
        let d = entropic(&tree, 1.0, 0.0);
        let penalty = EntropicPenalty::new(tree.clone(), EntropicSpec::standard(1.0).unwrap());
        let x = RandomVariable::at_time(&tree, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let sigma = StoppingTime::deterministic(&tree, 1).unwrap();
        let q = Measure::homogeneous_binary(&tree, 0.8).unwrap();
        assert!(matches!(
            risk_process(&d, &penalty, &x, &q, &sigma, 1e-9),
            Err(Error::NotZeroPenalty(_))
        ));
    }
}
