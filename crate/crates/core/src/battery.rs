//! Seeded, reproducible test batteries.
//!
//! The checkers quantify over all bounded positions and all absolutely
//! continuous measures; a finite battery can only falsify. The default
//! battery mixes structure (constants, signed indicators of every subtree's
//! terminal atoms, corner values at norm 8) with seeded random positions, and
//! measures are sampled as pastings and perturbations of the generators. All
//! randomness flows through a single `u64` seed into ChaCha12, so batteries
//! are reproducible bit for bit across platforms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::probspace::{Measure, RandomVariable, ScenarioTree, StoppingTime};
use crate::stableset::paste;

/// Norm bound used for corner values and random positions.
pub const BATTERY_BOUND: f64 = 8.0;

/// Deterministic battery of positions anchored at `tau`, padded with seeded
/// random bounded positions to exactly `size` elements (when `size` allows).
pub fn default_battery(
    tree: &ScenarioTree,
    tau: &StoppingTime,
    seed: u64,
    size: usize,
) -> Vec<RandomVariable> {
    let n = tau.atom_count();
    let mut battery = Vec::new();
    for c in [0.0, 1.0, -1.0, BATTERY_BOUND, -BATTERY_BOUND] {
        battery.push(RandomVariable::constant(tau.clone(), c));
    }
    // signed indicators of the tau-atoms below each node: these realize the
    // indicators of every coarser atom on the way to tau
    for node in 0..tree.node_count() {
        let values: Vec<f64> = tau
            .atoms()
            .iter()
            .map(|&m| {
                if tree.is_ancestor_or_self(node, m) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let ones = values.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == n {
            continue;
        }
        let ind = RandomVariable::new(tau.clone(), values).expect("sized");
        battery.push(ind.neg());
        battery.push(ind);
        if battery.len() >= size {
            break;
        }
    }
    battery.truncate(size.max(5));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    while battery.len() < size {
        let values: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-BATTERY_BOUND..BATTERY_BOUND))
            .collect();
        battery.push(RandomVariable::new(tau.clone(), values).expect("sized"));
    }
    battery
}

/// `F_sigma`-measurable shifts for translation-invariance tests: constants,
/// one scaled indicator per atom, and seeded random variables.
pub fn sigma_shifts(
    tree: &ScenarioTree,
    sigma: &StoppingTime,
    seed: u64,
    n_random: usize,
) -> Vec<RandomVariable> {
    let _ = tree;
    let mut shifts = vec![
        RandomVariable::constant(sigma.clone(), 0.0),
        RandomVariable::constant(sigma.clone(), 1.0),
        RandomVariable::constant(sigma.clone(), -2.5),
    ];
    for k in 0..sigma.atom_count() {
        shifts.push(RandomVariable::indicator(sigma.clone(), k, 1.5));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..n_random {
        let values: Vec<f64> = (0..sigma.atom_count())
            .map(|_| rng.random_range(-BATTERY_BOUND..BATTERY_BOUND))
            .collect();
        shifts.push(RandomVariable::new(sigma.clone(), values).expect("sized"));
    }
    shifts
}

/// A strictly positive random measure: every transition is a perturbed
/// reference transition, renormalized per node.
pub fn random_measure(tree: &ScenarioTree, rng: &mut ChaCha12Rng) -> Measure {
    perturb_measure(tree, &tree.reference_measure(), rng)
}

/// Multiplies each transition by a random factor and renormalizes; zero
/// transitions stay zero, so absolute continuity is preserved.
pub fn perturb_measure(tree: &ScenarioTree, base: &Measure, rng: &mut ChaCha12Rng) -> Measure {
    let mut edge = base.edges().to_vec();
    for node in 0..tree.node_count() {
        let children = tree.children(node);
        if children.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for &c in children {
            edge[c] *= (rng.random_range(-0.7..0.7f64)).exp();
            sum += edge[c];
        }
        if sum > 0.0 {
            for &c in children {
                edge[c] /= sum;
            }
        }
    }
    Measure::from_edges(tree, edge).expect("perturbation preserves validity")
}

/// Samples `count` measures from the generators: random pastings of generator
/// pairs at random deterministic times, perturbations, and fresh random
/// measures, in a deterministic rotation.
pub fn sample_measures(
    tree: &ScenarioTree,
    generators: &[Measure],
    seed: u64,
    count: usize,
) -> Result<Vec<Measure>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let t0 = StoppingTime::deterministic(tree, 0)?;
    for i in 0..count {
        match i % 3 {
            0 if generators.len() >= 1 && tree.horizon() >= 1 => {
                let a = rng.random_range(0..generators.len());
                let b = rng.random_range(0..generators.len());
                let t = rng.random_range(1..=tree.horizon());
                let sigma = StoppingTime::deterministic(tree, t)?;
                let base = paste(tree, &generators[b], &generators[a], &t0, &sigma)?;
                out.push(perturb_measure(tree, &base, &mut rng));
            }
            1 if !generators.is_empty() => {
                let a = rng.random_range(0..generators.len());
                out.push(perturb_measure(tree, &generators[a], &mut rng));
            }
            _ => out.push(random_measure(tree, &mut rng)),
        }
    }
    Ok(out)
}

/// Random pastings of the generators (no perturbation), useful where the
/// sampled measures must stay inside a pasting-stable family.
pub fn sample_pastings(
    tree: &ScenarioTree,
    generators: &[Measure],
    seed: u64,
    count: usize,
) -> Result<Vec<Measure>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let t0 = StoppingTime::deterministic(tree, 0)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(0..generators.len());
        let b = rng.random_range(0..generators.len());
        let t = rng.random_range(1..=tree.horizon().max(1));
        let sigma = StoppingTime::deterministic(tree, t.min(tree.horizon()))?;
        out.push(paste(tree, &generators[b], &generators[a], &t0, &sigma)?);
    }
    Ok(out)
}

/// A random stopping time: descends from the root, stopping at each node with
/// the given probability (always stopping at leaves).
pub fn random_stopping_time(
    tree: &ScenarioTree,
    stop_prob: f64,
    rng: &mut ChaCha12Rng,
) -> StoppingTime {
    let mut stops = Vec::new();
    let mut stack = vec![tree.root()];
    while let Some(n) = stack.pop() {
        if tree.is_leaf(n) || rng.random_range(0.0..1.0) < stop_prob {
            stops.push(n);
        } else {
            stack.extend(tree.children(n).iter().copied());
        }
    }
    StoppingTime::from_indices(tree, stops).expect("descent yields an antichain covering")
}

/// Random acceptable positions: a random bounded position shifted by its own
/// risk, which lands it exactly on the acceptance boundary.
pub fn random_acceptable_positions(
    d: &dyn crate::riskcore::DynamicRisk,
    nu: &StoppingTime,
    tau: &StoppingTime,
    seed: u64,
    count: usize,
) -> Result<Vec<RandomVariable>> {
    let tree = d.tree();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let values: Vec<f64> = (0..tau.atom_count())
            .map(|_| rng.random_range(-BATTERY_BOUND..BATTERY_BOUND))
            .collect();
        let x = RandomVariable::new(tau.clone(), values)?;
        let rho = d.risk(&x, nu)?;
        out.push(x.add(&rho.lift(tree, tau)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_is_reproducible_and_sized() {
        let tree = ScenarioTree::binomial(2);
        let tau = StoppingTime::deterministic(&tree, 2).unwrap();
        let a = default_battery(&tree, &tau, 42, 50);
        let b = default_battery(&tree, &tau, 42, 50);
        assert_eq!(a.len(), 50);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values(), y.values());
        }
        let c = default_battery(&tree, &tau, 43, 50);
        assert!(a.iter().zip(&c).any(|(x, y)| x.values() != y.values()));
    }

    #[test]
    fn sampled_measures_are_valid() {
        let tree = ScenarioTree::binomial(2);
        let gens = vec![
            tree.reference_measure(),
            Measure::homogeneous_binary(&tree, 0.3).unwrap(),
        ];
        let qs = sample_measures(&tree, &gens, 7, 12).unwrap();
        assert_eq!(qs.len(), 12);
        for q in &qs {
            let total: f64 = tree.leaves().iter().map(|&l| q.mass(&tree, l)).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn random_stopping_times_are_valid() {
        let tree = ScenarioTree::binomial(3);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let st = random_stopping_time(&tree, 0.4, &mut rng);
            assert!(st.atom_count() >= 1);
        }
    }
}
