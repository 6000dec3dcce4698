//! Running empirical measures, their ring restrictions, stability
//! monitoring and total-variation utilities.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::state_space::{RingPartition, State, StateSpace};

/// A stored sample together with its insertion index.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub step: u64,
    pub state: State,
}

/// Uniform measure over every state inserted so far, grouped by ring.
///
/// Atoms are kept with multiplicity so a ring can be sampled by index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    rings: Vec<Vec<Atom>>,
    total: u64,
}

impl EmpiricalMeasure {
    pub fn empty(rings: usize) -> Self {
        EmpiricalMeasure { rings: vec![Vec::new(); rings], total: 0 }
    }

    /// `delta_x`.
    pub fn point_mass(rings: usize, ring: usize, x: State) -> Self {
        let mut m = Self::empty(rings);
        m.insert(ring, x);
        m
    }

    /// Batch construction from a list of states.
    pub fn from_states(space: &StateSpace, partition: &RingPartition, states: &[State]) -> Result<Self> {
        let mut m = Self::empty(partition.rings());
        for x in states {
            m.record(space, partition, x.clone())?;
        }
        Ok(m)
    }

    /// Appends `x`, already known to lie in `ring`.
    pub fn insert(&mut self, ring: usize, x: State) {
        self.rings[ring].push(Atom { step: self.total, state: x });
        self.total += 1;
    }

    /// Assigns `x` to its ring and appends it. Returns the ring.
    pub fn record(&mut self, space: &StateSpace, partition: &RingPartition, x: State) -> Result<usize> {
        let ring = partition.assign_ring(space, &x)?;
        self.insert(ring, x);
        Ok(ring)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn rings(&self) -> usize {
        self.rings.len()
    }

    pub fn ring_count(&self, ring: usize) -> u64 {
        self.rings[ring].len() as u64
    }

    pub fn ring_counts(&self) -> Vec<u64> {
        self.rings.iter().map(|r| r.len() as u64).collect()
    }

    pub fn ring_mass(&self, ring: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ring_count(ring) as f64 / self.total as f64
        }
    }

    pub fn ring_masses(&self) -> Vec<f64> {
        (0..self.rings()).map(|j| self.ring_mass(j)).collect()
    }

    pub fn min_ring_mass(&self) -> f64 {
        self.ring_masses().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn ring_atoms(&self, ring: usize) -> &[Atom] {
        &self.rings[ring]
    }

    /// All atoms in insertion order.
    pub fn atoms(&self) -> Vec<(&Atom, usize)> {
        let mut all: Vec<(&Atom, usize)> =
            self.rings.iter().enumerate().flat_map(|(j, r)| r.iter().map(move |a| (a, j))).collect();
        all.sort_by_key(|(a, _)| a.step);
        all
    }

    /// `S(f)` for a bounded test function.
    pub fn expect(&self, f: impl Fn(&State) -> f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.rings.iter().flatten().map(|a| f(&a.state)).sum::<f64>() / self.total as f64
    }

    /// Probability vector over a finite space.
    pub fn probability_vector(&self, size: usize) -> Vec<f64> {
        let mut p = vec![0.0; size];
        if self.total == 0 {
            return p;
        }
        for a in self.rings.iter().flatten() {
            if let Some(i) = a.state.index() {
                p[i] += 1.0;
            }
        }
        p.iter_mut().for_each(|v| *v /= self.total as f64);
        p
    }

    /// `mu_x`: the measure conditioned on `ring`.
    pub fn restrict(&self, ring: usize) -> Result<Restricted<'_>> {
        let atoms = self
            .rings
            .get(ring)
            .ok_or_else(|| Error::Contract(format!("ring {ring} out of range")))?;
        if atoms.is_empty() {
            return Err(Error::Stability(format!("ring {ring} is empty in the feeding measure")));
        }
        Ok(Restricted { ring, atoms })
    }

    /// `mu_x` for the ring containing `x`.
    pub fn restrict_at(&self, space: &StateSpace, partition: &RingPartition, x: &State) -> Result<Restricted<'_>> {
        self.restrict(partition.assign_ring(space, x)?)
    }

    /// Uniform draw among the atoms of `ring`.
    pub fn draw<R: Rng + ?Sized>(&self, ring: usize, rng: &mut R) -> Result<&State> {
        Ok(self.restrict(ring)?.draw(rng))
    }
}

/// Conditional measure supported on one ring's atoms, uniform with
/// multiplicity.
#[derive(Clone, Copy, Debug)]
pub struct Restricted<'a> {
    ring: usize,
    atoms: &'a [Atom],
}

impl<'a> Restricted<'a> {
    pub fn ring(&self) -> usize {
        self.ring
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a State {
        &self.atoms[rng.random_range(0..self.atoms.len())].state
    }

    pub fn expect(&self, f: impl Fn(&State) -> f64) -> f64 {
        self.atoms.iter().map(|a| f(&a.state)).sum::<f64>() / self.atoms.len() as f64
    }

    pub fn probability(&self, pred: impl Fn(&State) -> bool) -> f64 {
        self.atoms.iter().filter(|a| pred(&a.state)).count() as f64 / self.atoms.len() as f64
    }

    pub fn probability_vector(&self, size: usize) -> Vec<f64> {
        let mut p = vec![0.0; size];
        for a in self.atoms {
            if let Some(i) = a.state.index() {
                p[i] += 1.0 / self.atoms.len() as f64;
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub step: u64,
    pub chain: usize,
    pub ring: usize,
    pub mass: f64,
}

/// Records rings of a feeding measure whose mass drops below `theta`.
#[derive(Clone, Debug)]
pub struct StabilityMonitor {
    theta: f64,
    abort: bool,
    log: Vec<Violation>,
    total_violations: u64,
    min_observed: f64,
}

impl StabilityMonitor {
    /// Violations beyond this many are counted but not stored.
    pub const LOG_CAPACITY: usize = 10_000;

    pub fn new(theta: f64, abort: bool) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::config(format!("stability theta must lie in (0, 1], got {theta}")));
        }
        Ok(StabilityMonitor { theta, abort, log: Vec::new(), total_violations: 0, min_observed: f64::INFINITY })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn aborts(&self) -> bool {
        self.abort
    }

    /// Checks every ring of `measure`; violations are logged and returned.
    pub fn check(&mut self, measure: &EmpiricalMeasure, chain: usize, step: u64) -> Vec<Violation> {
        let mut found = Vec::new();
        for (ring, mass) in measure.ring_masses().into_iter().enumerate() {
            self.min_observed = self.min_observed.min(mass);
            if mass < self.theta {
                found.push(Violation { step, chain, ring, mass });
            }
        }
        self.total_violations += found.len() as u64;
        let room = Self::LOG_CAPACITY.saturating_sub(self.log.len());
        self.log.extend(found.iter().take(room).cloned());
        found
    }

    pub fn violations(&self) -> &[Violation] {
        &self.log
    }

    pub fn total_violations(&self) -> u64 {
        self.total_violations
    }

    /// Smallest ring mass seen by any check, `None` before the first check.
    pub fn min_observed(&self) -> Option<f64> {
        self.min_observed.is_finite().then_some(self.min_observed)
    }
}

/// Outcome of [`fluctuation_run`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FluctuationReport {
    /// Steps at which every ring held mass at least `theta` before and after.
    pub steps_checked: u64,
    /// Largest `|S_{m+1,x}(f) - S_{m,x}(f)| / ((1/theta + 1/theta^2) / (m + 2))`.
    pub worst_ratio: f64,
}

/// Inserts `steps` states produced by `next` into a measure seeded with
/// `initial` and compares every one-step change of each ring-restricted
/// mean of `f` with `(1/theta + 1/theta^2) / (m + 2)`, where `m + 1` atoms
/// were stored before the insertion. `f` should satisfy `|f| <= 1`.
pub fn fluctuation_run(
    space: &StateSpace,
    partition: &RingPartition,
    initial: &[State],
    steps: usize,
    theta: f64,
    f: impl Fn(&State) -> f64,
    mut next: impl FnMut() -> State,
) -> Result<FluctuationReport> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config(format!("theta must lie in (0, 1], got {theta}")));
    }
    let mut m = EmpiricalMeasure::from_states(space, partition, initial)?;
    let d = partition.rings();
    let means = |m: &EmpiricalMeasure| -> Vec<Option<f64>> {
        (0..d).map(|j| m.restrict(j).ok().map(|r| r.expect(&f))).collect()
    };
    let mut report = FluctuationReport::default();
    let mut before = means(&m);
    for _ in 0..steps {
        let stored = m.total();
        let mass_before = m.min_ring_mass();
        m.record(space, partition, next())?;
        let after = means(&m);
        if mass_before >= theta && m.min_ring_mass() >= theta {
            let bound = (1.0 / theta + 1.0 / (theta * theta)) / (stored + 1) as f64;
            for (b, a) in before.iter().zip(&after) {
                if let (Some(b), Some(a)) = (b, a) {
                    report.worst_ratio = report.worst_ratio.max((a - b).abs() / bound);
                }
            }
            report.steps_checked += 1;
        }
        before = after;
    }
    Ok(report)
}

fn check_probability_vector(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `sup_A |mu(A) - xi(A)|`, i.e. half the l1 distance on a finite space.
pub fn tv_distance(mu: &[f64], xi: &[f64]) -> Result<f64> {
    if mu.len() != xi.len() {
        return Err(Error::Contract(format!("length mismatch: {} vs {}", mu.len(), xi.len())));
    }
    check_probability_vector(mu, "first measure")?;
    check_probability_vector(xi, "second measure")?;
    Ok(tv_unchecked(mu, xi))
}

pub(crate) fn tv_unchecked(mu: &[f64], xi: &[f64]) -> f64 {
    (0.5 * mu.iter().zip(xi).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0)
}
