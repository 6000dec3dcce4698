//! Transition mechanisms: local Metropolis-Hastings kernels, the swap kernel,
//! the selection kernel fed by an empirical measure, the non-linear mixture
//! and the original equi-energy jump.
//!
//! Random numbers are consumed in a fixed order within one step: branch
//! coin (only when `0 < eps < 1`), feeder draw, swap coin, local proposal,
//! local accept coin. Fixing the order makes runs bit-reproducible per seed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::state_space::{DensityLadder, RingPartition, State, StateSpace};

/// Proposal used by the local kernel of every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Proposal {
    /// Finite space: propose any state uniformly (the current one included).
    UniformIndependent,
    /// Finite space: step to `x - 1` or `x + 1` modulo the size.
    RandomNeighbor,
    /// Box: Gaussian random walk with one step size per level; proposals
    /// outside the box are rejected.
    GaussianWalk { step_sizes: Vec<f64> },
}

/// Which equi-energy move the upper chains use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelVariant {
    /// Draw from the feeder's ring, swap, then apply the local kernel.
    SelectionMutation,
    /// Independence MH jump to the feeder's ring draw, no trailing move.
    EeJump,
}

/// Swap acceptance rule. `Inverted` negates the log-ratio and exists only to
/// check that the verification suite catches a broken acceptance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapRule {
    #[default]
    Metropolis,
    Inverted,
}

/// Mixture weight `eps` of the non-linear kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    epsilon: f64,
}

impl MixtureSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        Ok(MixtureSpec { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Local,
    Selection,
    EeJump,
    /// Interaction branch chosen but the feeder ring was empty; the local
    /// kernel ran instead.
    Fallback,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Local => "local",
            Branch::Selection => "selection",
            Branch::EeJump => "ee-jump",
            Branch::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: State,
    pub branch: Branch,
    /// Outcome of the swap / jump acceptance, when one was attempted.
    pub swap_accepted: Option<bool>,
}

impl StepOutcome {
    fn local(state: State) -> Self {
        StepOutcome { state, branch: Branch::Local, swap_accepted: None }
    }
}

/// Everything a kernel step needs: the ladder, the ring partition and the
/// local proposal.
#[derive(Clone, Debug)]
pub struct Model {
    ladder: DensityLadder,
    partition: RingPartition,
    proposal: Proposal,
    swap_rule: SwapRule,
}

impl Model {
    pub fn new(ladder: DensityLadder, partition: RingPartition, proposal: Proposal) -> Result<Self> {
        match (&proposal, ladder.space()) {
            (Proposal::UniformIndependent | Proposal::RandomNeighbor, StateSpace::Finite { .. }) => {}
            (Proposal::GaussianWalk { step_sizes }, StateSpace::Box { .. }) => {
                if step_sizes.len() != ladder.levels() {
                    return Err(Error::config(format!(
                        "need one step size per level ({}), got {}",
                        ladder.levels(),
                        step_sizes.len()
                    )));
                }
                if step_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::config("step sizes must be positive"));
                }
            }
            (p, s) => return Err(Error::config(format!("proposal {p:?} does not fit space {s:?}"))),
        }
        if let Some(size) = ladder.space().size() {
            let labels = partition.labels(ladder.space())?;
            if labels.iter().any(|&j| j >= partition.rings()) || labels.len() != size {
                return Err(Error::config("ring labels do not match the state space"));
            }
        }
        Ok(Model { ladder, partition, proposal, swap_rule: SwapRule::Metropolis })
    }

    pub fn with_swap_rule(mut self, rule: SwapRule) -> Self {
        self.swap_rule = rule;
        self
    }

    pub fn ladder(&self) -> &DensityLadder {
        &self.ladder
    }

    pub fn partition(&self) -> &RingPartition {
        &self.partition
    }

    pub fn space(&self) -> &StateSpace {
        self.ladder.space()
    }

    pub fn proposal(&self) -> &Proposal {
        &self.proposal
    }

    pub fn swap_rule(&self) -> SwapRule {
        self.swap_rule
    }

    pub fn levels(&self) -> usize {
        self.ladder.levels()
    }

    pub fn ring_of(&self, x: &State) -> Result<usize> {
        self.partition.assign_ring(self.space(), x)
    }

    /// One Metropolis-Hastings transition targeting level `level`.
    /// Returns the new state and whether the proposal was accepted.
    pub fn mh_step<R: Rng + ?Sized>(&self, level: usize, x: &State, rng: &mut R) -> (State, bool) {
        let proposal = match (&self.proposal, x) {
            (Proposal::UniformIndependent, State::Index(_)) => {
                let size = self.space().size().expect("finite space");
                Some(State::Index(rng.random_range(0..size)))
            }
            (Proposal::RandomNeighbor, State::Index(i)) => {
                let size = self.space().size().expect("finite space");
                let up: bool = rng.random();
                Some(State::Index(if up { (i + 1) % size } else { (i + size - 1) % size }))
            }
            (Proposal::GaussianWalk { step_sizes }, State::Point(p)) => {
                let s = step_sizes[level];
                let y: Vec<f64> = p
                    .iter()
                    .map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        v + s * z
                    })
                    .collect();
                Some(State::Point(y))
            }
            _ => None,
        };
        let u: f64 = rng.random();
        let Some(y) = proposal else {
            return (x.clone(), false);
        };
        if !self.space().contains(&y) {
            return (x.clone(), false);
        }
        let log_ratio = self.ladder.log_density(level, &y) - self.ladder.log_density(level, x);
        if u < accept_from_log_ratio(log_ratio) {
            (y, true)
        } else {
            (x.clone(), false)
        }
    }

    /// `alpha_i(x, y) = 1 ∧ pi_i(y) pi_{i-1}(x) / (pi_i(x) pi_{i-1}(y))`.
    pub fn swap_accept_prob(&self, level: usize, x: &State, y: &State) -> Result<f64> {
        if level == 0 || level >= self.levels() {
            return Err(Error::Contract(format!("swap level must be in 1..{}, got {level}", self.levels())));
        }
        let (hi, lo) = (self.ladder.level(level), self.ladder.level(level - 1));
        let terms = [hi.eval(y), hi.eval(x), lo.eval(x), lo.eval(y)];
        if let Some(bad) = terms.iter().find(|t| !t.is_finite()) {
            return Err(Error::numerical(format!("non-finite log-density {bad} in swap ratio for ({x}, {y})")));
        }
        let mut log_ratio = (terms[0] - terms[1]) + (terms[2] - terms[3]);
        if self.swap_rule == SwapRule::Inverted {
            log_ratio = -log_ratio;
        }
        Ok(accept_from_log_ratio(log_ratio))
    }

    /// Swap kernel on a pair: exchanged with probability `alpha`, else kept.
    pub fn swap_step<R: Rng + ?Sized>(&self, level: usize, x: &State, y: &State, rng: &mut R) -> Result<(State, State, bool)> {
        let alpha = self.swap_accept_prob(level, x, y)?;
        let u: f64 = rng.random();
        Ok(if u < alpha { (y.clone(), x.clone(), true) } else { (x.clone(), y.clone(), false) })
    }

    /// Selection/mutation move: draw `z` from the feeder restricted to the
    /// ring of `x`, swap `(x, z)`, then one local move from the first
    /// coordinate. Falls back to the local kernel when that ring is empty.
    pub fn selection_step<R: Rng + ?Sized>(
        &self,
        level: usize,
        x: &State,
        feed: &EmpiricalMeasure,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let ring = self.ring_of(x)?;
        let Ok(restricted) = feed.restrict(ring) else {
            let (state, _) = self.mh_step(level, x, rng);
            return Ok(StepOutcome { state, branch: Branch::Fallback, swap_accepted: None });
        };
        let z = restricted.draw(rng);
        let (first, _, accepted) = self.swap_step(level, x, z, rng)?;
        let (state, _) = self.mh_step(level, &first, rng);
        Ok(StepOutcome { state, branch: Branch::Selection, swap_accepted: Some(accepted) })
    }

    /// Non-linear kernel `(1 - eps) K_i + eps Q_{mu_x, i}`.
    pub fn nonlinear_step<R: Rng + ?Sized>(
        &self,
        level: usize,
        x: &State,
        feed: &EmpiricalMeasure,
        mixture: MixtureSpec,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if interaction_branch(mixture, rng) {
            self.selection_step(level, x, feed, rng)
        } else {
            Ok(StepOutcome::local(self.mh_step(level, x, rng).0))
        }
    }

    /// Original equi-energy move: with probability `eps` an independence
    /// jump to a feeder atom of the same ring, accepted with `alpha`.
    pub fn ee_jump_step<R: Rng + ?Sized>(
        &self,
        level: usize,
        x: &State,
        feed: &EmpiricalMeasure,
        mixture: MixtureSpec,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if !interaction_branch(mixture, rng) {
            return Ok(StepOutcome::local(self.mh_step(level, x, rng).0));
        }
        let ring = self.ring_of(x)?;
        let Ok(restricted) = feed.restrict(ring) else {
            let (state, _) = self.mh_step(level, x, rng);
            return Ok(StepOutcome { state, branch: Branch::Fallback, swap_accepted: None });
        };
        let z = restricted.draw(rng);
        let alpha = self.swap_accept_prob(level, x, z)?;
        let u: f64 = rng.random();
        let accepted = u < alpha;
        let state = if accepted { z.clone() } else { x.clone() };
        Ok(StepOutcome { state, branch: Branch::EeJump, swap_accepted: Some(accepted) })
    }

    /// Dispatches on the kernel variant.
    pub fn interacting_step<R: Rng + ?Sized>(
        &self,
        variant: KernelVariant,
        level: usize,
        x: &State,
        feed: &EmpiricalMeasure,
        mixture: MixtureSpec,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        match variant {
            KernelVariant::SelectionMutation => self.nonlinear_step(level, x, feed, mixture, rng),
            KernelVariant::EeJump => self.ee_jump_step(level, x, feed, mixture, rng),
        }
    }
}

fn interaction_branch<R: Rng + ?Sized>(mixture: MixtureSpec, rng: &mut R) -> bool {
    let eps = mixture.epsilon();
    if eps <= 0.0 {
        false
    } else if eps >= 1.0 {
        true
    } else {
        rng.random::<f64>() < eps
    }
}

/// `min(1, exp(log_ratio))`; underflow gives 0.
pub(crate) fn accept_from_log_ratio(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_space::LogDensity;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(levels: Vec<Vec<f64>>, labels: Vec<usize>, proposal: Proposal) -> Model {
        let space = StateSpace::finite(levels[0].len()).unwrap();
        let ladder =
            DensityLadder::new(space, levels.iter().map(|w| LogDensity::from_weights(w).unwrap()).collect()).unwrap();
        Model::new(ladder, RingPartition::from_labels(labels).unwrap(), proposal).unwrap()
    }

    fn two_state() -> Model {
        model(vec![vec![1.0, 1.0], vec![1.0, 2.0]], vec![0, 1], Proposal::UniformIndependent)
    }

    fn within_3se(count: usize, n: usize, p: f64) -> bool {
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
        (count as f64 / n as f64 - p).abs() <= 3.0 * se
    }

    #[test]
    fn mixture_spec_bounds() {
        assert!(MixtureSpec::new(-0.1).is_err());
        assert!(MixtureSpec::new(1.1).is_err());
        assert!(MixtureSpec::new(f64::NAN).is_err());
        assert_eq!(MixtureSpec::new(0.3).unwrap().epsilon(), 0.3);
    }

    #[test]
    fn model_rejects_mismatched_proposal() {
        let space = StateSpace::finite(2).unwrap();
        let ladder = DensityLadder::new(space, vec![LogDensity::Uniform]).unwrap();
        let err = Model::new(ladder, RingPartition::single(), Proposal::GaussianWalk { step_sizes: vec![1.0] });
        assert!(err.is_err());
    }

    #[test]
    fn equal_density_proposal_is_accepted() {
        let m = model(vec![vec![1.0, 1.0, 1.0]], vec![0, 0, 0], Proposal::UniformIndependent);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (y, accepted) = m.mh_step(0, &State::Index(1), &mut rng);
            assert!(accepted);
            let _ = y;
        }
    }

    #[test]
    fn mh_two_state_transition_frequencies() {
        // closed form: row 0 = [1/2, 1/2], row 1 = [1/4, 3/4]
        let m = two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let from0 = (0..n).filter(|_| m.mh_step(1, &State::Index(0), &mut rng).0 == State::Index(1)).count();
        let from1 = (0..n).filter(|_| m.mh_step(1, &State::Index(1), &mut rng).0 == State::Index(0)).count();
        assert!(within_3se(from0, n, 0.5));
        assert!(within_3se(from1, n, 0.25));
    }

    #[test]
    fn mh_occupation_matches_target() {
        let w = [1.0, 3.0, 2.0, 5.0, 4.0];
        let m = model(vec![w.to_vec()], vec![0; 5], Proposal::RandomNeighbor);
        let pi = m.ladder().distribution(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = State::Index(0);
        let n = 400_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            x = m.mh_step(0, &x, &mut rng).0;
            counts[x.index().unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&pi) {
            // correlated chain: loose absolute tolerance
            assert!((*c as f64 / n as f64 - p).abs() < 0.01, "{counts:?} vs {pi:?}");
        }
    }

    #[test]
    fn swap_accept_examples() {
        let m = two_state();
        let (a, b) = (State::Index(0), State::Index(1));
        assert_eq!(m.swap_accept_prob(1, &a, &a).unwrap(), 1.0);
        assert_eq!(m.swap_accept_prob(1, &a, &b).unwrap(), 1.0);
        assert_abs_diff_eq!(m.swap_accept_prob(1, &b, &a).unwrap(), 0.5, epsilon = 1e-15);
        assert!(m.swap_accept_prob(0, &a, &b).is_err());

        let same = model(vec![vec![1.0, 3.0, 7.0], vec![1.0, 3.0, 7.0]], vec![0, 0, 1], Proposal::UniformIndependent);
        for x in 0..3 {
            for y in 0..3 {
                assert_eq!(same.swap_accept_prob(1, &State::Index(x), &State::Index(y)).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn swap_min_form_detailed_balance() {
        let m = model(
            vec![vec![1.0, 2.0, 5.0, 0.5], vec![3.0, 1.0, 2.0, 4.0]],
            vec![0, 0, 1, 1],
            Proposal::UniformIndependent,
        );
        let p0 = m.ladder().distribution(0).unwrap();
        let p1 = m.ladder().distribution(1).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                let (sx, sy) = (State::Index(x), State::Index(y));
                let lhs = p1[x] * p0[y] * m.swap_accept_prob(1, &sx, &sy).unwrap();
                let rhs = p1[y] * p0[x] * m.swap_accept_prob(1, &sy, &sx).unwrap();
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn swap_step_frequencies_and_support() {
        let m = two_state();
        let (a, b) = (State::Index(0), State::Index(1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y, acc) = m.swap_step(1, &a, &a, &mut rng).unwrap();
        assert!(acc && x == a && y == a);
        let n = 100_000;
        let mut swapped = 0;
        for _ in 0..n {
            let (x, y, acc) = m.swap_step(1, &b, &a, &mut rng).unwrap();
            assert!((x == b && y == a && !acc) || (x == a && y == b && acc));
            swapped += usize::from(acc);
        }
        assert!(within_3se(swapped, n, 0.5));
    }

    #[test]
    fn selection_with_forced_swap_behaves_like_local_kernel_from_atom() {
        // single feeder atom z = 1 in ring 0, equal levels so alpha = 1
        let m = model(vec![vec![1.0, 2.0, 1.0], vec![1.0, 2.0, 1.0]], vec![0, 0, 1], Proposal::UniformIndependent);
        let feed = EmpiricalMeasure::from_states(m.space(), m.partition(), &[State::Index(1), State::Index(2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let out = m.selection_step(1, &State::Index(0), &feed, &mut rng).unwrap();
            assert_eq!(out.swap_accepted, Some(true));
            counts[out.state.index().unwrap()] += 1;
        }
        // K(1, .) with uniform proposal: to 0 w.p. 1/3 * 1/2, to 2 w.p. 1/3 * 1/2
        let expect = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
        for (c, p) in counts.iter().zip(expect) {
            assert!(within_3se(*c, n, p), "{counts:?}");
        }
    }

    #[test]
    fn selection_with_rejected_swap_keeps_first_coordinate() {
        // pi_1 = pi_0 * g with g(1) tiny: alpha(0, 1) ~ 1e-12
        let m = model(
            vec![vec![1.0, 1.0, 1.0], vec![1.0, 1e-12, 1.0]],
            vec![0, 0, 1],
            Proposal::UniformIndependent,
        );
        let feed = EmpiricalMeasure::from_states(m.space(), m.partition(), &[State::Index(1), State::Index(2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let out = m.selection_step(1, &State::Index(0), &feed, &mut rng).unwrap();
            counts[out.state.index().unwrap()] += 1;
        }
        // K(0, .): stays unless proposing 2 (prob 1/3); proposing 1 is rejected almost surely
        assert!(within_3se(counts[0], n, 2.0 / 3.0));
        assert!(within_3se(counts[2], n, 1.0 / 3.0));
    }

    #[test]
    fn empty_feeder_ring_falls_back() {
        let m = two_state();
        let feed = EmpiricalMeasure::point_mass(2, 0, State::Index(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.selection_step(1, &State::Index(1), &feed, &mut rng).unwrap();
        assert_eq!(out.branch, Branch::Fallback);
        let one = MixtureSpec::new(1.0).unwrap();
        let out = m.ee_jump_step(1, &State::Index(1), &feed, one, &mut rng).unwrap();
        assert_eq!(out.branch, Branch::Fallback);
    }

    #[test]
    fn mixture_branches() {
        let m = two_state();
        let feed = EmpiricalMeasure::from_states(m.space(), m.partition(), &[State::Index(0), State::Index(1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = State::Index(0);
        for _ in 0..100 {
            let zero = m.nonlinear_step(1, &x, &feed, MixtureSpec::new(0.0).unwrap(), &mut rng).unwrap();
            assert_eq!(zero.branch, Branch::Local);
            let one = m.nonlinear_step(1, &x, &feed, MixtureSpec::new(1.0).unwrap(), &mut rng).unwrap();
            assert_eq!(one.branch, Branch::Selection);
        }
        let n = 100_000;
        let mix = MixtureSpec::new(0.3).unwrap();
        let sel = (0..n)
            .filter(|_| m.nonlinear_step(1, &x, &feed, mix, &mut rng).unwrap().branch == Branch::Selection)
            .count();
        assert!(within_3se(sel, n, 0.3));
    }

    #[test]
    fn epsilon_zero_replays_local_chain() {
        let m = two_state();
        let feed = EmpiricalMeasure::from_states(m.space(), m.partition(), &[State::Index(0), State::Index(1)]).unwrap();
        let zero = MixtureSpec::new(0.0).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(77);
        let mut b = ChaCha8Rng::seed_from_u64(77);
        let (mut x, mut y) = (State::Index(0), State::Index(0));
        for _ in 0..500 {
            x = m.nonlinear_step(1, &x, &feed, zero, &mut a).unwrap().state;
            y = m.mh_step(1, &y, &mut b).0;
            assert_eq!(x, y);
            let j = m.ee_jump_step(1, &x, &feed, zero, &mut a.clone()).unwrap();
            assert_eq!(j.branch, Branch::Local);
        }
    }

    #[test]
    fn ee_jump_support_and_forced_acceptance() {
        let m = model(
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 1.0, 2.0, 3.0]],
            vec![0, 0, 1, 1],
            Proposal::UniformIndependent,
        );
        let feed = EmpiricalMeasure::from_states(m.space(), m.partition(), &[0, 1, 1, 3].map(State::Index)).unwrap();
        let one = MixtureSpec::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for start in 0..4 {
            let x = State::Index(start);
            let ring = m.ring_of(&x).unwrap();
            for _ in 0..200 {
                let out = m.ee_jump_step(1, &x, &feed, one, &mut rng).unwrap();
                assert_eq!(m.ring_of(&out.state).unwrap(), ring);
                if out.swap_accepted == Some(true) {
                    assert!(feed.ring_atoms(ring).iter().any(|a| a.state == out.state));
                }
            }
        }
        // single atom 3 in ring 1; from 2, alpha(2, 3) = 1 ∧ (3 * 3) / (2 * 4) = 1
        let single = EmpiricalMeasure::from_states(m.space(), m.partition(), &[State::Index(0), State::Index(3)]).unwrap();
        for _ in 0..100 {
            let out = m.ee_jump_step(1, &State::Index(2), &single, one, &mut rng).unwrap();
            assert_eq!(out.state, State::Index(3));
        }
    }

    #[test]
    fn gaussian_walk_stays_in_box() {
        let space = StateSpace::bounded_box(vec![-1.0], vec![1.0]).unwrap();
        let ladder = DensityLadder::new(space, vec![LogDensity::Uniform]).unwrap();
        let m = Model::new(ladder, RingPartition::single(), Proposal::GaussianWalk { step_sizes: vec![2.0] }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = State::Point(vec![0.9]);
        let mut moved = 0;
        for _ in 0..1000 {
            let (y, acc) = m.mh_step(0, &x, &mut rng);
            assert!(m.space().contains(&y));
            moved += usize::from(acc);
            x = y;
        }
        assert!(moved > 100 && moved < 1000);
    }
}
