//! The staged multi-chain equi-energy process.
//!
//! Chain 0 runs the local kernel from the first round. Chain `k` starts
//! moving once `N_1 + ... + N_k` rounds have elapsed and then uses the
//! empirical measure of chain `k - 1` as its feeder. Inactive chains hold
//! their state and their empirical measure stays a point mass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Branch, KernelVariant, MixtureSpec, Model};
use crate::measures::{EmpiricalMeasure, StabilityMonitor, Violation};
use crate::state_space::State;

/// Which feeder measure a chain reads within a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// Chains update in order `0, 1, ...`; chain `k` sees the feeder
    /// measure that already absorbed this round's state.
    #[default]
    Sequential,
    /// Every chain reads the feeder measure as it stood at the start of the
    /// round.
    Snapshot,
}

/// When chain 0 and its empirical measure stop updating.
#[derive(Clone, Debug, PartialEq)]
pub enum Freeze {
    Never,
    /// Chain 0 moves in rounds `1..=n` only.
    AfterRound(u64),
    /// Chain 0's measure is replaced by these atoms and never updates.
    Atoms(Vec<State>),
}

#[derive(Clone, Debug)]
pub struct SamplerSettings {
    pub variant: KernelVariant,
    /// Mixture weight per level; entry 0 is unused.
    pub mixtures: Vec<MixtureSpec>,
    /// Activation offsets `N_1, ..., N_{r-1}`.
    pub schedule: Vec<u64>,
    pub update_order: UpdateOrder,
    pub theta: f64,
    pub abort_on_violation: bool,
}

impl SamplerSettings {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let r = model.levels();
        if r < 2 {
            return Err(Error::config("the sampler needs at least two levels"));
        }
        if self.mixtures.len() != r {
            return Err(Error::config(format!("need {r} mixture weights (entry 0 unused), got {}", self.mixtures.len())));
        }
        if self.schedule.len() != r - 1 {
            return Err(Error::config(format!("schedule needs N_1..N_{} ({} entries), got {}", r - 1, r - 1, self.schedule.len())));
        }
        StabilityMonitor::new(self.theta, self.abort_on_violation)?;
        Ok(())
    }

    /// `N_{1:k}`: rounds after which chain `k` starts moving.
    pub fn activation_round(&self, chain: usize) -> u64 {
        self.schedule[..chain].iter().sum()
    }
}

/// Per-chain record of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainStep {
    pub chain: usize,
    pub state: State,
    pub ring: usize,
    /// `None` when the chain held.
    pub branch: Option<Branch>,
    pub swap_accepted: Option<bool>,
}

impl ChainStep {
    pub fn holds(&self) -> bool {
        self.branch.is_none()
    }
}

/// Derives the stream of chain `chain` from a run seed.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Current states, empirical measures and random streams of all chains.
#[derive(Clone, Debug)]
pub struct ChainEnsemble<'m> {
    model: &'m Model,
    settings: SamplerSettings,
    states: Vec<State>,
    measures: Vec<EmpiricalMeasure>,
    moves: Vec<u64>,
    fallbacks: Vec<u64>,
    round: u64,
    rngs: Vec<ChaCha8Rng>,
    monitor: StabilityMonitor,
    freeze: Freeze,
}

impl<'m> ChainEnsemble<'m> {
    /// All chains at their initial points with `S^k = delta_{x_0^k}`.
    pub fn new(model: &'m Model, settings: SamplerSettings, initial: Vec<State>, seed: u64) -> Result<Self> {
        settings.validate(model)?;
        let r = model.levels();
        if initial.len() != r {
            return Err(Error::config(format!("need {r} initial states, got {}", initial.len())));
        }
        let d = model.partition().rings();
        let measures = initial
            .iter()
            .map(|x| Ok(EmpiricalMeasure::point_mass(d, model.ring_of(x)?, x.clone())))
            .collect::<Result<Vec<_>>>()?;
        let monitor = StabilityMonitor::new(settings.theta, settings.abort_on_violation)?;
        Ok(ChainEnsemble {
            model,
            states: initial,
            measures,
            moves: vec![0; r],
            fallbacks: vec![0; r],
            round: 0,
            rngs: (0..r).map(|k| chain_rng(seed, k)).collect(),
            monitor,
            freeze: Freeze::Never,
            settings,
        })
    }

    /// Applies a freeze of chain 0. `Atoms` replaces its measure now.
    pub fn set_freeze(&mut self, freeze: Freeze) -> Result<()> {
        match &freeze {
            Freeze::Atoms(atoms) => {
                if atoms.is_empty() {
                    return Err(Error::config("frozen feeder needs at least one atom"));
                }
                self.measures[0] = EmpiricalMeasure::from_states(self.model.space(), self.model.partition(), atoms)?;
                self.states[0] = atoms[atoms.len() - 1].clone();
            }
            Freeze::AfterRound(n) if *n < 1 => return Err(Error::config("freeze round must be at least 1")),
            _ => {}
        }
        self.freeze = freeze;
        Ok(())
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn settings(&self) -> &SamplerSettings {
        &self.settings
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn measure(&self, chain: usize) -> &EmpiricalMeasure {
        &self.measures[chain]
    }

    pub fn moves(&self, chain: usize) -> u64 {
        self.moves[chain]
    }

    pub fn fallbacks(&self, chain: usize) -> u64 {
        self.fallbacks[chain]
    }

    pub fn monitor(&self) -> &StabilityMonitor {
        &self.monitor
    }

    /// Whether `chain` moves in round `round` (1-based).
    pub fn is_active(&self, chain: usize, round: u64) -> bool {
        if chain == 0 {
            match self.freeze {
                Freeze::Never => true,
                Freeze::AfterRound(n) => round <= n,
                Freeze::Atoms(_) => false,
            }
        } else {
            round > self.settings.activation_round(chain)
        }
    }

    /// Advances the round counter and every active chain by one step.
    pub fn step_round(&mut self) -> Result<Vec<ChainStep>> {
        self.round += 1;
        let n = self.round;
        let r = self.states.len();
        let order: Vec<usize> = match self.settings.update_order {
            UpdateOrder::Sequential => (0..r).collect(),
            // updating top-down leaves each feeder untouched until its reader is done
            UpdateOrder::Snapshot => (0..r).rev().collect(),
        };
        let mut steps: Vec<Option<ChainStep>> = vec![None; r];
        for k in order {
            steps[k] = Some(self.advance(k, n)?);
        }
        self.check_stability(n)?;
        Ok(steps.into_iter().map(|s| s.expect("every chain visited")).collect())
    }

    fn advance(&mut self, k: usize, round: u64) -> Result<ChainStep> {
        let model = self.model;
        if !self.is_active(k, round) {
            let ring = model.ring_of(&self.states[k])?;
            return Ok(ChainStep { chain: k, state: self.states[k].clone(), ring, branch: None, swap_accepted: None });
        }
        let outcome = if k == 0 {
            let (state, _) = model.mh_step(0, &self.states[0], &mut self.rngs[0]);
            crate::kernels::StepOutcome { state, branch: Branch::Local, swap_accepted: None }
        } else {
            model.interacting_step(
                self.settings.variant,
                k,
                &self.states[k],
                &self.measures[k - 1],
                self.settings.mixtures[k],
                &mut self.rngs[k],
            )?
        };
        if outcome.branch == Branch::Fallback {
            self.fallbacks[k] += 1;
        }
        let ring = self.measures[k].record(model.space(), model.partition(), outcome.state.clone())?;
        self.states[k] = outcome.state.clone();
        self.moves[k] += 1;
        Ok(ChainStep {
            chain: k,
            state: outcome.state,
            ring,
            branch: Some(outcome.branch),
            swap_accepted: outcome.swap_accepted,
        })
    }

    /// Feeder `k` is monitored from round `N_{1:k+1}` on, i.e. while chain
    /// `k + 1` is reading it.
    fn check_stability(&mut self, round: u64) -> Result<()> {
        let r = self.states.len();
        for k in 0..r - 1 {
            if round < self.settings.activation_round(k + 1) {
                continue;
            }
            let found = self.monitor.check(&self.measures[k], k, round);
            if self.monitor.aborts() {
                if let Some(v) = found.first() {
                    return Err(Error::Stability(format!(
                        "round {}: chain {} ring {} mass {} below theta {}",
                        v.step,
                        v.chain,
                        v.ring,
                        v.mass,
                        self.monitor.theta()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One row of the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub round: u64,
    pub chain: usize,
    pub state: State,
    pub ring: usize,
    /// `"init"`, `"hold"` or the branch taken.
    pub branch: &'static str,
    pub swap_accepted: Option<bool>,
}

impl TraceRecord {
    pub fn holds(&self) -> bool {
        self.branch == "hold"
    }
}

/// Ring counts of every chain's empirical measure at a given round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RingSnapshot {
    pub round: u64,
    pub chain: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub chains: usize,
    pub rounds: u64,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<RingSnapshot>,
    pub violations: Vec<Violation>,
    pub total_violations: u64,
    pub min_ring_mass: Option<f64>,
    pub fallbacks: Vec<u64>,
    pub final_measures: Vec<EmpiricalMeasure>,
}

impl Trace {
    pub fn chain_records(&self, chain: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.chain == chain)
    }

    /// Ring counts rebuilt from the records up to and including `round`.
    pub fn replay_counts(&self, chain: usize, round: u64, rings: usize) -> Vec<u64> {
        let mut counts = vec![0; rings];
        for r in self.chain_records(chain).filter(|r| r.round <= round && !r.holds()) {
            counts[r.ring] += 1;
        }
        counts
    }
}

/// Run-level parameters that are not part of the sampler itself.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub initial: Vec<State>,
    pub seed: u64,
    pub total_rounds: u64,
    /// Snapshot ring counts every this many rounds (0 disables).
    pub snapshot_every: u64,
}

fn snapshot(ensemble: &ChainEnsemble<'_>, snapshots: &mut Vec<RingSnapshot>) {
    for k in 0..ensemble.states().len() {
        let m = ensemble.measure(k);
        snapshots.push(RingSnapshot { round: ensemble.round(), chain: k, counts: m.ring_counts(), total: m.total() });
    }
}

/// Runs the full staged schedule and records every chain in every round.
pub fn run(model: &Model, settings: SamplerSettings, spec: &RunSpec) -> Result<Trace> {
    run_with_freeze(model, settings, spec, Freeze::Never)
}

/// As [`run`] but chain 0 and its measure stop updating as `freeze` says.
/// Requires exactly two levels.
pub fn run_frozen_feeder(model: &Model, settings: SamplerSettings, spec: &RunSpec, freeze: Freeze) -> Result<Trace> {
    if model.levels() != 2 {
        return Err(Error::config("frozen-feeder runs need exactly two levels"));
    }
    run_with_freeze(model, settings, spec, freeze)
}

fn run_with_freeze(model: &Model, settings: SamplerSettings, spec: &RunSpec, freeze: Freeze) -> Result<Trace> {
    let mut ensemble = ChainEnsemble::new(model, settings, spec.initial.clone(), spec.seed)?;
    ensemble.set_freeze(freeze)?;
    let r = model.levels();
    let mut records = Vec::with_capacity(r * (spec.total_rounds as usize + 1));
    for k in 0..r {
        let x = ensemble.states()[k].clone();
        records.push(TraceRecord { round: 0, chain: k, ring: model.ring_of(&x)?, state: x, branch: "init", swap_accepted: None });
    }
    let mut snapshots = Vec::new();
    if spec.snapshot_every > 0 {
        snapshot(&ensemble, &mut snapshots);
    }
    for _ in 0..spec.total_rounds {
        let steps = ensemble.step_round()?;
        let round = ensemble.round();
        records.extend(steps.into_iter().map(|s| TraceRecord {
            round,
            chain: s.chain,
            branch: s.branch.map_or("hold", |b| b.as_str()),
            state: s.state,
            ring: s.ring,
            swap_accepted: s.swap_accepted,
        }));
        if spec.snapshot_every > 0 && round % spec.snapshot_every == 0 {
            snapshot(&ensemble, &mut snapshots);
        }
    }
    Ok(Trace {
        chains: r,
        rounds: spec.total_rounds,
        records,
        snapshots,
        violations: ensemble.monitor().violations().to_vec(),
        total_violations: ensemble.monitor().total_violations(),
        min_ring_mass: ensemble.monitor().min_observed(),
        fallbacks: (0..r).map(|k| ensemble.fallbacks(k)).collect(),
        final_measures: (0..r).map(|k| ensemble.measure(k).clone()).collect(),
    })
}
