//! JSON experiment configuration and the objects built from it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{KernelVariant, MixtureSpec, Model, Proposal, SwapRule};
use crate::measures::StabilityMonitor;
use crate::sampler::{Freeze, RunSpec, SamplerSettings, UpdateOrder};
use crate::state_space::{build_tempered_ladder, DensityLadder, LogDensity, RingPartition, State, StateSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpaceConfig {
    Finite { size: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

/// One unnormalized density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensityConfig {
    /// Positive weights per finite state.
    Weights { values: Vec<f64> },
    /// Log-weights per finite state.
    LogTable { values: Vec<f64> },
    Uniform,
    GaussianMixture { weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<f64> },
}

impl DensityConfig {
    fn build(&self) -> Result<LogDensity> {
        match self {
            DensityConfig::Weights { values } => LogDensity::from_weights(values),
            DensityConfig::LogTable { values } => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("log-table entries must be finite"));
                }
                Ok(LogDensity::Table(values.clone()))
            }
            DensityConfig::Uniform => Ok(LogDensity::Uniform),
            DensityConfig::GaussianMixture { weights, means, sds } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != sds.len() {
                    return Err(Error::config("gaussian-mixture needs equally many weights, means and sds"));
                }
                if weights.iter().any(|w| !(*w > 0.0)) || sds.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::config("gaussian-mixture weights and sds must be positive"));
                }
                Ok(LogDensity::GaussianMixture { weights: weights.clone(), means: means.clone(), sds: sds.clone() })
            }
        }
    }
}

/// Either explicit levels (feeder first, target last) or a tempered ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LadderConfig {
    Levels { levels: Vec<DensityConfig> },
    Tempered { base: DensityConfig, temperatures: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionConfig {
    Single,
    /// One ring label per finite state.
    Labels { labels: Vec<usize> },
    /// Level sets of `-log pi_r` cut at the given increasing thresholds.
    Energy { thresholds: Vec<f64> },
}

/// A finite state index or a point of the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateConfig {
    Index(usize),
    Point(Vec<f64>),
}

impl StateConfig {
    fn build(&self) -> State {
        match self {
            StateConfig::Index(i) => State::Index(*i),
            StateConfig::Point(p) => State::Point(p.clone()),
        }
    }
}

/// A named bounded test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: FunctionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FunctionKind {
    RingIndicator { ring: usize },
    Coordinate { index: usize },
    Table { values: Vec<f64> },
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub theta: f64,
    #[serde(default)]
    pub abort: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FreezeConfig {
    /// Chain 0 moves in rounds `1..=n` only.
    AtRound(u64),
    /// Chain 0's measure is fixed to these atoms from the start.
    Atoms(Vec<StateConfig>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceConfig,
    pub ladder: LadderConfig,
    pub partition: PartitionConfig,
    pub proposal: Proposal,
    pub kernel: KernelVariant,
    /// Mixture weight for levels `1..r`.
    pub epsilon: Vec<f64>,
    /// Activation offsets `N_1..N_{r-1}`.
    pub schedule: Vec<u64>,
    pub initial_states: Vec<StateConfig>,
    pub total_rounds: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub test_functions: Vec<FunctionConfig>,
    pub stability: StabilityConfig,
    #[serde(default)]
    pub update_order: UpdateOrder,
    #[serde(default)]
    pub snapshot_every: u64,
    #[serde(default)]
    pub rate_grid: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze: Option<FreezeConfig>,
    /// Length of the frozen-feeder run; defaults to `total_rounds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_rounds: Option<u64>,
    #[serde(default)]
    pub swap_rule: SwapRule,
}

fn one() -> usize {
    1
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub abort_on_stability: bool,
}

/// A test function evaluated on states.
#[derive(Clone, Debug)]
pub struct TestFunction {
    pub name: String,
    kind: FunctionKind,
    labels: Option<Vec<usize>>,
}

impl TestFunction {
    pub fn eval(&self, model: &Model, x: &State) -> f64 {
        match &self.kind {
            FunctionKind::RingIndicator { ring } => {
                let r = match (&self.labels, x) {
                    (Some(l), State::Index(i)) => l[*i],
                    _ => model.ring_of(x).unwrap_or(usize::MAX),
                };
                f64::from(u8::from(r == *ring))
            }
            FunctionKind::Coordinate { index } => match x {
                State::Index(i) => *i as f64,
                State::Point(p) => p[*index],
            },
            FunctionKind::Table { values } => x.index().map_or(f64::NAN, |i| values[i]),
            FunctionKind::Constant { value } => *value,
        }
    }

    /// Values on every state of a finite space.
    pub fn table(&self, model: &Model) -> Vec<f64> {
        model.space().enumerate().iter().map(|x| self.eval(model, x)).collect()
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, FunctionKind::Constant { .. })
    }
}

/// Everything a run needs, built and validated from a config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub settings: SamplerSettings,
    pub initial: Vec<State>,
    pub functions: Vec<TestFunction>,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.replicates {
            self.replicates = r;
        }
        if o.abort_on_stability {
            self.stability.abort = true;
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build(&self) -> Result<Experiment> {
        let space = match &self.space {
            SpaceConfig::Finite { size } => StateSpace::finite(*size)?,
            SpaceConfig::Box { lower, upper } => StateSpace::bounded_box(lower.clone(), upper.clone())?,
        };
        let ladder = match &self.ladder {
            LadderConfig::Levels { levels } => {
                let built = levels.iter().map(DensityConfig::build).collect::<Result<Vec<_>>>()?;
                DensityLadder::new(space.clone(), built)?
            }
            LadderConfig::Tempered { base, temperatures } => build_tempered_ladder(space.clone(), base.build()?, temperatures)?,
        };
        let r = ladder.levels();
        if r < 2 {
            return Err(Error::config("need at least two levels"));
        }
        let partition = match &self.partition {
            PartitionConfig::Single => RingPartition::single(),
            PartitionConfig::Labels { labels } => {
                if space.size() != Some(labels.len()) {
                    return Err(Error::config("ring labels need one entry per finite state"));
                }
                RingPartition::from_labels(labels.clone())?
            }
            PartitionConfig::Energy { thresholds } => {
                RingPartition::from_neg_log_density(ladder.level(r - 1).clone(), thresholds.clone())?
            }
        };
        if space.is_finite() {
            crate::state_space::ladder_masses(&ladder, &partition)?;
        }
        let model = Model::new(ladder, partition, self.proposal.clone())?.with_swap_rule(self.swap_rule);

        if self.epsilon.len() != r - 1 {
            return Err(Error::config(format!("epsilon needs {} entries (levels 1..{r}), got {}", r - 1, self.epsilon.len())));
        }
        let mut mixtures = vec![MixtureSpec::new(0.0)?];
        for e in &self.epsilon {
            mixtures.push(MixtureSpec::new(*e)?);
        }
        let settings = SamplerSettings {
            variant: self.kernel,
            mixtures,
            schedule: self.schedule.clone(),
            update_order: self.update_order,
            theta: self.stability.theta,
            abort_on_violation: self.stability.abort,
        };
        settings.validate(&model)?;
        StabilityMonitor::new(self.stability.theta, self.stability.abort)?;

        let burn_in = settings.activation_round(r - 1);
        if self.total_rounds <= burn_in {
            return Err(Error::config(format!("total_rounds {} must exceed the activation round {burn_in}", self.total_rounds)));
        }
        if self.replicates < 1 {
            return Err(Error::config("replicates must be at least 1"));
        }
        if self.initial_states.len() != r {
            return Err(Error::config(format!("need {r} initial states, got {}", self.initial_states.len())));
        }
        let initial: Vec<State> = self.initial_states.iter().map(StateConfig::build).collect();
        for x in &initial {
            model.space().check(x).map_err(|e| Error::Config(format!("initial state: {e}")))?;
        }
        if let Some(bad) = self.rate_grid.iter().find(|n| **n <= burn_in) {
            return Err(Error::config(format!("rate grid value {bad} does not exceed the activation round {burn_in}")));
        }
        if self.rate_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("rate grid must be strictly increasing"));
        }
        match &self.freeze {
            Some(FreezeConfig::AtRound(0)) => return Err(Error::config("freeze round must be at least 1")),
            Some(FreezeConfig::Atoms(a)) => {
                if a.is_empty() {
                    return Err(Error::config("frozen atoms must not be empty"));
                }
                for x in a {
                    model.space().check(&x.build()).map_err(|e| Error::Config(format!("frozen atom: {e}")))?;
                }
            }
            _ => {}
        }
        if self.bias_rounds == Some(0) {
            return Err(Error::config("bias_rounds must be positive"));
        }

        let labels = model.space().is_finite().then(|| model.partition().labels(model.space())).transpose()?;
        let mut names = std::collections::BTreeSet::new();
        let mut functions = Vec::new();
        for fc in &self.test_functions {
            if !names.insert(fc.name.clone()) {
                return Err(Error::config(format!("duplicate test function name {:?}", fc.name)));
            }
            match &fc.kind {
                FunctionKind::RingIndicator { ring } if *ring >= model.partition().rings() => {
                    return Err(Error::config(format!("function {:?}: ring {ring} does not exist", fc.name)));
                }
                FunctionKind::Coordinate { index } if !model.space().is_finite() && *index >= model.space().dim() => {
                    return Err(Error::config(format!("function {:?}: coordinate {index} out of range", fc.name)));
                }
                FunctionKind::Table { values } if model.space().size() != Some(values.len()) => {
                    return Err(Error::config(format!("function {:?}: table needs one value per finite state", fc.name)));
                }
                FunctionKind::Table { values } if values.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::config(format!("function {:?}: table values must be finite", fc.name)));
                }
                FunctionKind::Constant { value } if !value.is_finite() => {
                    return Err(Error::config(format!("function {:?}: constant must be finite", fc.name)));
                }
                _ => {}
            }
            functions.push(TestFunction { name: fc.name.clone(), kind: fc.kind.clone(), labels: labels.clone() });
        }

        Ok(Experiment { hash: self.hash(), config: self.clone(), model, settings, initial, functions })
    }
}

impl Experiment {
    pub fn levels(&self) -> usize {
        self.model.levels()
    }

    /// `N_{1:r-1}`: the round after which the target chain moves.
    pub fn burn_in(&self) -> u64 {
        self.settings.activation_round(self.levels() - 1)
    }

    pub fn run_spec(&self, seed: u64, total_rounds: u64) -> RunSpec {
        RunSpec { initial: self.initial.clone(), seed, total_rounds, snapshot_every: self.config.snapshot_every }
    }

    pub fn freeze(&self) -> Option<Freeze> {
        self.config.freeze.as_ref().map(|f| match f {
            FreezeConfig::AtRound(n) => Freeze::AfterRound(*n),
            FreezeConfig::Atoms(a) => Freeze::Atoms(a.iter().map(StateConfig::build).collect()),
        })
    }

    pub fn require_finite(&self, what: &str) -> Result<usize> {
        self.model.space().size().ok_or_else(|| Error::config(format!("{what} needs a finite state space")))
    }
}

/// Seed of replicate `index`: SplitMix64 applied to
/// `master + (index + 1) * 0x9E3779B97F4A7C15`.
pub fn replicate_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FOUR_STATE: &str = r#"{
        "space": {"kind": "finite", "size": 4},
        "ladder": {"levels": [{"kind": "uniform"}, {"kind": "weights", "values": [1, 1, 2, 4]}]},
        "partition": {"kind": "labels", "labels": [0, 0, 1, 1]},
        "proposal": {"kind": "uniform-independent"},
        "kernel": "selection-mutation",
        "epsilon": [0.5],
        "schedule": [20],
        "initial_states": [0, 0],
        "total_rounds": 200,
        "seed": 7,
        "test_functions": [
            {"name": "upper", "kind": "ring-indicator", "ring": 1},
            {"name": "x", "kind": "coordinate", "index": 0}
        ],
        "stability": {"theta": 0.1}
    }"#;

    fn parse(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    fn with(key: &str, value: serde_json::Value) -> ExperimentConfig {
        let mut v: serde_json::Value = serde_json::from_str(FOUR_STATE).unwrap();
        v[key] = value;
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn builds_four_state_fixture() {
        let e = parse(FOUR_STATE).build().unwrap();
        assert_eq!(e.levels(), 2);
        assert_eq!(e.burn_in(), 20);
        assert_eq!(e.config.replicates, 1);
        assert_eq!(e.functions[0].table(&e.model), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(e.functions[1].table(&e.model), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(e.hash.len(), 64);
    }

    #[test]
    fn tempered_ladder_and_energy_rings() {
        let text = r#"{
            "space": {"kind": "box", "lower": [-5], "upper": [5]},
            "ladder": {"base": {"kind": "gaussian-mixture", "weights": [1], "means": [[0]], "sds": [1]}, "temperatures": [4, 1]},
            "partition": {"kind": "energy", "thresholds": [1.5]},
            "proposal": {"kind": "gaussian-walk", "step_sizes": [2, 1]},
            "kernel": "ee-jump",
            "epsilon": [0.1],
            "schedule": [10],
            "initial_states": [[0], [0]],
            "total_rounds": 50,
            "seed": 1,
            "stability": {"theta": 0.05}
        }"#;
        let e = parse(text).build().unwrap();
        assert_eq!(e.model.partition().rings(), 2);
        assert_eq!(e.model.ring_of(&State::Point(vec![0.0])).unwrap(), 0);
        assert_eq!(e.model.ring_of(&State::Point(vec![3.0])).unwrap(), 1);
    }

    #[test]
    fn rejects_invalid_values() {
        let cases = [
            ("stability", serde_json::json!({"theta": 1.5})),
            ("stability", serde_json::json!({"theta": 0.0})),
            ("epsilon", serde_json::json!([1.5])),
            ("epsilon", serde_json::json!([0.5, 0.5])),
            ("schedule", serde_json::json!([500])),
            ("replicates", serde_json::json!(0)),
            ("initial_states", serde_json::json!([0, 9])),
            ("rate_grid", serde_json::json!([10, 100])),
            ("rate_grid", serde_json::json!([100, 50])),
            ("freeze", serde_json::json!({"at_round": 0})),
            ("partition", serde_json::json!({"kind": "labels", "labels": [0, 0, 0, 2]})),
            ("test_functions", serde_json::json!([{"name": "t", "kind": "table", "values": [1]}])),
            ("test_functions", serde_json::json!([{"name": "r", "kind": "ring-indicator", "ring": 2}])),
        ];
        for (key, value) in cases {
            let err = with(key, value.clone()).build().unwrap_err();
            assert_eq!(err.exit_code(), 2, "{key} = {value}: {err}");
        }
        assert!(ExperimentConfig::from_json("{").is_err());
        assert!(ExperimentConfig::from_json(&FOUR_STATE.replace("\"seed\"", "\"sed\"")).is_err());
    }

    #[test]
    fn log_table_and_single_ring() {
        let c = with("ladder", serde_json::json!({"levels": [{"kind": "uniform"}, {"kind": "log-table", "values": [0, 0, 0, 0]}]}));
        assert!(c.build().is_ok());
        let mut c = with("partition", serde_json::json!({"kind": "single"}));
        assert!(c.build().is_err());
        c.test_functions.truncate(0);
        assert_eq!(c.build().unwrap().model.partition().rings(), 1);
    }

    #[test]
    fn overrides_change_the_hash() {
        let mut c = parse(FOUR_STATE);
        let h = c.hash();
        assert_eq!(h, parse(FOUR_STATE).hash());
        c.apply(&Overrides { seed: Some(99), replicates: Some(3), abort_on_stability: true });
        assert_eq!((c.seed, c.replicates, c.stability.abort), (99, 3, true));
        assert_ne!(c.hash(), h);
    }

    #[test]
    fn replicate_seeds_are_distinct_and_stable() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| replicate_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(replicate_seed(42, 3), replicate_seed(42, 3));
        assert_ne!(replicate_seed(42, 0), replicate_seed(43, 0));
    }
}
