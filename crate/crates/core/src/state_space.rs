//! State spaces, density ladders and energy-ring partitions.
//!
//! Densities are unnormalized and always handled as log-densities. On a
//! finite space they are with respect to counting measure; on a box they are
//! with respect to Lebesgue measure restricted to the box.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A point of the state space.
#[derive(Clone, Debug, PartialEq)]
pub enum State {
    /// Index into an enumerated finite space.
    Index(usize),
    /// Coordinates of a point inside a bounded box.
    Point(Vec<f64>),
}

impl State {
    pub fn index(&self) -> Option<usize> {
        match self {
            State::Index(i) => Some(*i),
            State::Point(_) => None,
        }
    }

    pub fn coords(&self) -> Option<&[f64]> {
        match self {
            State::Index(_) => None,
            State::Point(p) => Some(p),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Index(i) => write!(f, "{i}"),
            State::Point(p) => {
                for (k, v) in p.iter().enumerate() {
                    if k > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StateSpace {
    Finite { size: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl StateSpace {
    pub fn finite(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!("finite space needs at least 2 states, got {size}")));
        }
        Ok(StateSpace::Finite { size })
    }

    pub fn bounded_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::config("box bounds must be non-empty and of equal length"));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::config(format!("box coordinate {k}: need finite lower < upper")));
            }
        }
        Ok(StateSpace::Box { lower, upper })
    }

    /// Number of states of a finite space.
    pub fn size(&self) -> Option<usize> {
        match self {
            StateSpace::Finite { size } => Some(*size),
            StateSpace::Box { .. } => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StateSpace::Finite { .. } => 1,
            StateSpace::Box { lower, .. } => lower.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, StateSpace::Finite { .. })
    }

    pub fn contains(&self, x: &State) -> bool {
        match (self, x) {
            (StateSpace::Finite { size }, State::Index(i)) => i < size,
            (StateSpace::Box { lower, upper }, State::Point(p)) => {
                p.len() == lower.len()
                    && p.iter().zip(lower.iter().zip(upper)).all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
            }
            _ => false,
        }
    }

    pub fn check(&self, x: &State) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain(format!("{x} is not in {self:?}")))
        }
    }

    /// All states of a finite space, in index order.
    pub fn enumerate(&self) -> Vec<State> {
        match self {
            StateSpace::Finite { size } => (0..*size).map(State::Index).collect(),
            StateSpace::Box { .. } => Vec::new(),
        }
    }

    /// Column names used when states are written to CSV.
    pub fn column_names(&self) -> Vec<String> {
        match self {
            StateSpace::Finite { .. } => vec!["state".to_string()],
            StateSpace::Box { lower, .. } => (0..lower.len()).map(|k| format!("x{k}")).collect(),
        }
    }
}

pub type LogDensityFn = Arc<dyn Fn(&State) -> f64 + Send + Sync>;

/// An unnormalized log-density.
#[derive(Clone)]
pub enum LogDensity {
    /// One log-weight per state of a finite space.
    Table(Vec<f64>),
    /// Constant density.
    Uniform,
    /// Isotropic Gaussian mixture on a box.
    GaussianMixture { weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<f64> },
    /// `base / temperature`.
    Tempered { base: Arc<LogDensity>, temperature: f64 },
    Custom(LogDensityFn),
}

impl fmt::Debug for LogDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogDensity::Table(t) => f.debug_tuple("Table").field(t).finish(),
            LogDensity::Uniform => f.write_str("Uniform"),
            LogDensity::GaussianMixture { weights, means, sds } => f
                .debug_struct("GaussianMixture")
                .field("weights", weights)
                .field("means", means)
                .field("sds", sds)
                .finish(),
            LogDensity::Tempered { base, temperature } => f
                .debug_struct("Tempered")
                .field("base", base)
                .field("temperature", temperature)
                .finish(),
            LogDensity::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl LogDensity {
    /// Table of log-weights from positive unnormalized weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("density weights must be finite and strictly positive"));
        }
        Ok(LogDensity::Table(weights.iter().map(|w| w.ln()).collect()))
    }

    pub fn custom(f: impl Fn(&State) -> f64 + Send + Sync + 'static) -> Self {
        LogDensity::Custom(Arc::new(f))
    }

    /// Evaluates the log-density. Kind mismatches evaluate to NaN and are
    /// rejected when the ladder is validated.
    pub fn eval(&self, x: &State) -> f64 {
        match self {
            LogDensity::Table(t) => match x {
                State::Index(i) => t.get(*i).copied().unwrap_or(f64::NAN),
                State::Point(_) => f64::NAN,
            },
            LogDensity::Uniform => 0.0,
            LogDensity::GaussianMixture { weights, means, sds } => match x {
                State::Point(p) => gaussian_mixture_log_density(weights, means, sds, p),
                State::Index(_) => f64::NAN,
            },
            LogDensity::Tempered { base, temperature } => base.eval(x) / temperature,
            LogDensity::Custom(f) => f(x),
        }
    }
}

fn gaussian_mixture_log_density(weights: &[f64], means: &[Vec<f64>], sds: &[f64], p: &[f64]) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(means.iter().zip(sds))
        .map(|(w, (m, s))| {
            if m.len() != p.len() {
                return f64::NAN;
            }
            let sq: f64 = m.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            w.ln() - 0.5 * sq / (s * s) - p.len() as f64 * s.ln()
        })
        .collect();
    log_sum_exp(&terms)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into a probability vector.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logw);
    logw.iter().map(|l| (l - lse).exp()).collect()
}

/// The targets `pi_0, ..., pi_{r-1}` over a shared space; the last level is
/// the distribution of interest and level `i` feeds level `i + 1`.
#[derive(Clone, Debug)]
pub struct DensityLadder {
    space: StateSpace,
    levels: Vec<LogDensity>,
}

impl DensityLadder {
    pub fn new(space: StateSpace, levels: Vec<LogDensity>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("a ladder needs at least one level"));
        }
        let ladder = DensityLadder { space, levels };
        ladder.validate()?;
        Ok(ladder)
    }

    /// Every level must be finite on every probed point: all states of a
    /// finite space, the corners and centre of a box.
    fn validate(&self) -> Result<()> {
        let probes = match &self.space {
            StateSpace::Finite { .. } => self.space.enumerate(),
            StateSpace::Box { lower, upper } => {
                let k = lower.len();
                let mut pts = vec![State::Point(
                    lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect(),
                )];
                if k <= 10 {
                    for mask in 0..(1usize << k) {
                        pts.push(State::Point(
                            (0..k).map(|j| if mask >> j & 1 == 1 { upper[j] } else { lower[j] }).collect(),
                        ));
                    }
                }
                pts
            }
        };
        for (level, density) in self.levels.iter().enumerate() {
            for x in &probes {
                let v = density.eval(x);
                if !v.is_finite() {
                    return Err(Error::config(format!("level {level} log-density is {v} at {x}")));
                }
            }
        }
        Ok(())
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &LogDensity {
        &self.levels[i]
    }

    pub fn log_density(&self, level: usize, x: &State) -> f64 {
        self.levels[level].eval(x)
    }

    /// Exact normalized distribution of a level on a finite space.
    pub fn distribution(&self, level: usize) -> Result<Vec<f64>> {
        if !self.space.is_finite() {
            return Err(Error::config("exact distributions need a finite space"));
        }
        let logw: Vec<f64> = self.space.enumerate().iter().map(|x| self.log_density(level, x)).collect();
        Ok(normalize_log_weights(&logw))
    }
}

/// Builds `pi_i ∝ base^(1 / T_i)`. Temperatures must be positive,
/// non-increasing and end at 1.
pub fn build_tempered_ladder(space: StateSpace, base: LogDensity, temperatures: &[f64]) -> Result<DensityLadder> {
    if temperatures.is_empty() {
        return Err(Error::config("need at least one temperature"));
    }
    if temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::config("temperatures must be finite and strictly positive"));
    }
    if temperatures.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::config("temperatures must be non-increasing"));
    }
    if *temperatures.last().unwrap() != 1.0 {
        return Err(Error::config("the last temperature must be 1"));
    }
    let base = Arc::new(base);
    let levels = temperatures
        .iter()
        .map(|&t| {
            if t == 1.0 {
                (*base).clone()
            } else {
                LogDensity::Tempered { base: Arc::clone(&base), temperature: t }
            }
        })
        .collect();
    DensityLadder::new(space, levels)
}

#[derive(Clone)]
pub enum RingAssignment {
    /// Explicit ring label per finite state.
    Labels(Vec<usize>),
    /// Ring `j` is `{x : c_j <= H(x) < c_{j+1}}` with `c_0 = -inf` and a
    /// trailing `+inf`; `thresholds` holds the interior cut points.
    Energy { energy: LogDensityFn, thresholds: Vec<f64> },
}

impl fmt::Debug for RingAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RingAssignment::Labels(l) => f.debug_tuple("Labels").field(l).finish(),
            RingAssignment::Energy { thresholds, .. } => {
                f.debug_struct("Energy").field("thresholds", thresholds).finish_non_exhaustive()
            }
        }
    }
}

/// Partition of the state space into energy rings `0..d`.
#[derive(Clone, Debug)]
pub struct RingPartition {
    rings: usize,
    assignment: RingAssignment,
}

impl RingPartition {
    /// A single ring covering everything.
    pub fn single() -> Self {
        RingPartition {
            rings: 1,
            assignment: RingAssignment::Energy { energy: Arc::new(|_| 0.0), thresholds: Vec::new() },
        }
    }

    /// Explicit labels; every ring `0..=max(labels)` must be used.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let rings = labels.iter().copied().max().map_or(0, |m| m + 1);
        if rings == 0 {
            return Err(Error::config("ring labels are empty"));
        }
        for j in 0..rings {
            if !labels.contains(&j) {
                return Err(Error::config(format!("ring {j} has no states")));
            }
        }
        Ok(RingPartition { rings, assignment: RingAssignment::Labels(labels) })
    }

    /// Level sets of an energy function cut at strictly increasing thresholds.
    pub fn from_energy(energy: impl Fn(&State) -> f64 + Send + Sync + 'static, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|c| !c.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("energy thresholds must be finite and strictly increasing"));
        }
        Ok(RingPartition {
            rings: thresholds.len() + 1,
            assignment: RingAssignment::Energy { energy: Arc::new(energy), thresholds },
        })
    }

    /// Rings from `H(x) = -log pi(x)` of the given density.
    pub fn from_neg_log_density(density: LogDensity, thresholds: Vec<f64>) -> Result<Self> {
        Self::from_energy(move |x| -density.eval(x), thresholds)
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn assignment(&self) -> &RingAssignment {
        &self.assignment
    }

    /// Ring index of `x`; total and deterministic on the domain.
    pub fn assign_ring(&self, space: &StateSpace, x: &State) -> Result<usize> {
        space.check(x)?;
        match &self.assignment {
            RingAssignment::Labels(labels) => {
                let i = x.index().expect("finite state");
                labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Domain(format!("state {i} has no ring label")))
            }
            RingAssignment::Energy { energy, thresholds } => {
                let h = energy(x);
                if h.is_nan() {
                    return Err(Error::Domain(format!("energy is NaN at {x}")));
                }
                Ok(thresholds.partition_point(|c| *c <= h))
            }
        }
    }

    /// Labels for every state of a finite space.
    pub fn labels(&self, space: &StateSpace) -> Result<Vec<usize>> {
        space.enumerate().iter().map(|x| self.assign_ring(space, x)).collect()
    }
}

/// Matrix of ring masses `pi_i(E_j)` (rows are levels), computed exactly on a
/// finite space. Every entry must be positive.
pub fn ladder_masses(ladder: &DensityLadder, partition: &RingPartition) -> Result<Vec<Vec<f64>>> {
    let space = ladder.space();
    if !space.is_finite() {
        return Err(Error::config("exact ring masses need a finite space; use ladder_masses_on_grid"));
    }
    let labels = partition.labels(space)?;
    let rows = (0..ladder.levels())
        .map(|level| {
            let p = ladder.distribution(level)?;
            let mut row = vec![0.0; partition.rings()];
            for (prob, &ring) in p.iter().zip(&labels) {
                row[ring] += prob;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    check_positive_masses(&rows)?;
    Ok(rows)
}

/// Midpoint-rule ring masses on a box, with `points_per_dim` cells per axis.
pub fn ladder_masses_on_grid(
    ladder: &DensityLadder,
    partition: &RingPartition,
    points_per_dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let StateSpace::Box { lower, upper } = ladder.space() else {
        return ladder_masses(ladder, partition);
    };
    let k = lower.len();
    let total = points_per_dim
        .checked_pow(k as u32)
        .filter(|n| *n > 0 && *n <= 50_000_000)
        .ok_or_else(|| Error::config("quadrature grid is empty or too large"))?;
    let mut logw = vec![Vec::with_capacity(total); ladder.levels()];
    let mut rings = Vec::with_capacity(total);
    let mut idx = vec![0usize; k];
    for _ in 0..total {
        let p: Vec<f64> = (0..k)
            .map(|j| lower[j] + (idx[j] as f64 + 0.5) * (upper[j] - lower[j]) / points_per_dim as f64)
            .collect();
        let x = State::Point(p);
        rings.push(partition.assign_ring(ladder.space(), &x)?);
        for (level, lw) in logw.iter_mut().enumerate() {
            lw.push(ladder.log_density(level, &x));
        }
        for digit in idx.iter_mut() {
            *digit += 1;
            if *digit < points_per_dim {
                break;
            }
            *digit = 0;
        }
    }
    let rows: Vec<Vec<f64>> = logw
        .iter()
        .map(|lw| {
            let p = normalize_log_weights(lw);
            let mut row = vec![0.0; partition.rings()];
            for (prob, &ring) in p.iter().zip(&rings) {
                row[ring] += prob;
            }
            row
        })
        .collect();
    check_positive_masses(&rows)?;
    Ok(rows)
}

fn check_positive_masses(rows: &[Vec<f64>]) -> Result<()> {
    for (level, row) in rows.iter().enumerate() {
        if let Some(ring) = row.iter().position(|m| *m <= 0.0) {
            return Err(Error::config(format!("ring {ring} has zero mass under level {level}")));
        }
    }
    Ok(())
}
