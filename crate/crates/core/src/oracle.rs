//! Exact transition matrices on enumerated finite spaces, stationary
//! measures, the Poisson equation, and numeric checks of the kernel
//! identities and bounds behind the convergence argument.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{accept_from_log_ratio, Model, Proposal};
use crate::measures::tv_unchecked;
use crate::state_space::State;

/// Tolerance on row sums of every constructed matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Row-stochastic matrix over states `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix(DMatrix<f64>);

impl TransitionMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Contract("transition matrix must be square and non-empty".into()));
        }
        for (i, row) in m.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < -ROW_SUM_TOL) {
                return Err(Error::Contract(format!("row {i} has negative or non-finite entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!("row {i} sums to {s}")));
            }
        }
        Ok(TransitionMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("rows must all have length equal to the row count".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    /// `P(f)(x) = sum_y P(x, y) f(y)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (&self.0 * DVector::from_column_slice(f)).iter().copied().collect()
    }

    /// `mu P`.
    pub fn push_forward(&self, mu: &[f64]) -> Vec<f64> {
        (DVector::from_column_slice(mu).transpose() * &self.0).iter().copied().collect()
    }

    pub fn compose(&self, other: &TransitionMatrix) -> TransitionMatrix {
        TransitionMatrix(&self.0 * &other.0)
    }

    pub fn power(&self, n: usize) -> TransitionMatrix {
        let mut out = DMatrix::identity(self.size(), self.size());
        for _ in 0..n {
            out = &out * &self.0;
        }
        TransitionMatrix(out)
    }

    /// `(1 - eps) self + eps other`.
    pub fn mix(&self, other: &TransitionMatrix, eps: f64) -> TransitionMatrix {
        TransitionMatrix(&self.0 * (1.0 - eps) + &other.0 * eps)
    }

    /// `max_x sum_y |P(x,y) - Q(x,y)|`, the operator norm on bounded functions.
    pub fn operator_distance(&self, other: &TransitionMatrix) -> f64 {
        (&self.0 - &other.0)
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.0.row_iter().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

fn finite_size(model: &Model) -> Result<usize> {
    model
        .space()
        .size()
        .ok_or_else(|| Error::config("the exact oracle needs a finite state space"))
}

fn log_densities(model: &Model, level: usize) -> Result<Vec<f64>> {
    Ok(model.space().enumerate().iter().map(|x| model.ladder().log_density(level, x)).collect())
}

/// Exact MH matrix of the local kernel at `level`.
pub fn k_matrix(model: &Model, level: usize) -> Result<TransitionMatrix> {
    let n = finite_size(model)?;
    let lp = log_densities(model, level)?;
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let mut off = 0.0;
        let targets: Vec<(usize, f64)> = match model.proposal() {
            Proposal::UniformIndependent => (0..n).map(|y| (y, 1.0 / n as f64)).collect(),
            Proposal::RandomNeighbor => vec![((x + 1) % n, 0.5), ((x + n - 1) % n, 0.5)],
            Proposal::GaussianWalk { .. } => return Err(Error::config("Gaussian proposals have no finite matrix")),
        };
        for (y, q) in targets {
            if y != x {
                let p = q * accept_from_log_ratio(lp[y] - lp[x]);
                m[(x, y)] += p;
                off += p;
            }
        }
        m[(x, x)] = 1.0 - off;
    }
    TransitionMatrix::new(m)
}

/// `mu_x` for every ring: row `j` is `mu` conditioned on ring `j`.
pub fn ring_conditionals(model: &Model, mu: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = finite_size(model)?;
    if mu.len() != n {
        return Err(Error::Contract(format!("measure has length {}, space has {n} states", mu.len())));
    }
    let labels = model.partition().labels(model.space())?;
    let d = model.partition().rings();
    let mut masses = vec![0.0; d];
    for (p, &j) in mu.iter().zip(&labels) {
        masses[j] += p;
    }
    if let Some(j) = masses.iter().position(|m| *m <= 0.0) {
        return Err(Error::Stability(format!("ring {j} has zero mass under the feeding measure")));
    }
    Ok((0..d)
        .map(|j| mu.iter().zip(&labels).map(|(p, &l)| if l == j { p / masses[j] } else { 0.0 }).collect())
        .collect())
}

/// Exact `alpha(x, y)` table at `level`.
pub fn swap_matrix(model: &Model, level: usize) -> Result<Vec<Vec<f64>>> {
    let n = finite_size(model)?;
    let states: Vec<State> = (0..n).map(State::Index).collect();
    states
        .iter()
        .map(|x| states.iter().map(|y| model.swap_accept_prob(level, x, y)).collect())
        .collect()
}

/// Exact matrix of the selection kernel fed by `mu`:
/// row `x` is `sum_z mu_x(z) [alpha(x,z) K(z,.) + (1 - alpha(x,z)) K(x,.)]`.
pub fn q_matrix(model: &Model, level: usize, mu: &[f64]) -> Result<TransitionMatrix> {
    let n = finite_size(model)?;
    let k = k_matrix(model, level)?;
    let cond = ring_conditionals(model, mu)?;
    let labels = model.partition().labels(model.space())?;
    let alpha = swap_matrix(model, level)?;
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let mux = &cond[labels[x]];
        for z in 0..n {
            if mux[z] == 0.0 {
                continue;
            }
            let a = alpha[x][z];
            for y in 0..n {
                m[(x, y)] += mux[z] * (a * k.get(z, y) + (1.0 - a) * k.get(x, y));
            }
        }
    }
    TransitionMatrix::new(m)
}

/// Exact jump part of the original equi-energy move:
/// row `x` is `sum_z mu_x(z) [alpha(x,z) delta_z + (1 - alpha(x,z)) delta_x]`.
pub fn jump_matrix(model: &Model, level: usize, mu: &[f64]) -> Result<TransitionMatrix> {
    let n = finite_size(model)?;
    let cond = ring_conditionals(model, mu)?;
    let labels = model.partition().labels(model.space())?;
    let alpha = swap_matrix(model, level)?;
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let mux = &cond[labels[x]];
        for z in 0..n {
            let a = alpha[x][z];
            m[(x, z)] += mux[z] * a;
            m[(x, x)] += mux[z] * (1.0 - a);
        }
    }
    TransitionMatrix::new(m)
}

/// `(1 - eps) K_i + eps Q_{mu_x, i}`.
pub fn nonlinear_matrix(model: &Model, level: usize, mu: &[f64], eps: f64) -> Result<TransitionMatrix> {
    check_eps(eps)?;
    Ok(k_matrix(model, level)?.mix(&q_matrix(model, level, mu)?, eps))
}

/// `(1 - eps) K_i + eps J_{mu_x, i}` for the original jump.
pub fn ee_jump_nonlinear_matrix(model: &Model, level: usize, mu: &[f64], eps: f64) -> Result<TransitionMatrix> {
    check_eps(eps)?;
    Ok(k_matrix(model, level)?.mix(&jump_matrix(model, level, mu)?, eps))
}

fn check_eps(eps: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::config(format!("epsilon must lie in [0, 1], got {eps}")))
    }
}

/// Unique `omega` with `omega P = omega`, `sum omega = 1`.
pub fn stationary(p: &TransitionMatrix) -> Result<Vec<f64>> {
    let n = p.size();
    // (I - P)^T omega = 0 with the last equation replaced by sum omega = 1
    let mut a = (DMatrix::identity(n, n) - p.matrix()).transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.lu();
    let mut omega = lu
        .solve(&b)
        .ok_or_else(|| Error::numerical("stationary solve is singular; chain is not irreducible"))?;
    // one step of iterative refinement
    let residual = &b - {
        let mut a2 = (DMatrix::identity(n, n) - p.matrix()).transpose();
        for j in 0..n {
            a2[(n - 1, j)] = 1.0;
        }
        a2 * &omega
    };
    if let Some(corr) = lu.solve(&residual) {
        omega += corr;
    }
    let omega: Vec<f64> = omega.iter().copied().collect();
    let res = stationary_residual(p, &omega);
    if res > 1e-10 || omega.iter().any(|v| *v < -1e-12) {
        return Err(Error::numerical(format!("stationary solve residual {res:e}; omega = {omega:?}")));
    }
    Ok(omega.into_iter().map(|v| v.max(0.0)).collect())
}

/// `max |omega P - omega|`.
pub fn stationary_residual(p: &TransitionMatrix, omega: &[f64]) -> f64 {
    p.push_forward(omega).iter().zip(omega).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct PoissonSolution {
    /// `f_hat`, normalized so `omega(f_hat) = 0`.
    pub solution: Vec<f64>,
    pub f: Vec<f64>,
    pub stationary: Vec<f64>,
    /// `omega(f)`.
    pub mean: f64,
    /// `max |(I - P) f_hat - (f - omega(f))|`.
    pub residual: f64,
}

/// Solves `f_hat - P f_hat = f - omega(f)` through the fundamental matrix
/// `(I - P + 1 omega^T)^{-1}`.
pub fn poisson_solve(p: &TransitionMatrix, f: &[f64]) -> Result<PoissonSolution> {
    let n = p.size();
    if f.len() != n {
        return Err(Error::Contract(format!("function has length {}, chain has {n} states", f.len())));
    }
    let omega = stationary(p)?;
    let mean: f64 = omega.iter().zip(f).map(|(w, v)| w * v).sum();
    let w = DVector::from_column_slice(&omega);
    let z = DMatrix::identity(n, n) - p.matrix() + DVector::from_element(n, 1.0) * w.transpose();
    let rhs = DVector::from_iterator(n, f.iter().map(|v| v - mean));
    let lu = z.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or_else(|| Error::numerical("fundamental matrix is singular"))?;
    let r = &rhs - &z * &sol;
    if let Some(c) = lu.solve(&r) {
        sol += c;
    }
    let solution: Vec<f64> = sol.iter().copied().collect();
    let residual = poisson_residual(p, &solution, f, mean);
    if residual > 1e-10 {
        return Err(Error::numerical(format!("Poisson residual {residual:e} exceeds 1e-10")));
    }
    Ok(PoissonSolution { solution, f: f.to_vec(), stationary: omega, mean, residual })
}

pub fn poisson_residual(p: &TransitionMatrix, fhat: &[f64], f: &[f64], mean: f64) -> f64 {
    let pf = p.apply(fhat);
    (0..f.len()).map(|x| ((fhat[x] - pf[x]) - (f[x] - mean)).abs()).fold(0.0, f64::max)
}

/// Partial sum `sum_{n < terms} [P^n f - omega(f)]` of the series solution.
pub fn poisson_series(p: &TransitionMatrix, f: &[f64], omega: &[f64], terms: usize) -> Vec<f64> {
    let mean: f64 = omega.iter().zip(f).map(|(w, v)| w * v).sum();
    let mut acc = vec![0.0; f.len()];
    let mut pnf = f.to_vec();
    for _ in 0..terms {
        for (a, v) in acc.iter_mut().zip(&pnf) {
            *a += v - mean;
        }
        pnf = p.apply(&pnf);
    }
    acc
}

/// Tail bound for the truncated series: `osc(f) M rho^terms / (1 - rho)`.
pub fn series_envelope(f: &[f64], m: f64, rho: f64, terms: usize) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = f.iter().copied().fold(f64::INFINITY, f64::min);
    if rho >= 1.0 {
        return f64::INFINITY;
    }
    (max - min) * m * rho.powi(terms as i32) / (1.0 - rho)
}

#[derive(Clone, Debug, Serialize)]
pub struct RateEstimate {
    /// Constant of the Doeblin bound (always 1).
    pub m: f64,
    /// One-step minorization mass `phi = sum_y min_x P(x, y)`.
    pub phi: f64,
    /// `1 - phi`.
    pub doeblin_rho: f64,
    /// Geometric-mean decay of `sup_x tv(P^n(x,.), omega)` over the
    /// computed horizon.
    pub fitted_rho: f64,
    /// Largest one-step ratio `tv_{n+1} / tv_n`.
    pub max_step_ratio: f64,
    /// `sup_x tv(P^n(x,.), omega)` for `n = 1..=horizon`.
    pub tv_sequence: Vec<f64>,
}

impl RateEstimate {
    pub fn is_monotone(&self) -> bool {
        self.tv_sequence.windows(2).all(|w| w[1] <= w[0] + 1e-14)
    }
}

/// Constructive Doeblin pair and the observed decay over `n = 1..50`.
pub fn geometric_rate_estimate(p: &TransitionMatrix) -> Result<RateEstimate> {
    geometric_rate_estimate_with_horizon(p, 50)
}

pub fn geometric_rate_estimate_with_horizon(p: &TransitionMatrix, horizon: usize) -> Result<RateEstimate> {
    let omega = stationary(p)?;
    let n = p.size();
    let phi: f64 = (0..n).map(|y| (0..n).map(|x| p.get(x, y)).fold(f64::INFINITY, f64::min)).sum();
    let doeblin_rho = (1.0 - phi).max(0.0);
    let mut tv_sequence = Vec::with_capacity(horizon);
    let mut pn = p.clone();
    for _ in 0..horizon {
        let sup = (0..n).map(|x| tv_unchecked(&pn.row(x), &omega)).fold(0.0, f64::max);
        tv_sequence.push(sup);
        pn = pn.compose(p);
    }
    // ratios below this level are dominated by rounding
    const FLOOR: f64 = 1e-11;
    let usable: Vec<f64> = tv_sequence.iter().copied().take_while(|v| *v > FLOOR).collect();
    let max_step_ratio = usable.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    let fitted_rho = if usable.len() >= 2 {
        (usable[usable.len() - 1] / usable[0]).powf(1.0 / (usable.len() - 1) as f64)
    } else {
        0.0
    };
    Ok(RateEstimate { m: 1.0, phi, doeblin_rho, fitted_rho, max_step_ratio, tv_sequence })
}

/// `P(f)(x, y) = alpha(x,y) K f(y) + (1 - alpha(x,y)) K f(x)`: swap, then
/// the local kernel on the first coordinate.
fn pair_kernel_apply(k: &TransitionMatrix, alpha: &[Vec<f64>], f: &[f64]) -> Vec<Vec<f64>> {
    let kf = k.apply(f);
    let n = f.len();
    (0..n)
        .map(|x| (0..n).map(|y| alpha[x][y] * kf[y] + (1.0 - alpha[x][y]) * kf[x]).collect())
        .collect()
}

/// Checks the q-fold composition of the selection kernel against the
/// ring-sum formula by brute-force enumeration over ring tuples, feeder
/// tuples and intermediate states. Returns `max_x |LHS(x) - RHS(x)|`.
pub fn composition_identity_check(model: &Model, level: usize, mu: &[f64], f: &[f64], q: usize) -> Result<f64> {
    let n = finite_size(model)?;
    let d = model.partition().rings();
    if !(1..=3).contains(&q) || n > 8 || d > 3 {
        return Err(Error::config(format!("enumeration infeasible: need q in 1..=3, S <= 8, d <= 3 (q={q}, S={n}, d={d})")));
    }
    if f.len() != n || mu.len() != n {
        return Err(Error::Contract("function and measure must match the state space".into()));
    }
    // left side: Q^q f by matrix powers
    let qm = q_matrix(model, level, mu)?;
    let lhs = qm.power(q).apply(f);

    // right side
    let k = k_matrix(model, level)?;
    let alpha = swap_matrix(model, level)?;
    let labels = model.partition().labels(model.space())?;
    let mut ring_mass = vec![0.0; d];
    for (p, &j) in mu.iter().zip(&labels) {
        ring_mass[j] += p;
    }
    // pair kernel rows: P((y, x'), .) = alpha K(x', .) + (1 - alpha) K(y, .)
    let pair_row = |y: usize, xp: usize, yy: usize| alpha[y][xp] * k.get(xp, yy) + (1.0 - alpha[y][xp]) * k.get(y, yy);

    let mut rhs = vec![0.0; n];
    let ring_tuples = tuples(d, q);
    let state_tuples = tuples(n, q);
    for x in 0..n {
        let mut total = 0.0;
        for rings in &ring_tuples {
            if labels[x] != rings[0] {
                continue;
            }
            let norm: f64 = rings.iter().map(|&j| ring_mass[j]).product();
            let mut acc = 0.0;
            for xs in &state_tuples {
                let weight: f64 = xs
                    .iter()
                    .zip(rings)
                    .map(|(&s, &j)| if labels[s] == j { mu[s] } else { 0.0 })
                    .product();
                if weight == 0.0 {
                    continue;
                }
                // g_q(y) = sum_y' P((y, x_q), y') f(y'); going inward,
                // g_j(y) = sum_y' P((y, x_j), y') 1{ring(y') = i_{j+1}} g_{j+1}(y')
                let mut g: Vec<f64> = (0..n).map(|y| (0..n).map(|yy| pair_row(y, xs[q - 1], yy) * f[yy]).sum()).collect();
                for j in (0..q - 1).rev() {
                    let gated: Vec<f64> =
                        (0..n).map(|yy| if labels[yy] == rings[j + 1] { g[yy] } else { 0.0 }).collect();
                    g = (0..n).map(|y| (0..n).map(|yy| pair_row(y, xs[j], yy) * gated[yy]).sum()).collect();
                }
                acc += weight * g[x];
            }
            total += acc / norm;
        }
        rhs[x] = total;
    }
    Ok(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// `Q_{mu_x}(f)(x) = sum_z mu_x(z) P(f)(x, z)` evaluated through the pair
/// kernel rather than through [`q_matrix`].
pub fn selection_expectation(model: &Model, level: usize, mu: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let n = finite_size(model)?;
    let k = k_matrix(model, level)?;
    let alpha = swap_matrix(model, level)?;
    let pf = pair_kernel_apply(&k, &alpha, f);
    let cond = ring_conditionals(model, mu)?;
    let labels = model.partition().labels(model.space())?;
    Ok((0..n).map(|x| (0..n).map(|z| cond[labels[x]][z] * pf[x][z]).sum()).collect())
}

fn tuples(base: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..base).map(move |v| {
                    let mut t = t.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    out
}

/// Compares `((1 - eps) K + eps P)^n` with the binomial sum over all
/// `2^n` words in `{K, P}`. Returns the largest entrywise discrepancy.
pub fn mixture_expansion_check(k: &TransitionMatrix, p: &TransitionMatrix, eps: f64, n: usize) -> Result<f64> {
    check_eps(eps)?;
    if n > 6 {
        return Err(Error::config(format!("word enumeration limited to n <= 6, got {n}")));
    }
    if k.size() != p.size() {
        return Err(Error::Contract("kernels must act on the same space".into()));
    }
    let direct = k.mix(p, eps).power(n);
    let size = k.size();
    let mut sum = DMatrix::zeros(size, size);
    for word in 0..(1usize << n) {
        let l = word.count_ones() as i32;
        let coeff = eps.powi(l) * (1.0 - eps).powi(n as i32 - l);
        if coeff == 0.0 {
            continue;
        }
        let mut prod = DMatrix::identity(size, size);
        for pos in 0..n {
            let factor = if word >> pos & 1 == 1 { p.matrix() } else { k.matrix() };
            prod = prod * factor;
        }
        sum += prod * coeff;
    }
    Ok((direct.matrix() - sum).abs().max())
}

fn sup_ring_tv(model: &Model, mu: &[f64], xi: &[f64]) -> Result<f64> {
    let a = ring_conditionals(model, mu)?;
    let b = ring_conditionals(model, xi)?;
    Ok(a.iter().zip(&b).map(|(u, v)| tv_unchecked(u, v)).fold(0.0, f64::max))
}

/// Largest ratio `|Q_mu f(x) - Q_xi f(x)| / (2 ||f|| sup_x tv(mu_x, xi_x))`
/// over `trials` random `f` with `||f|| <= 1`.
pub fn lipschitz_check<R: Rng + ?Sized>(
    model: &Model,
    level: usize,
    mu: &[f64],
    xi: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = finite_size(model)?;
    let qa = q_matrix(model, level, mu)?;
    let qb = q_matrix(model, level, xi)?;
    let tv = sup_ring_tv(model, mu, xi)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        worst = worst.max(lipschitz_ratio(&qa, &qb, &f, tv));
    }
    Ok(worst)
}

/// One Lipschitz ratio for a fixed `f`; `0/0` counts as 0.
pub fn lipschitz_ratio(qa: &TransitionMatrix, qb: &TransitionMatrix, f: &[f64], sup_tv: f64) -> f64 {
    let norm = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let lhs = qa.apply(f).iter().zip(qb.apply(f)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let denom = 2.0 * norm * sup_tv;
    if denom <= 0.0 {
        if lhs <= 1e-14 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        lhs / denom
    }
}

/// Sup over rings of `tv(mu_x, xi_x)`.
pub fn restricted_tv(model: &Model, mu: &[f64], xi: &[f64]) -> Result<f64> {
    sup_ring_tv(model, mu, xi)
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuityReport {
    /// `tv(omega(mu), omega(xi))`.
    pub invariant_tv: f64,
    /// `max_x sum_y |K_mu(x,y) - K_xi(x,y)|`.
    pub kernel_distance: f64,
    /// Their ratio, 0 when both vanish.
    pub ratio: f64,
}

/// Ratio of the change in invariant measure to the change in the
/// non-linear kernel when the feeder moves from `mu` to `xi`.
pub fn invariant_continuity_check(model: &Model, level: usize, mu: &[f64], xi: &[f64], eps: f64) -> Result<ContinuityReport> {
    let ka = nonlinear_matrix(model, level, mu, eps)?;
    let kb = nonlinear_matrix(model, level, xi, eps)?;
    let invariant_tv = tv_unchecked(&stationary(&ka)?, &stationary(&kb)?);
    let kernel_distance = ka.operator_distance(&kb);
    let ratio = if kernel_distance <= 1e-15 {
        if invariant_tv <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        invariant_tv / kernel_distance
    };
    Ok(ContinuityReport { invariant_tv, kernel_distance, ratio })
}

/// Random probability vector positive on every state.
pub fn random_positive_measure<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random row-stochastic matrix with strictly positive entries.
pub fn random_chain<R: Rng + ?Sized>(n: usize, rng: &mut R) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_positive_measure(n, rng)).collect();
    let mut m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    // exact row sums after division can miss by one ulp; push it onto the diagonal
    for i in 0..n {
        let s: f64 = m.row(i).iter().sum();
        m[(i, i)] += 1.0 - s;
    }
    TransitionMatrix(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Proposal;
    use crate::state_space::{DensityLadder, LogDensity, RingPartition, StateSpace};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_from(levels: &[&[f64]], labels: Vec<usize>) -> Model {
        let space = StateSpace::finite(levels[0].len()).unwrap();
        let ladder = DensityLadder::new(space, levels.iter().map(|w| LogDensity::from_weights(w).unwrap()).collect()).unwrap();
        Model::new(ladder, RingPartition::from_labels(labels).unwrap(), Proposal::UniformIndependent).unwrap()
    }

    fn fixture() -> Model {
        model_from(&[&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 2.0, 4.0]], vec![0, 0, 1, 1])
    }

    fn assert_vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn k_matrix_examples() {
        let sym = model_from(&[&[1.0, 1.0]], vec![0, 1]);
        let k = k_matrix(&sym, 0).unwrap();
        assert_eq!(k.row(0), vec![0.5, 0.5]);
        assert_eq!(k.row(1), vec![0.5, 0.5]);

        let skew = model_from(&[&[1.0, 2.0]], vec![0, 1]);
        let k = k_matrix(&skew, 0).unwrap();
        assert_vec_close(&k.row(0), &[0.5, 0.5], 1e-15);
        assert_vec_close(&k.row(1), &[0.25, 0.75], 1e-15);

        let m = fixture();
        for level in 0..2 {
            let pi = m.ladder().distribution(level).unwrap();
            let k = k_matrix(&m, level).unwrap();
            assert_vec_close(&k.push_forward(&pi), &pi, 1e-12);
            for x in 0..4 {
                for y in 0..4 {
                    assert_abs_diff_eq!(pi[x] * k.get(x, y), pi[y] * k.get(y, x), epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn neighbor_k_matrix_is_invariant() {
        let space = StateSpace::finite(5).unwrap();
        let ladder = DensityLadder::new(space, vec![LogDensity::from_weights(&[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap()]).unwrap();
        let m = Model::new(ladder, RingPartition::single(), Proposal::RandomNeighbor).unwrap();
        let k = k_matrix(&m, 0).unwrap();
        let pi = m.ladder().distribution(0).unwrap();
        assert_vec_close(&stationary(&k).unwrap(), &pi, 1e-12);
    }

    #[test]
    fn q_matrix_self_swap_is_k() {
        // singleton rings and mu_x = delta_x: swap with itself then K
        let m = model_from(&[&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]], vec![0, 1, 2]);
        let q = q_matrix(&m, 1, &[0.2, 0.3, 0.5]).unwrap();
        let k = k_matrix(&m, 1).unwrap();
        assert!(q.operator_distance(&k) < 1e-15);
    }

    #[test]
    fn q_matrix_with_equal_levels() {
        let w: &[f64] = &[1.0, 2.0, 3.0, 4.0];
        let m = model_from(&[w, w], vec![0, 0, 1, 1]);
        let mu = [0.1, 0.3, 0.4, 0.2];
        let q = q_matrix(&m, 1, &mu).unwrap();
        let k = k_matrix(&m, 1).unwrap();
        let cond = ring_conditionals(&m, &mu).unwrap();
        for x in 0..4 {
            let ring = usize::from(x >= 2);
            let expect: Vec<f64> = (0..4).map(|y| (0..4).map(|z| cond[ring][z] * k.get(z, y)).sum()).collect();
            assert_vec_close(&q.row(x), &expect, 1e-15);
        }
    }

    #[test]
    fn zero_ring_mass_is_a_stability_error() {
        let m = fixture();
        assert!(matches!(q_matrix(&m, 1, &[0.5, 0.5, 0.0, 0.0]), Err(Error::Stability(_))));
    }

    #[test]
    fn nonlinear_matrix_endpoints() {
        let m = fixture();
        let mu = [0.1, 0.2, 0.3, 0.4];
        let k = k_matrix(&m, 1).unwrap();
        let q = q_matrix(&m, 1, &mu).unwrap();
        assert_eq!(nonlinear_matrix(&m, 1, &mu, 0.0).unwrap(), k);
        assert_eq!(nonlinear_matrix(&m, 1, &mu, 1.0).unwrap(), q);
        let half = nonlinear_matrix(&m, 1, &mu, 0.5).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                assert_abs_diff_eq!(half.get(x, y), 0.5 * (k.get(x, y) + q.get(x, y)), epsilon = 1e-15);
            }
        }
        assert!(nonlinear_matrix(&m, 1, &mu, 1.5).is_err());
    }

    #[test]
    fn stationary_examples() {
        let ds = TransitionMatrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.5, 0.2, 0.3], vec![0.3, 0.5, 0.2]]).unwrap();
        assert_vec_close(&stationary(&ds).unwrap(), &[1.0 / 3.0; 3], 1e-14);
        let two = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_vec_close(&stationary(&two).unwrap(), &[2.0 / 3.0, 1.0 / 3.0], 1e-14);
        let reducible = TransitionMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(stationary(&reducible).is_err());
    }

    #[test]
    fn fixed_point_on_fixture() {
        let m = fixture();
        let pi1 = m.ladder().distribution(0).unwrap();
        let pi2 = m.ladder().distribution(1).unwrap();
        for eps in [0.0, 0.25, 0.5, 1.0] {
            let w = stationary(&nonlinear_matrix(&m, 1, &pi1, eps).unwrap()).unwrap();
            assert_vec_close(&w, &pi2, 1e-10);
            let jump = ee_jump_nonlinear_matrix(&m, 1, &pi1, eps).unwrap();
            assert!(stationary_residual(&jump, &pi2) < 1e-12);
            if eps < 1.0 {
                assert_vec_close(&stationary(&jump).unwrap(), &pi2, 1e-10);
            } else {
                // pure jumps never leave the starting ring
                assert!(stationary(&jump).is_err());
            }
        }
    }

    #[test]
    fn poisson_two_state_closed_form() {
        // P = [[1-a, a], [b, 1-b]], f = (1, 0): omega = (b, a)/(a+b),
        // f_hat = (a / (a+b)^2, -b / (a+b)^2) solved by hand
        let (a, b) = (0.3, 0.1);
        let p = TransitionMatrix::from_rows(&[vec![1.0 - a, a], vec![b, 1.0 - b]]).unwrap();
        let sol = poisson_solve(&p, &[1.0, 0.0]).unwrap();
        let s = a + b;
        assert_vec_close(&sol.solution, &[a / (s * s), -b / (s * s)], 1e-13);
        assert_abs_diff_eq!(sol.mean, b / s, epsilon = 1e-15);
    }

    #[test]
    fn poisson_constant_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_chain(6, &mut rng);
        let sol = poisson_solve(&p, &[3.0; 6]).unwrap();
        assert!(sol.solution.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn poisson_random_chains_and_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = random_chain(10, &mut rng);
            let f: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sol = poisson_solve(&p, &f).unwrap();
            assert!(sol.residual <= 1e-10);
            let centered: f64 = sol.stationary.iter().zip(&sol.solution).map(|(w, v)| w * v).sum();
            assert!(centered.abs() < 1e-12);
            let rate = geometric_rate_estimate(&p).unwrap();
            let series = poisson_series(&p, &f, &sol.stationary, 50);
            let env = series_envelope(&f, rate.m, rate.doeblin_rho, 50);
            let diff = series.iter().zip(&sol.solution).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= env + 1e-10, "{diff} > {env}");
        }
    }

    #[test]
    fn rate_examples() {
        let rank_one = TransitionMatrix::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let r = geometric_rate_estimate(&rank_one).unwrap();
        assert_abs_diff_eq!(r.phi, 1.0, epsilon = 1e-15);
        assert_eq!(r.doeblin_rho, 0.0);
        assert!(r.tv_sequence[0] < 1e-15);

        let two = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let r = geometric_rate_estimate(&two).unwrap();
        assert_abs_diff_eq!(r.phi, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(r.doeblin_rho, 0.7, epsilon = 1e-15);
        assert!(r.max_step_ratio <= 0.7 + 1e-9);
        assert!(r.fitted_rho <= r.doeblin_rho + 1e-9);
        assert!(r.is_monotone());
    }

    #[test]
    fn composition_identity_cases() {
        let m = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = random_positive_measure(4, &mut rng);
        let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for q in 1..=3 {
            assert!(composition_identity_check(&m, 1, &mu, &f, q).unwrap() <= 1e-12);
        }
        let q1 = q_matrix(&m, 1, &mu).unwrap().apply(&f);
        assert_vec_close(&q1, &selection_expectation(&m, 1, &mu, &f).unwrap(), 1e-15);

        let single = model_from(&[&[1.0, 2.0, 3.0], &[2.0, 2.0, 1.0]], vec![0, 0, 0]);
        let mu = random_positive_measure(3, &mut rng);
        assert!(composition_identity_check(&single, 1, &mu, &[1.0, -1.0, 0.5], 3).unwrap() <= 1e-12);
        assert!(composition_identity_check(&m, 1, &mu[..], &f, 4).is_err());
    }

    #[test]
    fn mixture_expansion_cases() {
        let m = fixture();
        let k = k_matrix(&m, 1).unwrap();
        let p = q_matrix(&m, 1, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(mixture_expansion_check(&k, &p, 0.0, 4).unwrap() < 1e-14);
        assert!(mixture_expansion_check(&k, &p, 0.3, 1).unwrap() < 1e-15);
        // explicit four-word sum for eps = 1/2, n = 2
        let words = k.compose(&k).matrix() + k.compose(&p).matrix() + p.compose(&k).matrix() + p.compose(&p).matrix();
        let direct = k.mix(&p, 0.5).power(2);
        assert!((direct.matrix() - words * 0.25).abs().max() < 1e-15);
        assert!(mixture_expansion_check(&k, &p, 0.5, 6).unwrap() < 1e-13);
        assert!(mixture_expansion_check(&k, &p, 0.5, 7).is_err());
    }

    #[test]
    fn lipschitz_cases() {
        let m = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = random_positive_measure(4, &mut rng);
        assert_eq!(lipschitz_check(&m, 1, &mu, &mu, 50, &mut rng).unwrap(), 0.0);
        let xi = random_positive_measure(4, &mut rng);
        let qa = q_matrix(&m, 1, &mu).unwrap();
        let qb = q_matrix(&m, 1, &xi).unwrap();
        let tv = restricted_tv(&m, &mu, &xi).unwrap();
        assert!(lipschitz_ratio(&qa, &qb, &[0.7; 4], tv) < 1e-12);
        for _ in 0..50 {
            let xi = random_positive_measure(4, &mut rng);
            assert!(lipschitz_check(&m, 1, &mu, &xi, 20, &mut rng).unwrap() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn continuity_cases() {
        let m = fixture();
        let mu = [0.1, 0.2, 0.3, 0.4];
        let same = invariant_continuity_check(&m, 1, &mu, &mu, 0.5).unwrap();
        assert_eq!(same.ratio, 0.0);
        let local = invariant_continuity_check(&m, 1, &mu, &[0.4, 0.3, 0.2, 0.1], 0.0).unwrap();
        assert!(local.invariant_tv < 1e-12);
        assert_eq!(local.ratio, 0.0);
        let moved = invariant_continuity_check(&m, 1, &mu, &[0.4, 0.3, 0.2, 0.1], 1.0).unwrap();
        assert!(moved.ratio.is_finite() && moved.ratio > 0.0);
    }
}
