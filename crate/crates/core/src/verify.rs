//! Consolidated run of every exact-oracle check on a finite configuration.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Experiment;
use crate::error::{Error, Result};
use crate::measures::fluctuation_run;
use crate::oracle::{
    composition_identity_check, ee_jump_nonlinear_matrix, geometric_rate_estimate, invariant_continuity_check,
    jump_matrix, k_matrix, lipschitz_check, mixture_expansion_check, nonlinear_matrix, poisson_series, poisson_solve,
    q_matrix, random_chain, random_positive_measure, series_envelope, stationary, stationary_residual, swap_matrix,
    TransitionMatrix, ROW_SUM_TOL,
};
use crate::state_space::State;

pub const FIXED_POINT_EPSILONS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
pub const MIXTURE_EPSILONS: [f64; 3] = [0.3, 0.5, 1.0];
pub const EXACT_TOL: f64 = 1e-10;
pub const LIPSCHITZ_TRIALS: usize = 500;
pub const SERIES_TERMS: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    /// `None` for informational entries.
    pub tolerance: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Check { name: name.into(), value, tolerance: Some(tolerance), passed: value <= tolerance, detail }
    }

    fn failed(name: &str, detail: String) -> Self {
        Check { name: name.into(), value: f64::NAN, tolerance: None, passed: false, detail }
    }

    fn info(name: &str, value: f64, detail: String) -> Self {
        Check { name: name.into(), value, tolerance: None, passed: true, detail }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    /// Verification error naming every failing check.
    pub fn ensure_passed(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::Verification(format!("failing checks: {}", self.failing().join(", "))))
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn row_error(p: &TransitionMatrix) -> f64 {
    let neg = p.matrix().iter().copied().fold(0.0, f64::min);
    p.max_row_sum_error().max(-neg)
}

/// Wraps a fallible check so oracle errors show up as a failing entry.
fn guarded(name: &str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::failed(name, e.to_string()))
}

/// Runs every check without touching the filesystem.
pub fn verify_checks(exp: &Experiment) -> Result<VerifyReport> {
    let size = exp.require_finite("verify")?;
    let model = &exp.model;
    let r = model.levels();
    let d = model.partition().rings();
    let mut rng = ChaCha8Rng::seed_from_u64(exp.config.seed);
    let pis = (0..r).map(|i| model.ladder().distribution(i)).collect::<Result<Vec<_>>>()?;
    let eps_of = |i: usize| exp.settings.mixtures[i].epsilon();
    let tables: Vec<(String, Vec<f64>)> = exp.functions.iter().map(|f| (f.name.clone(), f.table(model))).collect();
    let mut checks = Vec::new();

    checks.push(guarded("row-stochastic", || {
        let mut worst: f64 = 0.0;
        for i in 0..r {
            worst = worst.max(row_error(&k_matrix(model, i)?));
        }
        for i in 1..r {
            worst = worst.max(row_error(&q_matrix(model, i, &pis[i - 1])?));
            worst = worst.max(row_error(&jump_matrix(model, i, &pis[i - 1])?));
            worst = worst.max(row_error(&nonlinear_matrix(model, i, &pis[i - 1], eps_of(i))?));
        }
        Ok(Check::bound("row-stochastic", worst, ROW_SUM_TOL, "K, Q, jump and mixture matrices of every level".into()))
    }));

    checks.push(guarded("local-invariance", || {
        let mut worst: f64 = 0.0;
        for i in 0..r {
            worst = worst.max(stationary_residual(&k_matrix(model, i)?, &pis[i]));
        }
        Ok(Check::bound("local-invariance", worst, EXACT_TOL, "max |pi_i K_i - pi_i|".into()))
    }));

    checks.push(guarded("swap-detailed-balance", || {
        let mut worst: f64 = 0.0;
        for i in 1..r {
            let a = swap_matrix(model, i)?;
            let (p, q) = (&pis[i], &pis[i - 1]);
            for x in 0..size {
                for y in 0..size {
                    let lhs = p[x] * q[y] * a[x][y];
                    let rhs = p[y] * q[x] * a[y][x];
                    worst = worst.max((lhs - rhs).abs());
                }
            }
        }
        Ok(Check::bound("swap-detailed-balance", worst, 1e-12, "pi_i(x) pi_{i-1}(y) alpha(x,y) symmetric".into()))
    }));

    checks.push(guarded("fixed-point", || {
        let mut worst: f64 = 0.0;
        for i in 1..r {
            for eps in FIXED_POINT_EPSILONS {
                let w = stationary(&nonlinear_matrix(model, i, &pis[i - 1], eps)?)?;
                worst = worst.max(max_abs_diff(&w, &pis[i]));
            }
        }
        Ok(Check::bound("fixed-point", worst, EXACT_TOL, "stationary law of the selection kernel fed by pi_{i-1}".into()))
    }));

    checks.push(guarded("fixed-point-ee-jump", || {
        let mut worst: f64 = 0.0;
        for i in 1..r {
            for eps in FIXED_POINT_EPSILONS {
                let p = ee_jump_nonlinear_matrix(model, i, &pis[i - 1], eps)?;
                worst = worst.max(stationary_residual(&p, &pis[i]));
                // pure jumps cannot cross rings, so uniqueness needs eps < 1 or a single ring
                if eps < 1.0 || d == 1 {
                    worst = worst.max(max_abs_diff(&stationary(&p)?, &pis[i]));
                }
            }
        }
        Ok(Check::bound("fixed-point-ee-jump", worst, EXACT_TOL, "pi_i invariant for the original jump kernel".into()))
    }));

    checks.push(guarded("poisson", || {
        let mut worst_res: f64 = 0.0;
        let mut worst_series: f64 = 0.0;
        let mut systems = Vec::new();
        for i in 1..r {
            let p = nonlinear_matrix(model, i, &pis[i - 1], eps_of(i))?;
            for (_, t) in &tables {
                systems.push((p.clone(), t.clone()));
            }
            let f: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..=1.0)).collect();
            systems.push((p, f));
        }
        for _ in 0..20 {
            let p = random_chain(8, &mut rng);
            let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..=1.0)).collect();
            systems.push((p, f));
        }
        for (p, f) in &systems {
            let sol = poisson_solve(p, f)?;
            worst_res = worst_res.max(sol.residual);
            let rate = geometric_rate_estimate(p)?;
            let series = poisson_series(p, f, &sol.stationary, SERIES_TERMS);
            let env = series_envelope(f, rate.m, rate.doeblin_rho, SERIES_TERMS);
            let gap = max_abs_diff(&series, &sol.solution);
            // ratio > 1 means the truncated series left the envelope
            worst_series = worst_series.max(if env.is_finite() { gap / (env + 1e-12) } else { 0.0 });
        }
        let mut c = Check::bound("poisson", worst_res, EXACT_TOL, format!("{} systems", systems.len()));
        if worst_series > 1.0 {
            c.passed = false;
        }
        c.detail = format!("{} systems; worst series gap / envelope = {worst_series:.3e}", systems.len());
        Ok(c)
    }));

    if size <= 8 && d <= 3 {
        checks.push(guarded("composition", || {
            let mut worst: f64 = 0.0;
            for i in 1..r {
                let mu_rand = random_positive_measure(size, &mut rng);
                let f: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let mut fs: Vec<&Vec<f64>> = tables.iter().map(|(_, t)| t).collect();
                fs.push(&f);
                for mu in [&pis[i - 1], &mu_rand] {
                    for f in &fs {
                        for q in 1..=3 {
                            worst = worst.max(composition_identity_check(model, i, mu, f, q)?);
                        }
                    }
                }
            }
            Ok(Check::bound("composition", worst, EXACT_TOL, "q = 1..3 by enumeration".into()))
        }));
    } else {
        checks.push(Check::info("composition", 0.0, format!("skipped: enumeration needs S <= 8 and d <= 3 (S={size}, d={d})")));
    }

    checks.push(guarded("mixture-expansion", || {
        let mut worst: f64 = 0.0;
        for i in 1..r {
            let k = k_matrix(model, i)?;
            let p = q_matrix(model, i, &pis[i - 1])?;
            for eps in MIXTURE_EPSILONS {
                for n in 1..=6 {
                    worst = worst.max(mixture_expansion_check(&k, &p, eps, n)?);
                }
            }
        }
        Ok(Check::bound("mixture-expansion", worst, EXACT_TOL, "n = 1..6 word sums".into()))
    }));

    checks.push(guarded("lipschitz", || {
        let mut worst: f64 = 0.0;
        for i in 1..r {
            for _ in 0..LIPSCHITZ_TRIALS {
                let mu = random_positive_measure(size, &mut rng);
                let xi = random_positive_measure(size, &mut rng);
                worst = worst.max(lipschitz_check(model, i, &mu, &xi, 1, &mut rng)?);
            }
        }
        Ok(Check::bound("lipschitz", worst, 1.0 + 1e-9, format!("{LIPSCHITZ_TRIALS} random triples per level")))
    }));

    checks.push(guarded("fluctuation", || {
        let labels = model.partition().labels(model.space())?;
        let initial: Vec<State> = (0..d).map(|j| State::Index(labels.iter().position(|l| *l == j).expect("ring used"))).collect();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for _ in 0..5 {
            let law = random_positive_measure(size, &mut rng);
            let mut ring_mass = vec![0.0; d];
            for (p, &j) in law.iter().zip(&labels) {
                ring_mass[j] += p;
            }
            let theta = 0.5 * ring_mass.iter().copied().fold(1.0, f64::min);
            let f: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let mut draw_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let report = fluctuation_run(
                model.space(),
                model.partition(),
                &initial,
                2000,
                theta,
                |x| f[x.index().expect("finite state")],
                || {
                    let u: f64 = draw_rng.random();
                    let mut acc = 0.0;
                    for (j, p) in law.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return State::Index(j);
                        }
                    }
                    State::Index(size - 1)
                },
            )?;
            worst = worst.max(report.worst_ratio);
            checked += report.steps_checked;
        }
        Ok(Check::bound("fluctuation", worst, 1.0, format!("{checked} insertions with every ring above theta")))
    }));

    checks.push(guarded("geometric-rate", || {
        let mut worst: f64 = 0.0;
        let mut phi_min: f64 = 1.0;
        for i in 1..r {
            let p = nonlinear_matrix(model, i, &pis[i - 1], eps_of(i))?;
            let est = geometric_rate_estimate(&p)?;
            phi_min = phi_min.min(est.phi);
            for (n, tv) in est.tv_sequence.iter().enumerate() {
                let env = est.m * est.doeblin_rho.powi(n as i32 + 1);
                worst = worst.max(tv - env);
            }
        }
        let mut c = Check::bound("geometric-rate", worst.max(0.0), 1e-12, format!("min Doeblin mass phi = {phi_min:.6}"));
        if phi_min <= 0.0 {
            c.passed = false;
            c.detail.push_str("; no one-step minorization");
        }
        Ok(c)
    }));

    checks.push(guarded("invariant-continuity", || {
        let mut worst: f64 = 0.0;
        for i in 1..r {
            for _ in 0..20 {
                let xi = random_positive_measure(size, &mut rng);
                let rep = invariant_continuity_check(model, i, &pis[i - 1], &xi, eps_of(i))?;
                worst = worst.max(rep.ratio);
            }
        }
        Ok(Check::info("invariant-continuity", worst, "max tv(omega(mu), omega(xi)) / kernel distance".into()))
    }));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { config_hash: exp.hash.clone(), seed: exp.config.seed, checks, passed })
}

/// Runs the suite and writes `verify_checks.csv`, `verify_report.json` and
/// `metadata.json`. Failing checks are left in the report; see
/// [`VerifyReport::ensure_passed`].
pub fn verify_suite(exp: &Experiment, out: &Path) -> Result<VerifyReport> {
    let report = verify_checks(exp)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("verify_checks.csv")).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["check", "value", "tolerance", "passed", "detail"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for c in &report.checks {
        w.write_record([
            c.name.clone(),
            c.value.to_string(),
            c.tolerance.map_or_else(String::new, |t| t.to_string()),
            c.passed.to_string(),
            c.detail.clone(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join("verify_report.json"), text)?;
    let meta = serde_json::json!({
        "verb": "verify",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": exp.hash,
        "seed": exp.config.seed,
        "passed": report.passed,
        "artifacts": ["verify_checks.csv", "verify_report.json", "metadata.json"],
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(out.join("metadata.json"), text)?;
    Ok(report)
}
