//! Multi-start synthesis of static bias controllers.
//!
//! The objective is the nominal transfer error e(Δ, T) = 1 − |⟨OUT|e^{−iHT}|IN⟩|²
//! over the biases Δ and readout time T, inside a box. Schemes A and C use a
//! projected BFGS with the exact gradient; scheme B uses Nelder–Mead.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::SpectralTransfer;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::network::{build_hamiltonian, transfer_targets, Controller, SpinNetwork, Topology};

type C64 = Complex<f64>;

/// Optimised controllers above this error are discarded.
pub const MAX_ACCEPTED_ERROR: f64 = 0.5;
/// Controllers closer than this in (Δ, T) after canonicalisation are duplicates.
pub const DEDUP_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Projected BFGS from a uniform random start.
    A,
    /// Nelder–Mead simplex from a uniform random start.
    B,
    /// Projected BFGS from a start symmetric under the IN↔OUT reflection.
    C,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::A, Algorithm::B, Algorithm::C];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            other => Err(Error::InvalidArgument(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Transfer problem: network shape and target spin (input is spin 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransferProblem {
    #[serde(rename = "N")]
    pub size: usize,
    pub topology: Topology,
    pub out: usize,
}

impl TransferProblem {
    pub fn new(size: usize, topology: Topology, out: usize) -> Result<Self> {
        let p = Self { size, topology, out };
        p.network()?;
        if out < 2 || out > size {
            return Err(Error::InvalidArgument(format!(
                "output spin {out} must lie in 2..={size}"
            )));
        }
        Ok(p)
    }

    pub fn network(&self) -> Result<SpinNetwork> {
        SpinNetwork::new(self.size, self.topology)
    }

    /// Every transfer problem for the given sizes, in topology/size/target order.
    pub fn enumerate(sizes: &[usize], topologies: &[Topology]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for &topology in topologies {
            for &size in sizes {
                let net = SpinNetwork::new(size, topology)?;
                for target in transfer_targets(&net) {
                    out.push(Self::new(size, topology, target)?);
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for TransferProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.topology, self.size, self.out)
    }
}

impl FromStr for TransferProblem {
    type Err = Error;
    /// `chain-5-3` or `chain:5:3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['-', ':']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "transfer problem {s:?} is not of the form topology-N-OUT"
            )));
        }
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad number {p:?} in {s:?}")))
        };
        Self::new(num(parts[1])?, parts[0].parse()?, num(parts[2])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    pub algorithm: Algorithm,
    pub restarts: usize,
    /// Box bound on |Δ_n|.
    pub delta_bound: f64,
    pub t_min: f64,
    /// T_max = t_max_per_spin · N.
    pub t_max_per_spin: f64,
    pub seed: u64,
    /// Controllers kept per set.
    pub keep: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl OptimizationConfig {
    pub fn new(algorithm: Algorithm, seed: u64) -> Self {
        Self {
            algorithm,
            restarts: 400,
            delta_bound: 10.0,
            t_min: 0.1,
            t_max_per_spin: 4.0,
            seed,
            keep: 100,
            max_iterations: 1000,
            gradient_tolerance: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.keep == 0 {
            return Err(Error::InvalidArgument("restarts and keep must be at least 1".into()));
        }
        if !(self.t_min > 0.0 && self.t_max_per_spin > 0.0 && self.delta_bound > 0.0) {
            return Err(Error::InvalidArgument(
                "t_min, t_max_per_spin and delta_bound must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn t_max(&self, size: usize) -> f64 {
        self.t_max_per_spin * size as f64
    }
}

/// e(Δ, T) and its exact gradient for one transfer problem.
pub struct Objective {
    size: usize,
    out: usize,
    couplings: DMatrix<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

impl Objective {
    pub fn new(problem: &TransferProblem, config: &OptimizationConfig) -> Result<Self> {
        let net = problem.network()?;
        let n = problem.size;
        if config.t_min >= config.t_max(n) {
            return Err(Error::InvalidArgument("empty readout-time window".into()));
        }
        let couplings = DMatrix::from_fn(n, n, |r, c| if r == c { 0.0 } else { net.coupling_between(r + 1, c + 1) });
        let mut lower = vec![-config.delta_bound; n];
        let mut upper = vec![config.delta_bound; n];
        lower.push(config.t_min);
        upper.push(config.t_max(n));
        Ok(Self {
            size: n,
            out: problem.out,
            couplings,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.size + 1
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn error(&self, x: &[f64]) -> f64 {
        self.evaluate(x, false).0
    }

    pub fn error_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (e, g) = self.evaluate(x, true);
        (e, g.expect("gradient requested"))
    }

    /// Fréchet derivative of e^{−iHT} in the eigenbasis of H:
    /// ∂/∂Δ_n ⟨o|U|i⟩ = Σ_kl V_ok V_nk φ(λ_k, λ_l) V_nl V_il with
    /// φ(a, b) = −iT e^{−i(a+b)T/2} sinc((a−b)T/2).
    fn evaluate(&self, x: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let n = self.size;
        let t = x[n];
        let mut h = self.couplings.clone();
        for i in 0..n {
            h[(i, i)] = x[i];
        }
        let eig = sym_eigen(&h);
        let v = &eig.vectors;
        let lam = &eig.values;
        let o = self.out - 1;
        let phase: Vec<C64> = lam.iter().map(|l| C64::new(0.0, -l * t).exp()).collect();
        let f: C64 = (0..n).map(|k| phase[k] * (v[(o, k)] * v[(0, k)])).sum();
        let e = 1.0 - f.norm_sqr();
        if !want_grad {
            return (e, None);
        }

        let mut phi = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for k in 0..n {
            for l in 0..n {
                let mid = C64::new(0.0, -0.5 * (lam[k] + lam[l]) * t).exp();
                phi[(k, l)] = C64::new(0.0, -t) * mid * sinc(0.5 * (lam[k] - lam[l]) * t);
            }
        }
        let fc = f.conj();
        let mut grad = Vec::with_capacity(n + 1);
        for site in 0..n {
            let mut df = C64::new(0.0, 0.0);
            for k in 0..n {
                let left = v[(o, k)] * v[(site, k)];
                if left == 0.0 {
                    continue;
                }
                let inner: C64 = (0..n).map(|l| phi[(k, l)] * (v[(site, l)] * v[(0, l)])).sum();
                df += inner * left;
            }
            grad.push(-2.0 * (fc * df).re);
        }
        let df_dt: C64 = (0..n)
            .map(|k| C64::new(0.0, -lam[k]) * phase[k] * (v[(o, k)] * v[(0, k)]))
            .sum();
        grad.push(-2.0 * (fc * df_dt).re);
        (e, Some(grad))
    }

    /// Gradient with components blocked by active bounds set to zero.
    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                let at_lower = x[i] <= self.lower[i] && gi > 0.0;
                let at_upper = x[i] >= self.upper[i] && gi < 0.0;
                if at_lower || at_upper {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }
}

/// Outcome of one local optimisation.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub x: Vec<f64>,
    pub error: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Projected BFGS with Armijo backtracking.
pub fn projected_bfgs(obj: &Objective, x0: &[f64], max_iterations: usize, tolerance: f64) -> LocalRun {
    let dim = obj.dim();
    let mut x = x0.to_vec();
    obj.project(&mut x);
    let (mut e, mut g) = obj.error_and_gradient(&x);
    let mut evaluations = 1;
    let mut hinv = DMatrix::<f64>::identity(dim, dim);
    let mut history = vec![e];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iterations {
        let pg = obj.projected_gradient(&x, &g);
        if inf_norm(&pg) < tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p != 0.0 || *gi == 0.0).collect();
        let mut step_found = false;
        for attempt in 0..2 {
            let mut d = vec![0.0; dim];
            if attempt == 0 {
                for i in 0..dim {
                    if free[i] {
                        d[i] = -(0..dim).filter(|&j| free[j]).map(|j| hinv[(i, j)] * g[j]).sum::<f64>();
                    }
                }
            }
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if attempt == 1 || !(slope < 0.0) {
                d = pg.iter().map(|v| -v).collect();
                hinv = DMatrix::identity(dim, dim);
            }

            let mut alpha = 1.0;
            for _ in 0..60 {
                let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                obj.project(&mut trial);
                let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
                if decrease >= 0.0 {
                    alpha *= 0.5;
                    continue;
                }
                let (te, tg) = obj.error_and_gradient(&trial);
                evaluations += 1;
                if te <= e + 1e-4 * decrease {
                    let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = tg.iter().zip(&g).map(|(a, b)| a - b).collect();
                    let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                    let (sn, yn) = (inf_norm(&s), inf_norm(&y));
                    if sy > 1e-12 * sn * yn * dim as f64 {
                        bfgs_update(&mut hinv, &s, &y, sy);
                    }
                    x = trial;
                    e = te;
                    g = tg;
                    history.push(e);
                    step_found = true;
                    break;
                }
                alpha *= 0.5;
            }
            if step_found {
                break;
            }
        }
        if !step_found {
            // No descent possible at working precision: a stationary point.
            converged = inf_norm(&obj.projected_gradient(&x, &g)) < tolerance.max(1e-7);
            break;
        }
    }
    LocalRun {
        x,
        error: e,
        iterations,
        evaluations,
        converged,
        history,
    }
}

fn bfgs_update(hinv: &mut DMatrix<f64>, s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[(i, j)] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            hinv[(i, j)] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Nelder–Mead on the box (trial points are clamped), restarted once from its best vertex.
pub fn nelder_mead(obj: &Objective, x0: &[f64], max_iterations: usize) -> LocalRun {
    let mut x = x0.to_vec();
    obj.project(&mut x);
    let initial = obj.error(&x);
    let mut history = vec![initial];
    let mut total_iterations = 0;
    let mut evaluations = 1;
    let mut converged = false;
    let mut best = (x, initial);
    for _phase in 0..2 {
        let run = nelder_mead_phase(obj, &best.0, max_iterations / 2, &mut history);
        total_iterations += run.iterations;
        evaluations += run.evaluations;
        converged = run.converged;
        if run.error <= best.1 {
            best = (run.x, run.error);
        }
    }
    LocalRun {
        x: best.0,
        error: best.1,
        iterations: total_iterations,
        evaluations,
        converged,
        history,
    }
}

fn nelder_mead_phase(obj: &Objective, x0: &[f64], max_iterations: usize, history: &mut Vec<f64>) -> LocalRun {
    let dim = obj.dim();
    let (lo, hi) = obj.bounds();
    let clamp = |mut p: Vec<f64>| {
        obj.project(&mut p);
        p
    };
    let mut evaluations = 0;
    let mut eval = |p: &[f64]| {
        evaluations += 1;
        obj.error(p)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..dim {
        let step = 0.05 * (hi[i] - lo[i]);
        let mut p = x0.to_vec();
        p[i] = if p[i] + step <= hi[i] { p[i] + step } else { p[i] - step };
        let f = eval(&p);
        simplex.push((p, f));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fb, fw) = (simplex[0].1, simplex[dim].1);
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
            .fold(0.0, f64::max);
        if fw - fb <= 1e-15 + 1e-12 * fb.abs() && size < 1e-9 {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; dim];
        for (p, _) in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / dim as f64;
            }
        }
        let toward = |coef: f64, from: &[f64]| -> Vec<f64> {
            clamp(centroid.iter().zip(from).map(|(c, w)| c + coef * (c - w)).collect())
        };
        let worst = simplex[dim].0.clone();
        let xr = toward(1.0, &worst);
        let fr = eval(&xr);
        if fr < fb {
            let xe = toward(2.0, &worst);
            let fe = eval(&xe);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr < fw {
                let xc = toward(0.5, &worst);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = toward(-0.5, &worst);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(fw) {
                simplex[dim] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = best.iter().zip(&entry.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    let f = eval(&p);
                    *entry = (p, f);
                }
            }
        }
        let current_best = simplex.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        if current_best < *history.last().expect("history starts non-empty") {
            history.push(current_best);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, error) = simplex.swap_remove(0);
    LocalRun {
        x,
        error,
        iterations,
        evaluations,
        converged,
        history: Vec::new(),
    }
}

/// Reflection exchanging spin 1 and OUT; `None` for spins it does not map into the network.
pub fn reflection(problem: &TransferProblem, spin: usize) -> Option<usize> {
    let (n, out) = (problem.size as i64, problem.out as i64);
    let image = 1 + out - spin as i64;
    match problem.topology {
        Topology::Chain => (1..=n).contains(&image).then_some(image as usize),
        Topology::Ring => Some((image - 1).rem_euclid(n) as usize + 1),
    }
}

/// Starting point for one restart.
pub fn initial_point(problem: &TransferProblem, config: &OptimizationConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = problem.size;
    let b = config.delta_bound;
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-b..=b)).collect();
    x.push(rng.gen_range(config.t_min..=config.t_max(n)));
    if config.algorithm == Algorithm::C {
        for spin in 1..=n {
            if let Some(image) = reflection(problem, spin) {
                if image > spin {
                    let avg = 0.5 * (x[spin - 1] + x[image - 1]);
                    x[spin - 1] = avg;
                    x[image - 1] = avg;
                }
            }
        }
    }
    x
}

fn restart_rng(problem: &TransferProblem, config: &OptimizationConfig, restart: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(config.seed.to_le_bytes());
    hasher.update(problem.to_string().as_bytes());
    hasher.update(config.algorithm.to_string().as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    rng.set_stream(restart as u64);
    rng
}

/// Shift the biases so min Δ = 0 (the error is invariant under a uniform shift).
pub fn canonicalize(x: &mut [f64]) {
    let n = x.len() - 1;
    let min = x[..n].iter().copied().fold(f64::INFINITY, f64::min);
    for v in &mut x[..n] {
        *v -= min;
    }
}

/// Convergence metadata for one restart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub restart: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub error: f64,
}

/// One restart, returning canonical (Δ, T) and its metadata.
pub fn optimize_controller(
    problem: &TransferProblem,
    config: &OptimizationConfig,
    restart: usize,
) -> Result<(Vec<f64>, RunInfo)> {
    let obj = Objective::new(problem, config)?;
    let mut rng = restart_rng(problem, config, restart);
    let x0 = initial_point(problem, config, &mut rng);
    let run = match config.algorithm {
        Algorithm::A | Algorithm::C => {
            projected_bfgs(&obj, &x0, config.max_iterations, config.gradient_tolerance)
        }
        Algorithm::B => nelder_mead(&obj, &x0, 5 * config.max_iterations),
    };
    let mut x = run.x;
    canonicalize(&mut x);
    Ok((
        x,
        RunInfo {
            restart,
            iterations: run.iterations,
            evaluations: run.evaluations,
            converged: run.converged,
            error: run.error,
        },
    ))
}

/// Best distinct controllers for one problem and scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSet {
    pub problem: TransferProblem,
    pub config: OptimizationConfig,
    /// Ascending nominal error.
    pub controllers: Vec<Controller>,
    /// Metadata of the restart behind each controller, same order.
    pub runs: Vec<RunInfo>,
}

impl ControllerSet {
    pub fn id(&self) -> String {
        format!("{}-{}", self.problem, self.config.algorithm)
    }

    pub fn controller_id(&self, index: usize) -> String {
        format!("{}-{:03}", self.id(), index)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut set: Self = serde_json::from_str(json)?;
        let net = set.problem.network()?;
        for c in &mut set.controllers {
            c.output_spin = set.problem.out;
            c.validate(&net)?;
        }
        if set.controllers.len() != set.runs.len() {
            return Err(Error::Format("controllers and runs differ in length".into()));
        }
        if set
            .controllers
            .windows(2)
            .any(|w| w[0].nominal_error > w[1].nominal_error)
        {
            return Err(Error::Format("controller set is not sorted by error".into()));
        }
        Ok(set)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of `a`'s controllers that also appear (within `tol`) in `b`.
pub fn set_overlap(a: &ControllerSet, b: &ControllerSet, tol: f64) -> f64 {
    let point = |c: &Controller| {
        let mut v = c.biases.clone();
        v.push(c.readout_time);
        v
    };
    let bs: Vec<Vec<f64>> = b.controllers.iter().map(point).collect();
    let shared = a
        .controllers
        .iter()
        .filter(|c| {
            let p = point(c);
            bs.iter().any(|q| distance(&p, q) < tol)
        })
        .count();
    shared as f64 / a.controllers.len().max(1) as f64
}

/// Runs every restart, drops failures and duplicates, keeps the best `keep`.
pub fn synthesize_set(problem: &TransferProblem, config: &OptimizationConfig) -> Result<ControllerSet> {
    config.validate()?;
    let net = problem.network()?;
    let results = (0..config.restarts)
        .into_par_iter()
        .map(|r| optimize_controller(problem, config, r))
        .collect::<Result<Vec<_>>>()?;

    let mut candidates = Vec::new();
    for (x, info) in results {
        let ctrl = Controller::new(x[..problem.size].to_vec(), x[problem.size], problem.out);
        let ham = build_hamiltonian(&net, &ctrl)?;
        let e = SpectralTransfer::new(&ham, &ctrl)?.nominal_error()?;
        if e < MAX_ACCEPTED_ERROR {
            candidates.push((x, e, info));
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.restart.cmp(&b.2.restart)));

    let mut kept: Vec<(Vec<f64>, f64, RunInfo)> = Vec::with_capacity(config.keep);
    for cand in candidates {
        if kept.iter().all(|k| distance(&k.0, &cand.0) >= DEDUP_DISTANCE) {
            kept.push(cand);
            if kept.len() == config.keep {
                break;
            }
        }
    }
    if kept.len() < config.keep {
        return Err(Error::Synthesis(format!(
            "{problem} scheme {}: only {} distinct controllers with e < {MAX_ACCEPTED_ERROR} from {} restarts; increase restarts",
            config.algorithm,
            kept.len(),
            config.restarts
        )));
    }
    let (controllers, runs) = kept
        .into_iter()
        .map(|(x, e, info)| {
            let mut c = Controller::new(x[..problem.size].to_vec(), x[problem.size], problem.out);
            c.nominal_error = Some(e);
            (c, info)
        })
        .unzip();
    Ok(ControllerSet {
        problem: *problem,
        config: *config,
        controllers,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small_config(algorithm: Algorithm, restarts: usize, keep: usize) -> OptimizationConfig {
        OptimizationConfig {
            restarts,
            keep,
            ..OptimizationConfig::new(algorithm, 42)
        }
    }

    #[test]
    fn objective_matches_spectral_kernel() {
        let problem: TransferProblem = "ring-5-3".parse().unwrap();
        let obj = Objective::new(&problem, &OptimizationConfig::new(Algorithm::A, 0)).unwrap();
        let x = [0.3, -1.2, 4.0, 0.0, 2.5, 7.7];
        let ctrl = Controller::new(x[..5].to_vec(), x[5], 3);
        let ham = build_hamiltonian(&problem.network().unwrap(), &ctrl).unwrap();
        let e = SpectralTransfer::new(&ham, &ctrl).unwrap().nominal_error().unwrap();
        assert!((obj.error(&x) - e).abs() < 1e-13);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for problem in ["chain-5-3", "chain-6-6", "ring-6-4", "ring-5-2", "chain-2-2"] {
            let problem: TransferProblem = problem.parse().unwrap();
            let config = OptimizationConfig::new(Algorithm::A, 0);
            let obj = Objective::new(&problem, &config).unwrap();
            for _ in 0..100 {
                let x = initial_point(&problem, &config, &mut rng);
                let (_, g) = obj.error_and_gradient(&x);
                let scale = inf_norm(&g).max(1e-3);
                for i in 0..x.len() {
                    let h = 1e-6;
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (obj.error(&xp) - obj.error(&xm)) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-5 * scale, "{problem} {i}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn two_spin_swap_optimum() {
        let problem: TransferProblem = "chain-2-2".parse().unwrap();
        let config = small_config(Algorithm::A, 1, 1);
        let mut perfect = 0;
        for restart in 0..20 {
            let (x, info) = optimize_controller(&problem, &config, restart).unwrap();
            assert!(info.converged);
            if info.error < 1e-12 {
                perfect += 1;
                assert!((x[0] - x[1]).abs() < 1e-6);
                let k = ((x[2] - PI / 2.0) / PI).round();
                assert!((x[2] - PI / 2.0 - k * PI).abs() < 1e-6);
            }
        }
        // Detuned local optima exist, but most starts reach the swap.
        assert!(perfect >= 10, "{perfect}");
    }

    #[test]
    fn accepted_steps_never_increase_error() {
        let problem: TransferProblem = "chain-6-4".parse().unwrap();
        let config = OptimizationConfig::new(Algorithm::A, 3);
        let obj = Objective::new(&problem, &config).unwrap();
        for restart in 0..10 {
            let x0 = initial_point(&problem, &config, &mut restart_rng(&problem, &config, restart));
            let run = projected_bfgs(&obj, &x0, 1000, 1e-9);
            assert!(run.history.windows(2).all(|w| w[1] <= w[0]));
            let nm = nelder_mead(&obj, &x0, 2000);
            assert!(nm.history.windows(2).all(|w| w[1] <= w[0]));
            assert!(nm.error <= nm.history[0]);
        }
    }

    #[test]
    fn optimizer_beats_random_search() {
        let problem: TransferProblem = "ring-5-3".parse().unwrap();
        let config = small_config(Algorithm::A, 100, 1);
        let best = (0..100)
            .map(|r| optimize_controller(&problem, &config, r).unwrap().1.error)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.01, "{best}");

        let obj = Objective::new(&problem, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let random_best = (0..100_000)
            .map(|_| obj.error(&initial_point(&problem, &config, &mut rng)))
            .fold(f64::INFINITY, f64::min);
        assert!(10.0 * best <= random_best, "{best} vs random {random_best}");
    }

    #[test]
    fn synthesis_is_deterministic_and_sorted() {
        let problem: TransferProblem = "chain-5-3".parse().unwrap();
        let config = small_config(Algorithm::A, 40, 10);
        let a = synthesize_set(&problem, &config).unwrap();
        let b = synthesize_set(&problem, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.controllers.len(), 10);
        let errors: Vec<f64> = a.controllers.iter().map(|c| c.nominal_error.unwrap()).collect();
        assert!(errors.windows(2).all(|w| w[0] <= w[1]));
        assert!(errors.iter().all(|e| *e < MAX_ACCEPTED_ERROR));
        for c in &a.controllers {
            let min = c.biases.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(min, 0.0);
        }
        let json = a.to_json().unwrap();
        assert_eq!(ControllerSet::from_json(&json).unwrap(), a);
    }

    #[test]
    fn too_few_restarts_is_an_error() {
        let problem: TransferProblem = "chain-5-3".parse().unwrap();
        let config = small_config(Algorithm::A, 3, 10);
        assert!(matches!(synthesize_set(&problem, &config), Err(Error::Synthesis(_))));
    }

    #[test]
    fn symmetric_start_respects_reflection() {
        let problem: TransferProblem = "ring-6-4".parse().unwrap();
        let config = OptimizationConfig::new(Algorithm::C, 9);
        let x = initial_point(&problem, &config, &mut ChaCha8Rng::seed_from_u64(1));
        for spin in 1..=6 {
            let image = reflection(&problem, spin).unwrap();
            assert_eq!(x[spin - 1], x[image - 1]);
        }
        assert_eq!(reflection(&problem, 1), Some(4));
        let chain: TransferProblem = "chain-5-3".parse().unwrap();
        assert_eq!(reflection(&chain, 1), Some(3));
        assert_eq!(reflection(&chain, 2), Some(2));
        assert_eq!(reflection(&chain, 5), None);
    }

    #[test]
    fn problem_parsing() {
        let p: TransferProblem = "ring:6:4".parse().unwrap();
        assert_eq!(p, TransferProblem::new(6, Topology::Ring, 4).unwrap());
        assert_eq!(p.to_string(), "ring-6-4");
        assert!("ring-6-7".parse::<TransferProblem>().is_err());
        assert!("ring-6".parse::<TransferProblem>().is_err());
        let all = TransferProblem::enumerate(&[5, 6], &[Topology::Chain, Topology::Ring]).unwrap();
        let labels: Vec<String> = all.iter().map(|p| p.to_string()).collect();
        assert_eq!(
            labels,
            ["chain-5-3", "chain-5-5", "chain-6-4", "chain-6-6", "ring-5-2", "ring-5-3", "ring-6-2", "ring-6-3"]
        );
    }
}
