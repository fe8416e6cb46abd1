//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any
//! asserted criterion fails; reported-only criteria never change the exit code.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinrim::dephasing::{generate_set, sample_dephasing_op, StrengthGrid};
use spinrim::dynamics::{compute_error_grid, lti_error, propagate_eigen, propagate_lti, PropagationPath, SpectralTransfer};
use spinrim::linalg::{expm, sym_eigen, sym_expm, SymEigen, C64};
use spinrim::liouville::{site_projector, HermitianBasis, LiouvilleSystem};
use spinrim::network::{build_hamiltonian, Controller, HamiltonianSS, SpinNetwork, Topology};
use spinrim::optimizer::{synthesize_set, ControllerSet, OptimizationConfig};
use spinrim::pipeline::{analyze, evaluate_set, EvaluatedSet, EvaluationConfig, ProblemSpec};
use spinrim::rim::{delta_selection_profile, rim1_curve, REPRESENTATIVE_DELTA, THEOREM1_TOLERANCE};
use spinrim::sensitivity::{analytic_log_sensitivity, differential_sensitivity};
use spinrim::stats::{kendall_tau, tau_significance, HypothesisSuite, Tail};

const SEED: u64 = 1;

// Tolerances fixed by the acceptance contract.
const PROPAGATION_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-6;
const FD_RELATIVE_TOL: f64 = 1e-6;
const TAU_P_RANGE: (f64, f64) = (0.0013, 0.0025);
const SA_SK_MIN_TAU: f64 = 0.9;
const SA_SK_MAX_P: f64 = 1e-6;
const ADJUSTED_MAX_P: f64 = 0.05;
const SELECTION_MIN_TAU: f64 = 0.8;
const PROPERTY_CASES: usize = 10_000;
const PROPERTY_BUDGET_SECS: f64 = 300.0;

#[derive(Default)]
struct Outcome {
    failed: Vec<&'static str>,
}

impl Outcome {
    fn check(&mut self, id: &'static str, pass: bool, detail: String) {
        println!("criterion {id:<2} {}  {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }

    fn report(&mut self, id: &'static str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL (reported, not asserted)" };
        println!("criterion {id:<2} {tag}  {detail}");
    }
}

struct Fixture {
    ham: HamiltonianSS,
    basis: HermitianBasis,
    sys: LiouvilleSystem,
    ctrl: Controller,
}

fn fixture(n: usize, topology: Topology, biases: Vec<f64>, t: f64, out: usize) -> Fixture {
    let net = SpinNetwork::new(n, topology).unwrap();
    let ctrl = Controller::new(biases, t, out);
    let ham = build_hamiltonian(&net, &ctrl).unwrap();
    let basis = HermitianBasis::new(n).unwrap();
    let sys = LiouvilleSystem::new(&ham, &basis, 1, out).unwrap();
    Fixture { ham, basis, sys, ctrl }
}

/// A controller drawn from the optimization domain: canonical biases, T ≤ 4N.
fn random_fixture(rng: &mut ChaCha8Rng, n: usize) -> Fixture {
    let topology = if n > 2 && rng.gen_bool(0.5) { Topology::Ring } else { Topology::Chain };
    let biases = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
    let t = rng.gen_range(0.1..4.0 * n as f64);
    let out = rng.gen_range(2..=n);
    fixture(n, topology, biases, t, out)
}

fn complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

fn propagation_oracle(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 2..=6 {
        for _ in 0..1000 {
            let f = random_fixture(&mut rng, n);
            let op = sample_dephasing_op(&f.ham, &mut rng).unwrap();
            let s = op.superoperator(&f.basis).unwrap();
            let delta = rng.gen_range(0.0..0.1);
            let t = rng.gen_range(0.0..4.0 * n as f64);
            let rho = propagate_eigen(&f.ham, &complex(&op.v), delta, t, &site_projector(n, 1)).unwrap();
            let r = propagate_lti(&f.sys.a, &s, delta, t, &f.sys.r0, PropagationPath::FullGenerator).unwrap();
            worst = worst.max((f.basis.vectorize(&rho) - r).amax());
            cases += 1;
        }
    }
    out.check(
        "2",
        worst <= PROPAGATION_TOL,
        format!("LTI generator vs eigenprojector propagation: max |Δr| = {worst:.2e} over {cases} tuples (tol {PROPAGATION_TOL:e})"),
    );
}

fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut s, mut tx, mut ty, mut pairs) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            s += dx * dy;
            if dx == 0 {
                tx += 1;
            }
            if dy == 0 {
                ty += 1;
            }
        }
    }
    let denom = (((pairs - tx) * (pairs - ty)) as f64).sqrt();
    (denom > 0.0).then(|| s as f64 / denom)
}

fn kendall_machinery(out: &mut Outcome) {
    let p = tau_significance(0.201, 100, Tail::Concordance).p;
    let in_range = (TAU_P_RANGE.0..=TAU_P_RANGE.1).contains(&p);

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut compared, mut worst) = (0, 0.0f64);
    while compared < 1000 {
        let n = rng.gen_range(2..=150);
        let levels = rng.gen_range(2..=40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let Some(expected) = brute_tau_b(&x, &y) else { continue };
        worst = worst.max((kendall_tau(&x, &y).unwrap() - expected).abs());
        compared += 1;
    }
    out.check(
        "4",
        in_range && worst < 1e-12,
        format!(
            "tau=0.201, n=100 concordance p = {p:.5} (range [{}, {}]); fast vs brute-force tau on {compared} tied instances: max diff {worst:.1e}",
            TAU_P_RANGE.0, TAU_P_RANGE.1
        ),
    );
}

fn property_suite(out: &mut Outcome) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let per = PROPERTY_CASES / 5;
    let mut violations = [0usize; 5];
    for case in 0..PROPERTY_CASES {
        let n = rng.gen_range(2..=6);
        let f = random_fixture(&mut rng, n);
        let op = sample_dephasing_op(&f.ham, &mut rng).unwrap();
        let kind = case / per;
        let ok = match kind {
            // Trace preservation along the full LTI generator.
            0 => {
                let s = op.superoperator(&f.basis).unwrap();
                let t = rng.gen_range(0.0..4.0 * n as f64);
                let delta = rng.gen_range(0.0..0.1);
                let r = propagate_lti(&f.sys.a, &s, delta, t, &f.sys.r0, PropagationPath::FullGenerator).unwrap();
                (f.basis.devectorize(&r).trace().re - 1.0).abs() < 1e-12
            }
            // Purity never increases under dephasing.
            1 => {
                let v = complex(&op.v);
                let rho0 = site_projector(n, 1);
                let delta = rng.gen_range(0.0..0.1);
                let t1 = rng.gen_range(0.0..4.0 * n as f64);
                let t2 = t1 + rng.gen_range(0.0..4.0 * n as f64);
                let purity = |t: f64| {
                    let rho = propagate_eigen(&f.ham, &v, delta, t, &rho0).unwrap();
                    (&rho * &rho).trace().re
                };
                purity(t2) <= purity(t1) + 1e-12
            }
            // RIM1(0) is the nominal error, bit for bit.
            2 => {
                let transfer = SpectralTransfer::new(&f.ham, &f.ctrl).unwrap();
                let set = generate_set(&f.ham, 4, rng.gen()).unwrap();
                let grid = StrengthGrid::new(0.1, 10).unwrap();
                let errors = compute_error_grid(&transfer, &set, &grid, "p").unwrap();
                rim1_curve(&errors).values[0] == transfer.nominal_error().unwrap()
            }
            // A is antisymmetric.
            3 => {
                let a = &f.sys.a;
                (a + a.transpose()).amax() <= 1e-12 * a.amax().max(1.0)
            }
            // S is negative semidefinite.
            _ => {
                let s = op.superoperator(&f.basis).unwrap();
                let sym = (&s + s.transpose()) * 0.5;
                sym_eigen(&sym).values.max() <= 1e-12 * s.amax().max(1.0)
            }
        };
        if !ok {
            violations[kind] += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let total: usize = violations.iter().sum();
    out.check(
        "9",
        total == 0 && secs < PROPERTY_BUDGET_SECS,
        format!(
            "{PROPERTY_CASES} property cases (trace, purity, RIM1(0)=e(T), A antisymmetric, S NSD): \
             violations {violations:?}, {secs:.1}s (budget {PROPERTY_BUDGET_SECS}s)"
        ),
    );
}

/// ẽ(T; S, δ) = 1 − c·e^{TA}·e^{TδS}·r0, exact for commuting A and S and free
/// of the O(T‖A‖) rounding of the dense generator exponential.
fn factorized_error(sys: &LiouvilleSystem, unitary: &DMatrix<f64>, s: &SymEigen, delta: f64, t: f64) -> f64 {
    1.0 - sys.c.dot(&(unitary * (sym_expm(s, t * delta) * &sys.r0)))
}

fn sensitivity_fd(out: &mut Outcome, sets: &[ControllerSet]) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst, mut worst_dense, mut cases, mut degenerate) = (0.0f64, 0.0f64, 0, 0);
    for set in sets.iter().filter(|s| s.config.algorithm == spinrim::optimizer::Algorithm::A) {
        let p = set.problem;
        for ctrl in set.controllers.iter().cycle().take(100) {
            let f = fixture(p.size, p.topology, ctrl.biases.clone(), ctrl.readout_time, p.out);
            let op = sample_dephasing_op(&f.ham, &mut rng).unwrap();
            let s = op.superoperator(&f.basis).unwrap();
            let t = ctrl.readout_time;
            let e = lti_error(&f.sys, None, 0.0, t);
            let zeta = match analytic_log_sensitivity(&f.sys, &s, t) {
                Ok(log_s) => log_s * e,
                Err(spinrim::error::Error::DegenerateController(_)) => {
                    degenerate += 1;
                    differential_sensitivity(&f.sys, &s, t)
                }
                Err(err) => panic!("{p}: {err}"),
            };
            let unitary = expm(&(&f.sys.a * t));
            let se = sym_eigen(&s);
            let fd = (factorized_error(&f.sys, &unitary, &se, FD_STEP, t)
                - factorized_error(&f.sys, &unitary, &se, -FD_STEP, t))
                / (2.0 * FD_STEP);
            let fd_dense =
                (lti_error(&f.sys, Some(&s), FD_STEP, t) - lti_error(&f.sys, Some(&s), -FD_STEP, t)) / (2.0 * FD_STEP);
            worst = worst.max((fd - zeta).abs() / zeta.abs());
            worst_dense = worst_dense.max((fd_dense - zeta).abs() / zeta.abs());
            cases += 1;
        }
    }
    out.check(
        "3",
        worst <= FD_RELATIVE_TOL,
        format!(
            "analytic log-sensitivity x e(T) vs central FD (h={FD_STEP:e}) of the factorized error: max relative {worst:.2e} \
             over {cases} cases, {degenerate} via the unnormalized form (tol {FD_RELATIVE_TOL:e}); \
             FD through the dense generator exponential: {worst_dense:.2e}"
        ),
    );
}

fn suite_cases<'a>(suite: &'a HypothesisSuite, pair: &str) -> Vec<&'a spinrim::stats::TestCase> {
    suite.cases.iter().filter(|c| c.measure_pair == pair).collect()
}

fn structural(out: &mut Outcome, sets: &[EvaluatedSet], analysis: &spinrim::pipeline::Analysis) -> bool {
    let groups = sets.len();
    let mut ok = true;
    for suite in [
        &analysis.concordance,
        &analysis.concordance_adjusted,
        &analysis.tradeoff,
        &analysis.tradeoff_adjusted,
    ] {
        ok &= suite.cases.len() == 3 * groups;
        ok &= suite.to_table().lines().count() == 1 + 3 * groups;
        let mut buf = Vec::new();
        suite.write_csv(&mut buf).unwrap();
        let rows = HypothesisSuite::read_csv(buf.as_slice()).unwrap();
        ok &= rows.len() == suite.cases.len();
        ok &= rows
            .iter()
            .zip(&suite.cases)
            .all(|(r, c)| r.3 == c.result.tau && r.4 == c.result.p && r.5 == c.result.decision);
    }
    for (set, (_, map)) in sets.iter().zip(&analysis.heat_maps) {
        let n = set.evaluations.len();
        let steps = set.evaluations[0].curve().grid.len();
        let lines = |f: &dyn Fn(&mut Vec<u8>)| {
            let mut buf = Vec::new();
            f(&mut buf);
            let text = String::from_utf8(buf).unwrap();
            text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        let fig1 = lines(&|b| set.write_rim_matrix(1, b).unwrap());
        ok &= fig1.len() == 1 + steps && fig1.iter().all(|r| r.len() == 1 + n);
        let fig3 = lines(&|b| set.write_measure_series(b).unwrap());
        ok &= fig3.len() == 1 + n && fig3.iter().all(|r| r.len() == 9);
        let fig4 = lines(&|b| set.write_adjusted_by_zeta(1, b).unwrap());
        ok &= fig4.len() == 1 + n && fig4.iter().all(|r| r.len() == 2 + steps);
        let zetas: Vec<f64> = fig4[1..].iter().map(|r| r[1].parse().unwrap()).collect();
        ok &= zetas.windows(2).all(|w| w[0] <= w[1]);
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let back = spinrim::rim::TauHeatMap::read_csv(buf.as_slice()).unwrap();
        ok &= back.deltas == map.deltas
            && back.tau.iter().zip(&map.tau).all(|(a, b)| a == b || (a.is_nan() && b.is_nan()));
    }
    out.check(
        "8",
        ok,
        format!(
            "table/figure formats: 4 suites x {} rows, per-set RIM1 matrix, measure series, adjusted-RIM1 by zeta_a, tau heat maps; CSV round trips",
            3 * groups
        ),
    );
    ok
}

fn study(out: &mut Outcome) {
    let start = Instant::now();
    let specs = ProblemSpec::defaults();
    let mut sets = Vec::new();
    for spec in &specs {
        let config = OptimizationConfig::new(spec.algorithm, SEED);
        match synthesize_set(&spec.problem, &config) {
            Ok(set) => sets.push(set),
            Err(e) => {
                out.check("1", false, format!("synthesis of {} failed: {e}", spec.id()));
                return;
            }
        }
    }
    eprintln!("synthesized {} sets in {:.0}s", sets.len(), start.elapsed().as_secs_f64());

    sensitivity_fd(out, &sets);

    let eval_cfg = EvaluationConfig::new(SEED);
    let mut evaluated = Vec::new();
    for (spec, set) in specs.iter().zip(&sets) {
        let evaluations = evaluate_set(set, &eval_cfg).unwrap();
        evaluated.push(EvaluatedSet { spec: *spec, evaluations });
    }
    eprintln!("evaluated {} sets in {:.0}s", evaluated.len(), start.elapsed().as_secs_f64());

    let all: Vec<_> = evaluated.iter().flat_map(|s| &s.evaluations).collect();
    let worst = all.iter().map(|e| e.theorem1.error).fold(0.0, f64::max);
    let failures = all.iter().filter(|e| !e.theorem1.passes(THEOREM1_TOLERANCE)).count();
    let clamped: usize = all.iter().map(|e| e.clamped).sum();
    out.check(
        "1",
        failures == 0,
        format!(
            "|zeta_a - adjusted RIM1(1e-4)/1e-4| / |zeta_a| <= {THEOREM1_TOLERANCE:e}: worst {worst:.3e}, {failures} of {} controllers over \
             ({} sets x {} ops x {} strengths; {clamped} clamped values)",
            all.len(),
            evaluated.len(),
            eval_cfg.ops,
            eval_cfg.grid.len()
        ),
    );

    let analysis = analyze(&evaluated, None).unwrap();

    let sa_sk = suite_cases(&analysis.concordance, "s_a vs s_k");
    let min_tau = sa_sk.iter().map(|c| c.result.tau).fold(f64::INFINITY, f64::min);
    let max_p = sa_sk.iter().map(|c| c.result.p).fold(0.0, f64::max);
    let smallest_n = sa_sk.iter().map(|c| c.result.n).min().unwrap_or(0);
    out.check(
        "5",
        sa_sk.len() == evaluated.len() && min_tau >= SA_SK_MIN_TAU && max_p < SA_SK_MAX_P,
        format!(
            "tau(s_a, s_k) on {} sets: min {min_tau:.4} (>= {SA_SK_MIN_TAU}), max p {max_p:.2e} (< {SA_SK_MAX_P:e}), smallest n {smallest_n}",
            sa_sk.len()
        ),
    );

    let adj = &analysis.concordance_adjusted.cases;
    let bad: Vec<String> = adj
        .iter()
        .filter(|c| !(c.result.tau > 0.0 && c.result.p < ADJUSTED_MAX_P))
        .map(|c| format!("{}-{} {} tau={:.3} p={:.3}", c.problem, c.algorithm, c.measure_pair, c.result.tau, c.result.p))
        .collect();
    let adj_min = adj.iter().map(|c| c.result.tau).fold(f64::INFINITY, f64::min);
    out.check(
        "6",
        bad.is_empty() && adj.len() == 3 * evaluated.len(),
        format!(
            "adjusted pairs (zeta_a, zeta_k, adjusted RIM1) concordant with p < {ADJUSTED_MAX_P}: {} of {} cases, min tau {adj_min:.4}{}",
            adj.len() - bad.len(),
            adj.len(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join("; ")) }
        ),
    );

    let mut best: Option<(String, f64)> = None;
    for set in evaluated.iter().filter(|s| s.spec.problem.topology == Topology::Ring) {
        let grid = set.evaluations[0].curve().grid;
        let interior: Vec<f64> = (0..grid.len())
            .map(|n| grid.delta(n))
            .filter(|&d| d > 0.005 + 1e-12 && d < 0.1 - 1e-12)
            .collect();
        let profile = delta_selection_profile(&set.curves(), REPRESENTATIVE_DELTA, &interior).unwrap();
        let min = profile.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        if best.as_ref().map_or(true, |b| min > b.1) {
            best = Some((set.spec.id(), min));
        }
    }
    let (best_id, best_min) = best.unwrap();
    out.report(
        "7",
        best_min > SELECTION_MIN_TAU,
        format!(
            "best ring set {best_id}: min over delta in (0.005, 0.1) of tau(RIM1({REPRESENTATIVE_DELTA}), RIM1(delta)) = {best_min:.4} (threshold {SELECTION_MIN_TAU})"
        ),
    );

    structural(out, &evaluated, &analysis);
    eprintln!("study finished in {:.0}s", start.elapsed().as_secs_f64());
}

fn main() -> ExitCode {
    let mut out = Outcome::default();
    propagation_oracle(&mut out);
    kendall_machinery(&mut out);
    property_suite(&mut out);
    study(&mut out);
    if out.failed.is_empty() {
        println!("acceptance: all asserted criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {:?}", out.failed);
        ExitCode::FAILURE
    }
}
