use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use spinrim::dephasing::{hamiltonian_hash, StrengthGrid};
use spinrim::network::build_hamiltonian;
use spinrim::optimizer::{synthesize_set, ControllerSet};
use spinrim::pipeline::{analyze, evaluate_controller, ControllerEvaluation, EvaluatedSet, ProblemSpec};
use spinrim::rim::{RimCurve, TauHeatMap, REPRESENTATIVE_DELTA, THEOREM1_TOLERANCE};
use spinrim::sensitivity::{read_records_csv, write_records_csv};
use spinrim::stats::{format_p, HypothesisSuite};

use crate::config::{ConfigError, PipelineConfig};

pub const SUITES: [&str; 4] = ["concordance", "concordance_adjusted", "tradeoff", "tradeoff_adjusted"];

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn set_file(&self, id: &str) -> PathBuf {
        self.root.join("sets").join(format!("{id}.json"))
    }

    pub fn eval_dir(&self, id: &str) -> PathBuf {
        self.root.join("eval").join(id)
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

/// Writes through a sibling temp file so a killed run never leaves a torn file.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    {
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        write(&mut w).with_context(|| format!("writing {}", path.display()))?;
        std::io::Write::flush(&mut w).with_context(|| format!("writing {}", path.display()))?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn synth(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg.out);
    for spec in cfg.problem_specs()? {
        let opt = cfg.optimization(spec.algorithm);
        let path = layout.set_file(&spec.id());
        if path.exists() {
            let existing = ControllerSet::from_json(&read_text(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            if existing.config == opt && existing.problem == spec.problem {
                info!("{}: up to date", spec.id());
                continue;
            }
        }
        info!("{}: {} restarts", spec.id(), opt.restarts);
        let set = synthesize_set(&spec.problem, &opt).with_context(|| spec.id())?;
        let json = set.to_json()?;
        write_atomic(&path, |w| Ok(std::io::Write::write_all(w, json.as_bytes())?))?;
        info!(
            "{}: kept {} controllers, e(T) in [{:.3e}, {:.3e}]",
            spec.id(),
            set.controllers.len(),
            set.controllers[0].nominal_error.unwrap_or(f64::NAN),
            set.controllers.last().and_then(|c| c.nominal_error).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Per-controller checkpoint; its presence marks the controller as done.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    ops: usize,
    grid: StrengthGrid,
    evaluation: ControllerEvaluation,
}

#[derive(Debug, Serialize, Deserialize)]
struct ControllerSummary {
    controller_id: String,
    e_t: f64,
    zeta_a: f64,
    forward_difference: f64,
    theorem1_error: f64,
    theorem1_pass: bool,
    clamped: usize,
    stencil_agrees: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SetSummary {
    set: String,
    synthesis_seed: u64,
    dephasing_seed: u64,
    ops: usize,
    grid: StrengthGrid,
    theorem1_tolerance: f64,
    worst_theorem1_error: f64,
    theorem1_failures: usize,
    controllers: Vec<ControllerSummary>,
}

fn missing_sets(layout: &Layout, specs: &[ProblemSpec]) -> Vec<PathBuf> {
    specs
        .iter()
        .map(|s| layout.set_file(&s.id()))
        .filter(|p| !p.exists())
        .collect()
}

fn bail_missing(what: &str, missing: Vec<PathBuf>) -> anyhow::Result<()> {
    if missing.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = missing.iter().map(|p| format!("  {}", p.display())).collect();
    Err(ConfigError(format!("missing {what} ({}):\n{}", missing.len(), list.join("\n"))).into())
}

fn load_checkpoint(
    dir: &Path,
    cid: &str,
    expected_hash: &str,
    cfg: &spinrim::pipeline::EvaluationConfig,
) -> anyhow::Result<Option<ControllerEvaluation>> {
    let path = dir.join(format!("{cid}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let cp: Checkpoint =
        serde_json::from_str(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    if cp.evaluation.hamiltonian_hash != expected_hash {
        return Err(ConfigError(format!(
            "{}: Hamiltonian hash mismatch (checkpoint {}, controller {expected_hash}); \
             the controller set changed since this evaluation, use a fresh output directory",
            path.display(),
            cp.evaluation.hamiltonian_hash
        ))
        .into());
    }
    if cp.ops != cfg.ops || cp.grid != cfg.grid || cp.evaluation.dephasing_seed != cfg.dephasing_seed {
        return Err(ConfigError(format!(
            "{}: evaluated with a different dephasing ensemble or strength grid",
            path.display()
        ))
        .into());
    }
    let rim_path = dir.join(format!("{cid}.rim.csv"));
    let curve = RimCurve::read_csv(cid, cp.grid, open(&rim_path)?)
        .with_context(|| format!("parsing {}", rim_path.display()))?;
    let mut evaluation = cp.evaluation;
    evaluation.curve = Some(curve);
    Ok(Some(evaluation))
}

fn evaluate_one(
    dir: &Path,
    set: &ControllerSet,
    index: usize,
    cfg: &spinrim::pipeline::EvaluationConfig,
    write_grids: bool,
) -> anyhow::Result<ControllerEvaluation> {
    let net = set.problem.network()?;
    let ctrl = &set.controllers[index];
    let cid = set.controller_id(index);
    let hash = hamiltonian_hash(&build_hamiltonian(&net, ctrl)?);
    if let Some(done) = load_checkpoint(dir, &cid, &hash, cfg)? {
        return Ok(done);
    }
    let (evaluation, grid) = evaluate_controller(&net, ctrl, &cid, cfg).with_context(|| cid.clone())?;
    if grid.clamped > 0 {
        warn!("{cid}: {} error values clamped into [0, 1]", grid.clamped);
    }
    if write_grids {
        write_atomic(&dir.join("grids").join(format!("{cid}.bin")), |w| {
            Ok(grid.write_binary(w)?)
        })?;
    }
    write_atomic(&dir.join(format!("{cid}.rim.csv")), |w| {
        Ok(evaluation.curve().write_csv(w)?)
    })?;
    let cp = Checkpoint {
        ops: cfg.ops,
        grid: cfg.grid,
        evaluation,
    };
    let json = serde_json::to_string_pretty(&cp)?;
    write_atomic(&dir.join(format!("{cid}.json")), |w| {
        Ok(std::io::Write::write_all(w, json.as_bytes())?)
    })?;
    Ok(cp.evaluation)
}

pub fn evaluate(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg.out);
    let specs = cfg.problem_specs()?;
    bail_missing("controller sets; run `spinrim synth` first", missing_sets(&layout, &specs))?;
    let eval_cfg = cfg.evaluation()?;
    for spec in specs {
        let path = layout.set_file(&spec.id());
        let set = ControllerSet::from_json(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        let dir = layout.eval_dir(&spec.id());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        info!("{}: evaluating {} controllers", spec.id(), set.controllers.len());
        let evaluations = (0..set.controllers.len())
            .into_par_iter()
            .map(|i| evaluate_one(&dir, &set, i, &eval_cfg, cfg.evaluation.write_grids))
            .collect::<anyhow::Result<Vec<_>>>()?;

        let records: Vec<_> = evaluations.iter().map(|e| e.record.clone()).collect();
        write_atomic(&dir.join("sensitivity.csv"), |w| Ok(write_records_csv(&records, w)?))?;

        let controllers: Vec<ControllerSummary> = evaluations
            .iter()
            .map(|e| ControllerSummary {
                controller_id: e.controller_id.clone(),
                e_t: e.record.e_t,
                zeta_a: e.theorem1.zeta_a,
                forward_difference: e.theorem1.forward_difference,
                theorem1_error: e.theorem1.error,
                theorem1_pass: e.theorem1.passes(THEOREM1_TOLERANCE),
                clamped: e.clamped,
                stencil_agrees: e.stencil_agrees,
            })
            .collect();
        let summary = SetSummary {
            set: spec.id(),
            synthesis_seed: set.config.seed,
            dephasing_seed: eval_cfg.dephasing_seed,
            ops: eval_cfg.ops,
            grid: eval_cfg.grid,
            theorem1_tolerance: THEOREM1_TOLERANCE,
            worst_theorem1_error: controllers.iter().map(|c| c.theorem1_error).fold(0.0, f64::max),
            theorem1_failures: controllers.iter().filter(|c| !c.theorem1_pass).count(),
            controllers,
        };
        let json = serde_json::to_string_pretty(&summary)?;
        write_atomic(&dir.join("summary.json"), |w| {
            Ok(std::io::Write::write_all(w, json.as_bytes())?)
        })?;
        info!(
            "{}: worst derivative-check error {:.2e}, {} over tolerance",
            spec.id(),
            summary.worst_theorem1_error,
            summary.theorem1_failures
        );
    }
    Ok(())
}

fn load_evaluated(layout: &Layout, spec: ProblemSpec) -> anyhow::Result<EvaluatedSet> {
    let dir = layout.eval_dir(&spec.id());
    let summary: SetSummary = serde_json::from_str(&read_text(&dir.join("summary.json"))?)
        .with_context(|| format!("parsing {}", dir.join("summary.json").display()))?;
    let evaluations = summary
        .controllers
        .iter()
        .map(|c| {
            let path = dir.join(format!("{}.json", c.controller_id));
            let cp: Checkpoint = serde_json::from_str(&read_text(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            let rim = dir.join(format!("{}.rim.csv", c.controller_id));
            let curve = RimCurve::read_csv(&c.controller_id, cp.grid, open(&rim)?)
                .with_context(|| format!("parsing {}", rim.display()))?;
            let mut e = cp.evaluation;
            e.curve = Some(curve);
            Ok(e)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let records = read_records_csv(open(&dir.join("sensitivity.csv"))?)?;
    if records.len() != evaluations.len() {
        bail!("{}: sensitivity.csv disagrees with the checkpoints", spec.id());
    }
    Ok(EvaluatedSet { spec, evaluations })
}

fn missing_evaluations(layout: &Layout, specs: &[ProblemSpec]) -> Vec<PathBuf> {
    let mut missing = Vec::new();
    for spec in specs {
        let dir = layout.eval_dir(&spec.id());
        let summary = dir.join("summary.json");
        let Ok(text) = fs::read_to_string(&summary) else {
            missing.push(summary);
            continue;
        };
        let Ok(parsed) = serde_json::from_str::<SetSummary>(&text) else {
            missing.push(summary);
            continue;
        };
        for c in &parsed.controllers {
            for ext in ["json", "rim.csv"] {
                let p = dir.join(format!("{}.{ext}", c.controller_id));
                if !p.exists() {
                    missing.push(p);
                }
            }
        }
        if !dir.join("sensitivity.csv").exists() {
            missing.push(dir.join("sensitivity.csv"));
        }
    }
    missing
}

pub fn analyze_cmd(cfg: &PipelineConfig) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg.out);
    let specs = cfg.problem_specs()?;
    bail_missing(
        "evaluation outputs; run `spinrim evaluate` first",
        missing_evaluations(&layout, &specs),
    )?;
    let sets = specs
        .iter()
        .map(|&s| load_evaluated(&layout, s))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let analysis = analyze(&sets, None)?;
    let dir = layout.analysis_dir();
    let suites = [
        &analysis.concordance,
        &analysis.concordance_adjusted,
        &analysis.tradeoff,
        &analysis.tradeoff_adjusted,
    ];
    for (name, suite) in SUITES.iter().zip(suites) {
        write_atomic(&dir.join(format!("{name}.csv")), |w| Ok(suite.write_csv(w)?))?;
    }
    for (id, map) in &analysis.heat_maps {
        write_atomic(&dir.join("heatmap").join(format!("{id}.csv")), |w| Ok(map.write_csv(w)?))?;
    }
    for set in &sets {
        let id = set.spec.id();
        write_atomic(&dir.join("rim_matrix").join(format!("{id}.csv")), |w| {
            Ok(set.write_rim_matrix(1, w)?)
        })?;
        write_atomic(&dir.join("measures").join(format!("{id}.csv")), |w| {
            Ok(set.write_measure_series(w)?)
        })?;
        write_atomic(&dir.join("adjusted_by_zeta").join(format!("{id}.csv")), |w| {
            Ok(set.write_adjusted_by_zeta(1, w)?)
        })?;
    }
    info!("analysis written to {}", dir.display());
    Ok(())
}

fn suite_table(rows: &[(String, String, String, f64, f64, spinrim::stats::Decision)]) -> String {
    let mut s = format!(
        "{:<14} {:<4} {:<22} {:>8} {:>9}  {}\n",
        "problem", "alg", "measures", "tau", "p", "decision"
    );
    for (problem, alg, pair, tau, p, decision) in rows {
        let _ = writeln!(s, "{problem:<14} {alg:<4} {pair:<22} {tau:>8.4} {:>9}  {decision}", format_p(*p));
    }
    s
}

pub fn report(cfg: &PipelineConfig) -> anyhow::Result<String> {
    let layout = Layout::new(&cfg.out);
    let specs = cfg.problem_specs()?;
    let dir = layout.analysis_dir();
    let mut missing: Vec<PathBuf> = SUITES
        .iter()
        .map(|n| dir.join(format!("{n}.csv")))
        .filter(|p| !p.exists())
        .collect();
    for spec in &specs {
        for p in [
            layout.eval_dir(&spec.id()).join("summary.json"),
            dir.join("heatmap").join(format!("{}.csv", spec.id())),
        ] {
            if !p.exists() {
                missing.push(p);
            }
        }
    }
    bail_missing("analysis outputs; run `spinrim analyze` first", missing)?;

    let mut out = String::new();
    for name in SUITES {
        let rows = HypothesisSuite::read_csv(open(&dir.join(format!("{name}.csv")))?)?;
        let _ = writeln!(out, "== {name} ==");
        out.push_str(&suite_table(&rows));
        out.push('\n');
    }
    let _ = writeln!(out, "== derivative check (tolerance {THEOREM1_TOLERANCE:e}) ==");
    let _ = writeln!(out, "{:<14} {:>12} {:>9}", "set", "worst", "failures");
    for spec in &specs {
        let path = layout.eval_dir(&spec.id()).join("summary.json");
        let s: SetSummary =
            serde_json::from_str(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        let _ = writeln!(out, "{:<14} {:>12.3e} {:>9}", s.set, s.worst_theorem1_error, s.theorem1_failures);
    }
    out.push('\n');
    let _ = writeln!(out, "== rank stability of RIM1({REPRESENTATIVE_DELTA}) across delta ==");
    let _ = writeln!(out, "{:<14} {:>9} {:>9}", "set", "min tau", "at delta");
    for spec in &specs {
        let map = TauHeatMap::read_csv(open(&dir.join("heatmap").join(format!("{}.csv", spec.id())))?)?;
        let anchor = nearest(&map.deltas, REPRESENTATIVE_DELTA);
        let (j, tau) = (0..map.deltas.len())
            .map(|j| (j, map.get(anchor, j)))
            .filter(|(_, t)| t.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((anchor, f64::NAN));
        let _ = writeln!(out, "{:<14} {:>9.4} {:>9.4}", spec.id(), tau, map.deltas[j]);
    }
    write_atomic(&dir.join("report.txt"), |w| Ok(std::io::Write::write_all(w, out.as_bytes())?))?;
    Ok(out)
}

fn nearest(values: &[f64], x: f64) -> usize {
    (0..values.len())
        .min_by(|&a, &b| (values[a] - x).abs().total_cmp(&(values[b] - x).abs()))
        .unwrap_or(0)
}
