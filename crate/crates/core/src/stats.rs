//! Kendall rank correlation and the one-tailed significance tests built on it.

use std::fmt;
use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "Kendall tau needs equal lengths ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("Kendall tau needs at least 2 samples".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("Kendall tau input contains NaN".into()));
    }
    Ok(())
}

/// Number of tied pairs among consecutive equal runs of a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Stable merge sort by value, returning the number of strict inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        sort_counting_swaps(left, bl) + sort_counting_swaps(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall τ-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // −0.0 and 0.0 compare equal as values; normalise so ties are detected.
    let norm = |v: f64| if v == 0.0 { 0.0 } else { v };
    let xs: Vec<f64> = pairs.iter().map(|p| norm(p.0)).collect();
    let joint: Vec<(f64, f64)> = pairs.iter().map(|p| (norm(p.0), norm(p.1))).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&joint);

    let mut ys: Vec<f64> = joint.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);

    let n0 = n * (n - 1) / 2;
    if n1 == n0 || n2 == n0 {
        return Err(Error::InvalidArgument(
            "Kendall tau undefined: one input is constant".into(),
        ));
    }
    let numer = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tail {
    /// Right tail, H1: τ > 0.
    Concordance,
    /// Left tail, H1: τ < 0.
    Discordance,
}

impl Tail {
    pub fn for_sign(tau: f64) -> Self {
        if tau < 0.0 {
            Self::Discordance
        } else {
            Self::Concordance
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    RejectH0,
    FailToReject,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RejectH0 => "reject",
            Self::FailToReject => "fail-to-reject",
        })
    }
}

impl std::str::FromStr for Decision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject" => Ok(Self::RejectH0),
            "fail-to-reject" => Ok(Self::FailToReject),
            other => Err(Error::Format(format!("unknown decision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauResult {
    pub tau: f64,
    pub n: usize,
    pub z: f64,
    pub p: f64,
    pub tail: Tail,
    pub decision: Decision,
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Z_τ = τ / sqrt(2(2n+5) / (9n(n−1))).
pub fn z_statistic(tau: f64, n: usize) -> f64 {
    let n = n as f64;
    tau / (2.0 * (2.0 * n + 5.0) / (9.0 * n * (n - 1.0))).sqrt()
}

pub fn tau_significance(tau: f64, n: usize, tail: Tail) -> TauResult {
    tau_significance_at(tau, n, tail, DEFAULT_ALPHA)
}

pub fn tau_significance_at(tau: f64, n: usize, tail: Tail, alpha: f64) -> TauResult {
    if n < 10 {
        warn!("normal approximation for Kendall tau is poor at n = {n}");
    }
    let z = z_statistic(tau, n);
    let p = match tail {
        Tail::Concordance => normal_cdf(-z),
        Tail::Discordance => normal_cdf(z),
    };
    TauResult {
        tau,
        n,
        z,
        p,
        tail,
        decision: if p < alpha { Decision::RejectH0 } else { Decision::FailToReject },
    }
}

/// Table formatting: probabilities below 1e-16 print as 0.000.
pub fn format_p(p: f64) -> String {
    if p < 1e-16 {
        "0.000".to_string()
    } else if p < 1e-3 {
        format!("{p:.1e}")
    } else {
        format!("{p:.4}")
    }
}

/// Per-controller measures entering the hypothesis tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerMeasures {
    pub e_t: f64,
    /// `None` for controllers excluded from log-sensitivity statistics.
    pub s_a: Option<f64>,
    pub s_k: Option<f64>,
    pub rim1: f64,
    pub zeta_a: f64,
    pub zeta_k: f64,
    pub rim1_adjusted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Measure {
    Error,
    SA,
    SK,
    Rim1,
    ZetaA,
    ZetaK,
    Rim1Adjusted,
}

impl Measure {
    pub fn label(self) -> &'static str {
        match self {
            Self::Error => "e_T",
            Self::SA => "s_a",
            Self::SK => "s_k",
            Self::Rim1 => "RIM1",
            Self::ZetaA => "zeta_a",
            Self::ZetaK => "zeta_k",
            Self::Rim1Adjusted => "RIM1_adj",
        }
    }

    pub fn value(self, m: &ControllerMeasures) -> Option<f64> {
        match self {
            Self::Error => Some(m.e_t),
            Self::SA => m.s_a,
            Self::SK => m.s_k,
            Self::Rim1 => Some(m.rim1),
            Self::ZetaA => Some(m.zeta_a),
            Self::ZetaK => Some(m.zeta_k),
            Self::Rim1Adjusted => Some(m.rim1_adjusted),
        }
    }
}

pub const RAW_MEASURES: [Measure; 3] = [Measure::SA, Measure::SK, Measure::Rim1];
pub const ADJUSTED_MEASURES: [Measure; 3] = [Measure::ZetaA, Measure::ZetaK, Measure::Rim1Adjusted];

/// One controller population: a transfer problem solved by one algorithm.
#[derive(Debug, Clone)]
pub struct MeasureGroup {
    pub problem: String,
    pub algorithm: String,
    pub controllers: Vec<ControllerMeasures>,
}

impl MeasureGroup {
    /// Paired values of two measures over controllers where both are defined.
    pub fn paired(&self, a: Measure, b: Measure) -> (Vec<f64>, Vec<f64>) {
        self.controllers
            .iter()
            .filter_map(|m| Some((a.value(m)?, b.value(m)?)))
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub problem: String,
    pub algorithm: String,
    pub measure_pair: String,
    pub result: TauResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSuite {
    pub alpha: f64,
    pub cases: Vec<TestCase>,
}

fn pair_label(a: Measure, b: Measure) -> String {
    format!("{} vs {}", a.label(), b.label())
}

fn run_pair(group: &MeasureGroup, a: Measure, b: Measure, tail: Option<Tail>, alpha: f64) -> Result<TestCase> {
    let (x, y) = group.paired(a, b);
    let tau = kendall_tau(&x, &y).map_err(|e| {
        Error::InvalidArgument(format!(
            "{} {} {}: {e}",
            group.problem,
            group.algorithm,
            pair_label(a, b)
        ))
    })?;
    let tail = tail.unwrap_or_else(|| Tail::for_sign(tau));
    Ok(TestCase {
        problem: group.problem.clone(),
        algorithm: group.algorithm.clone(),
        measure_pair: pair_label(a, b),
        result: tau_significance_at(tau, x.len(), tail, alpha),
    })
}

fn warn_small(group: &MeasureGroup) {
    if group.controllers.len() < 20 {
        warn!(
            "{} {}: only {} controllers (at least 20 expected)",
            group.problem,
            group.algorithm,
            group.controllers.len()
        );
    }
}

/// Pairwise tests among robustness measures; the tail follows the sign of τ.
pub fn concordance_suite(groups: &[MeasureGroup], measures: &[Measure; 3], alpha: f64) -> Result<HypothesisSuite> {
    let mut cases = Vec::new();
    for group in groups {
        warn_small(group);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            cases.push(run_pair(group, measures[i], measures[j], None, alpha)?);
        }
    }
    Ok(HypothesisSuite { alpha, cases })
}

/// Left-tailed tests of each robustness measure against the nominal error.
pub fn tradeoff_suite(groups: &[MeasureGroup], measures: &[Measure; 3], alpha: f64) -> Result<HypothesisSuite> {
    let mut cases = Vec::new();
    for group in groups {
        warn_small(group);
        for &m in measures {
            cases.push(run_pair(group, m, Measure::Error, Some(Tail::Discordance), alpha)?);
        }
    }
    Ok(HypothesisSuite { alpha, cases })
}

impl HypothesisSuite {
    /// CSV columns: problem, algorithm, measure_pair, tau, p, decision.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["problem", "algorithm", "measure_pair", "tau", "p", "decision"])?;
        for c in &self.cases {
            out.write_record([
                c.problem.clone(),
                c.algorithm.clone(),
                c.measure_pair.clone(),
                c.result.tau.to_string(),
                c.result.p.to_string(),
                c.result.decision.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("suite csv", e))?;
        Ok(())
    }

    /// Rows as written by [`Self::write_csv`]. n, Z and tail are not stored, so
    /// the parsed rows carry only τ, p and the decision.
    pub fn read_csv<R: Read>(r: R) -> Result<Vec<(String, String, String, f64, f64, Decision)>> {
        let mut reader = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(Error::Format(format!("expected 6 columns, got {}", rec.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].to_string(),
                num(&rec[3])?,
                num(&rec[4])?,
                rec[5].parse()?,
            ));
        }
        Ok(rows)
    }

    /// Fixed-width table with τ to 4 decimals and formatted p-values.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:<4} {:<22} {:>8} {:>9}  {}\n",
            "problem", "alg", "measures", "tau", "p", "decision"
        );
        for c in &self.cases {
            s.push_str(&format!(
                "{:<14} {:<4} {:<22} {:>8.4} {:>9}  {}\n",
                c.problem,
                c.algorithm,
                c.measure_pair,
                c.result.tau,
                format_p(c.result.p),
                c.result.decision
            ));
        }
        s
    }
}
