//! Exact evaluation of a stopping rule and decision strategy.
//!
//! A forward pass carries the aggregated reach weight `T_n(s)` of every
//! lattice state. Because `f_theta^n` is constant on a state, the stopping
//! mass `T_n(s) psi_n(s)` times `f_theta^n(s)` is exactly `P_theta(tau = n,
//! state s)`, from which every functional follows:
//!
//! ```text
//! N(theta; psi) = sum_n n P_theta(tau = n)          N(psi) = sum pi2(theta) N(theta; psi)
//! W(psi, delta) = sum_theta pi1(theta) E_theta w(theta, delta)
//! R = c N(psi) + W
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::{DensityTable, HistoryTable};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeKind, DEFAULT_STATE_BUDGET};
use crate::model::Problem;
use crate::policy::{truncate_rule, StoppingRule};

/// States whose mass falls below this contribute nothing at double precision.
pub const PRUNE_MASS: f64 = 1e-300;

/// Shortfall of the `pi2` stopping mass beyond which `R` is reported infinite.
pub const UNSTOPPED_TOL: f64 = 1e-9;

/// Explicit terminal decisions, `decision[n - 1][s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTable {
    kind: LatticeKind,
    alphabet: usize,
    decisions: Vec<Vec<Option<usize>>>,
}

impl DecisionTable {
    pub fn new(kind: LatticeKind, alphabet: usize, decisions: Vec<Vec<Option<usize>>>) -> Self {
        Self {
            kind,
            alphabet,
            decisions,
        }
    }

    /// Copies the Bayes decisions of `table` for stages `1..=span`.
    pub fn from_bayes(table: &HistoryTable, span: usize) -> Self {
        let lat = table.lattice();
        let decisions = (1..=span.min(table.horizon()))
            .map(|n| {
                (0..lat.stage_len(n))
                    .map(|s| Some(table.decision(n, s)))
                    .collect()
            })
            .collect();
        Self::new(lat.kind(), lat.alphabet(), decisions)
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn get(&self, n: usize, s: usize) -> Option<usize> {
        self.decisions.get(n.checked_sub(1)?)?.get(s).copied().flatten()
    }

    pub fn set(&mut self, n: usize, s: usize, d: usize) {
        self.decisions[n - 1][s] = Some(d);
    }

    /// Reads `stage,state,decision` rows after a `# lattice=..,alphabet=..`
    /// line. States that are not listed have no decision.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let body = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse("decision file must start with '# lattice=...'".into()))?;
        let (mut kind, mut alphabet) = (None, None);
        for part in body.split(',') {
            match part.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("lattice", v)) => kind = Some(LatticeKind::parse(v)?),
                Some(("alphabet", v)) => {
                    alphabet = Some(v.parse::<usize>().map_err(|_| Error::Parse(format!("bad alphabet {v:?}")))?)
                }
                _ => return Err(Error::Parse(format!("bad header field {part:?}"))),
            }
        }
        let (Some(kind), Some(alphabet)) = (kind, alphabet) else {
            return Err(Error::Parse("header needs lattice and alphabet".into()));
        };
        let mut rows = Vec::new();
        for record in csv::Reader::from_reader(reader).records() {
            let record = record.map_err(|e| Error::Parse(e.to_string()))?;
            let field = |i: usize| -> Result<usize> {
                record
                    .get(i)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad decision row {record:?}")))
            };
            rows.push((field(0)?, record.get(1).unwrap_or("").to_string(), field(2)?));
        }
        let span = rows.iter().map(|r| r.0).max().unwrap_or(0);
        if span == 0 {
            return Err(Error::Parse("empty decision table".into()));
        }
        let lat = Lattice::new(kind, alphabet, span, DEFAULT_STATE_BUDGET)?;
        let mut decisions: Vec<Vec<Option<usize>>> =
            (1..=span).map(|n| vec![None; lat.stage_len(n)]).collect();
        for (n, label, d) in rows {
            if n == 0 {
                return Err(Error::Parse("stages start at 1".into()));
            }
            let s = lat.parse_label(n, &label)?;
            decisions[n - 1][s] = Some(d);
        }
        Ok(Self::new(kind, alphabet, decisions))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# lattice={},alphabet={}", self.kind.as_str(), self.alphabet)?;
        let lat = Lattice::new(self.kind, self.alphabet, self.decisions.len(), DEFAULT_STATE_BUDGET)?;
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(["stage", "state", "decision"]).map_err(csv_err)?;
        for (i, stage) in self.decisions.iter().enumerate() {
            for (s, d) in stage.iter().enumerate() {
                if let Some(d) = d {
                    out.write_record([(i + 1).to_string(), lat.label(i + 1, s), d.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Terminal decision strategy used at stopping.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DecisionStrategy {
    /// Stagewise Bayes decisions for the problem's loss.
    #[default]
    Bayes,
    /// Bayes decisions for the multiplier-weighted loss.
    Weighted(Vec<f64>),
    Table(DecisionTable),
}

/// Where decisions come from inside [`evaluate_on`].
#[derive(Debug, Clone, Copy)]
pub enum DecisionSource<'a> {
    Bayes(&'a HistoryTable),
    Table(&'a DecisionTable),
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    /// Evaluation horizon for untruncated rules; defaults to the rule span.
    pub cap: Option<usize>,
    pub state_budget: Option<u128>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopDistribution {
    /// `P(tau = n)` under the `pi2` mixture, index `n - 1`.
    pub pi2: Vec<f64>,
    /// `P_theta(tau = n)`, `theta[t][n - 1]`.
    pub theta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorProbs {
    /// `P_{theta_1}(decide 2)`.
    pub alpha: f64,
    /// `P_{theta_2}(decide 1)`.
    pub beta: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    /// Stage up to which the rule was followed.
    pub horizon: usize,
    pub truncated: bool,
    pub cost: f64,
    /// Average sample number under `pi2`; `E min(tau, horizon)` when mass is left.
    pub N_psi: f64,
    pub N_theta: Vec<f64>,
    /// Average loss under `pi1`.
    pub W: f64,
    pub W_i: Vec<f64>,
    /// Part of `W` from parameters outside every constraint group.
    pub W_rest: f64,
    /// `c N + W`, absent when the rule does not stop with probability one.
    pub R: Option<f64>,
    pub R_infinite: bool,
    /// `N + sum lambda_i W_i` for the multipliers stored in the problem.
    pub L: Option<f64>,
    pub stop_dist: StopDistribution,
    pub error_probs: Option<ErrorProbs>,
    /// `P(tau <= horizon)` under `pi2`.
    pub mass_stopped: f64,
    /// `P_theta(tau > horizon)`.
    pub unstopped_theta: Vec<f64>,
    /// `E_theta w(theta, delta)`.
    pub loss_theta: Vec<f64>,
    /// `P_theta(decision = d)`, `decision_probs[theta][d]`.
    pub decision_probs: Vec<Vec<f64>>,
}

impl RiskReport {
    /// `N(psi) + sum lambda_i W_i`.
    pub fn lagrangian(&self, lambda: &[f64]) -> Result<f64> {
        if lambda.len() != self.W_i.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} multipliers for {} groups",
                lambda.len(),
                self.W_i.len()
            )));
        }
        Ok(self.N_psi + lambda.iter().zip(&self.W_i).map(|(l, w)| l * w).sum::<f64>())
    }

    /// `c N + W` regardless of the unstopped mass.
    pub fn capped_risk(&self) -> f64 {
        self.cost * self.N_psi + self.W
    }

    /// `metric,value` summary.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,value")?;
        let opt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |v| v.to_string());
        writeln!(w, "horizon,{}", self.horizon)?;
        writeln!(w, "N_psi,{}", self.N_psi)?;
        writeln!(w, "W,{}", self.W)?;
        writeln!(w, "R,{}", opt(self.R))?;
        if let Some(l) = self.L {
            writeln!(w, "L,{l}")?;
        }
        for (i, v) in self.W_i.iter().enumerate() {
            writeln!(w, "W_{},{v}", i + 1)?;
        }
        for (t, v) in self.N_theta.iter().enumerate() {
            writeln!(w, "N_theta_{t},{v}")?;
        }
        if let Some(e) = self.error_probs {
            writeln!(w, "alpha,{}", e.alpha)?;
            writeln!(w, "beta,{}", e.beta)?;
        }
        writeln!(w, "mass_stopped,{}", self.mass_stopped)?;
        Ok(())
    }

    /// `stage,pi2,theta_0,...` stopping distribution.
    pub fn write_stop_dist_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.stop_dist.theta.len();
        let cols: Vec<String> = (0..m).map(|t| format!("theta_{t}")).collect();
        writeln!(w, "stage,pi2,{}", cols.join(","))?;
        for n in 0..self.stop_dist.pi2.len() {
            let row: Vec<String> = self.stop_dist.theta.iter().map(|v| v[n].to_string()).collect();
            writeln!(w, "{},{},{}", n + 1, self.stop_dist.pi2[n], row.join(","))?;
        }
        Ok(())
    }
}

fn check_rule(p: &Problem, rule: &StoppingRule) -> Result<()> {
    if rule.alphabet() != p.alphabet_size() {
        return Err(Error::DimensionMismatch(format!(
            "rule alphabet {} differs from the model alphabet {}",
            rule.alphabet(),
            p.alphabet_size()
        )));
    }
    Ok(())
}

/// Evaluation horizon: the span of a truncated rule, otherwise the cap.
pub fn evaluation_horizon(rule: &StoppingRule, cap: Option<usize>) -> Result<usize> {
    if rule.is_truncated() {
        return Ok(cap.map_or(rule.span(), |c| c.min(rule.span())));
    }
    let cap = cap.unwrap_or(rule.span());
    if cap > rule.span() {
        return Err(Error::RuleTooShort {
            span: rule.span(),
            requested: cap,
        });
    }
    Ok(cap)
}

/// Full report for `rule` under `strategy`.
pub fn evaluate(
    p: &Problem,
    rule: &StoppingRule,
    strategy: &DecisionStrategy,
    opts: &EvaluateOptions,
) -> Result<RiskReport> {
    check_rule(p, rule)?;
    let horizon = evaluation_horizon(rule, opts.cap)?;
    let budget = opts.state_budget.unwrap_or(DEFAULT_STATE_BUDGET);
    let dens = Arc::new(DensityTable::build(p, rule.kind(), horizon, budget)?);
    match strategy {
        DecisionStrategy::Bayes => {
            let table = HistoryTable::for_problem(p, dens.clone());
            evaluate_on(p, &dens, DecisionSource::Bayes(&table), rule, horizon)
        }
        DecisionStrategy::Weighted(lambda) => {
            let table = HistoryTable::weighted(p, dens.clone(), lambda)?;
            evaluate_on(p, &dens, DecisionSource::Bayes(&table), rule, horizon)
        }
        DecisionStrategy::Table(t) => {
            if t.kind() != rule.kind() || t.alphabet() != rule.alphabet() {
                return Err(Error::DimensionMismatch(
                    "decision table and rule live on different lattices".into(),
                ));
            }
            evaluate_on(p, &dens, DecisionSource::Table(t), rule, horizon)
        }
    }
}

/// Forward pass on prepared densities. `horizon` must not exceed the
/// densities' horizon; the rule is followed up to it.
pub fn evaluate_on(
    p: &Problem,
    dens: &DensityTable,
    decisions: DecisionSource<'_>,
    rule: &StoppingRule,
    horizon: usize,
) -> Result<RiskReport> {
    let lat = dens.lattice();
    if rule.kind() != lat.kind() || rule.alphabet() != lat.alphabet() {
        return Err(Error::DimensionMismatch(format!(
            "rule is on a {} lattice, densities on {}",
            rule.kind().as_str(),
            lat.kind().as_str()
        )));
    }
    if horizon > dens.horizon() {
        return Err(Error::HorizonExceeded {
            requested: horizon,
            limit: dens.horizon(),
        });
    }
    let m = p.num_params();
    let nd = p.num_decisions();
    let w = &p.loss().matrix;
    let reach = rule.reach_weights(lat, horizon);

    let mut stop_theta = vec![vec![0.0; horizon]; m];
    let mut loss_theta = vec![0.0; m];
    let mut decision_probs = vec![vec![0.0; nd]; m];
    let mut unstopped = vec![0.0; m];

    for n in 1..=horizon {
        let beyond = n > rule.span();
        for s in 0..lat.stage_len(n) {
            let t = reach[n][s];
            if t == 0.0 {
                continue;
            }
            let f = dens.f_theta(n, s);
            if t * f.iter().fold(0.0f64, |a, &b| a.max(b)) < PRUNE_MASS {
                continue;
            }
            let psi = if beyond { 1.0 } else { rule.psi(n, s) };
            let stop = t * psi;
            if n == horizon {
                let rest = t - stop;
                for th in 0..m {
                    unstopped[th] += rest * f[th];
                }
            }
            if stop == 0.0 {
                continue;
            }
            let d = match decisions {
                DecisionSource::Bayes(table) => table.decision(n, s),
                DecisionSource::Table(table) => table
                    .get(n, s)
                    .filter(|&d| d < nd)
                    .ok_or(Error::DecisionUndefined { stage: n, state: s })?,
            };
            for th in 0..m {
                let mass = stop * f[th];
                stop_theta[th][n - 1] += mass;
                decision_probs[th][d] += mass;
                loss_theta[th] += mass * w[th][d];
            }
        }
    }

    let pi1 = p.pi1();
    let pi2 = p.pi2();
    let n_theta: Vec<f64> = (0..m)
        .map(|th| {
            stop_theta[th]
                .iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v)
                .sum::<f64>()
                + horizon as f64 * unstopped[th]
        })
        .collect();
    let n_psi: f64 = (0..m).map(|th| pi2[th] * n_theta[th]).sum();
    let weighted_loss: Vec<f64> = (0..m).map(|th| pi1[th] * loss_theta[th]).collect();
    let total_w: f64 = weighted_loss.iter().sum();
    let (w_i, w_rest) = match p.constraints() {
        Some(cs) if !cs.is_empty() => {
            let w_i: Vec<f64> = cs
                .groups
                .iter()
                .map(|g| g.iter().map(|&th| weighted_loss[th]).sum())
                .collect();
            let rest = (0..m)
                .filter(|&th| cs.group_of(th).is_none())
                .map(|th| weighted_loss[th])
                .sum();
            (w_i, rest)
        }
        _ => (Vec::new(), total_w),
    };
    let pi2_dist: Vec<f64> = (0..horizon)
        .map(|i| (0..m).map(|th| pi2[th] * stop_theta[th][i]).sum())
        .collect();
    let mass_stopped: f64 = pi2_dist.iter().sum();
    let r_infinite = mass_stopped < 1.0 - UNSTOPPED_TOL;
    let cost = p.cost();
    let lagrangian = p
        .constraints()
        .and_then(|c| c.multipliers.as_ref())
        .filter(|l| l.len() == w_i.len())
        .map(|l| n_psi + l.iter().zip(&w_i).map(|(a, b)| a * b).sum::<f64>());
    let error_probs = (m == 2 && nd == 2).then(|| ErrorProbs {
        alpha: decision_probs[0][1],
        beta: decision_probs[1][0],
    });
    Ok(RiskReport {
        horizon,
        truncated: rule.is_truncated() && horizon == rule.span(),
        cost,
        N_psi: n_psi,
        N_theta: n_theta,
        W: total_w,
        W_i: w_i,
        W_rest: w_rest,
        R: (!r_infinite).then_some(cost * n_psi + total_w),
        R_infinite: r_infinite,
        L: lagrangian,
        stop_dist: StopDistribution {
            pi2: pi2_dist,
            theta: stop_theta,
        },
        error_probs,
        mass_stopped,
        unstopped_theta: unstopped,
        loss_theta,
        decision_probs,
    })
}

/// Default limit on the number of binary stop/continue choices enumerated.
pub const BRUTE_FORCE_MAX_BITS: u32 = 20;

/// Deterministic truncated rule on the history tree at horizon `horizon`:
/// bit `offset(n) + h` of `mask` set means stop at history `h` of stage `n`,
/// with `offset(1) = 0` and `offset(n + 1) = offset(n) + K^n`.
pub fn deterministic_rule(alphabet: usize, horizon: usize, mask: u64) -> Result<StoppingRule> {
    let lat = Lattice::new(LatticeKind::HistoryTree, alphabet, horizon, DEFAULT_STATE_BUDGET)?;
    let mut offset = vec![0usize; horizon + 1];
    for n in 1..horizon {
        offset[n + 1] = offset[n] + lat.stage_len(n);
    }
    StoppingRule::from_fn(&lat, horizon, true, |n, s| {
        if n < horizon && mask >> (offset[n] + s) & 1 == 1 {
            1.0
        } else if n < horizon {
            0.0
        } else {
            1.0
        }
    })
}

/// Number of non-terminal histories `sum_{n=1}^{N-1} K^n`.
pub fn decision_bits(alphabet: usize, horizon: usize) -> u128 {
    (1..horizon).map(|n| (alphabet as u128).pow(n as u32)).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceResult {
    pub horizon: usize,
    pub bits: u32,
    pub min_risk: f64,
    /// Masks attaining the minimum within `1e-12` relative.
    pub minimizers: Vec<u64>,
    /// `risks[mask]`.
    pub risks: Vec<f64>,
}

/// Enumerates every non-randomized rule truncated at `horizon` on the
/// history tree and evaluates its risk with Bayes decisions.
pub fn brute_force_optimum(p: &Problem, horizon: usize, max_bits: u32) -> Result<BruteForceResult> {
    if horizon == 0 {
        return Err(Error::DimensionMismatch("horizon must be at least 1".into()));
    }
    let k = p.alphabet_size();
    let bits = decision_bits(k, horizon);
    if bits > max_bits as u128 {
        return Err(Error::BudgetExceeded {
            needed: 1u128.checked_shl(bits.min(127) as u32).unwrap_or(u128::MAX),
            budget: 1u128 << max_bits,
        });
    }
    let bits = bits as u32;
    let dens = Arc::new(DensityTable::build(p, LatticeKind::HistoryTree, horizon, DEFAULT_STATE_BUDGET)?);
    let table = HistoryTable::for_problem(p, dens.clone());
    let c = p.cost();
    // Risk contribution of stopping at (n, s): c n f^n + l_n.
    let stop_value: Vec<Vec<f64>> = (0..=horizon)
        .map(|n| {
            (0..dens.lattice().stage_len(n))
                .map(|s| c * n as f64 * dens.mix(n, s) + table.l(n, s))
                .collect()
        })
        .collect();
    let mut offset = vec![0usize; horizon + 1];
    for n in 1..horizon {
        offset[n + 1] = offset[n] + dens.lattice().stage_len(n);
    }
    let risk_of = |mask: u64| -> f64 {
        let mut total = 0.0;
        let mut stack: Vec<(usize, usize)> = (0..k).map(|x| (1, x)).collect();
        while let Some((n, s)) = stack.pop() {
            if n == horizon || mask >> (offset[n] + s) & 1 == 1 {
                total += stop_value[n][s];
            } else {
                stack.extend((0..k).map(|x| (n + 1, s * k + x)));
            }
        }
        total
    };
    let risks: Vec<f64> = (0..1u64 << bits).into_par_iter().map(risk_of).collect();
    let min_risk = risks.iter().copied().fold(f64::INFINITY, f64::min);
    let minimizers = risks
        .iter()
        .enumerate()
        .filter(|(_, &r)| r - min_risk <= 1e-12 * min_risk.abs().max(1e-300))
        .map(|(m, _)| m as u64)
        .collect();
    Ok(BruteForceResult {
        horizon,
        bits,
        min_risk,
        minimizers,
        risks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRow {
    pub horizon: usize,
    /// `sum_h t_N(h) l_N(h)`.
    pub tail: f64,
    /// `sum_h l_N(h)`.
    pub stagewise: f64,
    /// Risk of the rule truncated at `N`.
    pub truncated_risk: f64,
    /// `P^{pi1}(tau >= N)`.
    pub reach_prob: f64,
    /// `M P^{pi1}(tau >= N)` with `M` the largest loss.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncatabilityReport {
    pub rows: Vec<TailRow>,
    pub tail_decreasing: bool,
    pub stagewise_decreasing: bool,
}

/// Tail sums of `rule` at each horizon in `horizons`, for judging whether
/// truncated risks approach the full risk. Evidence only, not proof.
pub fn truncatability_diagnostic(
    p: &Problem,
    rule: &StoppingRule,
    horizons: &[usize],
) -> Result<TruncatabilityReport> {
    check_rule(p, rule)?;
    let mut hs: Vec<usize> = horizons.to_vec();
    hs.sort_unstable();
    hs.dedup();
    let Some(&max_n) = hs.last() else {
        return Err(Error::DimensionMismatch("no horizons given".into()));
    };
    if hs[0] == 0 {
        return Err(Error::DimensionMismatch("horizons start at 1".into()));
    }
    if !rule.is_truncated() && rule.span() < max_n {
        return Err(Error::RuleTooShort {
            span: rule.span(),
            requested: max_n,
        });
    }
    let dens = Arc::new(DensityTable::build(p, rule.kind(), max_n, DEFAULT_STATE_BUDGET)?);
    let table = HistoryTable::for_problem(p, dens.clone());
    let lat = dens.lattice();
    let reach = rule.reach_weights(lat, max_n);
    let max_loss = p.loss().max_loss();
    let pi1 = p.pi1();
    let mut rows = Vec::with_capacity(hs.len());
    for &n in &hs {
        let mut tail = 0.0;
        let mut reach_prob = 0.0;
        for s in 0..lat.stage_len(n) {
            let t = reach[n][s];
            if t == 0.0 {
                continue;
            }
            tail += t * table.l(n, s);
            reach_prob += t * dens.f_theta(n, s).iter().zip(pi1).map(|(f, q)| f * q).sum::<f64>();
        }
        let cut = truncate_rule(rule, n)?;
        let report = evaluate_on(p, &dens, DecisionSource::Bayes(&table), &cut, cut.span())?;
        rows.push(TailRow {
            horizon: n,
            tail,
            stagewise: table.stagewise_risk(n),
            truncated_risk: report.capped_risk(),
            reach_prob,
            bound: max_loss * reach_prob,
        });
    }
    let decreasing = |f: fn(&TailRow) -> f64| rows.windows(2).all(|w| f(&w[1]) < f(&w[0]));
    Ok(TruncatabilityReport {
        tail_decreasing: decreasing(|r| r.tail),
        stagewise_decreasing: decreasing(|r| r.stagewise),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{solve_truncated, SolveOptions};
    use crate::lattice::Engine;
    use crate::model::tests::instance_b;
    use crate::model::{ObservationModel, Problem};
    use crate::policy::{extract_rule, TiePolicy};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn identical() -> Problem {
        let mut spec = instance_b().into_spec();
        spec.obs = ObservationModel::Iid {
            alphabet_size: 2,
            pmf: vec![vec![0.4, 0.6], vec![0.4, 0.6]],
        };
        Problem::new(spec).unwrap()
    }

    #[test]
    fn instance_b_extracted_rule() {
        let p = instance_b();
        for engine in [Engine::HistoryTree, Engine::CountVector] {
            let t = solve_truncated(&p, 2, &SolveOptions::with_engine(engine)).unwrap();
            let rule = extract_rule(&t, TiePolicy::Stop);
            let r = evaluate(&p, &rule, &DecisionStrategy::Bayes, &EvaluateOptions::default()).unwrap();
            assert!(close(r.N_psi, 1.55));
            assert!(close(r.W, 0.225));
            assert!(close(r.R.unwrap(), 0.256));
            let e = r.error_probs.unwrap();
            assert!(close(e.alpha, 0.36) && close(e.beta, 0.09));
            assert!(close(r.W_i[0], 0.18) && close(r.W_i[1], 0.045));
            assert!(close(r.lagrangian(&[1.0, 1.0]).unwrap(), 1.775));
            assert!(r.L.is_none());
            assert!(close(r.mass_stopped, 1.0));
            assert!(close(r.stop_dist.pi2[0], 0.45));
            for th in 0..2 {
                assert!(close(r.stop_dist.theta[th].iter().sum(), 1.0));
            }
        }
    }

    #[test]
    fn always_stop_risk() {
        let p = instance_b();
        let rule = StoppingRule::always_stop(LatticeKind::HistoryTree, 2);
        let r = evaluate(&p, &rule, &DecisionStrategy::Bayes, &EvaluateOptions::default()).unwrap();
        assert!(close(r.N_psi, 1.0) && close(r.W, 0.25) && close(r.R.unwrap(), 0.27));
    }

    #[test]
    fn brute_force_instance_b() {
        let bf = brute_force_optimum(&instance_b(), 2, BRUTE_FORCE_MAX_BITS).unwrap();
        assert_eq!(bf.bits, 2);
        // bit 0: stop at (0); bit 1: stop at (1).
        let want = [0.265, 0.279, 0.256, 0.27];
        for (r, w) in bf.risks.iter().zip(want) {
            assert!(close(*r, w), "{:?}", bf.risks);
        }
        assert_eq!(bf.minimizers, vec![2]);
        let one = brute_force_optimum(&instance_b(), 1, BRUTE_FORCE_MAX_BITS).unwrap();
        assert_eq!(one.risks.len(), 1);
        assert!(close(one.min_risk, 0.27));
        let flat = brute_force_optimum(&identical(), 2, BRUTE_FORCE_MAX_BITS).unwrap();
        assert_eq!(flat.minimizers, vec![3]);
    }

    #[test]
    fn brute_force_budget() {
        assert!(matches!(
            brute_force_optimum(&instance_b(), 6, BRUTE_FORCE_MAX_BITS),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn brute_force_masks_match_evaluate() {
        let p = instance_b().with_cost(0.05).unwrap();
        let bf = brute_force_optimum(&p, 3, BRUTE_FORCE_MAX_BITS).unwrap();
        for mask in [0u64, 5, 17, 42, 63] {
            let rule = deterministic_rule(2, 3, mask).unwrap();
            let r = evaluate(&p, &rule, &DecisionStrategy::Bayes, &EvaluateOptions::default()).unwrap();
            assert!(close(r.R.unwrap(), bf.risks[mask as usize]));
        }
    }

    #[test]
    fn explicit_decisions() {
        let p = instance_b();
        let t = solve_truncated(&p, 2, &SolveOptions::with_engine(Engine::HistoryTree)).unwrap();
        let rule = extract_rule(&t, TiePolicy::Stop);
        let mut table = DecisionTable::from_bayes(t.history(), 2);
        let bayes = evaluate(&p, &rule, &DecisionStrategy::Table(table.clone()), &EvaluateOptions::default()).unwrap();
        assert!(close(bayes.W, 0.225));
        // Deciding theta_1 after (1) costs 0.35 instead of 0.10.
        table.set(1, 1, 0);
        let worse = evaluate(&p, &rule, &DecisionStrategy::Table(table.clone()), &EvaluateOptions::default()).unwrap();
        assert!(close(worse.W, 0.225 + 0.25));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert_eq!(DecisionTable::read_csv(&buf[..]).unwrap(), table);

        let sparse = DecisionTable::new(LatticeKind::HistoryTree, 2, vec![vec![Some(0), None]]);
        assert!(matches!(
            evaluate(&p, &rule, &DecisionStrategy::Table(sparse), &EvaluateOptions::default()),
            Err(Error::DecisionUndefined { stage: 1, state: 1 })
        ));
    }

    #[test]
    fn untruncated_rules_report_infinite_risk() {
        let p = identical();
        let never = StoppingRule::constant(LatticeKind::CountVector, 2, 0.0, 8, false);
        let r = evaluate(&p, &never, &DecisionStrategy::Bayes, &EvaluateOptions { cap: Some(8), ..Default::default() }).unwrap();
        assert!(r.R_infinite && r.R.is_none());
        assert_eq!(r.mass_stopped, 0.0);
        assert!(close(r.unstopped_theta[0], 1.0));
        assert!(matches!(
            evaluate(&p, &never, &DecisionStrategy::Bayes, &EvaluateOptions { cap: Some(9), ..Default::default() }),
            Err(Error::RuleTooShort { .. })
        ));
    }

    #[test]
    fn truncatability() {
        let flat = identical();
        let never = StoppingRule::constant(LatticeKind::CountVector, 2, 0.0, 8, false);
        let d = truncatability_diagnostic(&flat, &never, &[2, 4, 8]).unwrap();
        for row in &d.rows {
            assert!(close(row.tail, 0.5));
            assert!(close(row.truncated_risk, 0.02 * row.horizon as f64 + 0.5));
        }
        assert!(!d.tail_decreasing);

        let p = instance_b();
        let lat = Lattice::new(LatticeKind::CountVector, 2, 8, DEFAULT_STATE_BUDGET).unwrap();
        // Stop once the likelihood ratio leaves (1/4, 4).
        let lr = |s: usize, n: usize| {
            let c = lat.counts(n, s);
            (0.7f64 / 0.2).powi(c[1] as i32) * (0.3f64 / 0.8).powi(c[0] as i32)
        };
        let rule = StoppingRule::from_fn(&lat, 8, false, |n, s| {
            let v = lr(s, n);
            if !(0.25..4.0).contains(&v) { 1.0 } else { 0.0 }
        })
        .unwrap();
        let d = truncatability_diagnostic(&p, &rule, &[2, 4, 8]).unwrap();
        assert!(d.tail_decreasing && d.stagewise_decreasing, "{d:?}");

        let cut = truncate_rule(&rule, 3).unwrap();
        let d = truncatability_diagnostic(&p, &cut, &[4, 8]).unwrap();
        assert!(d.rows.iter().all(|r| r.tail == 0.0));
    }

    proptest! {
        #[test]
        fn decomposition_and_normalization(
            a in 0.05f64..0.95, b in 0.05f64..0.95, c in 0.0f64..0.2,
            psi in proptest::collection::vec(0.0f64..=1.0, 14),
        ) {
            let mut spec = instance_b().into_spec();
            spec.obs = ObservationModel::Iid { alphabet_size: 2, pmf: vec![vec![1.0 - a, a], vec![1.0 - b, b]] };
            spec.cost = c;
            let p = Problem::new(spec).unwrap();
            let lat = Lattice::new(LatticeKind::HistoryTree, 2, 4, DEFAULT_STATE_BUDGET).unwrap();
            let mut it = psi.iter().cycle();
            let rule = StoppingRule::from_fn(&lat, 4, true, |_, _| *it.next().unwrap()).unwrap();
            let r = evaluate(&p, &rule, &DecisionStrategy::Bayes, &EvaluateOptions::default()).unwrap();
            prop_assert!((r.R.unwrap() - (c * r.N_psi + r.W)).abs() < 1e-12);
            prop_assert!((r.mass_stopped - 1.0).abs() < 1e-12);
            let e = r.error_probs.unwrap();
            prop_assert!((r.W - 0.5 * (e.alpha + e.beta)).abs() < 1e-12);
            let t = solve_truncated(&p, 4, &SolveOptions::default()).unwrap();
            prop_assert!(r.R.unwrap() >= t.q0() - 1e-12);
        }
    }
}
