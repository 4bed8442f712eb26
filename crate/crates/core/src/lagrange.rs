//! Constrained problems through Lagrange multipliers.
//!
//! Minimizing `N(psi)` subject to `W_i(psi, delta) <= w_i` reduces to the
//! unconstrained problem with Lagrangian `L = N + sum lambda_i W_i`, i.e. the
//! stopping problem with unit observation cost and loss `lambda_i w` on group
//! `i`. If the minimizer meets every constraint with equality (or with
//! `lambda_i = 0`) it solves the constrained problem.
//!
//! `W_i` is a step function of the multipliers for deterministic rules, so the
//! search interpolates at jumps: statewise between the tie-breaking extremes
//! of one Lagrangian, and between whole procedures for the outer direction of
//! a two-constraint search.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::backward::{solve_on, ValueTables};
use crate::bayes::{effective_loss, DensityTable, HistoryTable};
use crate::error::{Error, Result};
use crate::lattice::{Engine, LatticeKind, DEFAULT_STATE_BUDGET};
use crate::model::{LossSpec, Problem};
use crate::policy::{blend_rules, extract_rule, mix_procedures, StoppingRule, TiePolicy};
use crate::risk::{
    decision_bits, deterministic_rule, evaluate, evaluate_on, DecisionSource, DecisionStrategy,
    DecisionTable, EvaluateOptions, RiskReport, BRUTE_FORCE_MAX_BITS,
};

pub const DEFAULT_SEARCH_TOL: f64 = 1e-6;

const SCALE_MIN: f64 = 1e-12;
const SCALE_MAX: f64 = 1e15;
const SCALE_STEP: f64 = 4.0;
/// Largest `|ln(lambda_2 / lambda_1)|` explored.
const RHO_MAX: f64 = 40.0;
const GAMMA_ITERS: usize = 200;

/// Problem whose loss is `lambda_i w` on group `i` and zero outside every
/// group; the cost is unchanged.
pub fn weighted_problem(p: &Problem, lambda: &[f64]) -> Result<Problem> {
    if let Some(&bad) = lambda.iter().find(|&&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::DimensionMismatch(format!("multiplier {bad} is not a finite non-negative number")));
    }
    let matrix = effective_loss(p, Some(lambda))?;
    let mut spec = p.spec().clone();
    spec.loss = LossSpec {
        decisions: spec.loss.decisions.clone(),
        matrix,
    };
    Problem::new(spec)
}

/// `N(psi) + sum lambda_i W_i(psi, delta)`.
pub fn lagrangian(p: &Problem, lambda: &[f64], rule: &StoppingRule, strategy: &DecisionStrategy) -> Result<f64> {
    if p.constraints().is_none_or(|c| c.is_empty()) {
        return Err(Error::NoConstraintGroups);
    }
    evaluate(p, rule, strategy, &EvaluateOptions::default())?.lagrangian(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    /// Every constraint met with equality within tolerance.
    Converged,
    /// Some constraint is slack and its multiplier is (numerically) zero.
    Inactive,
    /// No exact solution found; `frontier` holds the bracketing points.
    Bracketed,
    /// Multipliers were supplied, not searched.
    Supplied,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub horizon: usize,
    pub tol: f64,
    pub max_evals: usize,
    pub engine: Engine,
    pub state_budget: u128,
}

impl SearchConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            tol: DEFAULT_SEARCH_TOL,
            max_evals: 20_000,
            engine: Engine::Auto,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub lambda: Vec<f64>,
    pub achieved: Vec<f64>,
    pub n_psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    /// `W_i` of the tie-stop rule at `lambda`.
    pub achieved: Vec<f64>,
    pub n_psi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSearchResult {
    /// Multipliers of `L = N + sum lambda_i W_i`.
    pub lambda: Vec<f64>,
    /// The same multipliers for the weighted problem at the problem's cost,
    /// `c lambda`.
    pub weighted_lambda: Vec<f64>,
    pub achieved: Vec<f64>,
    pub targets: Vec<f64>,
    /// `target_i - achieved_i`.
    pub slack: Vec<f64>,
    pub n_psi: f64,
    pub converged: bool,
    pub status: SearchStatus,
    /// The rule randomizes somewhere.
    pub randomized: bool,
    pub frontier: Option<(FrontierPoint, FrontierPoint)>,
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub rule: StoppingRule,
    #[serde(skip)]
    pub decisions: DecisionTable,
    #[serde(skip)]
    pub report: RiskReport,
}

impl MultiplierSearchResult {
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.targets.len();
        let lam: Vec<String> = (1..=k).map(|i| format!("lambda_{i}")).collect();
        let ws: Vec<String> = (1..=k).map(|i| format!("W_{i}")).collect();
        writeln!(w, "iteration,{},{},N_psi", lam.join(","), ws.join(","))?;
        for row in &self.trace {
            let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            writeln!(w, "{},{},{},{}", row.iteration, join(&row.lambda), join(&row.achieved), row.n_psi)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Candidate {
    lambda: Vec<f64>,
    rule: StoppingRule,
    tables: Arc<ValueTables>,
    /// Terminal decisions when they are not the Bayes decisions of `tables`.
    decisions: Option<DecisionTable>,
    report: RiskReport,
}

impl Candidate {
    fn w(&self, g: usize) -> f64 {
        self.report.W_i[g]
    }

    fn frontier(&self) -> FrontierPoint {
        FrontierPoint {
            lambda: self.lambda.clone(),
            achieved: self.report.W_i.clone(),
            n_psi: self.report.N_psi,
        }
    }
}

/// Tie-stop and tie-continue extremes of one Lagrangian.
struct Point {
    stop: Candidate,
    cont: Candidate,
}

#[derive(Clone)]
struct Solution {
    best: Candidate,
    randomized: bool,
    status: SearchStatus,
    frontier: Option<(FrontierPoint, FrontierPoint)>,
}

struct Search<'a> {
    p: &'a Problem,
    dens: Arc<DensityTable>,
    horizon: usize,
    tol: f64,
    max_evals: usize,
    evals: usize,
    trace: Vec<TraceRow>,
}

impl<'a> Search<'a> {
    fn new(p: &'a Problem, cfg: &SearchConfig) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::DimensionMismatch("horizon must be at least 1".into()));
        }
        let kind = cfg.engine.resolve(p.is_iid())?;
        let dens = Arc::new(DensityTable::build(p, kind, cfg.horizon, cfg.state_budget)?);
        Ok(Self {
            p,
            dens,
            horizon: cfg.horizon,
            tol: cfg.tol,
            max_evals: cfg.max_evals,
            evals: 0,
            trace: Vec::new(),
        })
    }

    fn evaluate(&mut self, rule: &StoppingRule, tables: &ValueTables) -> Result<RiskReport> {
        self.evals += 1;
        if self.evals > self.max_evals {
            return Err(Error::SearchBudgetExhausted(self.max_evals));
        }
        evaluate_on(self.p, &self.dens, DecisionSource::Bayes(tables.history()), rule, self.horizon)
    }

    fn point(&mut self, lambda: Vec<f64>) -> Result<Point> {
        let table = HistoryTable::weighted(self.p, self.dens.clone(), &lambda)?;
        let tables = Arc::new(solve_on(table, 1.0));
        let stop_rule = extract_rule(&tables, TiePolicy::Stop);
        let stop_report = self.evaluate(&stop_rule, &tables)?;
        self.trace.push(TraceRow {
            iteration: self.trace.len(),
            lambda: lambda.clone(),
            achieved: stop_report.W_i.clone(),
            n_psi: stop_report.N_psi,
        });
        let stop = Candidate {
            lambda: lambda.clone(),
            rule: stop_rule,
            tables: tables.clone(),
            decisions: None,
            report: stop_report,
        };
        let cont = if stop.rule.ties().is_empty() {
            stop.clone()
        } else {
            let rule = extract_rule(&tables, TiePolicy::Continue);
            let report = self.evaluate(&rule, &tables)?;
            Candidate {
                lambda,
                rule,
                tables,
                decisions: None,
                report,
            }
        };
        Ok(Point { stop, cont })
    }

    /// Interpolates statewise between `hi` (`W_g > target`) and `lo`
    /// (`W_g < target`), both optimal for the Lagrangian of `lo`.
    fn interpolate(&mut self, hi: &Candidate, lo: &Candidate, g: usize, target: f64) -> Result<Solution> {
        let tables = lo.tables.clone();
        let (mut a, mut b) = (0.0f64, 1.0f64);
        let mut best: Option<Candidate> = None;
        for _ in 0..GAMMA_ITERS {
            let gamma = 0.5 * (a + b);
            let rule = blend_rules(&hi.rule, &lo.rule, gamma)?;
            let report = self.evaluate(&rule, &tables)?;
            let w = report.W_i[g];
            let cand = Candidate {
                lambda: lo.lambda.clone(),
                rule,
                tables: tables.clone(),
                decisions: None,
                report,
            };
            if best.as_ref().is_none_or(|c| (c.w(g) - target).abs() > (w - target).abs()) {
                best = Some(cand);
            }
            if (w - target).abs() <= 1e-3 * self.tol || b - a < 1e-15 {
                break;
            }
            if w > target {
                a = gamma;
            } else {
                b = gamma;
            }
        }
        let best = best.expect("at least one iteration");
        let ok = (best.w(g) - target).abs() <= self.tol;
        Ok(Solution {
            randomized: true,
            status: if ok { SearchStatus::Converged } else { SearchStatus::Bracketed },
            frontier: (!ok).then(|| (hi.frontier(), lo.frontier())),
            best,
        })
    }

    /// Resolves `target` inside `[W_g(cont), W_g(stop)]` at one multiplier.
    fn settle(&mut self, pt: &Point, g: usize, target: f64) -> Result<Option<Solution>> {
        let tol = self.tol;
        if pt.cont.w(g) > target + tol || pt.stop.w(g) < target - tol {
            return Ok(None);
        }
        for c in [&pt.stop, &pt.cont] {
            if (c.w(g) - target).abs() <= tol {
                return Ok(Some(Solution {
                    best: c.clone(),
                    randomized: false,
                    status: SearchStatus::Converged,
                    frontier: None,
                }));
            }
        }
        self.interpolate(&pt.stop, &pt.cont, g, target).map(Some)
    }

    /// Scales `dir` until group `g` meets `target`.
    fn match_scale(&mut self, dir: &[f64], g: usize, target: f64) -> Result<Solution> {
        let at = |mu: f64| dir.iter().map(|d| d * mu).collect::<Vec<f64>>();
        let mut mu = 1.0;
        let pt = self.point(at(mu))?;
        if let Some(s) = self.settle(&pt, g, target)? {
            return Ok(s);
        }
        let (mut lo_mu, mut hi_mu);
        let (mut lo, mut hi);
        if pt.cont.w(g) > target {
            // Loss too high: raise the multiplier.
            lo_mu = mu;
            lo = pt;
            loop {
                mu *= SCALE_STEP;
                if mu > SCALE_MAX {
                    return Err(Error::InfeasibleTargets(format!(
                        "W_{} stays above {target} for multipliers up to {SCALE_MAX:e} (best {})",
                        g + 1,
                        lo.cont.w(g)
                    )));
                }
                let pt = self.point(at(mu))?;
                if let Some(s) = self.settle(&pt, g, target)? {
                    return Ok(s);
                }
                if pt.stop.w(g) < target {
                    hi_mu = mu;
                    hi = pt;
                    break;
                }
                lo_mu = mu;
                lo = pt;
            }
        } else {
            hi_mu = mu;
            hi = pt;
            loop {
                mu /= SCALE_STEP;
                if mu < SCALE_MIN {
                    return Ok(Solution {
                        best: hi.stop,
                        randomized: false,
                        status: SearchStatus::Inactive,
                        frontier: None,
                    });
                }
                let pt = self.point(at(mu))?;
                if let Some(s) = self.settle(&pt, g, target)? {
                    return Ok(s);
                }
                if pt.cont.w(g) > target {
                    lo_mu = mu;
                    lo = pt;
                    break;
                }
                hi_mu = mu;
                hi = pt;
            }
        }
        while hi_mu / lo_mu - 1.0 > 1e-13 {
            let mid = (lo_mu * hi_mu).sqrt();
            let pt = self.point(at(mid))?;
            if let Some(s) = self.settle(&pt, g, target)? {
                return Ok(s);
            }
            if pt.cont.w(g) > target {
                lo_mu = mid;
                lo = pt;
            } else {
                hi_mu = mid;
                hi = pt;
            }
        }
        // A jump between adjacent multipliers: both sides are optimal for
        // the limiting Lagrangian.
        self.interpolate(&lo.cont, &hi.stop, g, target)
    }
}

fn check_targets(p: &Problem, targets: &[f64]) -> Result<usize> {
    let cs = p.constraints().filter(|c| !c.is_empty()).ok_or(Error::NoConstraintGroups)?;
    if targets.len() != cs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} constraint groups",
            targets.len(),
            cs.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::DimensionMismatch(format!("target {t} is negative")));
    }
    Ok(cs.len())
}

fn finish(p: &Problem, targets: &[f64], sol: Solution, search: Search<'_>, tol: f64) -> MultiplierSearchResult {
    let c = sol.best;
    let achieved = c.report.W_i.clone();
    let slack: Vec<f64> = targets.iter().zip(&achieved).map(|(t, a)| t - a).collect();
    let mut status = sol.status;
    if status == SearchStatus::Converged && slack.iter().any(|s| s.abs() > tol) {
        status = if slack.iter().all(|&s| s >= -tol) {
            SearchStatus::Inactive
        } else {
            SearchStatus::Bracketed
        };
    }
    let converged = slack.iter().all(|s| s.abs() <= tol);
    MultiplierSearchResult {
        weighted_lambda: c.lambda.iter().map(|l| l * p.cost()).collect(),
        lambda: c.lambda,
        achieved,
        targets: targets.to_vec(),
        slack,
        n_psi: c.report.N_psi,
        converged,
        status,
        randomized: sol.randomized,
        frontier: sol.frontier,
        trace: search.trace,
        decisions: c
            .decisions
            .unwrap_or_else(|| DecisionTable::from_bayes(c.tables.history(), search.horizon)),
        rule: c.rule,
        report: c.report,
    }
}

/// Finds multipliers whose optimal rule meets `targets` on the constraint
/// groups. One and two groups are searched; more groups need multipliers in
/// the problem, which are evaluated as given.
pub fn match_constraints(p: &Problem, targets: &[f64], cfg: &SearchConfig) -> Result<MultiplierSearchResult> {
    let k = check_targets(p, targets)?;
    let mut search = Search::new(p, cfg)?;
    let sol = match k {
        1 => search.match_scale(&[1.0], 0, targets[0])?,
        2 => match_two(&mut search, targets)?,
        _ => {
            let lambda = p
                .constraints()
                .and_then(|c| c.multipliers.clone())
                .ok_or_else(|| Error::Unsupported(format!("multiplier search for {k} groups; supply multipliers")))?;
            return evaluate_multipliers(p, &lambda, targets, cfg);
        }
    };
    Ok(finish(p, targets, sol, search, cfg.tol))
}

/// Optimal rule for fixed multipliers, reported against `targets`.
pub fn evaluate_multipliers(
    p: &Problem,
    lambda: &[f64],
    targets: &[f64],
    cfg: &SearchConfig,
) -> Result<MultiplierSearchResult> {
    check_targets(p, targets)?;
    let mut search = Search::new(p, cfg)?;
    let pt = search.point(lambda.to_vec())?;
    let sol = Solution {
        best: pt.stop,
        randomized: false,
        status: SearchStatus::Supplied,
        frontier: None,
    };
    Ok(finish(p, targets, sol, search, cfg.tol))
}

struct Outer {
    rho: f64,
    sol: Solution,
}

fn match_two(search: &mut Search<'_>, targets: &[f64]) -> Result<Solution> {
    let tol = search.tol;
    let w2 = targets[1];
    let inner = |search: &mut Search<'_>, rho: f64| -> Result<Outer> {
        let sol = search.match_scale(&[1.0, rho.exp()], 0, targets[0])?;
        Ok(Outer { rho, sol })
    };
    let w = |o: &Outer| o.sol.best.w(1);
    // Between a feasible `lo` and an infeasible `bad`, the first point with
    // W_2 at or below target, if any.
    let boundary = |search: &mut Search<'_>, lo: &Outer, mut bad: f64| -> Result<std::result::Result<Outer, f64>> {
        let mut good = lo.rho;
        let mut best = w(lo);
        while bad - good > 1e-9 {
            let mid = 0.5 * (good + bad);
            match inner(search, mid) {
                Err(Error::InfeasibleTargets(_)) => bad = mid,
                Err(e) => return Err(e),
                Ok(o) if w(&o) <= w2 + tol => return Ok(Ok(o)),
                Ok(o) => {
                    best = best.min(w(&o));
                    good = o.rho;
                }
            }
        }
        Ok(Err(best))
    };
    // Start at equal multipliers; if W_1 cannot be held there, weight group
    // 1 more heavily until it can.
    let mut start = inner(search, 0.0);
    let mut step = 1.0;
    while matches!(start, Err(Error::InfeasibleTargets(_))) && step <= RHO_MAX {
        start = inner(search, -step);
        step *= 2.0;
    }
    let start = start?;
    let rho0 = start.rho;
    if (w(&start) - w2).abs() <= tol {
        return Ok(start.sol);
    }
    if start.sol.status == SearchStatus::Inactive {
        // Group 1 is slack with vanishing multipliers.
        if w(&start) <= w2 {
            return Ok(start.sol);
        }
        let alone = search.match_scale(&[0.0, 1.0], 1, w2)?;
        if alone.best.w(0) <= targets[0] + tol {
            return Ok(alone);
        }
    }
    // `lo` has W_2 above target, `hi` below; W_2 falls as rho grows.
    let (mut lo, mut hi);
    if w(&start) > w2 {
        lo = start;
        let mut step = 1.0;
        loop {
            if step > RHO_MAX {
                return Err(Error::InfeasibleTargets(format!(
                    "W_2 stays above {w2} with W_1 held at {} (best {})",
                    targets[0],
                    w(&lo)
                )));
            }
            let o = match inner(search, rho0 + step) {
                // W_1 cannot be held this far out; close in on the boundary.
                Err(Error::InfeasibleTargets(_)) => match boundary(search, &lo, rho0 + step)? {
                    Ok(o) => o,
                    Err(best) => {
                        return Err(Error::InfeasibleTargets(format!(
                            "W_2 stays above {w2} with W_1 held at {} (best {best}); lower values need randomized terminal decisions or more observations",
                            targets[0]
                        )))
                    }
                },
                o => o?,
            };
            if (w(&o) - w2).abs() <= tol {
                return Ok(o.sol);
            }
            if w(&o) < w2 {
                hi = o;
                break;
            }
            lo = o;
            step *= 2.0;
        }
    } else {
        hi = start;
        let mut step = 1.0;
        loop {
            if step > RHO_MAX {
                // Group 2 is slack even with a vanishing multiplier.
                let mut sol = hi.sol;
                sol.status = SearchStatus::Inactive;
                return Ok(sol);
            }
            let o = inner(search, rho0 - step)?;
            if (w(&o) - w2).abs() <= tol {
                return Ok(o.sol);
            }
            if w(&o) > w2 {
                lo = o;
                break;
            }
            hi = o;
            step *= 2.0;
        }
    }
    while (hi.rho - lo.rho).abs() > 1e-11 {
        let o = inner(search, 0.5 * (lo.rho + hi.rho))?;
        if (w(&o) - w2).abs() <= tol {
            return Ok(o.sol);
        }
        if w(&o) > w2 {
            lo = o;
        } else {
            hi = o;
        }
    }
    mix_outer(search, &lo.sol, &hi.sol, targets)
}

/// Randomizes between two procedures at the start; every `W_i` and `N` is
/// linear in the mixing weight.
fn mix_outer(search: &mut Search<'_>, lo: &Solution, hi: &Solution, targets: &[f64]) -> Result<Solution> {
    let (a, b) = (&lo.best, &hi.best);
    let bracket = || Solution {
        best: if (a.w(1) - targets[1]).abs() < (b.w(1) - targets[1]).abs() { a.clone() } else { b.clone() },
        randomized: lo.randomized || hi.randomized,
        status: SearchStatus::Bracketed,
        frontier: Some((a.frontier(), b.frontier())),
    };
    // The procedures must agree on the terminal decision wherever both stop.
    let lat = search.dens.lattice();
    let ra = a.rule.reach_weights(lat, search.horizon);
    let rb = b.rule.reach_weights(lat, search.horizon);
    let (ha, hb) = (a.tables.history(), b.tables.history());
    for n in 1..=search.horizon {
        for s in 0..lat.stage_len(n) {
            let both = ra[n][s] * a.rule.psi(n, s) > 0.0 && rb[n][s] * b.rule.psi(n, s) > 0.0;
            if both && ha.decision(n, s) != hb.decision(n, s) {
                return Ok(bracket());
            }
        }
    }
    let gamma = ((a.w(1) - targets[1]) / (a.w(1) - b.w(1))).clamp(0.0, 1.0);
    let rule = mix_procedures(&a.rule, &b.rule, gamma)?;
    // Decisions: those of `a` where `a` stops, otherwise those of `b`.
    let mut dt = DecisionTable::from_bayes(ha, search.horizon);
    for n in 1..=search.horizon {
        for s in 0..lat.stage_len(n) {
            if ra[n][s] * a.rule.psi(n, s) == 0.0 {
                dt.set(n, s, hb.decision(n, s));
            }
        }
    }
    search.evals += 1;
    let report = evaluate_on(search.p, &search.dens, DecisionSource::Table(&dt), &rule, search.horizon)?;
    let ok = report.W_i.iter().zip(targets).all(|(w, t)| (w - t).abs() <= search.tol);
    if !ok {
        return Ok(bracket());
    }
    let lambda: Vec<f64> = a.lambda.iter().zip(&b.lambda).map(|(x, y)| x + gamma * (y - x)).collect();
    Ok(Solution {
        best: Candidate {
            lambda,
            rule,
            tables: if gamma < 0.5 { a.tables.clone() } else { b.tables.clone() },
            decisions: Some(dt),
            report,
        },
        randomized: true,
        status: SearchStatus::Converged,
        frontier: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A rule meeting the achieved constraints uses fewer observations.
    SampleSize,
    /// A rule meets the constraints with strict slack on a group with a
    /// positive multiplier but does not use more observations.
    Strictness,
    /// A rule has a smaller Lagrangian.
    Lagrangian,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityViolation {
    /// Rule index as in [`deterministic_rule`].
    pub mask: u64,
    /// `bayes` or `weighted` terminal decisions.
    pub decisions: &'static str,
    pub n_psi: f64,
    pub w_i: Vec<f64>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub horizon: usize,
    pub rules_checked: usize,
    pub feasible_rules: usize,
    pub n_star: f64,
    pub achieved: Vec<f64>,
    pub violations: Vec<OptimalityViolation>,
}

/// Checks a search result against every deterministic rule truncated at
/// `horizon`, with both Bayes and multiplier-weighted terminal decisions.
pub fn verify_conditional_optimality(
    p: &Problem,
    result: &MultiplierSearchResult,
    horizon: usize,
) -> Result<VerificationReport> {
    verify_rule_optimality(
        p,
        &result.rule,
        &DecisionStrategy::Table(result.decisions.clone()),
        &result.lambda,
        horizon,
    )
}

/// As [`verify_conditional_optimality`] for an arbitrary candidate `rule`.
pub fn verify_rule_optimality(
    p: &Problem,
    rule: &StoppingRule,
    strategy: &DecisionStrategy,
    lambda: &[f64],
    horizon: usize,
) -> Result<VerificationReport> {
    const EPS: f64 = 1e-9;
    if p.constraints().is_none_or(|c| c.is_empty()) {
        return Err(Error::NoConstraintGroups);
    }
    let k = p.alphabet_size();
    let bits = decision_bits(k, horizon);
    if bits > BRUTE_FORCE_MAX_BITS as u128 || horizon == 0 {
        return Err(Error::BudgetExceeded {
            needed: 1u128.checked_shl(bits.min(127) as u32).unwrap_or(u128::MAX),
            budget: 1u128 << BRUTE_FORCE_MAX_BITS,
        });
    }
    let star = evaluate(p, rule, strategy, &EvaluateOptions::default())?;
    let n_star = star.N_psi;
    let achieved = star.W_i.clone();
    let l_star = star.lagrangian(lambda)?;
    let dens = DensityTable::build(p, LatticeKind::HistoryTree, horizon, DEFAULT_STATE_BUDGET)?;
    let dens = Arc::new(dens);
    let bayes = HistoryTable::for_problem(p, dens.clone());
    let weighted = HistoryTable::weighted(p, dens.clone(), lambda)?;
    let mut violations = Vec::new();
    let mut checked = 0;
    let mut feasible = 0;
    for mask in 0..1u64 << bits {
        let cand = deterministic_rule(k, horizon, mask)?;
        for (name, table) in [("bayes", &bayes), ("weighted", &weighted)] {
            let r = evaluate_on(p, &dens, DecisionSource::Bayes(table), &cand, horizon)?;
            checked += 1;
            let mut push = |kind| {
                violations.push(OptimalityViolation {
                    mask,
                    decisions: name,
                    n_psi: r.N_psi,
                    w_i: r.W_i.clone(),
                    kind,
                })
            };
            if r.lagrangian(lambda)? < l_star - EPS {
                push(ViolationKind::Lagrangian);
            }
            let meets = r.W_i.iter().zip(&achieved).all(|(w, a)| *w <= a + 1e-12);
            if !meets {
                continue;
            }
            feasible += 1;
            let strict_gain: f64 = lambda
                .iter()
                .zip(r.W_i.iter().zip(&achieved))
                .map(|(l, (w, a))| l * (a - w))
                .sum();
            if r.N_psi < n_star - EPS {
                push(ViolationKind::SampleSize);
            } else if strict_gain > EPS && r.N_psi <= n_star + 1e-12 {
                push(ViolationKind::Strictness);
            }
        }
    }
    Ok(VerificationReport {
        horizon,
        rules_checked: checked,
        feasible_rules: feasible,
        n_star,
        achieved,
        violations,
    })
}
