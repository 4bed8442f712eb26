//! Sequential probability ratio test baseline for iid finite-alphabet models.
//!
//! With hypotheses `(h1, h2)` the log-likelihood ratio after `n` observations
//! is `sum_x c_x ln(P_h2(x) / P_h1(x))`, a function of the symbol counts. The
//! test continues while it lies in `(B, A)`, decides `h2` at or above `A` and
//! `h1` at or below `B`. Operating characteristics come from an exact forward
//! pass over count states carrying per-parameter probability mass.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeKind};
use crate::model::{ObservationModel, Problem};
use crate::policy::StoppingRule;
use crate::risk::DecisionTable;

/// Two LLR values closer than this are treated as equal.
pub const LLR_MERGE_TOL: f64 = 1e-9;

pub const DEFAULT_MAX_TAIL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SprtSpec {
    /// Upper log-likelihood-ratio threshold `A`.
    pub upper: f64,
    /// Lower threshold `B`.
    pub lower: f64,
    pub hypotheses: (usize, usize),
    /// Evaluation horizon.
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatingCharacteristics {
    /// `P_h1(decide h2)`.
    pub alpha: f64,
    /// `P_h2(decide h1)`.
    pub beta: f64,
    /// `E_theta min(tau, cap)` for every parameter.
    pub expected_n: Vec<f64>,
    /// `P_theta(tau > cap)` for every parameter.
    pub tail_mass: Vec<f64>,
    pub cap: usize,
}

impl OperatingCharacteristics {
    pub fn max_tail(&self) -> f64 {
        self.tail_mass.iter().copied().fold(0.0, f64::max)
    }
}

fn pmf_of(p: &Problem) -> Result<&[Vec<f64>]> {
    match p.obs() {
        ObservationModel::Iid { pmf, .. } => Ok(pmf),
        _ => Err(Error::NotIid),
    }
}

/// Decision index best suited to `theta` (smallest loss, lowest index).
fn decision_for(p: &Problem, theta: usize) -> usize {
    let row = &p.loss().matrix[theta];
    (0..row.len())
        .min_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
        .unwrap_or(0)
}

/// Precomputed count lattice, LLR per state and pmfs for repeated OC runs.
#[derive(Debug, Clone)]
pub struct SprtContext {
    lattice: Lattice,
    hypotheses: (usize, usize),
    pmf: Vec<Vec<f64>>,
    /// `llr[n][s]`; NaN for states impossible under both hypotheses.
    llr: Vec<Vec<f64>>,
}

impl SprtContext {
    pub fn new(p: &Problem, hypotheses: (usize, usize), cap: usize) -> Result<Self> {
        let pmf = pmf_of(p)?.to_vec();
        let (h1, h2) = hypotheses;
        let m = p.num_params();
        if h1 == h2 || h1 >= m || h2 >= m {
            return Err(Error::DimensionMismatch(format!(
                "hypotheses {hypotheses:?} must be distinct parameter indices below {m}"
            )));
        }
        if cap == 0 {
            return Err(Error::DimensionMismatch("cap must be at least 1".into()));
        }
        let k = p.alphabet_size();
        let lattice = Lattice::new(LatticeKind::CountVector, k, cap, crate::lattice::DEFAULT_STATE_BUDGET)?;
        let step: Vec<f64> = (0..k).map(|x| (pmf[h2][x] / pmf[h1][x]).ln()).collect();
        let llr = (0..=cap)
            .map(|n| {
                (0..lattice.stage_len(n))
                    .map(|s| {
                        lattice
                            .counts(n, s)
                            .iter()
                            .zip(&step)
                            .filter(|(&c, _)| c > 0)
                            .map(|(&c, &v)| c as f64 * v)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            lattice,
            hypotheses,
            pmf,
            llr,
        })
    }

    pub fn cap(&self) -> usize {
        self.lattice.horizon()
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn llr(&self, n: usize, s: usize) -> f64 {
        self.llr[n][s]
    }

    /// Distinct finite LLR values over stages `1..=cap`, ascending.
    pub fn distinct_llrs(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.llr[1..]
            .iter()
            .flatten()
            .copied()
            .filter(|x| x.is_finite())
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup_by(|a, b| (*a - *b).abs() <= LLR_MERGE_TOL);
        v
    }

    fn stops(llr: f64, upper: f64, lower: f64) -> Option<bool> {
        if llr.is_nan() || llr >= upper {
            Some(true)
        } else if llr <= lower {
            Some(false)
        } else {
            None
        }
    }

    /// Exact OC for thresholds `(upper, lower)` up to the cap.
    pub fn oc(&self, upper: f64, lower: f64) -> OperatingCharacteristics {
        let lat = &self.lattice;
        let m = self.pmf.len();
        let k = lat.alphabet();
        let cap = self.cap();
        let (h1, h2) = self.hypotheses;
        let mut alpha = 0.0;
        let mut beta = 0.0;
        let mut expected = vec![0.0; m];
        // mass[s * m + theta] at the current stage.
        let mut mass = vec![1.0; m];
        for n in 0..cap {
            let children = lat.children(n);
            let mut next = vec![0.0; lat.stage_len(n + 1) * m];
            for s in 0..lat.stage_len(n) {
                let here = &mass[s * m..(s + 1) * m];
                if here.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for x in 0..k {
                    let c = children[s * k + x];
                    for t in 0..m {
                        next[c * m + t] += here[t] * self.pmf[t][x];
                    }
                }
            }
            let stage = n + 1;
            for s in 0..lat.stage_len(stage) {
                let here = &mut next[s * m..(s + 1) * m];
                if let Some(up) = Self::stops(self.llr[stage][s], upper, lower) {
                    if up {
                        alpha += here[h1];
                    } else {
                        beta += here[h2];
                    }
                    for t in 0..m {
                        expected[t] += stage as f64 * here[t];
                    }
                    here.fill(0.0);
                }
            }
            mass = next;
        }
        let tail: Vec<f64> = (0..m)
            .map(|t| mass.chunks(m).map(|c| c[t]).sum())
            .collect();
        for t in 0..m {
            expected[t] += cap as f64 * tail[t];
        }
        OperatingCharacteristics {
            alpha,
            beta,
            expected_n: expected,
            tail_mass: tail,
            cap,
        }
    }

    /// Count-lattice rule and decisions for thresholds `(upper, lower)`.
    pub fn rule(&self, p: &Problem, upper: f64, lower: f64) -> Result<(StoppingRule, DecisionTable)> {
        let (h1, h2) = self.hypotheses;
        let (d1, d2) = (decision_for(p, h1), decision_for(p, h2));
        let cap = self.cap();
        let mut decisions = Vec::with_capacity(cap);
        let rule = StoppingRule::from_fn(&self.lattice, cap, false, |n, s| {
            f64::from(u8::from(Self::stops(self.llr[n][s], upper, lower).is_some()))
        })?;
        for n in 1..=cap {
            decisions.push(
                (0..self.lattice.stage_len(n))
                    .map(|s| Self::stops(self.llr[n][s], upper, lower).map(|up| if up { d2 } else { d1 }))
                    .collect(),
            );
        }
        Ok((rule, DecisionTable::new(LatticeKind::CountVector, self.alphabet(), decisions)))
    }

    fn alphabet(&self) -> usize {
        self.lattice.alphabet()
    }
}

fn check_spec(spec: &SprtSpec) -> Result<()> {
    if spec.lower > spec.upper || spec.lower.is_nan() || spec.upper.is_nan() {
        return Err(Error::DimensionMismatch(format!(
            "lower threshold {} exceeds upper threshold {}",
            spec.lower, spec.upper
        )));
    }
    Ok(())
}

/// The SPRT as a count-lattice stopping rule described up to `spec.cap`, with
/// its terminal decisions.
pub fn sprt_rule(p: &Problem, spec: &SprtSpec) -> Result<(StoppingRule, DecisionTable)> {
    check_spec(spec)?;
    SprtContext::new(p, spec.hypotheses, spec.cap)?.rule(p, spec.upper, spec.lower)
}

/// Exact error probabilities and expected sample sizes up to `spec.cap`.
/// Fails when more than `max_tail` mass of any parameter is still running.
pub fn sprt_operating_characteristics(p: &Problem, spec: &SprtSpec, max_tail: f64) -> Result<OperatingCharacteristics> {
    check_spec(spec)?;
    let oc = SprtContext::new(p, spec.hypotheses, spec.cap)?.oc(spec.upper, spec.lower);
    if oc.max_tail() > max_tail {
        return Err(Error::TailMassExceeded {
            mass: oc.max_tail(),
            cap: spec.cap,
            limit: max_tail,
        });
    }
    Ok(oc)
}

/// Wald's approximate thresholds `(ln((1 - beta) / alpha), ln(beta / (1 - alpha)))`.
pub fn wald_thresholds(alpha: f64, beta: f64) -> (f64, f64) {
    (((1.0 - beta) / alpha).ln(), (beta / (1.0 - alpha)).ln())
}

#[derive(Debug, Clone, Copy)]
pub struct MatchOptions {
    /// Allowed excess of each error over its target.
    pub slack: f64,
    /// Largest unstopped mass at the cap, per parameter.
    pub max_tail: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            slack: 1e-10,
            max_tail: DEFAULT_MAX_TAIL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SprtMatch {
    pub spec: SprtSpec,
    pub oc: OperatingCharacteristics,
    /// Wald's thresholds for the targets, for reference.
    pub wald: (f64, f64),
    pub targets: (f64, f64),
}

/// Thresholds whose exact errors are as large as possible without exceeding
/// the targets (plus `slack`). The OC is a step function of the thresholds,
/// so the search runs over midpoints between adjacent reachable LLR values:
/// for each upper threshold the largest feasible lower threshold is found by
/// bisection, and the upper threshold is bisected for the smallest feasible
/// value.
pub fn match_sprt_errors(
    p: &Problem,
    hypotheses: (usize, usize),
    alpha: f64,
    beta: f64,
    cap: usize,
    opts: &MatchOptions,
) -> Result<SprtMatch> {
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(Error::DimensionMismatch(format!(
            "error targets ({alpha}, {beta}) must lie in (0, 1)"
        )));
    }
    let ctx = SprtContext::new(p, hypotheses, cap)?;
    let v = ctx.distinct_llrs();
    let len = v.len();
    // Threshold at cut `i` lies below v[i]: -inf for 0, +inf for len.
    let cut = |i: usize| -> f64 {
        if i == 0 {
            f64::NEG_INFINITY
        } else if i == len {
            f64::INFINITY
        } else {
            0.5 * (v[i - 1] + v[i])
        }
    };
    let (ta, tb) = (alpha + opts.slack, beta + opts.slack);
    // Largest lower cut j <= i with beta <= tb (beta grows with j).
    let best_lower = |i: usize| -> (usize, OperatingCharacteristics) {
        let (mut lo, mut hi) = (0usize, i);
        let mut best = (0, ctx.oc(cut(i), cut(0)));
        if best.1.beta > tb {
            return best;
        }
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            let oc = ctx.oc(cut(i), cut(mid));
            if oc.beta <= tb {
                lo = mid;
                best = (mid, oc);
            } else {
                hi = mid - 1;
            }
        }
        best
    };
    let feasible = |oc: &OperatingCharacteristics| oc.alpha <= ta && oc.beta <= tb && oc.max_tail() <= opts.max_tail;
    // Smallest upper cut with alpha within target (alpha falls as the cut rises).
    let (mut lo, mut hi) = (0usize, len);
    let mut found: Option<(usize, usize, OperatingCharacteristics)> = None;
    let top = best_lower(len);
    if top.1.alpha > ta {
        return Err(Error::InfeasibleTargets(format!(
            "no thresholds reach alpha <= {alpha} within cap {cap}"
        )));
    }
    if feasible(&top.1) {
        found = Some((len, top.0, top.1));
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        let (j, oc) = best_lower(mid);
        if oc.alpha <= ta {
            if feasible(&oc) {
                found = Some((mid, j, oc));
            }
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    // The bisection assumes monotone errors; probe neighbours for a better
    // feasible point in case the assumption bends.
    if let Some((i0, _, _)) = found.clone() {
        for i in i0.saturating_sub(3)..=(i0 + 3).min(len) {
            let (j, oc) = best_lower(i);
            let better = found.as_ref().is_none_or(|f| oc.alpha + oc.beta > f.2.alpha + f.2.beta);
            if feasible(&oc) && better {
                found = Some((i, j, oc));
            }
        }
    }
    let (i, j, oc) = found.ok_or_else(|| {
        Error::InfeasibleTargets(format!(
            "no thresholds meet alpha <= {alpha}, beta <= {beta} with tail mass <= {:e} at cap {cap}",
            opts.max_tail
        ))
    })?;
    Ok(SprtMatch {
        spec: SprtSpec {
            upper: cut(i),
            lower: cut(j),
            hypotheses,
            cap,
        },
        oc,
        wald: wald_thresholds(alpha, beta),
        targets: (alpha, beta),
    })
}

/// Stages where the states continued by `rule` (psi < 1) do not form an
/// interval of the LLR between `hypotheses`. Only states reached with
/// positive weight are considered.
pub fn continuation_gaps(p: &Problem, rule: &StoppingRule, hypotheses: (usize, usize)) -> Result<Vec<usize>> {
    if rule.kind() != LatticeKind::CountVector {
        return Err(Error::Unsupported("interval check needs a count-vector rule".into()));
    }
    let ctx = SprtContext::new(p, hypotheses, rule.span())?;
    let lat = ctx.lattice();
    let reach = rule.reach_weights(lat, rule.span());
    let mut gaps = Vec::new();
    for n in 1..rule.span() {
        let mut pts: Vec<(f64, bool)> = (0..lat.stage_len(n))
            .filter(|&s| reach[n][s] > 0.0 && !ctx.llr(n, s).is_nan())
            .map(|s| (ctx.llr(n, s), rule.psi(n, s) < 1.0))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let conts: Vec<f64> = pts.iter().filter(|p| p.1).map(|p| p.0).collect();
        let (Some(&first), Some(&last)) = (conts.first(), conts.last()) else {
            continue;
        };
        let inside_stop = pts
            .iter()
            .any(|&(l, c)| !c && l > first + LLR_MERGE_TOL && l < last - LLR_MERGE_TOL);
        if inside_stop {
            gaps.push(n);
        }
    }
    Ok(gaps)
}
