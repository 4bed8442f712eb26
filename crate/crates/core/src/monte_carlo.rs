//! Simulation of randomized sequential procedures.
//!
//! Replication `r` draws from ChaCha8 seeded with `seed` on stream `r`, so the
//! aggregate depends only on `(seed, replications)` and not on how the work is
//! split across threads.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::{bayes_argmin, effective_loss};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeKind, DEFAULT_STATE_BUDGET};
use crate::model::{ObservationModel, PriorSelect, Problem};
use crate::policy::StoppingRule;
use crate::risk::{DecisionStrategy, DecisionTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    Prior(PriorSelect),
    Fixed(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub replications: usize,
    pub seed: u64,
    /// Largest stage simulated; reaching it without the rule stopping is a cap hit.
    pub cap: usize,
    pub theta_mode: ThetaMode,
    /// Cap-hit fraction above which the result is flagged.
    pub cap_hit_threshold: f64,
    /// Keep per-replication rows.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            replications: 10_000,
            seed: 0,
            cap: 1_000,
            theta_mode: ThetaMode::Prior(PriorSelect::Pi2),
            cap_hit_threshold: 0.0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
}

impl Estimate {
    fn from_samples(values: impl Iterator<Item = f64> + Clone, n: usize) -> Self {
        let nf = n as f64;
        let mean = values.clone().sum::<f64>() / nf;
        let var = if n > 1 {
            values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / nf).sqrt(),
        }
    }

    /// `|mean - exact|` in standard errors; zero SE compares exactly.
    pub fn z(&self, exact: f64) -> f64 {
        let d = (self.mean - exact).abs();
        if self.se > 0.0 {
            d / self.se
        } else if d <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub replication: usize,
    pub theta: usize,
    pub tau: usize,
    pub decision: usize,
    pub loss: f64,
    pub cap_hit: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimEstimates {
    pub replications: usize,
    pub seed: u64,
    pub cap: usize,
    pub theta_mode: ThetaMode,
    pub tau: Estimate,
    pub loss: Estimate,
    /// Mean of `w(theta, d) I{theta in group i}`.
    pub group_loss: Vec<Estimate>,
    /// Mean of `I{decision = d}`.
    pub decision_freq: Vec<Estimate>,
    pub theta_freq: Vec<f64>,
    pub cap_hit_fraction: f64,
    pub flagged: bool,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl SimEstimates {
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "replication,theta,tau,decision,loss,cap_hit")?;
        for r in &self.trace {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.replication, r.theta, r.tau, r.decision, r.loss, r.cap_hit
            )?;
        }
        Ok(())
    }
}

enum Decider<'a> {
    Loss(Vec<Vec<f64>>),
    Table(&'a DecisionTable),
}

/// Simulates `cfg.replications` runs of `rule` with terminal decisions from
/// `strategy`.
pub fn simulate(
    p: &Problem,
    rule: &StoppingRule,
    strategy: &DecisionStrategy,
    cfg: &SimConfig,
) -> Result<SimEstimates> {
    if cfg.replications == 0 || cfg.cap == 0 {
        return Err(Error::DimensionMismatch("replications and cap must be positive".into()));
    }
    if rule.alphabet() != p.alphabet_size() {
        return Err(Error::DimensionMismatch(format!(
            "rule alphabet {} differs from the model alphabet {}",
            rule.alphabet(),
            p.alphabet_size()
        )));
    }
    if !p.is_iid() && rule.kind() == LatticeKind::CountVector {
        return Err(Error::NotIid);
    }
    let horizon = if rule.is_truncated() {
        cfg.cap.min(rule.span())
    } else if cfg.cap <= rule.span() {
        cfg.cap
    } else {
        return Err(Error::RuleTooShort {
            span: rule.span(),
            requested: cfg.cap,
        });
    };
    if let Some(limit) = p.obs().horizon() {
        if horizon > limit {
            return Err(Error::HorizonExceeded {
                requested: horizon,
                limit,
            });
        }
    }
    let m = p.num_params();
    let theta_dist = match cfg.theta_mode {
        ThetaMode::Prior(which) => Some(
            WeightedIndex::new(p.prior(which)).map_err(|e| Error::DimensionMismatch(e.to_string()))?,
        ),
        ThetaMode::Fixed(t) if t < m => None,
        ThetaMode::Fixed(t) => {
            return Err(Error::DimensionMismatch(format!("parameter index {t} out of range")))
        }
    };
    let decider = match strategy {
        DecisionStrategy::Bayes => Decider::Loss(effective_loss(p, None)?),
        DecisionStrategy::Weighted(l) => Decider::Loss(effective_loss(p, Some(l))?),
        DecisionStrategy::Table(t) => {
            if t.kind() != rule.kind() || t.alphabet() != rule.alphabet() {
                return Err(Error::DimensionMismatch(
                    "decision table and rule live on different lattices".into(),
                ));
            }
            Decider::Table(t)
        }
    };
    let iid: Option<Vec<WeightedIndex<f64>>> = match p.obs() {
        ObservationModel::Iid { pmf, .. } => Some(
            pmf.iter()
                .map(|row| WeightedIndex::new(row).map_err(|e| Error::DimensionMismatch(e.to_string())))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let lat = Lattice::new(rule.kind(), rule.alphabet(), horizon, DEFAULT_STATE_BUDGET)?;
    let w = &p.loss().matrix;
    let pi1 = p.pi1();
    let groups = p.constraints().map(|c| c.groups.clone()).unwrap_or_default();

    let run = |rep: usize| -> Result<TraceRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(rep as u64);
        let theta = match (&theta_dist, cfg.theta_mode) {
            (Some(d), _) => d.sample(&mut rng),
            (None, ThetaMode::Fixed(t)) => t,
            (None, _) => unreachable!(),
        };
        let mut history = Vec::with_capacity(horizon);
        // Likelihoods rescaled so the largest is 1.
        let mut like = vec![1.0; m];
        let mut s = 0usize;
        let mut n = 0usize;
        let cap_hit = loop {
            let x = match &iid {
                Some(d) => d[theta].sample(&mut rng),
                None => {
                    let pmf = p.obs().conditional(theta, &history)?;
                    WeightedIndex::new(pmf.iter())
                        .map_err(|e| Error::DimensionMismatch(e.to_string()))?
                        .sample(&mut rng)
                }
            };
            for (t, l) in like.iter_mut().enumerate() {
                *l *= match &iid {
                    Some(_) => p.obs().conditional(t, &[])?[x],
                    None => p.obs().conditional(t, &history)?[x],
                };
            }
            let top = like.iter().copied().fold(0.0f64, f64::max);
            if top > 0.0 {
                like.iter_mut().for_each(|l| *l /= top);
            }
            s = lat.child(n, s, x);
            history.push(x);
            n += 1;
            let u: f64 = rng.random();
            let psi = if n <= rule.span() { rule.psi(n, s) } else { 1.0 };
            if u < psi {
                break false;
            }
            if n == horizon {
                break true;
            }
        };
        let decision = match &decider {
            Decider::Loss(wl) => {
                let values: Vec<f64> = (0..p.num_decisions())
                    .map(|d| (0..m).map(|t| wl[t][d] * like[t] * pi1[t]).sum())
                    .collect();
                bayes_argmin(&values).0
            }
            Decider::Table(t) => t
                .get(n, s)
                .ok_or(Error::DecisionUndefined { stage: n, state: s })?,
        };
        Ok(TraceRow {
            replication: rep,
            theta,
            tau: n,
            decision,
            loss: w[theta][decision],
            cap_hit,
        })
    };

    let rows: Vec<TraceRow> = (0..cfg.replications)
        .into_par_iter()
        .map(run)
        .collect::<Result<_>>()?;
    let reps = rows.len();
    let tau = Estimate::from_samples(rows.iter().map(|r| r.tau as f64), reps);
    let loss = Estimate::from_samples(rows.iter().map(|r| r.loss), reps);
    let group_loss = groups
        .iter()
        .map(|g| {
            Estimate::from_samples(
                rows.iter().map(|r| if g.contains(&r.theta) { r.loss } else { 0.0 }),
                reps,
            )
        })
        .collect();
    let decision_freq = (0..p.num_decisions())
        .map(|d| Estimate::from_samples(rows.iter().map(|r| f64::from(u8::from(r.decision == d))), reps))
        .collect();
    let mut theta_count = vec![0usize; m];
    for r in &rows {
        theta_count[r.theta] += 1;
    }
    let theta_freq = theta_count.iter().map(|&c| c as f64 / reps as f64).collect();
    let cap_hit_fraction = rows.iter().filter(|r| r.cap_hit).count() as f64 / reps as f64;
    Ok(SimEstimates {
        replications: reps,
        seed: cfg.seed,
        cap: horizon,
        theta_mode: cfg.theta_mode,
        tau,
        loss,
        group_loss,
        decision_freq,
        theta_freq,
        cap_hit_fraction,
        flagged: cap_hit_fraction > cfg.cap_hit_threshold,
        trace: if cfg.trace { rows } else { Vec::new() },
    })
}
