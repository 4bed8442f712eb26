//! Backward induction for the truncated optimal stopping problem.
//!
//! With horizon `N`, `V_N = l_N` and for `n < N`
//!
//! ```text
//! Q_n(h) = c f^n(h) + sum_x V_{n+1}(h, x)
//! V_n(h) = min(l_n(h), Q_n(h))
//! ```
//!
//! `Q_0` (with `f^0 = 1`) is the minimal risk over rules truncated at `N`.
//! Values are per-history densities, not posterior quantities, so they shrink
//! with `f^n`; comparisons between `l_n` and `Q_n` are therefore relative.

use std::cmp::Ordering;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::{DensityTable, HistoryTable, PAR_THRESHOLD};
use crate::error::{Error, Result};
use crate::lattice::{Engine, LatticeKind, DEFAULT_STATE_BUDGET};
use crate::model::Problem;

/// Relative tolerance for treating `l_n` and `Q_n` as tied.
pub const VALUE_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopClass {
    /// `l_n < Q_n`: stopping is strictly better.
    Stop,
    /// `l_n > Q_n`: continuing is strictly better.
    Continue,
    /// Equal within [`VALUE_TIE_TOL`].
    Tie,
}

pub fn classify(l: f64, q: f64) -> StopClass {
    if (l - q).abs() <= VALUE_TIE_TOL * l.abs().max(q.abs()) {
        StopClass::Tie
    } else {
        match l.partial_cmp(&q) {
            Some(Ordering::Less) => StopClass::Stop,
            _ => StopClass::Continue,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub engine: Engine,
    pub state_budget: u128,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            engine: Engine::Auto,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }
}

impl SolveOptions {
    pub fn with_engine(engine: Engine) -> Self {
        Self {
            engine,
            ..Self::default()
        }
    }

    pub fn densities(&self, p: &Problem, horizon: usize) -> Result<Arc<DensityTable>> {
        let kind = self.engine.resolve(p.is_iid())?;
        Ok(Arc::new(DensityTable::build(p, kind, horizon, self.state_budget)?))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    /// `(N, Q_0^N)` for every horizon tried.
    pub q0_sequence: Vec<(usize, f64)>,
    /// Last successive difference of `Q_0`.
    pub achieved_tol: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ValueTables {
    table: HistoryTable,
    cost: f64,
    q: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    convergence: Option<Convergence>,
}

/// Runs the recursion on a prepared table.
pub fn solve_on(table: HistoryTable, cost: f64) -> ValueTables {
    let horizon = table.horizon();
    let lat = table.lattice();
    let dens = table.densities();
    let k = lat.alphabet();
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); horizon + 1];
    let mut q: Vec<Vec<f64>> = vec![Vec::new(); horizon];
    v[horizon] = table.stage_l(horizon).to_vec();
    for n in (0..horizon).rev() {
        let children = lat.children(n);
        let next = &v[n + 1];
        let cont = |s: usize| {
            let tail: f64 = children[s * k..(s + 1) * k].iter().map(|&c| next[c]).sum();
            cost * dens.mix(n, s) + tail
        };
        let len = lat.stage_len(n);
        let qn: Vec<f64> = if len > PAR_THRESHOLD {
            (0..len).into_par_iter().map(cont).collect()
        } else {
            (0..len).map(cont).collect()
        };
        v[n] = qn
            .iter()
            .zip(table.stage_l(n))
            .map(|(&qv, &lv)| lv.min(qv))
            .collect();
        q[n] = qn;
    }
    ValueTables {
        table,
        cost,
        q,
        v,
        convergence: None,
    }
}

/// Minimal truncated risk and optimal values at horizon `horizon`.
pub fn solve_truncated(p: &Problem, horizon: usize, opts: &SolveOptions) -> Result<ValueTables> {
    if horizon == 0 {
        return Err(Error::DimensionMismatch("horizon must be at least 1".into()));
    }
    let dens = opts.densities(p, horizon)?;
    Ok(solve_on(HistoryTable::for_problem(p, dens), p.cost()))
}

#[derive(Debug, Clone, Copy)]
pub struct LimitOptions {
    pub start: usize,
    pub tol: f64,
    pub cap: usize,
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self {
            start: 8,
            tol: 1e-10,
            cap: 512,
        }
    }
}

/// Doubles the horizon until `Q_0` moves by less than `tol` or `cap` is hit.
/// Non-convergence is reported in [`ValueTables::convergence`], not as an error.
pub fn solve_limit(p: &Problem, limit: &LimitOptions, opts: &SolveOptions) -> Result<ValueTables> {
    if !(limit.tol > 0.0) || limit.start == 0 {
        return Err(Error::DimensionMismatch(
            "limit mode needs tol > 0 and start >= 1".into(),
        ));
    }
    let cap = limit.cap.max(limit.start);
    let mut n = limit.start;
    let mut tables = solve_truncated(p, n, opts)?;
    let mut seq = vec![(n, tables.q0())];
    let mut diff = f64::INFINITY;
    let mut converged = false;
    while n < cap {
        let next_n = (2 * n).min(cap);
        let next = solve_truncated(p, next_n, opts)?;
        diff = (next.q0() - tables.q0()).abs();
        seq.push((next_n, next.q0()));
        tables = next;
        n = next_n;
        if diff < limit.tol {
            converged = true;
            break;
        }
    }
    tables.convergence = Some(Convergence {
        q0_sequence: seq,
        achieved_tol: diff,
        converged,
    });
    Ok(tables)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservationAdvice {
    /// `l_0 >= Q_0`: taking observations is at least as good as deciding now.
    pub worthwhile: bool,
    /// `l_0 - Q_0`.
    pub margin: f64,
}

pub fn should_take_observations(tables: &ValueTables, l0: f64) -> ObservationAdvice {
    let margin = l0 - tables.q0();
    ObservationAdvice {
        worthwhile: margin >= 0.0,
        margin,
    }
}

impl ValueTables {
    pub fn horizon(&self) -> usize {
        self.table.horizon()
    }

    pub fn engine(&self) -> LatticeKind {
        self.table.lattice().kind()
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn history(&self) -> &HistoryTable {
        &self.table
    }

    pub fn convergence(&self) -> Option<&Convergence> {
        self.convergence.as_ref()
    }

    /// `Q_n^N(s)` for `n < N`.
    #[inline]
    pub fn q(&self, n: usize, s: usize) -> f64 {
        self.q[n][s]
    }

    #[inline]
    pub fn v(&self, n: usize, s: usize) -> f64 {
        self.v[n][s]
    }

    #[inline]
    pub fn l(&self, n: usize, s: usize) -> f64 {
        self.table.l(n, s)
    }

    pub fn q0(&self) -> f64 {
        self.q[0][0]
    }

    pub fn v0(&self) -> f64 {
        self.v[0][0]
    }

    pub fn l0(&self) -> f64 {
        self.table.l0()
    }

    pub fn classify(&self, n: usize, s: usize) -> StopClass {
        classify(self.l(n, s), self.q(n, s))
    }

    /// CSV with columns `stage,state,l,Q,V`; `Q` is empty at the horizon.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let lat = self.table.lattice();
        writeln!(w, "stage,state,l,Q,V")?;
        for n in 0..=self.horizon() {
            for s in 0..lat.stage_len(n) {
                let q = if n < self.horizon() {
                    self.q(n, s).to_string()
                } else {
                    String::new()
                };
                writeln!(w, "{n},\"{}\",{},{q},{}", lat.label(n, s), self.l(n, s), self.v(n, s))?;
            }
        }
        Ok(())
    }
}
