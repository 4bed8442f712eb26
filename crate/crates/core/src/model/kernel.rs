use std::collections::HashMap;
use std::fmt;

use super::{check_pmf, Symbol, ValidationError};

/// Conditional pmf of the next observation given the parameter and the
/// history so far. Implementations must be deterministic and total for every
/// history shorter than [`ConditionalPmf::horizon`].
pub trait ConditionalPmf: Send + Sync + fmt::Debug {
    fn num_params(&self) -> usize;

    /// Number of observations the kernel describes: histories of length
    /// `0..horizon` have a defined next-symbol pmf.
    fn horizon(&self) -> usize;

    fn pmf(&self, theta: usize, history: &[Symbol]) -> Option<Vec<f64>>;

    /// Pushes every violated invariant onto `out`. The default walks all
    /// histories below the horizon, so it only suits small tables.
    fn validate(&self, alphabet_size: usize, out: &mut Vec<ValidationError>) {
        let mut frontier: Vec<Vec<Symbol>> = vec![Vec::new()];
        for _ in 0..self.horizon() {
            let mut next = Vec::with_capacity(frontier.len() * alphabet_size);
            for h in &frontier {
                for theta in 0..self.num_params() {
                    match self.pmf(theta, h) {
                        Some(pmf) => check_pmf(
                            &pmf,
                            alphabet_size,
                            format!("kernel of parameter {theta} after {h:?}"),
                            out,
                        ),
                        None => out.push(ValidationError::KernelMissing {
                            theta,
                            history: h.clone(),
                        }),
                    }
                }
                for x in 0..alphabet_size {
                    let mut child = h.clone();
                    child.push(x);
                    next.push(child);
                }
            }
            frontier = next;
        }
    }
}

/// Explicit per-history table of conditional pmfs.
#[derive(Debug, Clone, Default)]
pub struct KernelTable {
    horizon: usize,
    tables: Vec<HashMap<Vec<Symbol>, Vec<f64>>>,
}

impl KernelTable {
    pub fn new(num_params: usize, horizon: usize) -> Self {
        Self {
            horizon,
            tables: vec![HashMap::new(); num_params],
        }
    }

    pub fn insert(&mut self, theta: usize, history: Vec<Symbol>, pmf: Vec<f64>) {
        self.tables[theta].insert(history, pmf);
    }
}

impl ConditionalPmf for KernelTable {
    fn num_params(&self) -> usize {
        self.tables.len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn pmf(&self, theta: usize, history: &[Symbol]) -> Option<Vec<f64>> {
        self.tables.get(theta)?.get(history).cloned()
    }
}

/// First-order Markov chain per parameter: `initial[theta]` gives the pmf of
/// the first symbol, `transition[theta][prev]` the pmf after `prev`.
#[derive(Debug, Clone)]
pub struct MarkovKernel {
    pub initial: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub horizon: usize,
}

impl ConditionalPmf for MarkovKernel {
    fn num_params(&self) -> usize {
        self.initial.len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn pmf(&self, theta: usize, history: &[Symbol]) -> Option<Vec<f64>> {
        match history.last() {
            None => self.initial.get(theta).cloned(),
            Some(&prev) => self.transition.get(theta)?.get(prev).cloned(),
        }
    }

    fn validate(&self, alphabet_size: usize, out: &mut Vec<ValidationError>) {
        if self.transition.len() != self.initial.len() {
            out.push(ValidationError::DimensionMismatch {
                what: "model.transition".into(),
                expected: self.initial.len(),
                found: self.transition.len(),
            });
        }
        for (theta, pmf) in self.initial.iter().enumerate() {
            check_pmf(pmf, alphabet_size, format!("initial pmf of parameter {theta}"), out);
        }
        for (theta, matrix) in self.transition.iter().enumerate() {
            if matrix.len() != alphabet_size {
                out.push(ValidationError::DimensionMismatch {
                    what: format!("transition matrix of parameter {theta}"),
                    expected: alphabet_size,
                    found: matrix.len(),
                });
            }
            for (prev, pmf) in matrix.iter().enumerate() {
                check_pmf(
                    pmf,
                    alphabet_size,
                    format!("transition pmf of parameter {theta} after symbol {prev}"),
                    out,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incomplete_table_is_reported() {
        let mut t = KernelTable::new(1, 2);
        t.insert(0, vec![], vec![0.5, 0.5]);
        t.insert(0, vec![0], vec![0.5, 0.5]);
        let mut errs = Vec::new();
        t.validate(2, &mut errs);
        assert_eq!(
            errs,
            vec![ValidationError::KernelMissing {
                theta: 0,
                history: vec![1]
            }]
        );
    }

    #[test]
    fn markov_uses_last_symbol() {
        let k = MarkovKernel {
            initial: vec![vec![0.5, 0.5]],
            transition: vec![vec![vec![0.9, 0.1], vec![0.2, 0.8]]],
            horizon: 10,
        };
        assert_eq!(k.pmf(0, &[0, 1]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(k.pmf(0, &[]).unwrap(), vec![0.5, 0.5]);
        let mut errs = Vec::new();
        k.validate(2, &mut errs);
        assert!(errs.is_empty());
    }
}
