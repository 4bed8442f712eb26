//! Indexed state spaces over observation histories.
//!
//! A [`Lattice`] enumerates, for each stage `n = 0..=horizon`, the states the
//! backward and forward recursions run over:
//!
//! * [`LatticeKind::HistoryTree`]: one state per history. The history
//!   `(x_1, .., x_n)` has index `sum_i x_i * K^(n-i)`, so the child after
//!   symbol `x` of state `s` is `s * K + x`.
//! * [`LatticeKind::CountVector`]: one state per multiset of symbol counts.
//!   Only valid for iid models, where densities and Bayes quantities depend on
//!   the history through its counts alone. States of a stage are listed in
//!   lexicographically decreasing count order.
//!
//! Per-history quantities (densities, losses, values) are the same on both
//! lattices; only sums over all histories of a stage need the count
//! multiplicities.

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Symbol;

/// Default cap on the total number of lattice states.
pub const DEFAULT_STATE_BUDGET: u128 = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeKind {
    HistoryTree,
    CountVector,
}

impl LatticeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LatticeKind::HistoryTree => "history_tree",
            LatticeKind::CountVector => "count_vector",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "history_tree" => Ok(LatticeKind::HistoryTree),
            "count_vector" => Ok(LatticeKind::CountVector),
            other => Err(Error::Parse(format!("unknown lattice kind {other:?}"))),
        }
    }
}

/// Engine selection for solvers: `Auto` uses the count-vector lattice for iid
/// models and the history tree otherwise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Auto,
    HistoryTree,
    CountVector,
}

impl Engine {
    pub fn resolve(self, iid: bool) -> Result<LatticeKind> {
        match self {
            Engine::Auto if iid => Ok(LatticeKind::CountVector),
            Engine::Auto | Engine::HistoryTree => Ok(LatticeKind::HistoryTree),
            Engine::CountVector if iid => Ok(LatticeKind::CountVector),
            Engine::CountVector => Err(Error::NotIid),
        }
    }
}

#[derive(Debug, Clone)]
struct CountStage {
    /// Flattened counts, `alphabet` entries per state.
    counts: Vec<u32>,
    lookup: HashMap<Vec<u32>, usize>,
    multiplicity: Vec<f64>,
    /// `children[s * alphabet + x]`, empty at the last stage.
    children: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Lattice {
    kind: LatticeKind,
    alphabet: usize,
    horizon: usize,
    stage_len: Vec<usize>,
    count_stages: Vec<CountStage>,
}

/// Number of states a lattice of this shape would hold.
pub fn state_count(kind: LatticeKind, alphabet: usize, horizon: usize) -> u128 {
    let k = alphabet as u128;
    let mut total: u128 = 0;
    for n in 0..=horizon as u128 {
        let stage = match kind {
            LatticeKind::HistoryTree => k.checked_pow(n as u32).unwrap_or(u128::MAX),
            LatticeKind::CountVector => binomial(n + k - 1, k - 1),
        };
        total = total.saturating_add(stage);
    }
    total
}

fn binomial(n: u128, r: u128) -> u128 {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

fn compositions(n: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<u32>) {
    if parts == 1 {
        out.extend_from_slice(prefix);
        out.push(n);
        return;
    }
    for first in (0..=n).rev() {
        prefix.push(first);
        compositions(n - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

impl Lattice {
    pub fn new(kind: LatticeKind, alphabet: usize, horizon: usize, budget: u128) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::DimensionMismatch(format!(
                "alphabet size {alphabet} is below 2"
            )));
        }
        let needed = state_count(kind, alphabet, horizon);
        if needed > budget {
            return Err(Error::BudgetExceeded { needed, budget });
        }
        let mut stage_len = Vec::with_capacity(horizon + 1);
        let mut count_stages = Vec::new();
        match kind {
            LatticeKind::HistoryTree => {
                let mut len = 1usize;
                for _ in 0..=horizon {
                    stage_len.push(len);
                    len = len.saturating_mul(alphabet);
                }
            }
            LatticeKind::CountVector => {
                let mut prev: Option<CountStage> = None;
                for n in 0..=horizon {
                    let mut counts = Vec::new();
                    compositions(n as u32, alphabet, &mut Vec::with_capacity(alphabet), &mut counts);
                    let len = counts.len() / alphabet;
                    let lookup: HashMap<Vec<u32>, usize> = counts
                        .chunks(alphabet)
                        .enumerate()
                        .map(|(i, c)| (c.to_vec(), i))
                        .collect();
                    let mut multiplicity = vec![0.0; len];
                    if n == 0 {
                        multiplicity[0] = 1.0;
                    } else if let Some(prev) = &prev {
                        let mut key = vec![0u32; alphabet];
                        for (s, c) in prev.counts.chunks(alphabet).enumerate() {
                            for x in 0..alphabet {
                                key.copy_from_slice(c);
                                key[x] += 1;
                                multiplicity[lookup[&key]] += prev.multiplicity[s];
                            }
                        }
                    }
                    stage_len.push(len);
                    if let Some(mut p) = prev.take() {
                        let mut key = vec![0u32; alphabet];
                        p.children = Vec::with_capacity(p.counts.len());
                        for c in p.counts.chunks(alphabet) {
                            for x in 0..alphabet {
                                key.copy_from_slice(c);
                                key[x] += 1;
                                p.children.push(lookup[&key]);
                            }
                        }
                        count_stages.push(p);
                    }
                    prev = Some(CountStage {
                        counts,
                        lookup,
                        multiplicity,
                        children: Vec::new(),
                    });
                }
                count_stages.extend(prev);
            }
        }
        Ok(Self {
            kind,
            alphabet,
            horizon,
            stage_len,
            count_stages,
        })
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn stage_len(&self, n: usize) -> usize {
        self.stage_len[n]
    }

    pub fn total_states(&self) -> usize {
        self.stage_len.iter().sum()
    }

    /// State at stage `n + 1` reached from state `s` of stage `n` by symbol `x`.
    #[inline]
    pub fn child(&self, n: usize, s: usize, x: Symbol) -> usize {
        match self.kind {
            LatticeKind::HistoryTree => s * self.alphabet + x,
            LatticeKind::CountVector => self.count_stages[n].children[s * self.alphabet + x],
        }
    }

    /// All children of every state of stage `n`, `result[s * K + x]`.
    pub fn children(&self, n: usize) -> Cow<'_, [usize]> {
        match self.kind {
            LatticeKind::HistoryTree => Cow::Owned((0..self.stage_len(n) * self.alphabet).collect()),
            LatticeKind::CountVector => Cow::Borrowed(&self.count_stages[n].children),
        }
    }

    /// Number of histories mapped to the state.
    pub fn multiplicity(&self, n: usize, s: usize) -> f64 {
        match self.kind {
            LatticeKind::HistoryTree => 1.0,
            LatticeKind::CountVector => self.count_stages[n].multiplicity[s],
        }
    }

    /// Symbol counts of the state.
    pub fn counts(&self, n: usize, s: usize) -> Vec<u32> {
        match self.kind {
            LatticeKind::HistoryTree => {
                let mut c = vec![0u32; self.alphabet];
                for x in self.history(n, s) {
                    c[x] += 1;
                }
                c
            }
            LatticeKind::CountVector => {
                self.count_stages[n].counts[s * self.alphabet..(s + 1) * self.alphabet].to_vec()
            }
        }
    }

    /// The history of a history-tree state, or a canonical representative
    /// (symbols in increasing order) of a count-vector state.
    pub fn history(&self, n: usize, s: usize) -> Vec<Symbol> {
        match self.kind {
            LatticeKind::HistoryTree => {
                let mut h = vec![0; n];
                let mut rest = s;
                for slot in h.iter_mut().rev() {
                    *slot = rest % self.alphabet;
                    rest /= self.alphabet;
                }
                h
            }
            LatticeKind::CountVector => {
                let c = self.counts(n, s);
                c.iter()
                    .enumerate()
                    .flat_map(|(x, &k)| std::iter::repeat_n(x, k as usize))
                    .collect()
            }
        }
    }

    /// State index of a history at stage `history.len()`.
    pub fn state_of(&self, history: &[Symbol]) -> Result<usize> {
        let n = history.len();
        if n > self.horizon {
            return Err(Error::HorizonExceeded {
                requested: n,
                limit: self.horizon,
            });
        }
        if let Some(&symbol) = history.iter().find(|&&x| x >= self.alphabet) {
            return Err(Error::SymbolOutOfAlphabet {
                symbol,
                alphabet: self.alphabet,
            });
        }
        Ok(match self.kind {
            LatticeKind::HistoryTree => history.iter().fold(0, |acc, &x| acc * self.alphabet + x),
            LatticeKind::CountVector => {
                let mut c = vec![0u32; self.alphabet];
                for &x in history {
                    c[x] += 1;
                }
                self.count_stages[n].lookup[&c]
            }
        })
    }

    /// State index of a count vector at stage `sum(counts)`.
    pub fn state_of_counts(&self, counts: &[u32]) -> Result<usize> {
        let n: u32 = counts.iter().sum();
        match self.kind {
            LatticeKind::CountVector => self
                .count_stages
                .get(n as usize)
                .and_then(|st| st.lookup.get(counts).copied())
                .ok_or_else(|| Error::Parse(format!("unknown count vector {counts:?}"))),
            LatticeKind::HistoryTree => Err(Error::Unsupported(
                "count lookup on a history-tree lattice".into(),
            )),
        }
    }

    /// Human-readable state label: `1,0,1` for histories, `2:1` for counts.
    pub fn label(&self, n: usize, s: usize) -> String {
        match self.kind {
            LatticeKind::HistoryTree => self
                .history(n, s)
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
            LatticeKind::CountVector => self
                .counts(n, s)
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(":"),
        }
    }

    /// Inverse of [`Lattice::label`] at stage `n`.
    pub fn parse_label(&self, n: usize, label: &str) -> Result<usize> {
        let parse = |sep: char| -> Result<Vec<usize>> {
            if label.trim().is_empty() {
                return Ok(Vec::new());
            }
            label
                .split(sep)
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad state label {label:?}")))
                })
                .collect()
        };
        let state = match self.kind {
            LatticeKind::HistoryTree => self.state_of(&parse(',')?)?,
            LatticeKind::CountVector => {
                let c: Vec<u32> = parse(':')?.into_iter().map(|v| v as u32).collect();
                if c.len() != self.alphabet {
                    return Err(Error::Parse(format!("bad count label {label:?}")));
                }
                self.state_of_counts(&c)?
            }
        };
        let found_stage = match self.kind {
            LatticeKind::HistoryTree => parse(',')?.len(),
            LatticeKind::CountVector => parse(':')?.iter().sum(),
        };
        if found_stage != n {
            return Err(Error::Parse(format!(
                "state label {label:?} does not belong to stage {n}"
            )));
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_indexing_round_trips() {
        let l = Lattice::new(LatticeKind::HistoryTree, 3, 4, DEFAULT_STATE_BUDGET).unwrap();
        for n in 0..=4 {
            for s in 0..l.stage_len(n) {
                let h = l.history(n, s);
                assert_eq!(l.state_of(&h).unwrap(), s);
                assert_eq!(l.parse_label(n, &l.label(n, s)).unwrap(), s);
                if n < 4 {
                    for x in 0..3 {
                        let mut hx = h.clone();
                        hx.push(x);
                        assert_eq!(l.child(n, s, x), l.state_of(&hx).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn count_multiplicities_are_multinomials() {
        let l = Lattice::new(LatticeKind::CountVector, 3, 6, DEFAULT_STATE_BUDGET).unwrap();
        for n in 0..=6 {
            let total: f64 = (0..l.stage_len(n)).map(|s| l.multiplicity(n, s)).sum();
            assert_eq!(total, 3f64.powi(n as i32));
            assert_eq!(l.stage_len(n) as u128, binomial(n as u128 + 2, 2));
        }
        let s = l.state_of_counts(&[2, 1, 1]).unwrap();
        assert_eq!(l.multiplicity(4, s), 12.0);
        assert_eq!(l.parse_label(4, "2:1:1").unwrap(), s);
    }

    #[test]
    fn count_children_match_history_lookup() {
        let l = Lattice::new(LatticeKind::CountVector, 2, 5, DEFAULT_STATE_BUDGET).unwrap();
        for n in 0..5 {
            let ch = l.children(n);
            for s in 0..l.stage_len(n) {
                for x in 0..2 {
                    let mut h = l.history(n, s);
                    h.push(x);
                    assert_eq!(ch[s * 2 + x], l.state_of(&h).unwrap());
                    assert_eq!(l.child(n, s, x), ch[s * 2 + x]);
                }
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let err = Lattice::new(LatticeKind::HistoryTree, 2, 30, 1 << 20).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
        assert!(Lattice::new(LatticeKind::CountVector, 2, 30, 1 << 20).is_ok());
    }
}
