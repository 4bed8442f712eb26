//! Randomized stopping rules on a lattice.
//!
//! `psi_n(h)` is the conditional probability of stopping after the `n`-th
//! observation given history `h`. A rule stores `psi` for stages `1..=span`;
//! a truncated rule has `psi_span = 1`, an untruncated one simply stops being
//! described after `span` and is evaluated with an explicit cap.
//!
//! On the count-vector lattice `psi` depends on the history only through the
//! symbol counts. Reach weights are then aggregated over all histories with
//! the same counts.

use std::io::{BufRead, BufReader, Read, Write};

use serde::Serialize;

use crate::backward::{classify, StopClass, ValueTables};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeKind, DEFAULT_STATE_BUDGET};

/// How to set `psi` where `l_n` and `Q_n` tie.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TiePolicy {
    #[default]
    Stop,
    Continue,
    /// Stop with probability `gamma`.
    Randomize(f64),
}

impl TiePolicy {
    fn value(self) -> f64 {
        match self {
            TiePolicy::Stop => 1.0,
            TiePolicy::Continue => 0.0,
            TiePolicy::Randomize(g) => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule {
    kind: LatticeKind,
    alphabet: usize,
    /// `psi[n - 1][s]` for stages `n = 1..=span`.
    psi: Vec<Vec<f64>>,
    truncated: bool,
    /// `(stage, state)` pairs where the rule was chosen on a tie.
    ties: Vec<(usize, usize)>,
}

fn stage_len(kind: LatticeKind, alphabet: usize, n: usize) -> usize {
    match kind {
        LatticeKind::HistoryTree => alphabet.pow(n as u32),
        LatticeKind::CountVector => {
            // C(n + K - 1, K - 1)
            let k = alphabet - 1;
            (0..k).fold(1usize, |acc, i| acc * (n + k - i) / (i + 1))
        }
    }
}

impl StoppingRule {
    /// Builds a rule from explicit per-stage tables.
    pub fn from_stages(
        kind: LatticeKind,
        alphabet: usize,
        psi: Vec<Vec<f64>>,
        truncated: bool,
    ) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::DimensionMismatch("rule has no stages".into()));
        }
        if alphabet < 2 {
            return Err(Error::DimensionMismatch(format!(
                "alphabet size {alphabet} is below 2"
            )));
        }
        for (i, stage) in psi.iter().enumerate() {
            let n = i + 1;
            let want = stage_len(kind, alphabet, n);
            if stage.len() != want {
                return Err(Error::DimensionMismatch(format!(
                    "stage {n} has {} entries, expected {want}",
                    stage.len()
                )));
            }
            if let Some((s, &value)) = stage
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(Error::PsiOutOfRange {
                    stage: n,
                    state: s,
                    value,
                });
            }
        }
        if truncated && psi.last().unwrap().iter().any(|&v| v != 1.0) {
            return Err(Error::DimensionMismatch(
                "truncated rule must stop with probability 1 at its last stage".into(),
            ));
        }
        Ok(Self {
            kind,
            alphabet,
            psi,
            truncated,
            ties: Vec::new(),
        })
    }

    /// Stops after the first observation.
    pub fn always_stop(kind: LatticeKind, alphabet: usize) -> Self {
        Self::constant(kind, alphabet, 1.0, 1, true)
    }

    /// `psi_n = value` for `n < span`; the last stage is 1 when `truncated`.
    pub fn constant(kind: LatticeKind, alphabet: usize, value: f64, span: usize, truncated: bool) -> Self {
        assert!((0.0..=1.0).contains(&value) && span >= 1);
        let psi = (1..=span)
            .map(|n| {
                let v = if truncated && n == span { 1.0 } else { value };
                vec![v; stage_len(kind, alphabet, n)]
            })
            .collect();
        Self {
            kind,
            alphabet,
            psi,
            truncated,
            ties: Vec::new(),
        }
    }

    /// Builds a rule from `f(n, s)` over `lattice`, stages `1..=span`.
    pub fn from_fn<F>(lattice: &Lattice, span: usize, truncated: bool, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> f64,
    {
        if span > lattice.horizon() {
            return Err(Error::HorizonExceeded {
                requested: span,
                limit: lattice.horizon(),
            });
        }
        let psi = (1..=span)
            .map(|n| (0..lattice.stage_len(n)).map(|s| f(n, s)).collect())
            .collect();
        let mut rule = Self::from_stages(lattice.kind(), lattice.alphabet(), psi, false)?;
        if truncated {
            rule.psi.last_mut().unwrap().fill(1.0);
            rule.truncated = true;
        }
        Ok(rule)
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    /// Last described stage.
    pub fn span(&self) -> usize {
        self.psi.len()
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn ties(&self) -> &[(usize, usize)] {
        &self.ties
    }

    /// `psi_n(s)` for `1 <= n <= span`.
    #[inline]
    pub fn psi(&self, n: usize, s: usize) -> f64 {
        self.psi[n - 1][s]
    }

    pub fn stage(&self, n: usize) -> &[f64] {
        &self.psi[n - 1]
    }

    pub fn set_psi(&mut self, n: usize, s: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::PsiOutOfRange {
                stage: n,
                state: s,
                value,
            });
        }
        if n == 0 || n > self.span() || s >= self.psi[n - 1].len() {
            return Err(Error::DimensionMismatch(format!("no state {s} at stage {n}")));
        }
        self.psi[n - 1][s] = value;
        if self.truncated && n == self.span() && value != 1.0 {
            self.truncated = false;
        }
        Ok(())
    }

    /// A lattice able to index this rule.
    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::new(self.kind, self.alphabet, self.span(), DEFAULT_STATE_BUDGET)
    }

    /// Aggregated reach weights `T_n(s) = sum over histories in s of t_n(h)`
    /// for `n = 0..=upto`, clipped to the lattice horizon, with `T_0 = 1`.
    /// Past the span an untruncated rule is continued with `psi = 0`; for a
    /// truncated rule everything past the span is zero.
    pub fn reach_weights(&self, lattice: &Lattice, upto: usize) -> Vec<Vec<f64>> {
        let k = lattice.alphabet();
        let upto = upto.min(lattice.horizon());
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(upto + 1);
        out.push(vec![1.0]);
        for n in 0..upto {
            let cur = &out[n];
            let mut next = vec![0.0; lattice.stage_len(n + 1)];
            let children = lattice.children(n);
            for (s, &t) in cur.iter().enumerate() {
                let psi = if n == 0 {
                    0.0
                } else if n <= self.span() {
                    self.psi(n, s)
                } else if self.truncated {
                    1.0
                } else {
                    0.0
                };
                let carry = t * (1.0 - psi);
                if carry == 0.0 {
                    continue;
                }
                for x in 0..k {
                    next[children[s * k + x]] += carry;
                }
            }
            out.push(next);
        }
        out
    }

    /// Same rule on the history tree, expanding count states.
    pub fn to_history_tree(&self) -> Result<Self> {
        match self.kind {
            LatticeKind::HistoryTree => Ok(self.clone()),
            LatticeKind::CountVector => {
                let counts = self.lattice()?;
                let tree = Lattice::new(
                    LatticeKind::HistoryTree,
                    self.alphabet,
                    self.span(),
                    DEFAULT_STATE_BUDGET,
                )?;
                let mut psi = Vec::with_capacity(self.span());
                for n in 1..=self.span() {
                    let stage = (0..tree.stage_len(n))
                        .map(|h| counts.state_of(&tree.history(n, h)).map(|s| self.psi(n, s)))
                        .collect::<Result<Vec<f64>>>()?;
                    psi.push(stage);
                }
                Ok(Self {
                    kind: LatticeKind::HistoryTree,
                    alphabet: self.alphabet,
                    psi,
                    truncated: self.truncated,
                    ties: Vec::new(),
                })
            }
        }
    }

    /// Writes `stage,state,psi` rows after a `# lattice=..,alphabet=..,truncated=..` line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# lattice={},alphabet={},truncated={}",
            self.kind.as_str(),
            self.alphabet,
            self.truncated
        )?;
        let lat = self.lattice()?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "state", "psi"]).map_err(csv_err)?;
        for n in 1..=self.span() {
            for (s, v) in self.stage(n).iter().enumerate() {
                out.write_record([n.to_string(), lat.label(n, s), v.to_string()])
                    .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Inverse of [`StoppingRule::write_csv`]. Every state of every stage up
    /// to the largest one mentioned must be present exactly once.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let (kind, alphabet, truncated) = parse_rule_header(&header)?;
        let mut rows = Vec::new();
        let mut csv_reader = csv::Reader::from_reader(reader);
        for record in csv_reader.records() {
            let record = record.map_err(csv_err)?;
            if record.len() != 3 {
                return Err(Error::Parse(format!("expected 3 fields, got {}", record.len())));
            }
            let n: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad stage {:?}", &record[0])))?;
            let v: f64 = record[2]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad psi {:?}", &record[2])))?;
            if n == 0 {
                return Err(Error::Parse("stages start at 1".into()));
            }
            rows.push((n, record[1].to_string(), v));
        }
        let span = rows.iter().map(|r| r.0).max().ok_or_else(|| Error::Parse("empty rule".into()))?;
        let lat = Lattice::new(kind, alphabet, span, DEFAULT_STATE_BUDGET)?;
        let mut psi: Vec<Vec<f64>> = (1..=span).map(|n| vec![f64::NAN; lat.stage_len(n)]).collect();
        for (n, label, v) in rows {
            let s = lat.parse_label(n, &label)?;
            if !psi[n - 1][s].is_nan() {
                return Err(Error::Parse(format!("duplicate entry for stage {n}, state {label:?}")));
            }
            psi[n - 1][s] = v;
        }
        for (i, stage) in psi.iter().enumerate() {
            if let Some(s) = stage.iter().position(|v| v.is_nan()) {
                return Err(Error::Parse(format!(
                    "missing entry for stage {}, state {:?}",
                    i + 1,
                    lat.label(i + 1, s)
                )));
            }
        }
        Self::from_stages(kind, alphabet, psi, truncated)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn parse_rule_header(line: &str) -> Result<(LatticeKind, usize, bool)> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse("rule file must start with a '# lattice=...' line".into()))?;
    let (mut kind, mut alphabet, mut truncated) = (None, None, None);
    for part in body.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field {part:?}")))?;
        match key.trim() {
            "lattice" => kind = Some(LatticeKind::parse(value.trim())?),
            "alphabet" => {
                alphabet = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad alphabet {value:?}")))?,
                )
            }
            "truncated" => {
                truncated = Some(
                    value
                        .trim()
                        .parse::<bool>()
                        .map_err(|_| Error::Parse(format!("bad truncated flag {value:?}")))?,
                )
            }
            other => return Err(Error::Parse(format!("unknown header field {other:?}"))),
        }
    }
    match (kind, alphabet, truncated) {
        (Some(k), Some(a), Some(t)) => Ok((k, a, t)),
        _ => Err(Error::Parse("header needs lattice, alphabet and truncated".into())),
    }
}

fn check_same_shape(a: &StoppingRule, b: &StoppingRule) -> Result<()> {
    if a.kind != b.kind || a.alphabet != b.alphabet || a.span() != b.span() {
        return Err(Error::DimensionMismatch("rules have different shapes".into()));
    }
    Ok(())
}

/// Statewise interpolation `psi_a + gamma (psi_b - psi_a)`.
pub fn blend_rules(a: &StoppingRule, b: &StoppingRule, gamma: f64) -> Result<StoppingRule> {
    check_same_shape(a, b)?;
    let psi = a
        .psi
        .iter()
        .zip(&b.psi)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&u, &v)| (u + gamma * (v - u)).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    Ok(StoppingRule {
        kind: a.kind,
        alphabet: a.alphabet,
        psi,
        truncated: a.truncated && b.truncated,
        ties: Vec::new(),
    })
}

/// Behavioral form of running `a` with probability `1 - gamma` and `b` with
/// probability `gamma`: stopping masses on every state are the corresponding
/// convex combination, so every risk functional is linear in `gamma`.
pub fn mix_procedures(a: &StoppingRule, b: &StoppingRule, gamma: f64) -> Result<StoppingRule> {
    check_same_shape(a, b)?;
    let lat = a.lattice()?;
    let ta = a.reach_weights(&lat, a.span());
    let tb = b.reach_weights(&lat, b.span());
    let psi = (1..=a.span())
        .map(|n| {
            (0..lat.stage_len(n))
                .map(|s| {
                    let reach = (1.0 - gamma) * ta[n][s] + gamma * tb[n][s];
                    if reach <= 0.0 {
                        return a.psi(n, s);
                    }
                    let stop = (1.0 - gamma) * ta[n][s] * a.psi(n, s) + gamma * tb[n][s] * b.psi(n, s);
                    (stop / reach).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok(StoppingRule {
        kind: a.kind,
        alphabet: a.alphabet,
        psi,
        truncated: a.truncated && b.truncated,
        ties: Vec::new(),
    })
}

/// The optimal rule: stop where `l_n < Q_n`, continue where `l_n > Q_n`,
/// `tie` elsewhere, and stop at the horizon.
pub fn extract_rule(tables: &ValueTables, tie: TiePolicy) -> StoppingRule {
    let lat = tables.history().lattice();
    let horizon = tables.horizon();
    let mut ties = Vec::new();
    let mut psi = Vec::with_capacity(horizon);
    for n in 1..horizon {
        let stage = (0..lat.stage_len(n))
            .map(|s| match tables.classify(n, s) {
                StopClass::Stop => 1.0,
                StopClass::Continue => 0.0,
                StopClass::Tie => {
                    ties.push((n, s));
                    tie.value()
                }
            })
            .collect();
        psi.push(stage);
    }
    psi.push(vec![1.0; lat.stage_len(horizon)]);
    StoppingRule {
        kind: lat.kind(),
        alphabet: lat.alphabet(),
        psi,
        truncated: true,
        ties,
    }
}

/// `psi^N = (psi_1, ..., psi_{N-1}, 1)`.
pub fn truncate_rule(rule: &StoppingRule, horizon: usize) -> Result<StoppingRule> {
    if horizon == 0 {
        return Err(Error::DimensionMismatch("truncation horizon must be at least 1".into()));
    }
    if rule.truncated && rule.span() <= horizon {
        return Ok(rule.clone());
    }
    if rule.span() < horizon {
        return Err(Error::RuleTooShort {
            span: rule.span(),
            requested: horizon,
        });
    }
    let mut psi: Vec<Vec<f64>> = rule.psi[..horizon].to_vec();
    psi.last_mut().unwrap().fill(1.0);
    Ok(StoppingRule {
        kind: rule.kind,
        alphabet: rule.alphabet,
        psi,
        truncated: true,
        ties: rule.ties.iter().copied().filter(|&(n, _)| n < horizon).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichViolation {
    pub stage: usize,
    pub state: String,
    pub psi: f64,
    pub l: f64,
    pub q: f64,
}

/// Histories reached with positive weight where `psi_n` falls outside
/// `[I{l_n < Q_n}, I{l_n <= Q_n}]`. Stages `1..N` of the tables are checked.
pub fn sandwich_check(rule: &StoppingRule, tables: &ValueTables) -> Result<Vec<SandwichViolation>> {
    let lat = tables.history().lattice();
    if rule.kind != lat.kind() || rule.alphabet != lat.alphabet() {
        return Err(Error::DimensionMismatch(format!(
            "rule is on a {} lattice with alphabet {}, tables on {} with alphabet {}",
            rule.kind.as_str(),
            rule.alphabet,
            lat.kind().as_str(),
            lat.alphabet()
        )));
    }
    let last = rule.span().min(tables.horizon().saturating_sub(1));
    let reach = rule.reach_weights(lat, last);
    let mut out = Vec::new();
    for n in 1..=last {
        for s in 0..lat.stage_len(n) {
            if reach[n][s] <= 0.0 {
                continue;
            }
            let psi = rule.psi(n, s);
            let bad = match tables.classify(n, s) {
                StopClass::Stop => psi < 1.0 - 1e-12,
                StopClass::Continue => psi > 1e-12,
                StopClass::Tie => false,
            };
            if bad {
                out.push(SandwichViolation {
                    stage: n,
                    state: lat.label(n, s),
                    psi,
                    l: tables.l(n, s),
                    q: tables.q(n, s),
                });
            }
        }
    }
    Ok(out)
}

/// `true` when `classify(l, q)` allows `psi`.
pub fn satisfies_sandwich(l: f64, q: f64, psi: f64) -> bool {
    match classify(l, q) {
        StopClass::Stop => psi >= 1.0 - 1e-12,
        StopClass::Continue => psi <= 1e-12,
        StopClass::Tie => true,
    }
}
