//! The sequential decision problem.
//!
//! A [`Problem`] bundles a finite parameter set, a discrete-time observation
//! model over a finite alphabet, a nonnegative loss matrix, the two weighting
//! priors (one for decision losses, one for sample sizes), the per-observation
//! cost, and optional constraint groups. Observations are integer symbols
//! `0..K` and the dominating measure is counting measure, so every integral
//! over histories is a finite sum.
//!
//! Problems are built from an unvalidated [`ProblemSpec`] through
//! [`validate_problem`], which reports every violated invariant at once.

mod config;
mod kernel;

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

pub use config::{ProblemConfig, CONFIG_SCHEMA_VERSION};
pub use kernel::{ConditionalPmf, KernelTable, MarkovKernel};

use crate::error::{Error, Result};

/// An observation symbol, `0..alphabet_size`.
pub type Symbol = usize;

/// Tolerance for probability vectors summing to one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Largest supported number of terminal decisions (tie sets are bitmasks).
pub const MAX_DECISIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSpace {
    labels: Vec<String>,
}

impl ParameterSpace {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, theta: usize) -> &str {
        &self.labels[theta]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// How observations are generated given the parameter.
#[derive(Clone)]
pub enum ObservationModel {
    /// Independent draws from a fixed per-parameter pmf, `pmf[theta][symbol]`.
    Iid { alphabet_size: usize, pmf: Vec<Vec<f64>> },
    /// History-dependent conditional pmfs supplied by a kernel.
    Dependent {
        alphabet_size: usize,
        kernel: Arc<dyn ConditionalPmf>,
    },
}

impl fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationModel::Iid { alphabet_size, pmf } => f
                .debug_struct("Iid")
                .field("alphabet_size", alphabet_size)
                .field("pmf", pmf)
                .finish(),
            ObservationModel::Dependent {
                alphabet_size,
                kernel,
            } => f
                .debug_struct("Dependent")
                .field("alphabet_size", alphabet_size)
                .field("horizon", &kernel.horizon())
                .finish(),
        }
    }
}

impl ObservationModel {
    pub fn alphabet_size(&self) -> usize {
        match self {
            ObservationModel::Iid { alphabet_size, .. }
            | ObservationModel::Dependent { alphabet_size, .. } => *alphabet_size,
        }
    }

    pub fn is_iid(&self) -> bool {
        matches!(self, ObservationModel::Iid { .. })
    }

    /// Largest number of observations the model can describe.
    pub fn horizon(&self) -> Option<usize> {
        match self {
            ObservationModel::Iid { .. } => None,
            ObservationModel::Dependent { kernel, .. } => Some(kernel.horizon()),
        }
    }

    /// Conditional pmf of the next symbol under `theta` after `history`.
    pub fn conditional(&self, theta: usize, history: &[Symbol]) -> Result<Cow<'_, [f64]>> {
        match self {
            ObservationModel::Iid { pmf, .. } => Ok(Cow::Borrowed(&pmf[theta])),
            ObservationModel::Dependent { kernel, .. } => {
                if history.len() >= kernel.horizon() {
                    return Err(Error::HorizonExceeded {
                        requested: history.len() + 1,
                        limit: kernel.horizon(),
                    });
                }
                kernel
                    .pmf(theta, history)
                    .map(Cow::Owned)
                    .ok_or_else(|| Error::KernelUndefined {
                        theta,
                        history: history.to_vec(),
                    })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub decisions: Vec<String>,
    /// `matrix[theta][decision]`.
    pub matrix: Vec<Vec<f64>>,
}

impl LossSpec {
    /// 0-1 loss with one decision per parameter, named after it.
    pub fn zero_one(params: &ParameterSpace) -> Self {
        let m = params.len();
        Self {
            decisions: params.labels().to_vec(),
            matrix: (0..m)
                .map(|t| (0..m).map(|d| if t == d { 0.0 } else { 1.0 }).collect())
                .collect(),
        }
    }

    pub fn num_decisions(&self) -> usize {
        self.decisions.len()
    }

    pub fn max_loss(&self) -> f64 {
        self.matrix
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    /// Weights the decision losses.
    pub pi1: Vec<f64>,
    /// Weights the sample sizes.
    pub pi2: Vec<f64>,
}

impl Priors {
    pub fn uniform(m: usize) -> Self {
        let u = vec![1.0 / m as f64; m];
        Self {
            pi1: u.clone(),
            pi2: u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSelect {
    Pi1,
    Pi2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSpec {
    /// Disjoint parameter groups, as parameter indices.
    pub groups: Vec<Vec<usize>>,
    /// Loss bound per group.
    pub bounds: Vec<f64>,
    pub multipliers: Option<Vec<f64>>,
}

impl ConstraintSpec {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group index of `theta`, if it belongs to one.
    pub fn group_of(&self, theta: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&theta))
    }
}

/// Unvalidated problem description.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub params: ParameterSpace,
    pub obs: ObservationModel,
    pub loss: LossSpec,
    pub priors: Priors,
    pub cost: f64,
    pub constraints: Option<ConstraintSpec>,
}

/// A validated problem. All accessors are cheap.
#[derive(Debug, Clone)]
pub struct Problem {
    spec: ProblemSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationError {
    NoParameters,
    DuplicateParameter(String),
    AlphabetTooSmall(usize),
    DimensionMismatch { what: String, expected: usize, found: usize },
    NegativeProbability { context: String, value: f64 },
    PmfNotNormalized { context: String, sum: f64 },
    KernelMissing { theta: usize, history: Vec<Symbol> },
    NoDecisions,
    TooManyDecisions(usize),
    NegativeLoss { theta: usize, decision: usize, value: f64 },
    PriorNotNormalized { prior: &'static str, sum: f64 },
    NegativePrior { prior: &'static str, theta: usize, value: f64 },
    InvalidCost(f64),
    GroupIndexOutOfRange { group: usize, theta: usize },
    EmptyGroup(usize),
    OverlappingGroups { first: usize, second: usize, theta: usize },
    NonPositiveBound { group: usize, value: f64 },
    NegativeMultiplier { group: usize, value: f64 },
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationError::*;
        match self {
            NoParameters => write!(f, "parameter set is empty"),
            DuplicateParameter(l) => write!(f, "duplicate parameter label {l:?}"),
            AlphabetTooSmall(k) => write!(f, "alphabet size {k} is below 2"),
            DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected length {expected}, found {found}"),
            NegativeProbability { context, value } => {
                write!(f, "negative probability {value} in {context}")
            }
            PmfNotNormalized { context, sum } => {
                write!(f, "{context} sums to {sum}")
            }
            KernelMissing { theta, history } => {
                write!(f, "kernel undefined for parameter {theta} after {history:?}")
            }
            NoDecisions => write!(f, "decision set is empty"),
            TooManyDecisions(d) => write!(f, "{d} decisions exceed the limit of {MAX_DECISIONS}"),
            NegativeLoss {
                theta,
                decision,
                value,
            } => write!(f, "negative loss {value} at (theta {theta}, decision {decision})"),
            PriorNotNormalized { prior, sum } => write!(f, "{prior} sums to {sum}"),
            NegativePrior {
                prior,
                theta,
                value,
            } => write!(f, "{prior}[{theta}] = {value} is negative"),
            InvalidCost(c) => write!(f, "observation cost {c} must be finite and nonnegative"),
            GroupIndexOutOfRange { group, theta } => {
                write!(f, "constraint group {group} references unknown parameter {theta}")
            }
            EmptyGroup(g) => write!(f, "constraint group {g} is empty"),
            OverlappingGroups {
                first,
                second,
                theta,
            } => write!(
                f,
                "groups {first} and {second} both contain parameter {theta}"
            ),
            NonPositiveBound { group, value } => {
                write!(f, "bound {value} of group {group} must be positive")
            }
            NegativeMultiplier { group, value } => {
                write!(f, "multiplier {value} of group {group} is negative")
            }
        }
    }
}

fn check_pmf(pmf: &[f64], k: usize, context: String, out: &mut Vec<ValidationError>) {
    if pmf.len() != k {
        out.push(ValidationError::DimensionMismatch {
            what: context,
            expected: k,
            found: pmf.len(),
        });
        return;
    }
    if let Some(&v) = pmf.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        out.push(ValidationError::NegativeProbability { context, value: v });
        return;
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        out.push(ValidationError::PmfNotNormalized { context, sum });
    }
}

fn check_prior(pi: &[f64], m: usize, name: &'static str, out: &mut Vec<ValidationError>) {
    if pi.len() != m {
        out.push(ValidationError::DimensionMismatch {
            what: name.to_string(),
            expected: m,
            found: pi.len(),
        });
        return;
    }
    let mut ok = true;
    for (theta, &value) in pi.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            out.push(ValidationError::NegativePrior {
                prior: name,
                theta,
                value,
            });
            ok = false;
        }
    }
    let sum: f64 = pi.iter().sum();
    if ok && (sum - 1.0).abs() > NORMALIZATION_TOL {
        out.push(ValidationError::PriorNotNormalized { prior: name, sum });
    }
}

/// Checks every invariant of `spec`, returning the validated problem or the
/// complete list of violations.
pub fn validate_problem(spec: ProblemSpec) -> std::result::Result<Problem, Vec<ValidationError>> {
    let mut errs = Vec::new();
    let m = spec.params.len();
    if m == 0 {
        errs.push(ValidationError::NoParameters);
    }
    for (i, l) in spec.params.labels().iter().enumerate() {
        if spec.params.labels()[..i].contains(l) {
            errs.push(ValidationError::DuplicateParameter(l.clone()));
        }
    }

    let k = spec.obs.alphabet_size();
    if k < 2 {
        errs.push(ValidationError::AlphabetTooSmall(k));
    }
    match &spec.obs {
        ObservationModel::Iid { pmf, .. } => {
            if pmf.len() != m {
                errs.push(ValidationError::DimensionMismatch {
                    what: "model.pmf".into(),
                    expected: m,
                    found: pmf.len(),
                });
            }
            for (theta, row) in pmf.iter().enumerate() {
                check_pmf(row, k, format!("pmf of parameter {theta}"), &mut errs);
            }
        }
        ObservationModel::Dependent { kernel, .. } => {
            if kernel.num_params() != m {
                errs.push(ValidationError::DimensionMismatch {
                    what: "model.kernel".into(),
                    expected: m,
                    found: kernel.num_params(),
                });
            } else if k >= 2 {
                kernel.validate(k, &mut errs);
            }
        }
    }

    let d = spec.loss.num_decisions();
    if d == 0 {
        errs.push(ValidationError::NoDecisions);
    }
    if d > MAX_DECISIONS {
        errs.push(ValidationError::TooManyDecisions(d));
    }
    if spec.loss.matrix.len() != m {
        errs.push(ValidationError::DimensionMismatch {
            what: "loss".into(),
            expected: m,
            found: spec.loss.matrix.len(),
        });
    }
    for (theta, row) in spec.loss.matrix.iter().enumerate() {
        if row.len() != d {
            errs.push(ValidationError::DimensionMismatch {
                what: format!("loss row {theta}"),
                expected: d,
                found: row.len(),
            });
        }
        for (decision, &value) in row.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                errs.push(ValidationError::NegativeLoss {
                    theta,
                    decision,
                    value,
                });
            }
        }
    }

    check_prior(&spec.priors.pi1, m, "pi1", &mut errs);
    check_prior(&spec.priors.pi2, m, "pi2", &mut errs);
    if !(spec.cost >= 0.0) || !spec.cost.is_finite() {
        errs.push(ValidationError::InvalidCost(spec.cost));
    }

    if let Some(cs) = &spec.constraints {
        if cs.bounds.len() != cs.groups.len() {
            errs.push(ValidationError::DimensionMismatch {
                what: "constraints.bounds".into(),
                expected: cs.groups.len(),
                found: cs.bounds.len(),
            });
        }
        for (g, group) in cs.groups.iter().enumerate() {
            if group.is_empty() {
                errs.push(ValidationError::EmptyGroup(g));
            }
            for &theta in group {
                if theta >= m {
                    errs.push(ValidationError::GroupIndexOutOfRange { group: g, theta });
                }
            }
            for (h, other) in cs.groups.iter().enumerate().skip(g + 1) {
                if let Some(&theta) = group.iter().find(|t| other.contains(t)) {
                    errs.push(ValidationError::OverlappingGroups {
                        first: g,
                        second: h,
                        theta,
                    });
                }
            }
        }
        for (group, &value) in cs.bounds.iter().enumerate() {
            if !(value > 0.0) {
                errs.push(ValidationError::NonPositiveBound { group, value });
            }
        }
        if let Some(lambda) = &cs.multipliers {
            if lambda.len() != cs.groups.len() {
                errs.push(ValidationError::DimensionMismatch {
                    what: "constraints.multipliers".into(),
                    expected: cs.groups.len(),
                    found: lambda.len(),
                });
            }
            for (group, &value) in lambda.iter().enumerate() {
                if !(value >= 0.0) {
                    errs.push(ValidationError::NegativeMultiplier { group, value });
                }
            }
        }
    }

    if errs.is_empty() {
        Ok(Problem { spec })
    } else {
        Err(errs)
    }
}

impl Problem {
    /// Validates `spec`, folding the violation list into [`Error::Validation`].
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        validate_problem(spec).map_err(Error::Validation)
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn into_spec(self) -> ProblemSpec {
        self.spec
    }

    pub fn params(&self) -> &ParameterSpace {
        &self.spec.params
    }

    pub fn num_params(&self) -> usize {
        self.spec.params.len()
    }

    pub fn obs(&self) -> &ObservationModel {
        &self.spec.obs
    }

    pub fn alphabet_size(&self) -> usize {
        self.spec.obs.alphabet_size()
    }

    pub fn is_iid(&self) -> bool {
        self.spec.obs.is_iid()
    }

    pub fn loss(&self) -> &LossSpec {
        &self.spec.loss
    }

    pub fn num_decisions(&self) -> usize {
        self.spec.loss.num_decisions()
    }

    pub fn pi1(&self) -> &[f64] {
        &self.spec.priors.pi1
    }

    pub fn pi2(&self) -> &[f64] {
        &self.spec.priors.pi2
    }

    pub fn prior(&self, which: PriorSelect) -> &[f64] {
        match which {
            PriorSelect::Pi1 => self.pi1(),
            PriorSelect::Pi2 => self.pi2(),
        }
    }

    pub fn cost(&self) -> f64 {
        self.spec.cost
    }

    pub fn constraints(&self) -> Option<&ConstraintSpec> {
        self.spec.constraints.as_ref()
    }

    /// Copy of this problem with the cost replaced.
    pub fn with_cost(&self, cost: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.cost = cost;
        Problem::new(spec)
    }

    /// Copy of this problem with `pi2` replaced.
    pub fn with_pi2(&self, pi2: Vec<f64>) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.priors.pi2 = pi2;
        Problem::new(spec)
    }

    pub(crate) fn check_history(&self, history: &[Symbol]) -> Result<()> {
        let k = self.alphabet_size();
        if let Some(&symbol) = history.iter().find(|&&x| x >= k) {
            return Err(Error::SymbolOutOfAlphabet {
                symbol,
                alphabet: k,
            });
        }
        Ok(())
    }
}

/// `f_theta^n(history)`: the probability of observing `history` under `theta`.
/// The empty history has density one.
pub fn joint_density(p: &Problem, theta: usize, history: &[Symbol]) -> Result<f64> {
    p.check_history(history)?;
    if theta >= p.num_params() {
        return Err(Error::DimensionMismatch(format!(
            "parameter index {theta} out of range for {} parameters",
            p.num_params()
        )));
    }
    let mut density = 1.0;
    for (n, &x) in history.iter().enumerate() {
        let pmf = p.obs().conditional(theta, &history[..n])?;
        density *= pmf[x];
    }
    Ok(density)
}

/// `f^n(history) = sum_theta f_theta^n(history) * pi(theta)` for the selected prior.
pub fn mixture_density(p: &Problem, history: &[Symbol], prior: PriorSelect) -> Result<f64> {
    let pi = p.prior(prior);
    let mut total = 0.0;
    for (theta, &weight) in pi.iter().enumerate() {
        if weight > 0.0 {
            total += weight * joint_density(p, theta, history)?;
        }
    }
    Ok(total)
}
