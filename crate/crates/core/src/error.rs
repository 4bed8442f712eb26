use thiserror::Error;

use crate::model::ValidationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("problem validation failed: {}", format_violations(.0))]
    Validation(Vec<ValidationError>),

    #[error("symbol {symbol} is outside the alphabet of size {alphabet}")]
    SymbolOutOfAlphabet { symbol: usize, alphabet: usize },

    #[error("conditional pmf undefined for parameter {theta} after history {history:?}")]
    KernelUndefined { theta: usize, history: Vec<usize> },

    #[error("horizon {requested} exceeds the model horizon {limit}")]
    HorizonExceeded { requested: usize, limit: usize },

    #[error("state budget exceeded: {needed} states needed, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("history {0:?} has zero probability")]
    ZeroProbabilityHistory(Vec<usize>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("decision undefined at stage {stage}, state {state}")]
    DecisionUndefined { stage: usize, state: usize },

    #[error("stopping probability {value} at stage {stage}, state {state} is outside [0, 1]")]
    PsiOutOfRange { stage: usize, state: usize, value: f64 },

    #[error("rule is materialized up to stage {span}, stage {requested} was requested")]
    RuleTooShort { span: usize, requested: usize },

    #[error("the problem has no constraint groups")]
    NoConstraintGroups,

    #[error("targets are infeasible: {0}")]
    InfeasibleTargets(String),

    #[error("search budget exhausted after {0} evaluations")]
    SearchBudgetExhausted(usize),

    #[error("operation requires an iid observation model")]
    NotIid,

    #[error("unstopped tail mass {mass:e} at cap {cap} exceeds the allowed {limit:e}")]
    TailMassExceeded { mass: f64, cap: usize, limit: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[ValidationError]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}
