//! Bayes terminal decisions and stagewise losses.
//!
//! For a history `h` of length `n` and decision `d`, the weighted loss
//! integrand is `sum_theta w(theta, d) f_theta^n(h) pi1(theta)`. The Bayes
//! decision minimizes it and `l_n(h)` is the attained minimum. Stage 0 uses
//! `f^0 = 1`, giving `l_0 = min_d sum_theta w(theta, d) pi1(theta)`.
//!
//! [`DensityTable`] caches `f_theta^n` and the `pi2` mixture `f^n` on a
//! lattice; [`HistoryTable`] adds `l_n`, the Bayes decision and the tie set
//! for one (possibly multiplier-weighted) loss.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{Engine, Lattice, LatticeKind, DEFAULT_STATE_BUDGET};
use crate::model::{joint_density, mixture_density, PriorSelect, Problem, Symbol};

/// Relative tolerance under which two candidate decision losses tie.
pub const DECISION_TIE_TOL: f64 = 1e-12;

/// Stages larger than this are processed in parallel.
pub(crate) const PAR_THRESHOLD: usize = 4096;

/// Lowest-index minimizer, the minimum, and the bitmask of all minimizers.
pub fn bayes_argmin(values: &[f64]) -> (usize, f64, u64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut mask = 0u64;
    let mut best = usize::MAX;
    for (d, &v) in values.iter().enumerate() {
        if v - min <= DECISION_TIE_TOL * v.abs().max(min.abs()) {
            mask |= 1 << d;
            best = best.min(d);
        }
    }
    (best, min, mask)
}

pub(crate) fn mask_to_vec(mask: u64) -> Vec<usize> {
    (0..64).filter(|d| mask & (1 << d) != 0).collect()
}

/// Loss matrix with group multipliers applied: `lambda_i * w` on group `i`,
/// zero outside every group.
pub fn effective_loss(p: &Problem, lambda: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    let w = &p.loss().matrix;
    let Some(lambda) = lambda else {
        return Ok(w.clone());
    };
    let cs = p.constraints().filter(|c| !c.is_empty()).ok_or(Error::NoConstraintGroups)?;
    if lambda.len() != cs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} multipliers for {} constraint groups",
            lambda.len(),
            cs.len()
        )));
    }
    Ok(w.iter()
        .enumerate()
        .map(|(theta, row)| {
            let scale = cs.group_of(theta).map_or(0.0, |g| lambda[g]);
            row.iter().map(|v| v * scale).collect()
        })
        .collect())
}

/// Per-state densities on a lattice.
#[derive(Debug, Clone)]
pub struct DensityTable {
    lattice: Lattice,
    num_params: usize,
    /// `f_theta[n][s * m + theta]`.
    f_theta: Vec<Vec<f64>>,
    /// `pi2` mixture.
    mix: Vec<Vec<f64>>,
    iid_pmf: Option<Vec<Vec<f64>>>,
}

impl DensityTable {
    pub fn build(p: &Problem, kind: LatticeKind, horizon: usize, budget: u128) -> Result<Self> {
        if kind == LatticeKind::CountVector && !p.is_iid() {
            return Err(Error::NotIid);
        }
        if let Some(limit) = p.obs().horizon() {
            if horizon > limit {
                return Err(Error::HorizonExceeded {
                    requested: horizon,
                    limit,
                });
            }
        }
        let lattice = Lattice::new(kind, p.alphabet_size(), horizon, budget)?;
        let m = p.num_params();
        let k = p.alphabet_size();
        let iid_pmf = match p.obs() {
            crate::model::ObservationModel::Iid { pmf, .. } => Some(pmf.clone()),
            _ => None,
        };
        let mut f_theta = Vec::with_capacity(horizon + 1);
        f_theta.push(vec![1.0; m]);
        for n in 0..horizon {
            let len = lattice.stage_len(n);
            let children = lattice.children(n);
            let mut next = vec![f64::NAN; lattice.stage_len(n + 1) * m];
            let parent = &f_theta[n];
            for s in 0..len {
                let cond: Vec<Vec<f64>> = match &iid_pmf {
                    Some(pmf) => pmf.clone(),
                    None => {
                        let h = lattice.history(n, s);
                        (0..m)
                            .map(|t| p.obs().conditional(t, &h).map(|c| c.into_owned()))
                            .collect::<Result<_>>()?
                    }
                };
                for x in 0..k {
                    let c = children[s * k + x];
                    if !next[c * m].is_nan() {
                        continue;
                    }
                    for t in 0..m {
                        next[c * m + t] = parent[s * m + t] * cond[t][x];
                    }
                }
            }
            f_theta.push(next);
        }
        let pi2 = p.pi2();
        let mix = f_theta
            .iter()
            .map(|stage| {
                stage
                    .chunks(m)
                    .map(|f| f.iter().zip(pi2).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        Ok(Self {
            lattice,
            num_params: m,
            f_theta,
            mix,
            iid_pmf,
        })
    }

    /// Builds with the lattice chosen by `engine` and the default budget.
    pub fn for_engine(p: &Problem, engine: Engine, horizon: usize) -> Result<Self> {
        Self::build(p, engine.resolve(p.is_iid())?, horizon, DEFAULT_STATE_BUDGET)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn horizon(&self) -> usize {
        self.lattice.horizon()
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    #[inline]
    pub fn f_theta(&self, n: usize, s: usize) -> &[f64] {
        &self.f_theta[n][s * self.num_params..(s + 1) * self.num_params]
    }

    /// `f^n` under `pi2`.
    #[inline]
    pub fn mix(&self, n: usize, s: usize) -> f64 {
        self.mix[n][s]
    }

    /// `P_theta(x_{n+1} = x | history of state s)`.
    #[inline]
    pub fn transition(&self, n: usize, s: usize, x: Symbol, theta: usize) -> f64 {
        match &self.iid_pmf {
            Some(pmf) => pmf[theta][x],
            None => {
                let parent = self.f_theta(n, s)[theta];
                if parent > 0.0 {
                    let c = self.lattice.child(n, s, x);
                    self.f_theta(n + 1, c)[theta] / parent
                } else {
                    0.0
                }
            }
        }
    }
}

/// Bayes losses and decisions on every lattice state.
#[derive(Debug, Clone)]
pub struct HistoryTable {
    densities: Arc<DensityTable>,
    l: Vec<Vec<f64>>,
    decision: Vec<Vec<u16>>,
    ties: Vec<Vec<u64>>,
}

impl HistoryTable {
    /// Builds from an explicit loss matrix `w[theta][d]` and loss prior `pi1`.
    pub fn build(densities: Arc<DensityTable>, loss: &[Vec<f64>], pi1: &[f64]) -> Self {
        let m = densities.num_params();
        let nd = loss.first().map_or(0, Vec::len);
        let weights: Vec<Vec<f64>> = (0..nd)
            .map(|d| (0..m).map(|t| loss[t][d] * pi1[t]).collect())
            .collect();
        let eval = |f: &[f64]| {
            let values: Vec<f64> = weights
                .iter()
                .map(|wd| wd.iter().zip(f).map(|(a, b)| a * b).sum())
                .collect();
            bayes_argmin(&values)
        };
        let mut l = Vec::with_capacity(densities.horizon() + 1);
        let mut decision = Vec::with_capacity(densities.horizon() + 1);
        let mut ties = Vec::with_capacity(densities.horizon() + 1);
        for n in 0..=densities.horizon() {
            let len = densities.lattice().stage_len(n);
            let per_state = |s: usize| eval(densities.f_theta(n, s));
            let out: Vec<(usize, f64, u64)> = if len > PAR_THRESHOLD {
                (0..len).into_par_iter().map(per_state).collect()
            } else {
                (0..len).map(per_state).collect()
            };
            l.push(out.iter().map(|o| o.1).collect());
            decision.push(out.iter().map(|o| o.0 as u16).collect());
            ties.push(out.iter().map(|o| o.2).collect());
        }
        Self {
            densities,
            l,
            decision,
            ties,
        }
    }

    pub fn for_problem(p: &Problem, densities: Arc<DensityTable>) -> Self {
        Self::build(densities, &p.loss().matrix, p.pi1())
    }

    /// Table for the multiplier-weighted loss.
    pub fn weighted(p: &Problem, densities: Arc<DensityTable>, lambda: &[f64]) -> Result<Self> {
        let w = effective_loss(p, Some(lambda))?;
        Ok(Self::build(densities, &w, p.pi1()))
    }

    pub fn densities(&self) -> &Arc<DensityTable> {
        &self.densities
    }

    pub fn lattice(&self) -> &Lattice {
        self.densities.lattice()
    }

    pub fn horizon(&self) -> usize {
        self.densities.horizon()
    }

    #[inline]
    pub fn l(&self, n: usize, s: usize) -> f64 {
        self.l[n][s]
    }

    pub fn l0(&self) -> f64 {
        self.l[0][0]
    }

    pub fn stage_l(&self, n: usize) -> &[f64] {
        &self.l[n]
    }

    #[inline]
    pub fn decision(&self, n: usize, s: usize) -> usize {
        self.decision[n][s] as usize
    }

    pub fn tie_set(&self, n: usize, s: usize) -> Vec<usize> {
        mask_to_vec(self.ties[n][s])
    }

    pub fn is_tied(&self, n: usize, s: usize) -> bool {
        self.ties[n][s].count_ones() > 1
    }

    /// Per-stage Bayes decisions, `result[n][s]`, stage 0 included.
    pub fn decisions(&self) -> &[Vec<u16>] {
        &self.decision
    }

    /// `sum over all histories of stage n of l_n`.
    pub fn stagewise_risk(&self, n: usize) -> f64 {
        let lat = self.lattice();
        self.l[n]
            .iter()
            .enumerate()
            .map(|(s, v)| lat.multiplicity(n, s) * v)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesDecision {
    pub decision: usize,
    /// The attained minimum `l_n(h)`.
    pub loss: f64,
    /// Every minimizing decision, in increasing order.
    pub ties: Vec<usize>,
}

/// Bayes decision for one history, optionally under group multipliers.
pub fn bayes_decide(p: &Problem, h: &[Symbol], lambda: Option<&[f64]>) -> Result<BayesDecision> {
    let w = effective_loss(p, lambda)?;
    let f: Vec<f64> = (0..p.num_params())
        .map(|t| joint_density(p, t, h))
        .collect::<Result<_>>()?;
    let pi1 = p.pi1();
    let values: Vec<f64> = (0..p.num_decisions())
        .map(|d| (0..p.num_params()).map(|t| w[t][d] * f[t] * pi1[t]).sum())
        .collect();
    let (decision, loss, mask) = bayes_argmin(&values);
    Ok(BayesDecision {
        decision,
        loss,
        ties: mask_to_vec(mask),
    })
}

/// Stagewise Bayes risks `sum_h l_n(h)` for `n = 1..=n_max`.
pub fn stagewise_bayes_risks(p: &Problem, n_max: usize) -> Result<Vec<f64>> {
    let dens = Arc::new(DensityTable::for_engine(p, Engine::Auto, n_max)?);
    let table = HistoryTable::for_problem(p, dens);
    Ok((1..=n_max).map(|n| table.stagewise_risk(n)).collect())
}

/// `sum over all K^n histories of l_n`.
pub fn stagewise_bayes_risk(p: &Problem, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::DimensionMismatch("stage must be at least 1".into()));
    }
    Ok(*stagewise_bayes_risks(p, n)?.last().unwrap())
}

/// Posterior over parameters given `h`, proportional to `f_theta^n(h) pi1(theta)`.
pub fn posterior(p: &Problem, h: &[Symbol]) -> Result<Vec<f64>> {
    let weights: Vec<f64> = (0..p.num_params())
        .map(|t| joint_density(p, t, h).map(|f| f * p.pi1()[t]))
        .collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroProbabilityHistory(h.to_vec()));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Posterior risk `l_n / f^n`. Meaningful when `pi1 = pi2`.
pub fn posterior_risk(p: &Problem, h: &[Symbol]) -> Result<f64> {
    let f = mixture_density(p, h, PriorSelect::Pi2)?;
    if f <= 0.0 {
        return Err(Error::ZeroProbabilityHistory(h.to_vec()));
    }
    Ok(bayes_decide(p, h, None)?.loss / f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::instance_b;
    use crate::model::{ObservationModel, Problem};
    use proptest::prelude::*;

    fn complementary() -> Problem {
        let mut spec = instance_b().into_spec();
        spec.obs = ObservationModel::Iid {
            alphabet_size: 2,
            pmf: vec![vec![0.7, 0.3], vec![0.3, 0.7]],
        };
        Problem::new(spec).unwrap()
    }

    fn uninformative() -> Problem {
        let mut spec = instance_b().into_spec();
        spec.obs = ObservationModel::Iid {
            alphabet_size: 2,
            pmf: vec![vec![0.4, 0.6], vec![0.4, 0.6]],
        };
        Problem::new(spec).unwrap()
    }

    #[test]
    fn decide_after_one_success() {
        let b = bayes_decide(&instance_b(), &[1], None).unwrap();
        assert_eq!(b.decision, 1);
        assert!((b.loss - 0.10).abs() < 1e-15);
        assert_eq!(b.ties, vec![1]);
    }

    #[test]
    fn empty_history_is_a_symmetric_tie() {
        let b = bayes_decide(&instance_b(), &[], None).unwrap();
        assert_eq!(b.loss, 0.5);
        assert_eq!(b.ties, vec![0, 1]);
        assert_eq!(b.decision, 0);
    }

    #[test]
    fn equal_likelihoods_tie() {
        let b = bayes_decide(&complementary(), &[1, 0], None).unwrap();
        assert_eq!(b.ties, vec![0, 1]);
        assert!((b.loss - 0.105).abs() < 1e-15);
    }

    #[test]
    fn stagewise_risk_values() {
        let p = instance_b();
        assert!((stagewise_bayes_risk(&p, 1).unwrap() - 0.25).abs() < 1e-15);
        assert!((stagewise_bayes_risk(&p, 2).unwrap() - 0.225).abs() < 1e-15);
        for r in stagewise_bayes_risks(&uninformative(), 6).unwrap() {
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_examples() {
        let p = instance_b();
        let post = posterior(&p, &[1]).unwrap();
        assert!((post[0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((post[1] - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(posterior(&p, &[]).unwrap(), p.pi1().to_vec());
        assert!((posterior_risk(&p, &[1]).unwrap() - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_history() {
        let mut spec = instance_b().into_spec();
        spec.obs = ObservationModel::Iid {
            alphabet_size: 2,
            pmf: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        let p = Problem::new(spec).unwrap();
        assert!(matches!(posterior(&p, &[1]), Err(Error::ZeroProbabilityHistory(_))));
    }

    #[test]
    fn count_and_tree_tables_agree() {
        let p = instance_b();
        let tree = Arc::new(DensityTable::build(&p, LatticeKind::HistoryTree, 6, 1 << 20).unwrap());
        let counts = Arc::new(DensityTable::build(&p, LatticeKind::CountVector, 6, 1 << 20).unwrap());
        let ht = HistoryTable::for_problem(&p, tree.clone());
        let hc = HistoryTable::for_problem(&p, counts.clone());
        for n in 0..=6 {
            for s in 0..tree.lattice().stage_len(n) {
                let h = tree.lattice().history(n, s);
                let c = counts.lattice().state_of(&h).unwrap();
                assert!((ht.l(n, s) - hc.l(n, c)).abs() < 1e-15);
                assert!((tree.mix(n, s) - counts.mix(n, c)).abs() < 1e-15);
            }
            assert!((ht.stagewise_risk(n) - hc.stagewise_risk(n)).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn bayes_loss_is_pointwise_minimal(
            a in 0.01f64..0.99, b in 0.01f64..0.99, prior in 0.05f64..0.95,
            h in proptest::collection::vec(0usize..2, 0..8), d in 0usize..2,
        ) {
            let mut spec = instance_b().into_spec();
            spec.obs = ObservationModel::Iid { alphabet_size: 2, pmf: vec![vec![1.0 - a, a], vec![1.0 - b, b]] };
            spec.priors.pi1 = vec![prior, 1.0 - prior];
            let p = Problem::new(spec).unwrap();
            let best = bayes_decide(&p, &h, None).unwrap();
            let candidate: f64 = (0..2)
                .map(|t| p.loss().matrix[t][d] * joint_density(&p, t, &h).unwrap() * p.pi1()[t])
                .sum();
            prop_assert!(candidate >= best.loss);
            let post = posterior(&p, &h).unwrap();
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn multiplier_scaling_scales_loss(alpha in 0.01f64..100.0, h in proptest::collection::vec(0usize..2, 0..6)) {
            let mut spec = instance_b().into_spec();
            spec.constraints = Some(crate::model::ConstraintSpec { groups: vec![vec![0, 1]], bounds: vec![0.1], multipliers: None });
            let p = Problem::new(spec).unwrap();
            let base = bayes_decide(&p, &h, Some(&[1.0])).unwrap();
            let scaled = bayes_decide(&p, &h, Some(&[alpha])).unwrap();
            prop_assert!((scaled.loss - alpha * base.loss).abs() <= 1e-12 * scaled.loss.abs().max(1e-300));
            prop_assert_eq!(scaled.ties, base.ties);
        }

        #[test]
        fn posterior_risk_times_mixture_is_l(h in proptest::collection::vec(0usize..2, 1..7)) {
            let p = instance_b();
            let f = mixture_density(&p, &h, PriorSelect::Pi2).unwrap();
            let l = bayes_decide(&p, &h, None).unwrap().loss;
            prop_assert!((posterior_risk(&p, &h).unwrap() * f - l).abs() < 1e-15);
        }
    }
}
