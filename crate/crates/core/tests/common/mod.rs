//! Fixtures and an independent enumeration oracle for integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use seqopt::model::{ConstraintSpec, LossSpec, ObservationModel, ParameterSpace, Priors, Problem, ProblemSpec};

pub const COSTS: [f64; 6] = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Two-hypothesis iid problem with uniform priors, 0-1 loss, c = 0.02 and one
/// constraint group per hypothesis.
pub fn two_point(pmf: &[Vec<f64>]) -> Problem {
    let params = ParameterSpace::new(["theta1", "theta2"]);
    Problem::new(ProblemSpec {
        loss: LossSpec::zero_one(&params),
        params,
        obs: ObservationModel::Iid {
            alphabet_size: pmf[0].len(),
            pmf: pmf.to_vec(),
        },
        priors: Priors::uniform(2),
        cost: 0.02,
        constraints: Some(ConstraintSpec {
            groups: vec![vec![0], vec![1]],
            bounds: vec![0.1, 0.1],
            multipliers: None,
        }),
    })
    .unwrap()
}

/// [`two_point`] with Bernoulli observations, `ps[i] = P(1 | theta_i)`.
pub fn bernoulli(ps: &[f64]) -> Problem {
    two_point(&ps.iter().map(|&p| vec![1.0 - p, p]).collect::<Vec<_>>())
}

/// P(1|theta1) = 0.2, P(1|theta2) = 0.7, uniform priors, 0-1 loss, c = 0.02.
pub fn instance_b() -> Problem {
    bernoulli(&[0.2, 0.7])
}

/// Bernoulli `(theta1, theta0, theta2)`: losses only for wrong decisions at
/// the outer points, sample size weighted at the middle point alone.
pub fn kiefer_weiss(ps: &[f64; 3]) -> Problem {
    let params = ParameterSpace::new(["theta1", "theta0", "theta2"]);
    Problem::new(ProblemSpec {
        params,
        obs: ObservationModel::Iid {
            alphabet_size: 2,
            pmf: ps.iter().map(|&p| vec![1.0 - p, p]).collect(),
        },
        loss: LossSpec {
            decisions: vec!["accept_theta1".into(), "accept_theta2".into()],
            matrix: vec![vec![0.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]],
        },
        priors: Priors {
            pi1: vec![0.5, 0.0, 0.5],
            pi2: vec![0.0, 1.0, 0.0],
        },
        cost: 0.02,
        constraints: Some(ConstraintSpec {
            groups: vec![vec![0], vec![2]],
            bounds: vec![0.05, 0.05],
            multipliers: None,
        }),
    })
    .unwrap()
}

fn simplex(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Random iid instance with `m` parameters, alphabet `k`, `m` decisions,
/// random losses, distinct priors and a cost drawn from [`COSTS`].
pub fn random_instance(rng: &mut ChaCha8Rng, m: usize, k: usize, groups: bool) -> Problem {
    let params = ParameterSpace::new((0..m).map(|i| format!("t{i}")));
    let matrix = (0..m)
        .map(|t| (0..m).map(|d| if t == d { 0.0 } else { rng.random_range(0.1..1.0) }).collect())
        .collect();
    let constraints = groups.then(|| ConstraintSpec {
        groups: vec![vec![0], (1..m).collect()],
        bounds: vec![0.1, 0.1],
        multipliers: None,
    });
    Problem::new(ProblemSpec {
        obs: ObservationModel::Iid {
            alphabet_size: k,
            pmf: (0..m).map(|_| simplex(rng, k, 0.05)).collect(),
        },
        loss: LossSpec {
            decisions: (0..m).map(|d| format!("d{d}")).collect(),
            matrix,
        },
        params,
        priors: Priors {
            pi1: simplex(rng, m, 0.2),
            pi2: simplex(rng, m, 0.2),
        },
        cost: COSTS[rng.random_range(0..COSTS.len())],
        constraints,
    })
    .unwrap()
}

fn pmf(p: &Problem) -> Vec<Vec<f64>> {
    match p.obs() {
        ObservationModel::Iid { pmf, .. } => pmf.clone(),
        _ => panic!("oracle needs an iid model"),
    }
}

/// Number of stop/continue bits for deterministic rules truncated at `n`.
pub fn bits(k: usize, n: usize) -> u32 {
    (1..n).map(|j| k.pow(j as u32) as u32).sum()
}

/// `(N(psi), W(psi, Bayes))` of the deterministic rule `mask`, by walking
/// every history. Bit `offset(n) + index(h)` set means stop at `h`, where
/// `index` reads `h` as a base-K number (first symbol most significant).
pub fn naive_risk(p: &Problem, n_max: usize, mask: u64) -> (f64, f64) {
    let pmf = pmf(p);
    let k = p.alphabet_size();
    let m = p.num_params();
    let loss = &p.loss().matrix;
    let mut sum_n = 0.0;
    let mut sum_w = 0.0;
    // (stage, index, f_theta)
    let mut stack = vec![(0usize, 0usize, vec![1.0; m])];
    while let Some((n, idx, f)) = stack.pop() {
        let offset: usize = (1..n).map(|j| k.pow(j as u32)).sum();
        let stop = n == n_max || (n > 0 && mask >> (offset + idx) & 1 == 1);
        if stop {
            sum_n += n as f64 * (0..m).map(|t| f[t] * p.pi2()[t]).sum::<f64>();
            sum_w += (0..p.num_decisions())
                .map(|d| (0..m).map(|t| loss[t][d] * f[t] * p.pi1()[t]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            continue;
        }
        for x in 0..k {
            let g = (0..m).map(|t| f[t] * pmf[t][x]).collect();
            stack.push((n + 1, idx * k + x, g));
        }
    }
    (sum_n, sum_w)
}

/// Smallest `c N + W` over every deterministic rule truncated at `n`.
pub fn naive_optimum(p: &Problem, n: usize) -> f64 {
    let b = bits(p.alphabet_size(), n);
    (0..1u64 << b)
        .map(|mask| {
            let (nn, w) = naive_risk(p, n, mask);
            p.cost() * nn + w
        })
        .fold(f64::INFINITY, f64::min)
}
