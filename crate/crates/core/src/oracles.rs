//! Analytic and exhaustive checks: independent-execution bounds, product
//! projections under forward KL, pairwise (non-)decomposability and the
//! greedy/joint mismatch.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::env::{binary_joint_action, Env, EnvError, EnvSpec, GameKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("argument out of range: {0}")]
    Range(String),
    #[error("problem too large for dense enumeration: {0}")]
    Size(String),
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

const MAX_JOINT: usize = 1 << 20;

/// Dense probability table over a joint action space. Joint actions use
/// mixed radix with agent 0 most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    counts: Vec<usize>,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(counts: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(OracleError::Invalid("every agent needs at least one action".into()));
        }
        let size = joint_size(&counts)?;
        if probs.len() != size {
            return Err(OracleError::Invalid(format!("table has {} entries, expected {size}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(OracleError::Invalid("negative or non-finite entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(OracleError::Invalid(format!("entries sum to {total}")));
        }
        Ok(Self { counts, probs })
    }

    /// Uniform over the `n` binary joint actions with exactly one 1.
    pub fn uniform_one_hot(n: usize) -> Result<Self> {
        let counts = vec![2; n];
        let size = joint_size(&counts)?;
        let mut probs = vec![0.0; size];
        for i in 0..n {
            probs[1 << (n - 1 - i)] = 1.0 / n as f64;
        }
        Self::new(counts, probs)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn decode(&self, code: usize) -> Vec<usize> {
        decode(&self.counts, code)
    }

    pub fn marginals(&self) -> ProductPolicy {
        let mut m: Vec<Vec<f64>> = self.counts.iter().map(|&c| vec![0.0; c]).collect();
        for (code, &p) in self.probs.iter().enumerate() {
            for (i, a) in self.decode(code).into_iter().enumerate() {
                m[i][a] += p;
            }
        }
        ProductPolicy { marginals: m }
    }
}

fn joint_size(counts: &[usize]) -> Result<usize> {
    counts.iter().try_fold(1usize, |acc, &c| {
        acc.checked_mul(c)
            .filter(|&s| s <= MAX_JOINT)
            .ok_or_else(|| OracleError::Size(format!("joint space exceeds {MAX_JOINT} actions")))
    })
}

fn decode(counts: &[usize], mut code: usize) -> Vec<usize> {
    let mut a = vec![0; counts.len()];
    for i in (0..counts.len()).rev() {
        a[i] = code % counts[i];
        code /= counts[i];
    }
    a
}

/// Independent per-agent marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPolicy {
    pub marginals: Vec<Vec<f64>>,
}

impl ProductPolicy {
    pub fn prob(&self, joint: &[usize]) -> f64 {
        joint.iter().zip(&self.marginals).map(|(&a, m)| m[a]).product()
    }
}

/// Forward KL `Σ p log(p/q)` with `0 log(0/q) = 0`; infinite when a support
/// atom of `target` has zero product mass.
pub fn kl_divergence(target: &JointDistribution, product: &ProductPolicy) -> f64 {
    let mut kl = 0.0;
    for (code, &p) in target.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let q = product.prob(&target.decode(code));
        if q == 0.0 {
            return f64::INFINITY;
        }
        kl += p * (p / q).ln();
    }
    kl
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for j in 0..k {
        c = c * (n - j) as u128 / (j + 1) as u128;
    }
    c as f64
}

/// Probability that exactly `k` of `n` agents act when each acts
/// independently with probability `p`.
pub fn topk_success(n: usize, k: usize, p: f64) -> f64 {
    binomial(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

fn check_nk(n: usize, k: usize) -> Result<()> {
    if !(1 <= k && k <= n && n <= 30) {
        return Err(OracleError::Range(format!("need 1 ≤ K ≤ N ≤ 30, got N={n} K={k}")));
    }
    Ok(())
}

/// Best success of independent Bernoulli execution on Top-K, at `p = K/N`.
pub fn independent_topk_bound(n: usize, k: usize) -> Result<f64> {
    check_nk(n, k)?;
    Ok(topk_success(n, k, k as f64 / n as f64))
}

/// True iff no point of a uniform grid on `[0, 1]` beats `p = K/N` by more
/// than 1e-12.
pub fn sweep_confirms_maximum(n: usize, k: usize, grid: usize) -> Result<bool> {
    check_nk(n, k)?;
    if grid < 2 {
        return Err(OracleError::Range("grid needs at least 2 points".into()));
    }
    let best = independent_topk_bound(n, k)?;
    let (_, max) = grid_max(grid, |p| topk_success(n, k, p));
    Ok(max <= best + 1e-12)
}

fn grid_max(grid: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    (0..grid)
        .map(|g| {
            let p = g as f64 / (grid - 1) as f64;
            (p, f(p))
        })
        .fold((0.0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductProjection {
    pub policy: ProductPolicy,
    pub kl: f64,
    pub infinite: bool,
    /// How much coordinate descent lowered the KL from the marginal product.
    pub refinement_gain: f64,
}

/// Forward-KL projection of `target` onto product policies: the product of
/// its marginals, cross-checked by coordinate descent over pairwise mass
/// transfers within each marginal.
pub fn best_product_kl(target: &JointDistribution) -> Result<ProductProjection> {
    let policy = target.marginals();
    let kl = kl_divergence(target, &policy);
    let infinite = kl.is_infinite();
    let refined = if infinite { kl } else { coordinate_descent(target, &policy, 3) };
    Ok(ProductProjection {
        policy,
        kl,
        infinite,
        refinement_gain: if infinite { 0.0 } else { (kl - refined).max(0.0) },
    })
}

fn coordinate_descent(target: &JointDistribution, start: &ProductPolicy, sweeps: usize) -> f64 {
    let mut policy = start.clone();
    let mut best = kl_divergence(target, &policy);
    for _ in 0..sweeps {
        for i in 0..policy.marginals.len() {
            let m = policy.marginals[i].len();
            for a in 0..m {
                for b in (a + 1)..m {
                    let mass = policy.marginals[i][a] + policy.marginals[i][b];
                    let eval = |theta: f64, pol: &mut ProductPolicy| {
                        pol.marginals[i][a] = theta;
                        pol.marginals[i][b] = mass - theta;
                        kl_divergence(target, pol)
                    };
                    let mut trial = policy.clone();
                    let theta = golden_section(0.0, mass, |t| eval(t, &mut trial));
                    let value = eval(theta, &mut trial);
                    if value < best {
                        best = value;
                        policy = trial;
                    }
                }
            }
        }
    }
    best
}

fn golden_section(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / 2.0
}

/// `−(N−1) ln(1 − 1/N)`, the KL from the uniform one-hot target to its
/// best product approximation. Errors if the `1 − 1/N` lower bound fails.
pub fn closed_form_kl(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(OracleError::Range(format!("need N ≥ 2, got {n}")));
    }
    let nf = n as f64;
    let value = -(nf - 1.0) * (1.0 - 1.0 / nf).ln();
    if value < 1.0 - 1.0 / nf {
        return Err(OracleError::Invalid(format!("lower bound 1 - 1/N violated at N={n}")));
    }
    Ok(value)
}

/// Alternating sum `Σ (−1)^{a1+a2+a3} F(a1, a2, a3)` over `{0,1}³`.
pub fn parity_delta(f: impl Fn(usize, usize, usize) -> f64) -> f64 {
    let mut delta = 0.0;
    for code in 0..8 {
        let a = binary_joint_action(code, 3);
        let sign = if (a[0] + a[1] + a[2]).is_multiple_of(2) { 1.0 } else { -1.0 };
        delta += sign * f(a[0], a[1], a[2]);
    }
    delta
}

/// `c + Σ u_i(a_i) + Σ_{i<j} u_ij(a_i, a_j)` over binary actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDecomposition {
    pub constant: f64,
    pub unary: Vec<[f64; 2]>,
    /// Indexed by `(i, j)` with `i < j` in lexicographic order.
    pub pairwise: Vec<((usize, usize), [[f64; 2]; 2])>,
}

impl PairwiseDecomposition {
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut draw = || rng.gen_range(-1.0..1.0);
        let constant = draw();
        let unary = (0..n).map(|_| [draw(), draw()]).collect();
        let mut pairwise = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                pairwise.push(((i, j), [[draw(), draw()], [draw(), draw()]]));
            }
        }
        Self {
            constant,
            unary,
            pairwise,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.unary.len()
    }

    pub fn eval(&self, a: &[usize]) -> f64 {
        let unary: f64 = self.unary.iter().zip(a).map(|(u, &x)| u[x]).sum();
        let pair: f64 = self.pairwise.iter().map(|&((i, j), t)| t[a[i]][a[j]]).sum();
        self.constant + unary + pair
    }

    /// Full `2^N` table, agent 0 most significant.
    pub fn table(&self) -> Vec<f64> {
        let n = self.num_agents();
        (0..1usize << n).map(|code| self.eval(&binary_joint_action(code, n))).collect()
    }
}

/// Least-squares fit of a pairwise decomposition to a full binary table;
/// returns the largest absolute residual.
pub fn pairwise_fit_residual(table: &[f64], n: usize) -> Result<f64> {
    if n == 0 || n > 12 {
        return Err(OracleError::Size(format!("need 1 ≤ N ≤ 12, got {n}")));
    }
    let rows = 1usize << n;
    if table.len() != rows {
        return Err(OracleError::Invalid(format!("table has {} entries, expected {rows}", table.len())));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let cols = 1 + n + pairs.len();
    let design = DMatrix::from_fn(rows, cols, |r, c| {
        let a = binary_joint_action(r, n);
        match c {
            0 => 1.0,
            c if c <= n => a[c - 1] as f64,
            c => {
                let (i, j) = pairs[c - 1 - n];
                (a[i] * a[j]) as f64
            }
        }
    });
    let y = DVector::from_column_slice(table);
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &y;
    let coef = gram
        .cholesky()
        .ok_or_else(|| OracleError::Invalid("singular normal equations".into()))?
        .solve(&rhs);
    let fitted = &design * coef;
    Ok((fitted - y).amax())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GreedyVsJoint {
    pub greedy: (usize, usize),
    pub optimal: (usize, usize),
    pub matches: bool,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Decentralized argmax of the unary tables against the joint argmax of
/// `u1 + u2 + u12`. Ties go to the lowest index.
pub fn greedy_vs_joint(u1: &[f64], u2: &[f64], u12: &[Vec<f64>]) -> Result<GreedyVsJoint> {
    if u1.is_empty() || u2.is_empty() || u12.len() != u1.len() || u12.iter().any(|r| r.len() != u2.len()) {
        return Err(OracleError::Invalid("table shapes disagree".into()));
    }
    let greedy = (argmax(u1), argmax(u2));
    let joint: Vec<f64> = (0..u1.len())
        .flat_map(|a| (0..u2.len()).map(move |b| u1[a] + u2[b] + u12[a][b]))
        .collect();
    let best = argmax(&joint);
    let optimal = (best / u2.len(), best % u2.len());
    Ok(GreedyVsJoint {
        greedy,
        optimal,
        matches: greedy == optimal,
    })
}

/// Expected reward on the latent matching game when agent 1 plays 1 with
/// probability `p` and agent 2 with probability `q`.
pub fn latent_matching_value(p: f64, q: f64) -> f64 {
    0.5 * (1.0 - p) * (1.0 - q) + 0.5 * p * q
}

/// Grid search over `(p, q) ∈ [0,1]²`; first maximizer in row-major order.
pub fn latent_matching_optimum(grid: usize) -> Result<(f64, f64, f64)> {
    if grid < 2 {
        return Err(OracleError::Range("grid needs at least 2 points".into()));
    }
    let step = 1.0 / (grid - 1) as f64;
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for i in 0..grid {
        for j in 0..grid {
            let (p, q) = (i as f64 * step, j as f64 * step);
            let v = latent_matching_value(p, q);
            if v > best.2 {
                best = (p, q, v);
            }
        }
    }
    Ok(best)
}

pub fn exactly_one_success(n: usize, p: f64) -> f64 {
    n as f64 * p * (1.0 - p).powi(n as i32 - 1)
}

/// `(1 − 1/N)^{N−1}`, the best exactly-one success of i.i.d. Bernoulli
/// execution.
pub fn independent_exactly_one_bound(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(OracleError::Range("need N ≥ 1".into()));
    }
    Ok((1.0 - 1.0 / n as f64).powi(n as i32 - 1))
}

/// Grid maximum of the exactly-one success curve, for cross-checking.
pub fn exactly_one_sweep(n: usize, grid: usize) -> (f64, f64) {
    grid_max(grid, |p| exactly_one_success(n, p))
}

/// What the exhaustive search may condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentAccess {
    /// The hidden state is visible to the maximization.
    Oracle,
    /// Joint actions must not depend on the hidden state; the search
    /// maximizes the exact expectation over it.
    Blind,
}

/// Monte Carlo over resets of the best success achievable by a centralized
/// controller that enumerates every joint action.
pub fn brute_force_joint_success<R: Rng + ?Sized>(spec: &EnvSpec, samples: usize, access: LatentAccess, rng: &mut R) -> Result<f64> {
    let n = spec.num_agents;
    if n > 12 || spec.num_actions != 2 {
        return Err(OracleError::Size(format!("need N ≤ 12 binary agents, got N={n}")));
    }
    if samples == 0 {
        return Err(OracleError::Range("need at least one sample".into()));
    }
    let mut env = Env::new(spec.clone())?;
    let joint: Vec<Vec<usize>> = (0..1usize << n).map(|c| binary_joint_action(c, n)).collect();
    let latent = spec.game == GameKind::LatentMatching;
    let mut total = 0.0;
    for _ in 0..samples {
        env.reset(rng);
        let best = if latent && access == LatentAccess::Blind {
            let mut best = 0.0f64;
            for a in &joint {
                let mut mean = 0.0;
                for s in 0..2 {
                    env.set_latent(s);
                    mean += f64::from(u8::from(env.step(a)?.success)) / 2.0;
                }
                best = best.max(mean);
            }
            best
        } else {
            let mut hit = false;
            for a in &joint {
                if env.step(a)?.success {
                    hit = true;
                    break;
                }
            }
            f64::from(u8::from(hit))
        };
        total += best;
    }
    Ok(total / samples as f64)
}
