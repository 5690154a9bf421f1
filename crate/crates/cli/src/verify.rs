//! The oracle suite behind `agp verify`.

use agp_core::env::{step_exactly_one, step_parity, EnvSpec, GameKind};
use agp_core::oracles::{
    best_product_kl, brute_force_joint_success, closed_form_kl, exactly_one_sweep, greedy_vs_joint, independent_exactly_one_bound,
    independent_topk_bound, latent_matching_optimum, latent_matching_value, pairwise_fit_residual, parity_delta, sweep_confirms_maximum,
    JointDistribution, LatentAccess, PairwiseDecomposition,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Order in which oracle ops are reported.
pub const OPS: [&str; 10] = [
    "independent_topk_bound",
    "sweep_confirms_maximum",
    "best_product_kl",
    "closed_form_kl",
    "parity_delta",
    "pairwise_fit_residual",
    "greedy_vs_joint",
    "latent_matching_optimum",
    "independent_exactly_one_bound",
    "brute_force_joint_success",
];

/// Deliberate corruption used to test that failures are reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    /// Multiplies every independent Top-K bound before it is checked.
    pub topk_bound_factor: f64,
}

impl Default for Injection {
    fn default() -> Self {
        Self { topk_bound_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub op: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {}: {} ({})", if self.passed { "PASS" } else { "FAIL" }, self.op, self.name, self.detail)
    }
}

#[derive(Debug, Serialize)]
pub struct OpSummary {
    pub op: &'static str,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub passed: bool,
    pub ops: Vec<OpSummary>,
}

pub fn summarize(checks: &[Check]) -> Summary {
    let ops: Vec<OpSummary> = OPS
        .iter()
        .map(|&op| {
            let mine: Vec<Check> = checks.iter().filter(|c| c.op == op).cloned().collect();
            OpSummary {
                op,
                passed: mine.iter().all(|c| c.passed),
                checks: mine,
            }
        })
        .collect();
    Summary {
        passed: checks.iter().all(|c| c.passed),
        ops,
    }
}

struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, op: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.0.push(Check {
            op,
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn close(&mut self, op: &'static str, name: impl Into<String>, got: Result<f64, String>, want: f64, tol: f64) {
        match got {
            Ok(v) => self.push(op, name, (v - want).abs() <= tol, format!("got {v:.12}, want {want:.12} ± {tol:e}")),
            Err(e) => self.push(op, name, false, format!("error: {e}")),
        }
    }
}

fn parity3(a: usize, b: usize, c: usize) -> f64 {
    step_parity(&[a, b, c]).map(|s| s.reward).unwrap_or(f64::NAN)
}

/// Run every oracle check.
pub fn run_checks(inj: &Injection) -> Vec<Check> {
    let mut c = Checks(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bound = |n, k| independent_topk_bound(n, k).map(|b| b * inj.topk_bound_factor).map_err(|e| e.to_string());

    let op = "independent_topk_bound";
    c.close(op, "N=5 K=2 is 216/625", bound(5, 2), 216.0 / 625.0, 1e-10);
    c.close(op, "N=6 K=2 is 240/729", bound(6, 2), 240.0 / 729.0, 1e-10);
    for n in 1..=10 {
        c.close(op, format!("N=K={n} is 1"), bound(n, n), 1.0, 1e-12);
    }
    let rejected = independent_topk_bound(6, 9).is_err() && independent_topk_bound(31, 2).is_err() && independent_topk_bound(4, 0).is_err();
    c.push(op, "out-of-range arguments rejected", rejected, "K > N, N > 30, K = 0");

    let op = "sweep_confirms_maximum";
    for (n, k) in [(6, 2), (5, 2), (2, 1), (4, 4), (10, 3)] {
        let ok = sweep_confirms_maximum(n, k, 10_001);
        c.push(op, format!("N={n} K={k} grid 10001"), ok == Ok(true), format!("{ok:?}"));
    }

    let op = "best_product_kl";
    let product = JointDistribution::new(vec![2, 2], vec![0.06, 0.14, 0.24, 0.56]).expect("valid table");
    match best_product_kl(&product) {
        Ok(p) => {
            let m = &p.policy.marginals;
            let ok = p.kl.abs() < 1e-12 && (m[0][1] - 0.8).abs() < 1e-12 && (m[1][1] - 0.7).abs() < 1e-12;
            c.push(op, "product target recovered with KL 0", ok, format!("kl {:e}, marginals {m:?}", p.kl));
        }
        Err(e) => c.push(op, "product target recovered with KL 0", false, e.to_string()),
    }
    for n in 2..=6 {
        let name = format!("uniform one-hot N={n}");
        match JointDistribution::uniform_one_hot(n).and_then(|t| best_product_kl(&t)) {
            Ok(p) => {
                let off = p.policy.marginals.iter().map(|m| (m[1] - 1.0 / n as f64).abs()).fold(0.0, f64::max);
                let want = -((n - 1) as f64) * (1.0 - 1.0 / n as f64).ln();
                let ok = off < 1e-9 && (p.kl - want).abs() < 1e-9 && p.refinement_gain <= 1e-9 && !p.infinite;
                c.push(op, name, ok, format!("kl {:.12}, marginal error {off:e}, refinement gain {:e}", p.kl, p.refinement_gain));
            }
            Err(e) => c.push(op, name, false, e.to_string()),
        }
    }
    let point = JointDistribution::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).expect("valid table");
    let ok = best_product_kl(&point).map(|p| !p.infinite && (p.kl - 2f64.ln()).abs() < 1e-12);
    c.push(op, "correlated pair costs ln 2", ok == Ok(true), format!("{ok:?}"));

    let op = "closed_form_kl";
    c.close(op, "N=2 is ln 2", closed_form_kl(2).map_err(|e| e.to_string()), 2f64.ln(), 1e-15);
    c.close(op, "N=4 is 3 ln(4/3)", closed_form_kl(4).map_err(|e| e.to_string()), 3.0 * (4.0f64 / 3.0).ln(), 1e-15);
    for n in 2..=6 {
        let got = closed_form_kl(n).map_err(|e| e.to_string());
        let numeric = JointDistribution::uniform_one_hot(n).and_then(|t| best_product_kl(&t)).map(|p| p.kl).unwrap_or(f64::NAN);
        c.close(op, format!("N={n} matches enumeration"), got, numeric, 1e-9);
    }
    let bounds = (2..=10).all(|n| closed_form_kl(n).map(|v| v >= 1.0 - 1.0 / n as f64) == Ok(true));
    c.push(op, "at least 1 - 1/N for N in 2..=10", bounds, "lower bound");

    let op = "parity_delta";
    let delta = parity_delta(parity3);
    // 000, 011, 101 and 110 all have even bit sums, so each carries sign +1.
    c.push(op, "parity indicator is 4", delta == 4.0, format!("got {delta}"));
    c.push(op, "constant table is 0", parity_delta(|_, _, _| 2.5) == 0.0, "alternating sum");
    let worst = (0..20)
        .map(|_| {
            let d = PairwiseDecomposition::random(3, &mut rng);
            parity_delta(|a, b, cc| d.eval(&[a, b, cc])).abs()
        })
        .fold(0.0, f64::max);
    c.push(op, "20 pairwise tables give 0", worst < 1e-12, format!("max |delta| {worst:e}"));

    let op = "pairwise_fit_residual";
    let parity_table: Vec<f64> = (0..8).map(|code| parity3(code >> 2 & 1, code >> 1 & 1, code & 1)).collect();
    match pairwise_fit_residual(&parity_table, 3) {
        Ok(r) => c.push(op, "parity N=3 is not pairwise", r > 0.1, format!("residual {r:.6}")),
        Err(e) => c.push(op, "parity N=3 is not pairwise", false, e.to_string()),
    }
    for n in 3..=5 {
        let worst = (0..20)
            .map(|_| {
                let d = PairwiseDecomposition::random(n, &mut rng);
                pairwise_fit_residual(&d.table(), n).unwrap_or(f64::INFINITY)
            })
            .fold(0.0, f64::max);
        c.push(op, format!("20 pairwise tables N={n} fit exactly"), worst < 1e-8, format!("max residual {worst:e}"));
    }
    let one_table: Vec<f64> = (0..8)
        .map(|code| step_exactly_one(&[code >> 2 & 1, code >> 1 & 1, code & 1]).map(|s| s.reward).unwrap_or(f64::NAN))
        .collect();
    let r = pairwise_fit_residual(&one_table, 3);
    c.push(op, "exactly-one N=3 residual (informational)", r.as_ref().is_ok_and(|r| r.is_finite()), format!("{r:?}"));
    c.push(op, "N=13 rejected", pairwise_fit_residual(&vec![0.0; 1 << 13], 13).is_err(), "size limit");

    let op = "greedy_vs_joint";
    let g = greedy_vs_joint(&[0.0, 1.0], &[0.0, 1.0], &[vec![3.0, -2.0], vec![-2.0, 0.0]]);
    let ok = g.as_ref().is_ok_and(|g| g.greedy == (1, 1) && g.optimal == (0, 0) && !g.matches);
    c.push(op, "mismatch tables: greedy (1,1), optimal (0,0)", ok, format!("{g:?}"));
    let g = greedy_vs_joint(&[0.3, 0.1], &[-1.0, 2.0], &[vec![0.0; 2], vec![0.0; 2]]);
    c.push(op, "separable tables agree", g.as_ref().is_ok_and(|g| g.matches), format!("{g:?}"));

    let op = "latent_matching_optimum";
    for grid in [2, 101] {
        let r = latent_matching_optimum(grid);
        let ok = r.as_ref().is_ok_and(|&(p, q, v)| (v - 0.5).abs() <= 1e-12 && p == q && (p == 0.0 || p == 1.0));
        c.push(op, format!("grid {grid} reaches 1/2 at a corner"), ok, format!("{r:?}"));
    }
    c.close(op, "J(1/2, 1/2) is 1/4", Ok(latent_matching_value(0.5, 0.5)), 0.25, 0.0);

    let op = "independent_exactly_one_bound";
    c.close(op, "N=2 is 1/2", independent_exactly_one_bound(2).map_err(|e| e.to_string()), 0.5, 1e-15);
    c.close(op, "N=4 is 27/64", independent_exactly_one_bound(4).map_err(|e| e.to_string()), 27.0 / 64.0, 1e-15);
    let (p, v) = exactly_one_sweep(4, 10_001);
    c.push(op, "N=4 grid sweep agrees", (v - 27.0 / 64.0).abs() < 1e-12 && (p - 0.25).abs() < 1e-12, format!("max {v:.12} at p={p}"));
    let seq: Vec<f64> = (2..=10).map(|n| independent_exactly_one_bound(n).unwrap_or(f64::NAN)).collect();
    let decreasing = seq.windows(2).all(|w| w[1] < w[0]) && seq.iter().all(|&x| x > (-1f64).exp());
    c.push(op, "decreasing toward 1/e for N in 2..=10", decreasing, format!("{:.6}", seq[seq.len() - 1]));

    let op = "brute_force_joint_success";
    let cases = [
        ("top-K N=6 K=2", EnvSpec::topk(6, 2), LatentAccess::Oracle, 1.0),
        ("anti-coordination N=6 K=2", EnvSpec::anticoord(6, 2, 0.1, 0.5), LatentAccess::Oracle, 1.0),
        ("exactly-one N=4", EnvSpec::new(GameKind::ExactlyOne, 4), LatentAccess::Oracle, 1.0),
        ("latent matching, state visible", EnvSpec::new(GameKind::LatentMatching, 2), LatentAccess::Oracle, 1.0),
        ("latent matching, state hidden", EnvSpec::new(GameKind::LatentMatching, 2), LatentAccess::Blind, 0.5),
    ];
    for (name, spec, access, want) in cases {
        let got = brute_force_joint_success(&spec, 200, access, &mut rng).map_err(|e| e.to_string());
        c.close(op, name, got, want, 1e-12);
    }

    let op = "independent_topk_bound";
    let mut gap_ok = true;
    for n in 2..=8 {
        for k in 1..n {
            let b = bound(n, k).unwrap_or(f64::NAN);
            let central = brute_force_joint_success(&EnvSpec::topk(n, k), 20, LatentAccess::Oracle, &mut rng).unwrap_or(f64::NAN);
            gap_ok &= b < central && central == 1.0;
        }
    }
    c.push(op, "independent bound below centralized success, 0 < K < N ≤ 8", gap_ok, "strict gap");
    c.0
}
