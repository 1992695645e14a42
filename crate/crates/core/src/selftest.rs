//! Deterministic property suite behind the `selftest` subcommand.
//!
//! Each check returns a one-line summary on success or a diagnostic on the
//! first violated bound. The acceptance tests call the same functions, so
//! the CLI and the test suite cannot drift apart.

use ndarray::{Array1, Array2};
use std::time::Instant;

use crate::calibration::{build_fit_dataset, fit_kl, fit_ls, kl_objective};
use crate::ctransform::{
    gibbs_plan, key_closure_coupling, key_ctransform, reconstruct, two_sided_duals,
    ReconstructionMode,
};
use crate::metrics::oracle_ot_1d;
use crate::numerics::{argsort_stable, center, gaussian_vector, keyed_rng, stream_key};
use crate::sinkhorn::{
    build_kernels, marginal_targets, sinkhorn_on_cost, sinkhorn_run, AttentionCase, KernelKind,
    KeyMask, TeacherConfig,
};
use crate::sliced::{feature_matrix, slice_potential_1d, SliceBank};
use rand::Rng;

pub type CheckResult = std::result::Result<String, String>;

fn rel_frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den
}

fn random_case(seed: u64, n: usize, d_h: usize, d_v: usize, mask: Option<KeyMask>) -> AttentionCase {
    let q = Array2::from_shape_vec((n, d_h), gaussian_vector(seed, &[1], n * d_h)).unwrap();
    let k = Array2::from_shape_vec((n, d_h), gaussian_vector(seed, &[2], n * d_h)).unwrap();
    let v = Array2::from_shape_vec((n, d_v), gaussian_vector(seed, &[3], n * d_v)).unwrap();
    AttentionCase::new(q, k, v, mask).unwrap()
}

/// Criterion 1 — marginal exactness of the entropic closures.
///
/// 200 random cases with N in 2..=64: one-sided plans hit the key marginal
/// to 1e-12, two-sided column-ending plans likewise, and masked variants
/// zero out padded columns exactly.
pub fn check_marginal_exactness() -> CheckResult {
    let mut worst: f64 = 0.0;
    for trial in 0..200u64 {
        let mut rng = keyed_rng(0xc1, &[trial]);
        let n = rng.random_range(2..=64usize);
        let masked = trial % 3 == 2 && n >= 3;
        let mask = if masked {
            let active = 1 + (trial as usize % (n - 1));
            Some(KeyMask::trailing(n, active).unwrap())
        } else {
            None
        };
        let case = random_case(stream_key(0xc1a, &[trial]), n, 4, 1, mask);
        let cost = build_kernels(&case.q, &case.k).cost;
        let (mu, nu) = marginal_targets(n, case.key_mask.as_ref());
        let f_hat = center(&Array1::from_vec(gaussian_vector(0xc1b, &[trial], n)));
        let eps = 0.5 + (trial % 4) as f64 * 0.5;

        let one = key_closure_coupling(&f_hat, &cost, &nu, eps);
        let two = {
            let d = two_sided_duals(&f_hat, &cost, &mu, &nu, eps);
            gibbs_plan(&d.f_plus, &d.g_plus, &cost, eps, mu.clone(), nu.clone()).coupling
        };
        for (name, plan) in [("one-sided", &one), ("two-sided", &two)] {
            for j in 0..n {
                let err = (plan.column(j).sum() - nu[j]).abs();
                worst = worst.max(err);
                if err > 1e-12 {
                    return Err(format!(
                        "{name} column {j} off target by {err:.3e} (trial {trial}, n={n})"
                    ));
                }
                if nu[j] == 0.0 && plan.column(j).iter().any(|&x| x != 0.0) {
                    return Err(format!(
                        "padded column {j} not exactly zero (trial {trial}, n={n})"
                    ));
                }
            }
        }
    }
    Ok(format!("200 cases, worst column-sum error {worst:.2e} <= 1e-12"))
}

/// Criterion 2 — the closure-ready teacher dual fed to the one-sided
/// operator reproduces the column-ending teacher plan to 1e-10 relative
/// Frobenius for S in {2, 4, 10, 20}, both kernels, masked and not.
pub fn check_teacher_recovery() -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut trial = 0u64;
    for &budget in &[2u32, 4, 10, 20] {
        for kernel in [KernelKind::Score, KernelKind::QuadraticCost] {
            for masked in [false, true] {
                trial += 1;
                let mut rng = keyed_rng(0xc2, &[trial]);
                let n = rng.random_range(2..=64usize);
                let mask = if masked && n >= 3 {
                    Some(KeyMask::trailing(n, n - n / 3).unwrap())
                } else {
                    None
                };
                let case = random_case(stream_key(0xc2a, &[trial]), n, 6, 2, mask);
                let cfg = TeacherConfig::new(1.0, budget, kernel);
                let trace = sinkhorn_run(&case, &cfg).unwrap();
                let f_t = center(&trace.closure_ready_f);
                let plan = reconstruct(
                    &f_t,
                    &trace.cost,
                    &cfg,
                    case.key_mask.as_ref(),
                    ReconstructionMode::OneSided,
                );
                let rel = rel_frobenius(&plan.coupling, &trace.final_plan.coupling);
                worst = worst.max(rel);
                if rel > 1e-10 {
                    return Err(format!(
                        "S={budget} {kernel:?} masked={masked} n={n}: recovery error {rel:.3e}"
                    ));
                }
            }
        }
    }
    Ok(format!("S in {{2,4,10,20}} x kernels x masks, worst rel error {worst:.2e} <= 1e-10"))
}

/// Criterion 3 — 1D oracle equivalence: 500 random supports with N <= 7;
/// the sorted matching attains the brute-force permutation minimum to
/// 1e-12, and the closed-form potential with its conjugate is feasible and
/// tight to 1e-9.
pub fn check_oned_oracle() -> CheckResult {
    for trial in 0..500u64 {
        let mut rng = keyed_rng(0xc3, &[trial]);
        let n = rng.random_range(2..=7usize);
        let a = gaussian_vector(stream_key(0xc3a, &[trial]), &[1], n);
        let b = gaussian_vector(stream_key(0xc3a, &[trial]), &[2], n);

        let (min_cost, _) = oracle_ot_1d(&a, &b);
        let ia = argsort_stable(&a);
        let ib = argsort_stable(&b);
        let sorted_cost: f64 = ia
            .iter()
            .zip(ib.iter())
            .map(|(&i, &j)| 0.5 * (a[i] - b[j]) * (a[i] - b[j]))
            .sum();
        if (sorted_cost - min_cost).abs() > 1e-12 * min_cost.max(1.0) {
            return Err(format!(
                "trial {trial}: sorted cost {sorted_cost} vs brute-force {min_cost}"
            ));
        }

        let f = slice_potential_1d(&a, &b);
        let a_sorted: Vec<f64> = ia.iter().map(|&i| a[i]).collect();
        let b_sorted: Vec<f64> = ib.iter().map(|&j| b[j]).collect();
        let f_sorted: Vec<f64> = ia.iter().map(|&i| f[i]).collect();
        let phi: Vec<f64> =
            (0..n).map(|r| 0.5 * a_sorted[r] * a_sorted[r] - f_sorted[r]).collect();
        for s in 0..n {
            let conj = (0..n)
                .map(|r| a_sorted[r] * b_sorted[s] - phi[r])
                .fold(f64::NEG_INFINITY, f64::max);
            let h = 0.5 * b_sorted[s] * b_sorted[s] - conj;
            for r in 0..n {
                let c = 0.5 * (a_sorted[r] - b_sorted[s]) * (a_sorted[r] - b_sorted[s]);
                if f_sorted[r] + h > c + 1e-9 {
                    return Err(format!(
                        "trial {trial}: dual infeasible at ({r},{s}) by {:.3e}",
                        f_sorted[r] + h - c
                    ));
                }
                if r == s && (f_sorted[r] + h - c).abs() > 1e-9 {
                    return Err(format!(
                        "trial {trial}: matched pair {r} not tight: gap {:.3e}",
                        f_sorted[r] + h - c
                    ));
                }
            }
        }
    }
    Ok("500 supports: sorted matching optimal to 1e-12, duals feasible/tight to 1e-9".into())
}

/// Criterion 4 — dual-error stability, two-sided stability, the two-sided
/// row-error bound, the Pinsker row bound, and the per-row output bound,
/// across 200 perturbed cases, alpha in {0.01, 0.1, 1}, eps in {0.5, 1, 2}.
pub fn check_stability_bounds() -> CheckResult {
    let alphas = [0.01, 0.1, 1.0];
    let epsilons = [0.5, 1.0, 2.0];
    let slack = 1e-10;
    for trial in 0..200u64 {
        let mut rng = keyed_rng(0xc4, &[trial]);
        let n = rng.random_range(3..=16usize);
        let case = random_case(stream_key(0xc4a, &[trial]), n, 4, 3, None);
        let cost = build_kernels(&case.q, &case.k).cost;
        let (mu, nu) = marginal_targets(n, None);
        let f = center(&Array1::from_vec(gaussian_vector(0xc4b, &[trial], n)));
        let alpha = alphas[(trial % 3) as usize];
        let eps = epsilons[((trial / 3) % 3) as usize];

        // Perturbation with exact infinity norm alpha.
        let mut delta = Array1::from_vec(gaussian_vector(0xc4c, &[trial], n));
        let dmax = delta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        delta.mapv_inplace(|x| x / dmax * alpha);
        let f_pert = &f + &delta;

        // One-sided stability: key dual moves at most alpha, plan ratios in
        // [exp(-2a/eps), exp(2a/eps)].
        let g = key_ctransform(&f, &cost, &nu, eps);
        let g_pert = key_ctransform(&f_pert, &cost, &nu, eps);
        let gmove = g
            .iter()
            .zip(g_pert.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if gmove > alpha + slack {
            return Err(format!("trial {trial}: key dual moved {gmove} > alpha {alpha}"));
        }
        let p = key_closure_coupling(&f, &cost, &nu, eps);
        let p_pert = key_closure_coupling(&f_pert, &cost, &nu, eps);
        let lo = (-2.0 * alpha / eps).exp() * (1.0 - 1e-9);
        let hi = (2.0 * alpha / eps).exp() * (1.0 + 1e-9);
        for (x, y) in p_pert.iter().zip(p.iter()) {
            let ratio = x / y;
            if !(lo..=hi).contains(&ratio) {
                return Err(format!(
                    "trial {trial}: one-sided plan ratio {ratio} outside [{lo}, {hi}]"
                ));
            }
        }

        // Two-sided stability: every produced dual moves at most alpha.
        let d = two_sided_duals(&f, &cost, &mu, &nu, eps);
        let d_pert = two_sided_duals(&f_pert, &cost, &mu, &nu, eps);
        for (name, a, b) in [
            ("g0", &d.g_zero, &d_pert.g_zero),
            ("f+", &d.f_plus, &d_pert.f_plus),
            ("g+", &d.g_plus, &d_pert.g_plus),
        ] {
            let mv = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if mv > alpha + slack {
                return Err(format!("trial {trial}: {name} moved {mv} > alpha {alpha}"));
            }
        }
        let p2 = gibbs_plan(&d.f_plus, &d.g_plus, &cost, eps, mu.clone(), nu.clone()).coupling;
        let p2_pert =
            gibbs_plan(&d_pert.f_plus, &d_pert.g_plus, &cost, eps, mu.clone(), nu.clone())
                .coupling;
        for (x, y) in p2_pert.iter().zip(p2.iter()) {
            let ratio = x / y;
            if !(lo..=hi).contains(&ratio) {
                return Err(format!(
                    "trial {trial}: two-sided plan ratio {ratio} outside [{lo}, {hi}]"
                ));
            }
        }

        // Row-error bound for the two-sided column-ending plan.
        let delta_g = d
            .g_plus
            .iter()
            .zip(d.g_zero.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let row_err: f64 = (0..n).map(|i| (p2.row(i).sum() - mu[i]).abs()).sum();
        let bound = (delta_g / eps).exp() - 1.0;
        if row_err > bound + slack {
            return Err(format!("trial {trial}: row error {row_err} > bound {bound}"));
        }

        // Pinsker row bound on the key-matched pair (P, P_pert).
        let rho = |plan: &Array2<f64>| -> f64 {
            (0..n).map(|i| (plan.row(i).sum() - mu[i]).abs()).sum()
        };
        let kl: f64 = p_pert
            .iter()
            .zip(p.iter())
            .map(|(x, y)| x * (x / y).ln())
            .sum();
        let lhs = rho(&p_pert);
        let rhs = rho(&p) + (2.0 * kl.max(0.0)).sqrt();
        if lhs > rhs + slack {
            return Err(format!("trial {trial}: Pinsker row bound {lhs} > {rhs}"));
        }

        // Output bound: ||y_hat_i - y_i|| <= N B (exp(2a/eps)-1) sum_j P_ij.
        let bmax = case
            .v
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        let y = (&p * n as f64).dot(&case.v);
        let y_pert = (&p_pert * n as f64).dot(&case.v);
        for i in 0..n {
            let mut err = 0.0;
            for t in 0..case.v.ncols() {
                let dlt = y_pert[[i, t]] - y[[i, t]];
                err += dlt * dlt;
            }
            let err = err.sqrt();
            let rowmass: f64 = p.row(i).sum();
            let b = n as f64 * bmax * ((2.0 * alpha / eps).exp() - 1.0) * rowmass;
            if err > b + slack {
                return Err(format!("trial {trial}: output row {i} error {err} > bound {b}"));
            }
        }
    }
    Ok("200 perturbed cases x (alpha, eps) grid: dual, ratio, row, Pinsker, output bounds hold"
        .into())
}

/// Criterion 5 — calibration correctness: streaming LS equals the stacked
/// oracle, the KL gradient matches central differences, the objective is
/// midpoint-convex, the ridge comparator inequality holds, and the KL fit
/// satisfies its stationarity identity at the stopping tolerance.
pub fn check_calibration() -> CheckResult {
    let teacher = TeacherConfig::new(1.0, 4, KernelKind::Score);
    let l = 4usize;
    let bank = SliceBank::sample(0xc5, l, 3);
    let cases: Vec<AttentionCase> = (0..5)
        .map(|m| random_case(stream_key(0xc5a, &[m as u64]), 6, 3, 2, None))
        .collect();
    let data = build_fit_dataset(&cases, &bank, &teacher, true).unwrap();
    let lambda = 1e-3;

    // Streaming vs stacked-oracle least squares.
    let layer = fit_ls(&data, &bank, &teacher, lambda).map_err(|e| e.to_string())?;
    let rows: usize = data.cases.iter().map(|c| c.n()).sum();
    let mut stacked = Array2::<f64>::zeros((rows, l));
    let mut target = Array1::<f64>::zeros(rows);
    let mut r = 0;
    for case in &data.cases {
        for i in 0..case.n() {
            for a in 0..l {
                stacked[[r, a]] = case.features[[i, a]];
            }
            target[r] = case.target_dual[i];
            r += 1;
        }
    }
    let mut normal = stacked.t().dot(&stacked);
    for a in 0..l {
        normal[[a, a]] += lambda;
    }
    let rhs = stacked.t().dot(&target);
    let oracle = gauss_solve(&normal, &rhs);
    for a in 0..l {
        if (layer.omega[a] - oracle[a]).abs() > 1e-9 {
            return Err(format!(
                "LS coefficient {a}: streaming {} vs stacked oracle {}",
                layer.omega[a], oracle[a]
            ));
        }
    }

    // Gradient vs central differences.
    let omega = Array1::from_vec(gaussian_vector(0xc5b, &[1], l));
    let (_, grad) = kl_objective(&omega, &data, lambda);
    let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let h = 1e-5;
    for a in 0..l {
        let mut up = omega.clone();
        up[a] += h;
        let mut down = omega.clone();
        down[a] -= h;
        let (vu, _) = kl_objective(&up, &data, lambda);
        let (vd, _) = kl_objective(&down, &data, lambda);
        let numeric = (vu - vd) / (2.0 * h);
        if (numeric - grad[a]).abs() > 1e-6 * scale {
            return Err(format!(
                "KL gradient coordinate {a}: numeric {numeric} vs analytic {}",
                grad[a]
            ));
        }
    }

    // Midpoint convexity.
    for seed in 0..20u64 {
        let w1 = Array1::from_vec(gaussian_vector(0xc5c, &[seed, 1], l));
        let w2 = Array1::from_vec(gaussian_vector(0xc5c, &[seed, 2], l));
        let (v1, _) = kl_objective(&w1, &data, lambda);
        let (v2, _) = kl_objective(&w2, &data, lambda);
        let (vm, _) = kl_objective(&(0.5 * (&w1 + &w2)), &data, lambda);
        if vm > 0.5 * (v1 + v2) + 1e-12 {
            return Err(format!("convexity violated at probe {seed}"));
        }
    }

    // Comparator inequality: R_M(w_ls) <= R_M(w0) + lambda_risk |w0|^2 with
    // the implementation ridge lambda = M N lambda_risk.
    let m = data.len() as f64;
    let n_tok = data.cases[0].n() as f64;
    let lambda_risk = lambda / (m * n_tok);
    let risk = |w: &Array1<f64>| -> f64 {
        let mut acc = 0.0;
        for case in &data.cases {
            let pred = case.features.dot(w);
            acc += pred
                .iter()
                .zip(case.target_dual.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / case.n() as f64;
        }
        acc / m
    };
    let risk_ls = risk(&layer.omega);
    for seed in 0..50u64 {
        let w0 = Array1::from_vec(gaussian_vector(0xc5d, &[seed], l));
        let bound = risk(&w0) + lambda_risk * w0.dot(&w0);
        if risk_ls > bound + 1e-12 {
            return Err(format!(
                "comparator {seed}: R(w_ls) = {risk_ls} > {bound}"
            ));
        }
    }

    // KL stationarity at the stopping tolerance.
    let kl_layer = fit_kl(&data, &bank, &teacher, lambda).map_err(|e| e.to_string())?;
    if !kl_layer.fit_stats.converged {
        return Err("KL fit hit its iteration cap".into());
    }
    let (_, g_star) = kl_objective(&kl_layer.omega, &data, lambda);
    let ginf = g_star.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (_, g_init) = kl_objective(&layer.omega, &data, lambda);
    let tol = 1e-8 * g_init.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    if ginf > tol {
        return Err(format!("stationarity residual {ginf:.3e} above tolerance {tol:.3e}"));
    }

    Ok("LS==stacked oracle to 1e-9; KL grad to 1e-6; convex; comparator and stationarity hold"
        .into())
}

/// Criterion 8 — permutation equivariance of the full compiled operator to
/// 1e-10, and shift invariance of the converged plan to 1e-8 with the
/// documented finite-budget failure as a negative check.
pub fn check_equivariance_and_shift() -> CheckResult {
    // Fit a small layer, then compare permuted and unpermuted pipelines.
    let teacher = TeacherConfig::new(1.0, 4, KernelKind::Score);
    let n = 10;
    let bank = SliceBank::sample(0xc8, 6, 3);
    let cases: Vec<AttentionCase> = (0..6)
        .map(|m| random_case(stream_key(0xc8a, &[m as u64]), n, 3, 2, None))
        .collect();
    let data = build_fit_dataset(&cases, &bank, &teacher, false).unwrap();
    let layer = fit_ls(&data, &bank, &teacher, 1e-3).map_err(|e| e.to_string())?;

    let case = random_case(stream_key(0xc8b, &[7]), n, 3, 2, None);
    let mut perm: Vec<usize> = (0..n).collect();
    // Fixed derangement-ish permutation.
    perm.rotate_left(3);
    perm.swap(0, 5);
    let permute_rows = |m: &Array2<f64>| -> Array2<f64> {
        Array2::from_shape_fn(m.raw_dim(), |(i, j)| m[[perm[i], j]])
    };
    let perm_case = AttentionCase::new(
        permute_rows(&case.q),
        permute_rows(&case.k),
        permute_rows(&case.v),
        None,
    )
    .unwrap();

    for mode in [ReconstructionMode::OneSided, ReconstructionMode::TwoSided] {
        let y = layer.head_forward(&case, mode);
        let y_perm = layer.head_forward(&perm_case, mode);
        let scale = y.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        for i in 0..n {
            for t in 0..case.v.ncols() {
                let gap = (y_perm[[i, t]] - y[[perm[i], t]]).abs();
                if gap > 1e-10 * scale {
                    return Err(format!(
                        "{mode:?}: output not equivariant at ({i},{t}): gap {gap:.3e}"
                    ));
                }
            }
        }
        // Same statement for the features themselves.
        let x = feature_matrix(&case.q, &case.k, &layer.bank, None);
        let xp = feature_matrix(&perm_case.q, &perm_case.k, &layer.bank, None);
        for i in 0..n {
            for l in 0..layer.bank.len() {
                if (xp.x[[i, l]] - x.x[[perm[i], l]]).abs() > 1e-10 {
                    return Err("feature matrix not permutation-equivariant".into());
                }
            }
        }
    }

    // Shift invariance at convergence; documented failure at S=3.
    let pair = build_kernels(&case.q, &case.k);
    let a_shift = Array1::from_vec(gaussian_vector(0xc8c, &[1], n));
    let b_shift = Array1::from_vec(gaussian_vector(0xc8c, &[2], n));
    let mut shifted = pair.cost.clone();
    for i in 0..n {
        for j in 0..n {
            shifted[[i, j]] += a_shift[i] + b_shift[j];
        }
    }
    let converged = rel_frobenius(
        &sinkhorn_on_cost(&shifted, 1.0, 2000, None).coupling,
        &sinkhorn_on_cost(&pair.cost, 1.0, 2000, None).coupling,
    );
    if converged > 1e-8 {
        return Err(format!("converged plans differ under cost shifts: rel {converged:.3e}"));
    }
    let finite = rel_frobenius(
        &sinkhorn_on_cost(&shifted, 1.0, 3, None).coupling,
        &sinkhorn_on_cost(&pair.cost, 1.0, 3, None).coupling,
    );
    if finite <= 1e-6 {
        return Err(format!(
            "S=3 plans unexpectedly shift-invariant (rel {finite:.3e}); the finite-budget \
             convention dependence is part of the contract"
        ));
    }
    Ok(format!(
        "equivariance to 1e-10; converged shift invariance rel {converged:.2e}; \
         S=3 negative check rel {finite:.2e}"
    ))
}

fn gauss_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut aug = Array2::<f64>::zeros((n, n + 1));
    for i in 0..n {
        for j in 0..n {
            aug[[i, j]] = a[[i, j]];
        }
        aug[[i, n]] = b[i];
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if aug[[r, col]].abs() > aug[[piv, col]].abs() {
                piv = r;
            }
        }
        for c in 0..=n {
            let t = aug[[col, c]];
            aug[[col, c]] = aug[[piv, c]];
            aug[[piv, c]] = t;
        }
        let p = aug[[col, col]];
        for c in 0..=n {
            aug[[col, c]] /= p;
        }
        for r in 0..n {
            if r != col {
                let factor = aug[[r, col]];
                for c in 0..=n {
                    aug[[r, c]] -= factor * aug[[col, c]];
                }
            }
        }
    }
    Array1::from_shape_fn(n, |i| aug[[i, n]])
}

/// All selftest checks in criterion order, with wall-clock per check.
pub fn run_all() -> Vec<(&'static str, CheckResult, f64)> {
    let checks: Vec<(&'static str, fn() -> CheckResult)> = vec![
        ("marginal_exactness", check_marginal_exactness),
        ("teacher_recovery", check_teacher_recovery),
        ("oned_oracle", check_oned_oracle),
        ("stability_bounds", check_stability_bounds),
        ("calibration", check_calibration),
        ("equivariance_and_shift", check_equivariance_and_shift),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let result = f();
            (name, result, t0.elapsed().as_secs_f64())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_property_checks_pass() {
        for (name, result, seconds) in run_all() {
            match result {
                Ok(detail) => println!("selftest {name}: PASS ({seconds:.2}s) {detail}"),
                Err(msg) => panic!("selftest {name} failed: {msg}"),
            }
        }
    }
}
