//! Fidelity and marginal metrics, plus the brute-force oracles the property
//! suite checks implementations against.
//!
//! Norm conventions (the tables leave them open, so they are fixed here and
//! named in every CSV header): attention relative l2 is Frobenius,
//! ||A_hat - A_ref||_F / ||A_ref||_F per case; output RMSE pools all entries
//! of (A_hat - A_ref) V.

use ndarray::Array2;

use crate::sinkhorn::KeyMask;

/// Per-operator, per-case measurement row.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub operator: String,
    pub case_index: usize,
    pub output_rmse: f64,
    pub attention_rel_l2: f64,
    pub row_err: f64,
    pub col_err: f64,
    pub plan_kl: f64,
    pub latency_ns: u64,
}

impl CaseReport {
    pub fn csv_header() -> &'static str {
        "operator,case_index,output_rmse_pooled,attention_rel_l2_frobenius,\
         row_err_attention_units,col_err_active_attention_units,plan_kl_generalized,latency_ns"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            self.operator,
            self.case_index,
            self.output_rmse,
            self.attention_rel_l2,
            self.row_err,
            self.col_err,
            self.plan_kl,
            self.latency_ns
        )
    }

    pub fn is_sane(&self) -> bool {
        [
            self.output_rmse,
            self.attention_rel_l2,
            self.row_err,
            self.col_err,
            self.plan_kl,
        ]
        .iter()
        .all(|x| x.is_finite() && *x >= 0.0)
    }
}

/// Marginal errors in attention units:
/// row error N^-1 sum_i |sum_j A_ij - 1|; column error averaged over active
/// key columns only (all columns when unmasked).
pub fn marginal_errors(a: &Array2<f64>, mask: Option<&KeyMask>) -> (f64, f64) {
    let n = a.nrows();
    let row_err = (0..n)
        .map(|i| (a.row(i).sum() - 1.0).abs())
        .sum::<f64>()
        / n as f64;
    let col_err = match mask {
        None => {
            (0..a.ncols())
                .map(|j| (a.column(j).sum() - 1.0).abs())
                .sum::<f64>()
                / a.ncols() as f64
        }
        Some(m) => {
            let active = m.active_indices();
            active
                .iter()
                .map(|&j| (a.column(j).sum() - 1.0).abs())
                .sum::<f64>()
                / active.len() as f64
        }
    };
    (row_err, col_err)
}

/// Teacher-relative fidelity of one head: (output RMSE, attention rel l2).
pub fn teacher_agreement(
    a_hat: &Array2<f64>,
    a_ref: &Array2<f64>,
    v: &Array2<f64>,
) -> (f64, f64) {
    assert_eq!(a_hat.raw_dim(), a_ref.raw_dim(), "teacher_agreement: shape mismatch");
    assert_eq!(a_ref.ncols(), v.nrows(), "teacher_agreement: value shape mismatch");
    let diff = a_hat - a_ref;
    let num = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = a_ref.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel_l2 = num / den;
    let out_diff = diff.dot(v);
    let mse = out_diff.iter().map(|x| x * x).sum::<f64>() / out_diff.len() as f64;
    (mse.sqrt(), rel_l2)
}

/// Generalized KL divergence sum_ij [P log(P/R) - P + R] for nonnegative P
/// and R positive wherever P is. Zero entries of P contribute R (the
/// 0 log 0 = 0 convention); a pair (P>0, R=0) violates the contract and
/// panics.
pub fn generalized_kl(p: &Array2<f64>, r: &Array2<f64>) -> f64 {
    assert_eq!(p.raw_dim(), r.raw_dim(), "generalized_kl: shape mismatch");
    let mut total = 0.0;
    for (pe, re) in p.iter().zip(r.iter()) {
        if *pe > 0.0 {
            assert!(
                *re > 0.0,
                "generalized_kl: reference has a zero where the plan has mass"
            );
            total += pe * (pe / re).ln() - pe + re;
        } else {
            total += re;
        }
    }
    total
}

/// Column-sharpness constant of the quadratic KL bounds: N times the
/// largest column-conditional probability along the exponential tilt path
/// pi_{j,t}(i) ~ pi_j(i) exp(t delta_i / eps), t in [0, 1], measured on a
/// uniform grid (the path maximum has no closed form; the bounds this
/// constant feeds are loose enough that grid resolution is not
/// load-bearing). `p` must be key-normalized against `nu`; padded columns
/// are skipped.
pub fn tilt_sharpness_beta(
    p: &Array2<f64>,
    delta: &ndarray::Array1<f64>,
    nu: &ndarray::Array1<f64>,
    eps: f64,
    grid: usize,
) -> f64 {
    let n = p.nrows();
    let mut beta: f64 = 0.0;
    let mut weights = vec![0.0f64; n];
    for j in 0..p.ncols() {
        if nu[j] <= 0.0 {
            continue;
        }
        for step in 0..=grid {
            let t = step as f64 / grid as f64;
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                let w = (p[[i, j]] / nu[j]).ln() + t * delta[i] / eps;
                weights[i] = w;
                if w > m {
                    m = w;
                }
            }
            let mut z = 0.0;
            let mut top = 0.0f64;
            for i in 0..n {
                let e = (weights[i] - m).exp();
                z += e;
                top = top.max(e);
            }
            beta = beta.max(n as f64 * top / z);
        }
    }
    beta
}

/// Exact 1D transport oracle: minimum of sum_i (a_i - b_sigma(i))^2 / 2 over
/// all permutations sigma, by enumeration. Intentionally naive; N <= 8.
pub fn oracle_ot_1d(a: &[f64], b: &[f64]) -> (f64, Vec<usize>) {
    assert_eq!(a.len(), b.len(), "oracle_ot_1d: length mismatch");
    let n = a.len();
    assert!(n >= 1 && n <= 8, "oracle_ot_1d enumerates permutations; need 1 <= N <= 8");

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_cost = f64::INFINITY;
    let mut best_perm = perm.clone();
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let eval = |perm: &[usize], best_cost: &mut f64, best_perm: &mut Vec<usize>| {
        let cost: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| 0.5 * (a[i] - b[j]) * (a[i] - b[j]))
            .sum();
        if cost < *best_cost {
            *best_cost = cost;
            *best_perm = perm.to_vec();
        }
    };
    eval(&perm, &mut best_cost, &mut best_perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            eval(&perm, &mut best_cost, &mut best_perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best_cost, best_perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_vector;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn row_stochastic_matrix_has_zero_row_error() {
        let a = Array2::from_shape_vec((2, 2), vec![0.3, 0.7, 0.9, 0.1]).unwrap();
        let (row, _) = marginal_errors(&a, None);
        assert_abs_diff_eq!(row, 0.0, epsilon = 1e-15);
        let (row2, _) = marginal_errors(&(&a * 2.0), None);
        assert_abs_diff_eq!(row2, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn masked_column_error_skips_padded_columns() {
        // Column 2 is padded garbage; only 0 and 1 count.
        let a = Array2::from_shape_vec(
            (3, 3),
            vec![0.5, 0.5, 9.0, 0.25, 0.25, 9.0, 0.25, 0.25, 9.0],
        )
        .unwrap();
        let mask = KeyMask::trailing(3, 2).unwrap();
        let (_, col) = marginal_errors(&a, Some(&mask));
        assert_abs_diff_eq!(col, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn row_error_equals_transport_row_gap() {
        // rho(P) = N^-1 sum_i |sum_j A_ij - 1| for A = N P.
        let n = 4;
        let vals = gaussian_vector(3, &[1], n * n);
        let p = Array2::from_shape_vec((n, n), vals.iter().map(|x| x.abs() / 10.0).collect())
            .unwrap();
        let a = &p * n as f64;
        let (row_err, _) = marginal_errors(&a, None);
        let rho: f64 = (0..n).map(|i| (p.row(i).sum() - 1.0 / n as f64).abs()).sum();
        assert_abs_diff_eq!(row_err, rho, epsilon = 1e-12);
    }

    #[test]
    fn agreement_of_identical_and_doubled_plans() {
        let n = 3;
        let a = Array2::from_shape_vec((n, n), gaussian_vector(5, &[2], n * n)).unwrap();
        let v = Array2::from_shape_vec((n, 2), gaussian_vector(5, &[3], n * 2)).unwrap();
        let (rmse, rel) = teacher_agreement(&a, &a, &v);
        assert_eq!((rmse, rel), (0.0, 0.0));
        let (_, rel2) = teacher_agreement(&(&a * 2.0), &a, &v);
        assert_abs_diff_eq!(rel2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generalized_kl_zero_iff_equal_and_zero_plan_limit() {
        let n = 3;
        let r = Array2::from_shape_vec(
            (n, n),
            gaussian_vector(9, &[1], n * n).iter().map(|x| x.abs() + 0.1).collect(),
        )
        .unwrap();
        assert_abs_diff_eq!(generalized_kl(&r, &r), 0.0, epsilon = 1e-15);
        let zero = Array2::zeros((n, n));
        assert_abs_diff_eq!(generalized_kl(&zero, &r), r.sum(), epsilon = 1e-12);
    }

    #[test]
    fn generalized_kl_matches_elementwise_oracle() {
        // Independent second evaluation, accumulated in a different order.
        let n = 4;
        let p = Array2::from_shape_vec(
            (n, n),
            gaussian_vector(11, &[1], n * n).iter().map(|x| x.abs()).collect(),
        )
        .unwrap();
        let r = Array2::from_shape_vec(
            (n, n),
            gaussian_vector(11, &[2], n * n).iter().map(|x| x.abs() + 0.05).collect(),
        )
        .unwrap();
        let lib = generalized_kl(&p, &r);
        let mut oracle = 0.0;
        for j in 0..n {
            for i in 0..n {
                let (pe, re) = (p[[i, j]], r[[i, j]]);
                oracle += if pe > 0.0 { pe * (pe / re).ln() - pe + re } else { re };
            }
        }
        assert!((lib - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn generalized_kl_nonnegative_on_random_pairs() {
        for seed in 0..20u64 {
            let n = 3;
            let p = Array2::from_shape_vec(
                (n, n),
                gaussian_vector(seed, &[7], n * n).iter().map(|x| x.abs()).collect(),
            )
            .unwrap();
            let r = Array2::from_shape_vec(
                (n, n),
                gaussian_vector(seed, &[8], n * n).iter().map(|x| x.abs() + 0.02).collect(),
            )
            .unwrap();
            assert!(generalized_kl(&p, &r) >= -1e-12);
        }
    }

    #[test]
    fn oracle_identity_support() {
        let a = [0.1, 0.5, 0.9];
        let (cost, _) = oracle_ot_1d(&a, &a);
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn oracle_removes_crossings() {
        let (cost, perm) = oracle_ot_1d(&[0.0, 1.0], &[1.0, 0.0]);
        assert_abs_diff_eq!(cost, 0.0, epsilon = 1e-15);
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let n = 5;
        let a = Array2::from_shape_vec(
            (n, n),
            gaussian_vector(21, &[1], n * n).iter().map(|x| x.abs()).collect(),
        )
        .unwrap();
        let a_ref = Array2::from_shape_vec(
            (n, n),
            gaussian_vector(21, &[2], n * n).iter().map(|x| x.abs() + 0.01).collect(),
        )
        .unwrap();
        let v = Array2::from_shape_vec((n, 2), gaussian_vector(21, &[3], n * 2)).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let pa = Array2::from_shape_fn((n, n), |(i, j)| a[[perm[i], perm[j]]]);
        let pref = Array2::from_shape_fn((n, n), |(i, j)| a_ref[[perm[i], perm[j]]]);
        let pv = Array2::from_shape_fn((n, 2), |(i, j)| v[[perm[i], j]]);

        let (rmse, rel) = teacher_agreement(&a, &a_ref, &v);
        let (rmse_p, rel_p) = teacher_agreement(&pa, &pref, &pv);
        assert_abs_diff_eq!(rmse, rmse_p, epsilon = 1e-12);
        assert_abs_diff_eq!(rel, rel_p, epsilon = 1e-12);

        let (re, ce) = marginal_errors(&a, None);
        let (re_p, ce_p) = marginal_errors(&pa, None);
        assert_abs_diff_eq!(re, re_p, epsilon = 1e-12);
        assert_abs_diff_eq!(ce, ce_p, epsilon = 1e-12);

        let kl = generalized_kl(&a, &a_ref);
        let kl_p = generalized_kl(&pa, &pref);
        assert!((kl - kl_p).abs() <= 1e-12 * kl.abs().max(1.0));
    }
}
