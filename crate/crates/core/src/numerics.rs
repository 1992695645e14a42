//! Shared deterministic numerical primitives.
//!
//! Everything here is a pure function on immutable inputs: stable
//! log-sum-exp, zero-mean centering, counter-style Gaussian sphere sampling,
//! a dense symmetric positive-definite solve, and stable argsort. No NaN or
//! infinity enters or leaves unless a contract says so explicitly; the only
//! sanctioned infinity in the crate is the `-inf` key dual of a masked
//! column.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[cfg(has_mvec)]
mod vexp {
    extern "C" {
        pub fn dsattn_vexp_avx2(v: *mut f64, n: usize);
        pub fn dsattn_vexp_avx512(v: *mut f64, n: usize);
    }
}

/// In-place exponential over a buffer of finite values.
///
/// Dispatches to the system vector math library (libmvec, <= 4 ulp) when
/// the build found it and the CPU has AVX2/AVX-512F, otherwise scalar exp.
/// Callers must not pass infinities; masked -inf entries are handled by the
/// scalar code paths before buffers reach this function.
pub fn exp_in_place(v: &mut [f64]) {
    #[cfg(all(has_mvec, target_arch = "x86_64"))]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            unsafe { vexp::dsattn_vexp_avx512(v.as_mut_ptr(), v.len()) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            unsafe { vexp::dsattn_vexp_avx2(v.as_mut_ptr(), v.len()) };
            return;
        }
    }
    for x in v.iter_mut() {
        *x = x.exp();
    }
}

/// log(sum_i exp(v_i)) with max-shift.
///
/// Entries may be `-inf` (they drop out of the sum); an all-`-inf` input
/// returns `-inf`, which is exactly the convention masked key columns rely
/// on. Exact for single-entry input. Panics on an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "logsumexp of an empty vector");
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// v - mean(v): the zero-mean representative of a dual potential.
pub fn center(v: &Array1<f64>) -> Array1<f64> {
    let mean = v.mean().unwrap_or(0.0);
    v.mapv(|x| x - mean)
}

/// In-place variant of [`center`].
pub fn center_in_place(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Indices that sort `v` ascending; equal keys keep their input order.
///
/// The stable tie rule is part of the crate contract: tied projections must
/// produce potentials that are consistent under token permutation. Sorting
/// (value, index) pairs with the index as tiebreak is equivalent to a
/// stable sort and avoids the indirection of comparator-based argsort.
pub fn argsort_stable(v: &[f64]) -> Vec<usize> {
    let mut pairs: Vec<(f64, u32)> =
        v.iter().enumerate().map(|(i, &x)| (x, i as u32)).collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pairs.into_iter().map(|(_, i)| i as usize).collect()
}

/// Solve G x = b for symmetric positive-definite G via Cholesky.
///
/// Fails with the index of the first non-positive pivot if G is not PD.
/// Residual satisfies ||Gx - b||_inf <= 1e-8 * max(1, ||b||_inf) for the
/// well-conditioned systems produced by ridge-regularized Gram matrices.
pub fn solve_spd(g: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = g.nrows();
    assert_eq!(g.ncols(), n, "solve_spd expects a square matrix");
    assert_eq!(b.len(), n, "solve_spd rhs length mismatch");

    // Lower-triangular factor, row-major.
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[[i, j]];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }

    // L y = b
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // L^T x = y
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(Array1::from_vec(x))
}

/// SplitMix64 mixing step; used to derive independent stream keys.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream key from a seed and a list of tags. Each distinct tag
/// path gets an independent deterministic stream, so draws never depend on
/// execution order or thread count.
pub fn stream_key(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0x51ce_b00c_aa55_aa55);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// A keyed deterministic generator (ChaCha8 stream per object drawn).
pub fn keyed_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tags))
}

/// Draw `count` standard normal values from the stream keyed by (seed, tags).
pub fn gaussian_vector(seed: u64, tags: &[u64], count: usize) -> Vec<f64> {
    let mut rng = keyed_rng(seed, tags);
    (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Sample `l` unit-norm directions on the (d_h - 1)-sphere as normalized
/// standard Gaussians. Bit-identical for a fixed (seed, l, d_h) regardless
/// of run, platform or thread count: every direction has its own keyed
/// stream. A zero-norm draw redraws with an incremented attempt counter.
pub fn sample_slice_bank(seed: u64, l: usize, d_h: usize) -> Vec<Array1<f64>> {
    assert!(l >= 1, "slice bank needs at least one direction");
    assert!(d_h >= 1, "slice bank needs dimension >= 1");
    const BANK_TAG: u64 = 0x511ce;
    (0..l)
        .map(|idx| {
            let mut attempt = 0u64;
            loop {
                let v = gaussian_vector(seed, &[BANK_TAG, idx as u64, attempt], d_h);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    return Array1::from_vec(v.into_iter().map(|x| x / norm).collect());
                }
                attempt += 1;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn exp_in_place_matches_scalar_exp() {
        let vals: Vec<f64> = (0..4099)
            .map(|i| -700.0 + 1400.0 * (i as f64) / 4099.0)
            .collect();
        let mut fast = vals.clone();
        exp_in_place(&mut fast);
        for (x, e) in vals.iter().zip(fast.iter()) {
            let reference = x.exp();
            let tol = 1e-14 * reference.max(f64::MIN_POSITIVE);
            assert!(
                (e - reference).abs() <= tol,
                "exp({x}) = {e} vs scalar {reference}"
            );
        }
    }

    #[test]
    fn logsumexp_two_equal_terms() {
        assert_abs_diff_eq!(logsumexp(&[0.0, 0.0]), 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn logsumexp_singleton_is_identity() {
        for &x in &[-3.5, 0.0, 1e8, -1e-12] {
            assert_eq!(logsumexp(&[x]), x);
        }
    }

    #[test]
    fn logsumexp_max_shift_avoids_overflow() {
        let v = [1000.0, 1000.0];
        assert_abs_diff_eq!(logsumexp(&v), 1000.0 + 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn logsumexp_ignores_neg_infinity_entries() {
        assert_abs_diff_eq!(
            logsumexp(&[f64::NEG_INFINITY, 0.0, 0.0]),
            2.0f64.ln(),
            epsilon = 1e-15
        );
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    #[should_panic(expected = "empty")]
    fn logsumexp_rejects_empty() {
        logsumexp(&[]);
    }

    #[test]
    fn center_basic_and_constant() {
        let c = center(&Array1::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(c.to_vec(), vec![-1.0, 0.0, 1.0]);
        let z = center(&Array1::from_vec(vec![7.5; 4]));
        assert!(z.iter().all(|&x| x == 0.0), "constant input must center to zero");
    }

    #[test]
    fn center_is_idempotent() {
        let v = Array1::from_vec(vec![0.3, -1.7, 2.2, 9.1]);
        let once = center(&v);
        let twice = center(&once);
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn argsort_preserves_tie_order() {
        let v = [1.0, 0.5, 1.0, 0.5];
        assert_eq!(argsort_stable(&v), vec![1, 3, 0, 2]);
    }

    #[test]
    fn solve_spd_identity_and_diagonal() {
        let g = Array2::eye(3);
        let b = Array1::from_vec(vec![4.0, -1.0, 0.25]);
        let x = solve_spd(&g, &b).unwrap();
        assert_eq!(x.to_vec(), b.to_vec());

        let g = Array2::from_diag(&Array1::from_vec(vec![2.0, 4.0]));
        let b = Array1::from_vec(vec![2.0, 8.0]);
        let x = solve_spd(&g, &b).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-15);
    }

    /// Gauss-Jordan inverse, kept independent of the Cholesky path.
    fn brute_inverse(g: &Array2<f64>) -> Array2<f64> {
        let n = g.nrows();
        let mut a = g.clone();
        let mut inv = Array2::eye(n);
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a[[r, col]].abs() > a[[pivot, col]].abs() {
                    pivot = r;
                }
            }
            for j in 0..n {
                let tmp = a[[col, j]];
                a[[col, j]] = a[[pivot, j]];
                a[[pivot, j]] = tmp;
                let tmp = inv[[col, j]];
                inv[[col, j]] = inv[[pivot, j]];
                inv[[pivot, j]] = tmp;
            }
            let p = a[[col, col]];
            for j in 0..n {
                a[[col, j]] /= p;
                inv[[col, j]] /= p;
            }
            for r in 0..n {
                if r != col {
                    let factor = a[[r, col]];
                    for j in 0..n {
                        a[[r, j]] -= factor * a[[col, j]];
                        inv[[r, j]] -= factor * inv[[col, j]];
                    }
                }
            }
        }
        inv
    }

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let raw = gaussian_vector(seed, &[0xabcd, n as u64], n * n);
        let m = Array2::from_shape_vec((n, n), raw).unwrap();
        let mut g = m.t().dot(&m);
        for i in 0..n {
            g[[i, i]] += 0.5;
        }
        g
    }

    #[test]
    fn solve_spd_matches_explicit_inverse_on_small_systems() {
        for n in 2..=6 {
            let g = random_spd(n, 42 + n as u64);
            let b = Array1::from_vec(gaussian_vector(7, &[n as u64], n));
            let x = solve_spd(&g, &b).unwrap();
            let x_ref = brute_inverse(&g).dot(&b);
            for i in 0..n {
                assert_abs_diff_eq!(x[i], x_ref[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn solve_spd_residual_bound_on_random_instances() {
        for n in [2usize, 8, 17, 33, 64] {
            let g = random_spd(n, 1000 + n as u64);
            let b = Array1::from_vec(gaussian_vector(9, &[n as u64, 3], n));
            let x = solve_spd(&g, &b).unwrap();
            let r = g.dot(&x) - &b;
            let rmax = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let bmax = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            assert!(
                rmax <= 1e-8 * bmax.max(1.0),
                "residual {rmax:.3e} too large for n={n}"
            );
        }
    }

    #[test]
    fn solve_spd_reports_failing_pivot() {
        let g = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let b = Array1::from_vec(vec![1.0, 1.0]);
        match solve_spd(&g, &b) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn slice_bank_is_unit_norm_and_reproducible() {
        let bank = sample_slice_bank(99, 8, 5);
        for theta in &bank {
            let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12, "norm {norm} not unit");
        }
        let again = sample_slice_bank(99, 8, 5);
        for (a, b) in bank.iter().zip(again.iter()) {
            assert_eq!(a.to_vec(), b.to_vec(), "bank must be bit-identical per seed");
        }
    }

    #[test]
    fn slice_bank_1d_is_sign_only() {
        for theta in sample_slice_bank(3, 16, 1) {
            assert!(theta[0] == 1.0 || theta[0] == -1.0, "got {}", theta[0]);
        }
    }

    proptest! {
        #[test]
        fn logsumexp_translation_equivariance(
            v in proptest::collection::vec(-40.0f64..40.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted);
            let rhs = logsumexp(&v) + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn center_is_a_linear_projection(
            u in proptest::collection::vec(-10.0f64..10.0, 2..9),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let n = u.len();
            let v: Vec<f64> = u.iter().map(|x| x * 0.7 - 1.3).collect();
            let ua = Array1::from_vec(u.clone());
            let va = Array1::from_vec(v.clone());
            let combo = center(&(alpha * &ua + beta * &va));
            let parts = alpha * &center(&ua) + beta * &center(&va);
            for i in 0..n {
                prop_assert!((combo[i] - parts[i]).abs() <= 1e-10);
            }
        }
    }
}
