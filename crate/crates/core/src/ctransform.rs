//! Entropic c-transforms and plan reconstruction.
//!
//! Given a source dual f, the key-side transform picks the unique key dual
//! making every column of exp((-C + f_i + g_j)/eps) sum to nu_j; the
//! source-side transform is its row mirror. One-sided reconstruction applies
//! a single key closure; the two-sided form closes key, source, then key
//! again (column-ending) or stops after the source closure (row-ending).
//! Closures that immediately feed the plan are evaluated in the
//! algebraically equivalent column/row softmax form, which skips the
//! explicit dual and one full pass over the matrix.
//!
//! Masked columns are represented by -inf key duals (exp(-inf) = 0), so the
//! plan evaluation stays branch-free.

use ndarray::{Array1, Array2};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::sinkhorn::{marginal_targets, EndingSide, KeyMask, TeacherConfig, TransportPlan};

/// Global count of entropic-transform passes (each T_K, T_Q, or fused
/// closure is one pass over the matrix). Tests snapshot this around a call
/// to assert the per-operator pass budget.
static TRANSFORM_PASSES: AtomicU64 = AtomicU64::new(0);

pub fn transform_passes() -> u64 {
    TRANSFORM_PASSES.load(Ordering::Relaxed)
}

fn count_pass() {
    TRANSFORM_PASSES.fetch_add(1, Ordering::Relaxed);
}

/// Which closure produced a dual; recorded so a `DualPotentials` value is
/// self-describing about its marginal guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformSide {
    Predicted,
    KeyClosure,
    SourceClosure,
}

/// Source/key dual pair in cost units, with the entropy they belong to.
/// f is finite; g may be -inf on padded keys only.
#[derive(Debug, Clone)]
pub struct DualPotentials {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub epsilon: f64,
    pub side_history: Vec<TransformSide>,
}

/// One-sided vs two-sided reconstruction from a predicted source dual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionMode {
    /// Single key closure: exact key marginal, rows carry the dual error.
    OneSided,
    /// Key, source, then (column-ending) key closure; row-ending stops after
    /// the source closure. Exact marginal on the ending side.
    TwoSided,
}

/// Key-side entropic c-transform:
/// g_j = eps log nu_j - eps lse_i((-C_ij + f_i)/eps), with g_j = -inf where
/// nu_j = 0. The resulting plan's columns sum to nu exactly.
pub fn key_ctransform(
    f: &Array1<f64>,
    cost: &Array2<f64>,
    nu: &Array1<f64>,
    eps: f64,
) -> Array1<f64> {
    let n = cost.nrows();
    assert_eq!(f.len(), n, "key_ctransform: dual length mismatch");
    assert_eq!(nu.len(), cost.ncols(), "key_ctransform: nu length mismatch");
    assert!(nu.iter().any(|&x| x > 0.0), "key_ctransform: all-zero key marginal");
    count_pass();

    let cols = cost.ncols();
    let mut colmax = vec![f64::NEG_INFINITY; cols];
    for i in 0..n {
        let row = cost.row(i);
        let fi = f[i];
        for j in 0..cols {
            let x = fi - row[j];
            if x > colmax[j] {
                colmax[j] = x;
            }
        }
    }
    let mut colsum = vec![0.0f64; cols];
    for i in 0..n {
        let row = cost.row(i);
        let fi = f[i];
        for j in 0..cols {
            colsum[j] += ((fi - row[j] - colmax[j]) / eps).exp();
        }
    }
    Array1::from_shape_fn(cols, |j| {
        if nu[j] > 0.0 {
            eps * nu[j].ln() - colmax[j] - eps * colsum[j].ln()
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Source-side mirror:
/// f_i = eps log mu_i - eps lse_j((-C_ij + g_j)/eps). -inf entries of g
/// (padded keys) drop out of the sum. The resulting plan's rows sum to mu.
pub fn source_ctransform(
    g: &Array1<f64>,
    cost: &Array2<f64>,
    mu: &Array1<f64>,
    eps: f64,
) -> Array1<f64> {
    let n = cost.nrows();
    assert_eq!(g.len(), cost.ncols(), "source_ctransform: dual length mismatch");
    assert_eq!(mu.len(), n, "source_ctransform: mu length mismatch");
    count_pass();

    Array1::from_shape_fn(n, |i| {
        let row = cost.row(i);
        let mut m = f64::NEG_INFINITY;
        for j in 0..row.len() {
            let x = g[j] - row[j];
            if x > m {
                m = x;
            }
        }
        let mut s = 0.0;
        for j in 0..row.len() {
            let x = g[j] - row[j];
            if x > f64::NEG_INFINITY {
                s += ((x - m) / eps).exp();
            }
        }
        eps * mu[i].ln() - m - eps * s.ln()
    })
}

/// Literal exponential plan P_ij = exp((-C_ij + f_i + g_j)/eps), with
/// exp(-inf) = 0 on masked columns. `mu`/`nu` are stored as the declared
/// marginal targets; no normalization is applied here.
pub fn gibbs_plan(
    f: &Array1<f64>,
    g: &Array1<f64>,
    cost: &Array2<f64>,
    eps: f64,
    mu: Array1<f64>,
    nu: Array1<f64>,
) -> TransportPlan {
    let n = cost.nrows();
    let mut coupling = Array2::<f64>::zeros(cost.raw_dim());
    for i in 0..n {
        let row = cost.row(i);
        for j in 0..cost.ncols() {
            let e = f[i] + g[j] - row[j];
            coupling[[i, j]] = if e == f64::NEG_INFINITY { 0.0 } else { (e / eps).exp() };
        }
    }
    TransportPlan::from_coupling(coupling, mu, nu)
}

/// Fused key closure: the coupling nu_j * softmax over queries of
/// (-C_ij + f_i)/eps, algebraically equal to Gibbs(f, T_K(f)) but evaluated
/// without materializing the key dual. Counts as one transform pass.
pub fn key_closure_coupling(
    f: &Array1<f64>,
    cost: &Array2<f64>,
    nu: &Array1<f64>,
    eps: f64,
) -> Array2<f64> {
    let n = cost.nrows();
    assert_eq!(f.len(), n);
    count_pass();

    let cols = cost.ncols();
    let mut out = Array2::<f64>::zeros(cost.raw_dim());
    let mut colmax = vec![f64::NEG_INFINITY; cols];
    for i in 0..n {
        let row = cost.row(i);
        let fi = f[i];
        for j in 0..cols {
            let x = fi - row[j];
            if x > colmax[j] {
                colmax[j] = x;
            }
        }
    }
    let mut colsum = vec![0.0f64; cols];
    for i in 0..n {
        let row = cost.row(i);
        let fi = f[i];
        let mut out_row = out.row_mut(i);
        for j in 0..cols {
            let e = ((fi - row[j] - colmax[j]) / eps).exp();
            out_row[j] = e;
            colsum[j] += e;
        }
    }
    let scale: Vec<f64> = (0..cols)
        .map(|j| if nu[j] > 0.0 { nu[j] / colsum[j] } else { 0.0 })
        .collect();
    for i in 0..n {
        let mut out_row = out.row_mut(i);
        for j in 0..cols {
            out_row[j] *= scale[j];
        }
    }
    out
}

/// Fused row closure: mu_i * softmax over keys of (-C_ij + g_j)/eps, equal
/// to Gibbs(T_Q(g), g) without materializing the source dual. Masked keys
/// enter as -inf in g and receive exactly zero.
pub fn row_closure_coupling(
    g: &Array1<f64>,
    cost: &Array2<f64>,
    mu: &Array1<f64>,
    eps: f64,
) -> Array2<f64> {
    let n = cost.nrows();
    assert_eq!(g.len(), cost.ncols());
    count_pass();

    let mut out = Array2::<f64>::zeros(cost.raw_dim());
    for i in 0..n {
        let row = cost.row(i);
        let mut m = f64::NEG_INFINITY;
        for j in 0..row.len() {
            let x = g[j] - row[j];
            if x > m {
                m = x;
            }
        }
        let mut s = 0.0;
        let mut out_row = out.row_mut(i);
        for j in 0..row.len() {
            let x = g[j] - row[j];
            let e = if x == f64::NEG_INFINITY { 0.0 } else { ((x - m) / eps).exp() };
            out_row[j] = e;
            s += e;
        }
        let scale = mu[i] / s;
        for j in 0..row.len() {
            out_row[j] *= scale;
        }
    }
    out
}

/// Duals produced by the column-ending two-sided transform, exposed for the
/// row-error bound (delta = ||g_plus - g_zero||_inf).
#[derive(Debug, Clone)]
pub struct TwoSidedDuals {
    pub g_zero: Array1<f64>,
    pub f_plus: Array1<f64>,
    pub g_plus: Array1<f64>,
}

/// Explicit (unfused) two-sided column-ending transform chain.
pub fn two_sided_duals(
    f_hat: &Array1<f64>,
    cost: &Array2<f64>,
    mu: &Array1<f64>,
    nu: &Array1<f64>,
    eps: f64,
) -> TwoSidedDuals {
    let g_zero = key_ctransform(f_hat, cost, nu, eps);
    let f_plus = source_ctransform(&g_zero, cost, mu, eps);
    let g_plus = key_ctransform(&f_plus, cost, nu, eps);
    TwoSidedDuals { g_zero, f_plus, g_plus }
}

/// Predicted dual closed on the key side, as an explicit dual pair.
pub fn close_key_side(
    f_hat: Array1<f64>,
    cost: &Array2<f64>,
    nu: &Array1<f64>,
    eps: f64,
) -> DualPotentials {
    let g = key_ctransform(&f_hat, cost, nu, eps);
    DualPotentials {
        f: f_hat,
        g,
        epsilon: eps,
        side_history: vec![TransformSide::Predicted, TransformSide::KeyClosure],
    }
}

/// Reconstruct an attention plan from a centered predicted source dual under
/// the teacher's convention.
///
/// * one-sided: Gibbs(f_hat, T_K(f_hat)) — one pass, exact key marginal.
/// * two-sided, column-ending teacher: Gibbs(f_plus, g_plus) — three passes,
///   exact key marginal, row error bounded by exp(delta/eps) - 1.
/// * two-sided, row-ending teacher: Gibbs(f_plus, g_zero) — two passes,
///   exact row marginal.
pub fn reconstruct(
    f_hat: &Array1<f64>,
    cost: &Array2<f64>,
    cfg: &TeacherConfig,
    mask: Option<&KeyMask>,
    mode: ReconstructionMode,
) -> TransportPlan {
    let n = cost.nrows();
    let (mu, nu) = marginal_targets(n, mask);
    let eps = cfg.epsilon;
    let coupling = match (mode, cfg.ending_side()) {
        (ReconstructionMode::OneSided, _) => key_closure_coupling(f_hat, cost, &nu, eps),
        (ReconstructionMode::TwoSided, EndingSide::Column) => {
            let g_zero = key_ctransform(f_hat, cost, &nu, eps);
            let f_plus = source_ctransform(&g_zero, cost, &mu, eps);
            key_closure_coupling(&f_plus, cost, &nu, eps)
        }
        (ReconstructionMode::TwoSided, EndingSide::Row) => {
            let g_zero = key_ctransform(f_hat, cost, &nu, eps);
            row_closure_coupling(&g_zero, cost, &mu, eps)
        }
    };
    TransportPlan::from_coupling(coupling, mu, nu)
}

/// Head output: attention-scale matrix times the values, y = A V.
pub fn head_output(plan: &TransportPlan, v: &Array2<f64>) -> Array2<f64> {
    assert_eq!(plan.attention.ncols(), v.nrows(), "head_output: shape mismatch");
    plan.attention.dot(v)
}

/// Score-kernel inputs for the fast forward paths: the score matrix plus
/// the query/key shift vectors relating it to the quadratic cost
/// (-C_ij = s_ij - rho_i - kappa_j).
pub struct ScoreKernel<'a> {
    pub scores: &'a Array2<f64>,
    pub query_shift: &'a Array1<f64>,
    pub key_shift: &'a Array1<f64>,
}

/// Column softmax of (s_ij + off_i)/eps over queries: the attention-scale
/// one-sided closure evaluated directly on scores. Column-constant terms
/// (the key shifts) cancel inside each column softmax and never enter.
/// Padded columns are exactly zero. One transform pass.
fn col_softmax_attention_into(
    scores: &Array2<f64>,
    row_offset: &Array1<f64>,
    eps: f64,
    mask: Option<&KeyMask>,
    out: &mut Array2<f64>,
) {
    count_pass();
    let n = scores.nrows();
    let cols = scores.ncols();
    assert_eq!(out.raw_dim(), scores.raw_dim(), "workspace shape mismatch");
    let mut colmax = vec![f64::NEG_INFINITY; cols];
    for i in 0..n {
        let row = scores.row(i);
        let row = row.as_slice().unwrap();
        let off = row_offset[i];
        for j in 0..cols {
            let x = row[j] + off;
            if x > colmax[j] {
                colmax[j] = x;
            }
        }
    }
    // Shifted exponent arguments, exponentiated row by row while the row is
    // cache-resident, accumulating column sums in the same sweep.
    let mut colsum = vec![0.0f64; cols];
    for i in 0..n {
        let srow = scores.row(i);
        let srow = srow.as_slice().unwrap();
        let off = row_offset[i];
        let mut orow = out.row_mut(i);
        let orow = orow.as_slice_mut().unwrap();
        for j in 0..cols {
            orow[j] = (srow[j] + off - colmax[j]) / eps;
        }
        crate::numerics::exp_in_place(orow);
        for j in 0..cols {
            colsum[j] += orow[j];
        }
    }
    let inv: Vec<f64> = (0..cols)
        .map(|j| match mask {
            Some(m) if !m.is_active(j) => 0.0,
            _ => 1.0 / colsum[j],
        })
        .collect();
    for i in 0..n {
        let mut orow = out.row_mut(i);
        let orow = orow.as_slice_mut().unwrap();
        for j in 0..cols {
            orow[j] *= inv[j];
        }
    }
}

/// Key dual in cost units from score-kernel inputs. One transform pass.
fn key_dual_from_scores(
    k: &ScoreKernel<'_>,
    f_hat: &Array1<f64>,
    eps: f64,
    nu: &Array1<f64>,
) -> Array1<f64> {
    count_pass();
    let n = k.scores.nrows();
    let cols = k.scores.ncols();
    let mut colmax = vec![f64::NEG_INFINITY; cols];
    for i in 0..n {
        let row = k.scores.row(i);
        let row = row.as_slice().unwrap();
        let off = f_hat[i] - k.query_shift[i];
        for j in 0..cols {
            let x = row[j] + off;
            if x > colmax[j] {
                colmax[j] = x;
            }
        }
    }
    let mut colsum = vec![0.0f64; cols];
    let mut buf = vec![0.0f64; cols];
    for i in 0..n {
        let row = k.scores.row(i);
        let row = row.as_slice().unwrap();
        let off = f_hat[i] - k.query_shift[i];
        for j in 0..cols {
            buf[j] = (row[j] + off - colmax[j]) / eps;
        }
        crate::numerics::exp_in_place(&mut buf);
        for j in 0..cols {
            colsum[j] += buf[j];
        }
    }
    Array1::from_shape_fn(cols, |j| {
        if nu[j] > 0.0 {
            eps * nu[j].ln() - colmax[j] - eps * colsum[j].ln() + k.key_shift[j]
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Row softmax of (s_ij + coff_j)/eps over keys: the attention-scale row
/// closure on scores (query shifts cancel row-wise). One transform pass.
fn row_softmax_attention_into(
    scores: &Array2<f64>,
    col_offset: &Array1<f64>,
    eps: f64,
    out: &mut Array2<f64>,
) {
    count_pass();
    let n = scores.nrows();
    let cols = scores.ncols();
    assert_eq!(out.raw_dim(), scores.raw_dim(), "workspace shape mismatch");
    for i in 0..n {
        let srow = scores.row(i);
        let srow = srow.as_slice().unwrap();
        let mut m = f64::NEG_INFINITY;
        for j in 0..cols {
            let x = srow[j] + col_offset[j];
            if x > m {
                m = x;
            }
        }
        let mut s = 0.0;
        let mut orow = out.row_mut(i);
        let orow = orow.as_slice_mut().unwrap();
        for j in 0..cols {
            let x = srow[j] + col_offset[j];
            let e = if x == f64::NEG_INFINITY { 0.0 } else { ((x - m) / eps).exp() };
            orow[j] = e;
            s += e;
        }
        let inv = 1.0 / s;
        for j in 0..cols {
            orow[j] *= inv;
        }
    }
}

/// Compiled forward on score-kernel inputs: returns the attention-scale
/// matrix without materializing the cost matrix. Same transform-pass budget
/// as [`reconstruct`] (1 one-sided; 3 column-ending; 2 row-ending) and the
/// same operator up to round-off in the exponent assembly.
pub fn compiled_attention_from_scores(
    kernel: &ScoreKernel<'_>,
    f_hat: &Array1<f64>,
    cfg: &TeacherConfig,
    mask: Option<&KeyMask>,
    mode: ReconstructionMode,
) -> Array2<f64> {
    let mut out = Array2::zeros(kernel.scores.raw_dim());
    compiled_attention_into(kernel, f_hat, cfg, mask, mode, &mut out);
    out
}

/// [`compiled_attention_from_scores`] writing into a caller-owned workspace.
pub fn compiled_attention_into(
    kernel: &ScoreKernel<'_>,
    f_hat: &Array1<f64>,
    cfg: &TeacherConfig,
    mask: Option<&KeyMask>,
    mode: ReconstructionMode,
    out: &mut Array2<f64>,
) {
    let n = kernel.scores.nrows();
    let eps = cfg.epsilon;
    let (mu, nu) = marginal_targets(n, mask);
    match (mode, cfg.ending_side()) {
        (ReconstructionMode::OneSided, _) => {
            let off = f_hat - kernel.query_shift;
            col_softmax_attention_into(kernel.scores, &off, eps, mask, out);
        }
        (ReconstructionMode::TwoSided, EndingSide::Column) => {
            let g_zero = key_dual_from_scores(kernel, f_hat, eps, &nu);
            // Source closure: f+_i = eps ln mu_i + rho_i - eps lse_j((s_ij + g0_j - kappa_j)/eps)
            count_pass();
            let coff = &g_zero - kernel.key_shift;
            let masked = mask.is_some();
            let mut buf = vec![0.0f64; n];
            let mut f_plus = Array1::<f64>::zeros(n);
            for i in 0..n {
                let srow = kernel.scores.row(i);
                let srow = srow.as_slice().unwrap();
                let mut m = f64::NEG_INFINITY;
                for j in 0..srow.len() {
                    let x = srow[j] + coff[j];
                    if x > m {
                        m = x;
                    }
                }
                let s = if masked {
                    let mut s = 0.0;
                    for j in 0..srow.len() {
                        let x = srow[j] + coff[j];
                        if x > f64::NEG_INFINITY {
                            s += ((x - m) / eps).exp();
                        }
                    }
                    s
                } else {
                    for j in 0..srow.len() {
                        buf[j] = (srow[j] + coff[j] - m) / eps;
                    }
                    crate::numerics::exp_in_place(&mut buf);
                    buf.iter().sum()
                };
                f_plus[i] = eps * mu[i].ln() + kernel.query_shift[i] - m - eps * s.ln();
            }
            let off = &f_plus - kernel.query_shift;
            col_softmax_attention_into(kernel.scores, &off, eps, mask, out);
        }
        (ReconstructionMode::TwoSided, EndingSide::Row) => {
            let g_zero = key_dual_from_scores(kernel, f_hat, eps, &nu);
            let coff = &g_zero - kernel.key_shift;
            row_softmax_attention_into(kernel.scores, &coff, eps, out);
        }
    }
}
