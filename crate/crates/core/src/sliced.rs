//! Exact one-dimensional transport potentials over a slice bank.
//!
//! Projecting queries and keys onto a line reduces quadratic transport to a
//! sorted matching with a closed-form source potential:
//!
//!   phi_1 = 0,  phi_r = sum_{t<r} b_(t) (a_(t+1) - a_(t)),
//!   f_(r) = a_(r)^2 / 2 - phi_r.
//!
//! The d_h^(1/4) projection scaling puts these potentials in the same cost
//! units as the head-level entropic dual, which is what makes them usable as
//! regression features. Ties are broken by the stable sort (input order);
//! tied source values receive equal potentials, so the feature vector is
//! consistent under token permutation even though the sort permutation is
//! not.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numerics::{argsort_stable, center_in_place, sample_slice_bank};
use crate::sinkhorn::KeyMask;

/// Fixed bank of unit directions used by one compiled layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBank {
    /// L x d_h, each row unit norm.
    directions: Array2<f64>,
    seed: u64,
}

impl SliceBank {
    /// Deterministically sample `l` directions on the (d_h-1)-sphere.
    pub fn sample(seed: u64, l: usize, d_h: usize) -> Self {
        let dirs = sample_slice_bank(seed, l, d_h);
        let mut directions = Array2::zeros((l, d_h));
        for (row, theta) in dirs.iter().enumerate() {
            directions.row_mut(row).assign(theta);
        }
        Self { directions, seed }
    }

    /// Rebuild from serialized parts, validating unit norms.
    pub fn from_parts(seed: u64, directions: Array2<f64>) -> Result<Self> {
        if directions.nrows() == 0 || directions.ncols() == 0 {
            return Err(Error::MalformedLayer("empty slice bank".into()));
        }
        for (i, row) in directions.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= 1e-9) {
                return Err(Error::MalformedLayer(format!(
                    "slice direction {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { directions, seed })
    }

    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.nrows() == 0
    }

    pub fn d_h(&self) -> usize {
        self.directions.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn directions(&self) -> &Array2<f64> {
        &self.directions
    }
}

/// N x L matrix of centered per-slice source potentials in cost units.
#[derive(Debug, Clone)]
pub struct SlicedFeatures {
    pub x: Array2<f64>,
}

impl SlicedFeatures {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn slices(&self) -> usize {
        self.x.ncols()
    }
}

/// Potential for sorted sources `a_sorted` matched monotonically against
/// `matched_b[r]` (the key value paired with source rank r).
fn potential_from_sorted(a_sorted: &[f64], matched_b: &[f64]) -> Vec<f64> {
    let n = a_sorted.len();
    let mut f = vec![0.0f64; n];
    let mut phi = 0.0;
    f[0] = 0.5 * a_sorted[0] * a_sorted[0];
    for r in 1..n {
        phi += matched_b[r - 1] * (a_sorted[r] - a_sorted[r - 1]);
        f[r] = 0.5 * a_sorted[r] * a_sorted[r] - phi;
    }
    f
}

/// Uncentered 1D source potential for uniform supports `a` (sources) and
/// `b` (targets) under the cost (a-b)^2/2. Sorts both stably, matches equal
/// ranks, and scatters the sorted potentials back to the input order of `a`.
pub fn slice_potential_1d(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "slice_potential_1d: length mismatch");
    assert!(!a.is_empty(), "slice_potential_1d: empty support");
    let ia = argsort_stable(a);
    let ib = argsort_stable(b);
    let a_sorted: Vec<f64> = ia.iter().map(|&i| a[i]).collect();
    let b_sorted: Vec<f64> = ib.iter().map(|&i| b[i]).collect();
    let f_sorted = potential_from_sorted(&a_sorted, &b_sorted);
    let mut f = vec![0.0f64; a.len()];
    for (rank, &orig) in ia.iter().enumerate() {
        f[orig] = f_sorted[rank];
    }
    f
}

/// Masked variant: the key support is restricted to active keys, and the
/// monotone matching pairs source rank r (1-based, out of N) with active-key
/// rank ceil(r |J| / N). Reduces to the equal-rank matching when |J| = N.
fn slice_potential_masked(a: &[f64], b_active_sorted: &[f64]) -> Vec<f64> {
    let n = a.len();
    let j = b_active_sorted.len();
    let ia = argsort_stable(a);
    let a_sorted: Vec<f64> = ia.iter().map(|&i| a[i]).collect();
    let matched: Vec<f64> = (1..=n)
        .map(|r| {
            let idx = (r * j).div_ceil(n); // in 1..=j
            b_active_sorted[idx - 1]
        })
        .collect();
    let f_sorted = potential_from_sorted(&a_sorted, &matched);
    let mut f = vec![0.0f64; n];
    for (rank, &orig) in ia.iter().enumerate() {
        f[orig] = f_sorted[rank];
    }
    f
}

/// Stack the centered slice potentials into the N x L feature matrix.
///
/// Projections are a = theta^T q / d_h^(1/4), b = theta^T k / d_h^(1/4).
/// Under a key mask, padded keys do not enter the one-dimensional key
/// support; all N query rows are kept. Work is O(L N d_h + L N log N).
pub fn feature_matrix(
    q: &Array2<f64>,
    k: &Array2<f64>,
    bank: &SliceBank,
    mask: Option<&KeyMask>,
) -> SlicedFeatures {
    assert!(!bank.is_empty(), "feature_matrix: empty slice bank");
    assert_eq!(q.ncols(), bank.d_h(), "feature_matrix: bank dimension mismatch");
    assert_eq!(q.ncols(), k.ncols(), "feature_matrix: head dims disagree");
    let n = q.nrows();
    let l = bank.len();
    let proj_scale = 1.0 / (q.ncols() as f64).powf(0.25);

    // L x N projections (one multiply each) so every slice is a contiguous
    // row.
    let standard = |m: Array2<f64>| {
        if m.is_standard_layout() { m } else { m.as_standard_layout().into_owned() }
    };
    let a_proj = standard(bank.directions().dot(&q.t()) * proj_scale);
    let b_proj = standard(bank.directions().dot(&k.t()) * proj_scale);

    let active: Option<Vec<usize>> = mask.map(|m| m.active_indices());
    let mut x = Array2::<f64>::zeros((n, l));
    for slice in 0..l {
        let a_row = a_proj.row(slice);
        let a_col = a_row.as_slice().unwrap();
        let b_row = b_proj.row(slice);
        let b_col = b_row.as_slice().unwrap();
        let mut pot = match &active {
            None => slice_potential_1d(a_col, b_col),
            Some(idx) => {
                let mut b_active: Vec<f64> = idx.iter().map(|&j| b_col[j]).collect();
                b_active.sort_by(|p, q| p.total_cmp(q));
                slice_potential_masked(a_col, &b_active)
            }
        };
        center_in_place(&mut pot);
        for i in 0..n {
            x[[i, slice]] = pot[i];
        }
    }
    SlicedFeatures { x }
}
