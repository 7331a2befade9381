//! Product-space coupling generators on `S × S`, flattened as
//! `(i, j) ↦ i·N + j`.
//!
//! `coupling_generator` is the generator realized by two chains reading one
//! block-layout Poisson stream: off the diagonal the coordinates move one at
//! a time with their own rates; from a diagonal state `(i,i)` the common part
//! `q_ij ∧ q̃_ij` moves both together and only the rate difference splits
//! them. `basic_coupling_generator` is the classical construction that also
//! reunites off-diagonal states through common target rates.

use super::{RateMatError, RateMatrix};

const PRODUCT_STORAGE_CAP: usize = 50_000_000;

fn product_matrix(n: usize, c: usize) -> Result<RateMatrix, RateMatError> {
    let n2 = n * n;
    let c_prod = (c * n + c).min(n2.saturating_sub(1));
    let storage = n2 * (2 * c_prod + 1);
    if storage > PRODUCT_STORAGE_CAP {
        return Err(RateMatError::TooLarge(n2));
    }
    Ok(RateMatrix::zero(n2, c_prod))
}

/// Generator of the block-layout coupling (pairwise moves only, shared mass
/// on the diagonal). Rows are conservative by construction.
pub fn coupling_generator(q: &RateMatrix, qt: &RateMatrix) -> Result<RateMatrix, RateMatError> {
    let n = q.n_states();
    if n != qt.n_states() {
        return Err(RateMatError::DimensionMismatch(n, qt.n_states()));
    }
    let c = q.bandwidth().max(qt.bandwidth());
    let mut m = product_matrix(n, c)?;
    for i in 0..n {
        for j in 0..n {
            let src = i * n + j;
            if i == j {
                for (k, r) in q.iter_row(i) {
                    let rt = qt.rate(i, k);
                    let both = r.min(rt);
                    if both > 0.0 {
                        m.add(src, k * n + k, both);
                    }
                    let solo = r - rt;
                    if solo > 0.0 {
                        m.add(src, k * n + i, solo);
                    }
                }
                for (k, rt) in qt.iter_row(i) {
                    let solo = rt - q.rate(i, k);
                    if solo > 0.0 {
                        m.add(src, i * n + k, solo);
                    }
                }
            } else {
                for (k, r) in q.iter_row(i) {
                    m.add(src, k * n + j, r);
                }
                for (k, rt) in qt.iter_row(j) {
                    m.add(src, i * n + k, rt);
                }
            }
        }
    }
    Ok(m)
}

/// Generator of the basic coupling: single moves carry only the positive
/// rate excess and the common part `q_ik ∧ q̃_jk` jumps both coordinates to
/// `(k,k)`. Source-coordinate self-rates are read as zero.
pub fn basic_coupling_generator(
    q: &RateMatrix,
    qt: &RateMatrix,
) -> Result<RateMatrix, RateMatError> {
    let n = q.n_states();
    if n != qt.n_states() {
        return Err(RateMatError::DimensionMismatch(n, qt.n_states()));
    }
    let c = q.bandwidth().max(qt.bandwidth());
    let mut m = product_matrix(n, c)?;
    for i in 0..n {
        for j in 0..n {
            let src = i * n + j;
            let lo = i.min(j).saturating_sub(c);
            let hi = (i.max(j) + c).min(n - 1);
            for k in lo..=hi {
                let r = q.rate(i, k); // zero when k == i
                let rt = qt.rate(j, k);
                let first_alone = (r - rt).max(0.0);
                let second_alone = (rt - r).max(0.0);
                let together = r.min(rt);
                if first_alone > 0.0 && k != i {
                    m.add(src, k * n + j, first_alone);
                }
                if second_alone > 0.0 && k != j {
                    m.add(src, i * n + k, second_alone);
                }
                if together > 0.0 && k * n + k != src {
                    m.add(src, k * n + k, together);
                }
            }
        }
    }
    Ok(m)
}

/// True on the disagreement set (off-diagonal product states).
pub fn is_disagreement_state(n: usize, flat: usize) -> bool {
    flat / n != flat % n
}
