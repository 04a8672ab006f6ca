//! Dense linear algebra shared by every estimator: minimum-norm least
//! squares, ordered matrix products, and spectral radius.
//!
//! All routines are pure functions over [`Matrix`] (a column-major
//! `nalgebra::DMatrix<f64>`); row-major ordering only matters at the
//! serialization boundary, see [`serde_rows`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Singular values below `RANK_RTOL * s_max` are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;
/// Relative tolerance for the residual orthogonality check.
pub const TAU_ORTH: f64 = 1e-8;
/// Relative tolerance for exact-fit and composition identities.
pub const TAU_FIT: f64 = 1e-9;
/// Relative tolerance on eigenvalue moduli.
pub const TAU_EIG: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub coefficients: Matrix,
    pub residuals: Matrix,
    pub rank: usize,
}

pub(crate) fn ensure_nonempty(m: &Matrix, context: &'static str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::EmptyMatrix { context });
    }
    Ok(())
}

pub(crate) fn ensure_finite(m: &Matrix, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

fn ensure_square(m: &Matrix, context: &'static str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::NotSquare {
            context,
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

pub(crate) fn shape(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Minimum-norm least-squares solution of `design * B ≈ targets`.
///
/// Solved through the thin SVD of `design`; singular values under
/// [`RANK_RTOL`] times the largest one are dropped, which makes the result
/// well defined when `design` is rank deficient (e.g. fewer rows than
/// columns).
pub fn solve_least_squares(design: &Matrix, targets: &Matrix) -> Result<LeastSquaresFit> {
    ensure_nonempty(design, "least-squares design")?;
    ensure_nonempty(targets, "least-squares targets")?;
    if design.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch {
            context: "least-squares rows",
            expected: format!("{} target rows", design.nrows()),
            found: format!("{}", targets.nrows()),
        });
    }
    ensure_finite(design, "least-squares design")?;
    ensure_finite(targets, "least-squares targets")?;

    let (coefficients, rank) = filtered_svd_solve(design, targets, 0.0)?;
    let residuals = targets - design * &coefficients;
    Ok(LeastSquaresFit {
        coefficients,
        residuals,
        rank,
    })
}

/// Spectral-filter solve `V diag(s / (s² + ridge)) Uᵀ targets`.
///
/// With `ridge = 0` this is the pseudo-inverse solution; for `ridge > 0`
/// it equals `(XᵀX + ridge·I)⁻¹ Xᵀ Y`.
pub(crate) fn filtered_svd_solve(
    design: &Matrix,
    targets: &Matrix,
    ridge: f64,
) -> Result<(Matrix, usize)> {
    let svd = design.clone().svd(true, true);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Degenerate("SVD did not produce U".into()))?;
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Degenerate("SVD did not produce Vᵀ".into()))?;
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = RANK_RTOL * s_max;

    let mut projected = u.transpose() * targets;
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        let factor = if sk > cutoff && sk > 0.0 {
            rank += 1;
            sk / (sk * sk + ridge)
        } else {
            0.0
        };
        projected.row_mut(k).scale_mut(factor);
    }
    Ok((v_t.transpose() * projected, rank))
}

/// Left-to-right product `F₁ F₂ ⋯ F_k`.
pub fn matrix_chain_product(factors: &[Matrix]) -> Result<Matrix> {
    let (first, rest) = factors.split_first().ok_or_else(|| {
        Error::invalid("factors", "chain product needs at least one factor")
    })?;
    ensure_nonempty(first, "chain factor")?;
    let mut acc = first.clone();
    for f in rest {
        if acc.ncols() != f.nrows() {
            return Err(Error::DimensionMismatch {
                context: "chain product",
                expected: format!("{} rows", acc.ncols()),
                found: shape(f),
            });
        }
        acc = &acc * f;
    }
    Ok(acc)
}

pub fn matrix_power(base: &Matrix, exponent: usize) -> Result<Matrix> {
    ensure_nonempty(base, "matrix power")?;
    ensure_square(base, "matrix power")?;
    let mut acc = Matrix::identity(base.nrows(), base.ncols());
    for _ in 0..exponent {
        acc = &acc * base;
    }
    Ok(acc)
}

/// Largest eigenvalue modulus, complex eigenvalues included.
pub fn spectral_radius(square: &Matrix) -> Result<f64> {
    ensure_nonempty(square, "spectral radius")?;
    ensure_square(square, "spectral radius")?;
    ensure_finite(square, "spectral radius")?;
    let eigs = square.complex_eigenvalues();
    Ok(eigs.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

#[cfg(test)]
pub(crate) fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Serde adapters that write matrices as nested row-major arrays.
pub mod serde_rows {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Matrix;

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if nrows == 0 || ncols == 0 {
            return Err("matrix must be non-empty".into());
        }
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Matrix::from_row_slice(nrows, ncols, &flat))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| from_rows(rows).map_err(D::Error::custom))
                .collect()
        }
    }

    /// `d × 1` matrices as a flat array.
    pub mod column {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
            m.iter().copied().collect::<Vec<f64>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
            let v = Vec::<f64>::deserialize(d)?;
            if v.is_empty() {
                return Err(D::Error::custom("vector must be non-empty"));
            }
            Ok(Matrix::from_column_slice(v.len(), 1, &v))
        }
    }

    /// Lists of vectors as nested arrays.
    pub mod vectors {
        use super::*;
        use nalgebra::DVector;

        pub fn serialize<S: Serializer>(vs: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
            vs.iter()
                .map(|v| v.iter().copied().collect::<Vec<f64>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
            let all = Vec::<Vec<f64>>::deserialize(d)?;
            Ok(all.into_iter().map(DVector::from_vec).collect())
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(to_rows).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
            match Option::<Vec<Vec<f64>>>::deserialize(d)? {
                Some(rows) => from_rows(&rows).map(Some).map_err(D::Error::custom),
                None => Ok(None),
            }
        }
    }
}
