//! Small dense-matrix helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Symmetrizes, clips eigenvalues below `floor` and symmetrizes again, so the
/// result equals its transpose exactly.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let s = symmetrize(m);
    if s.nrows() == 0 {
        return s;
    }
    let eig = s.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

pub fn psd_floor(m: &DMatrix<f64>) -> DMatrix<f64> {
    eigen_floor(m, 0.0)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric PSD matrix after flooring its eigenvalues at
/// `rel_floor * trace / n`.
pub fn regularized_inverse(m: &DMatrix<f64>, rel_floor: f64) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let s = symmetrize(m);
    let trace = s.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return Err(Error::Conditioning(format!(
            "cannot invert a matrix with trace {trace}"
        )));
    }
    let floor = rel_floor * trace / n as f64;
    let eig = s.symmetric_eigen();
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&inv_vals) * q.transpose())))
}

/// Inverts a symmetric positive definite matrix after diagonal
/// equilibration. Returns the inverse and the condition number of the
/// equilibrated matrix, which does not depend on the units of each
/// coordinate.
pub fn equilibrated_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    let s = symmetrize(m);
    let d: DVector<f64> = s.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { f64::NAN });
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularHessian {
            condition: f64::INFINITY,
        });
    }
    let dm = DMatrix::from_diagonal(&d);
    let e = &dm * &s * &dm;
    let eig = symmetrize(&e).symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !condition.is_finite() || n == 0 {
        return Err(Error::SingularHessian { condition });
    }
    let q = &eig.eigenvectors;
    let inv_e = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v)) * q.transpose();
    Ok((symmetrize(&(&dm * inv_e * &dm)), condition))
}

pub fn quad_form(v: &[f64], omega: &DMatrix<f64>) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += omega[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// Serde adapter storing a matrix as a list of rows.
pub mod rows_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_gives_exact_symmetry_and_psd() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.3, 2.0, 1.0, 0.1, 0.3, 0.1, -0.5]);
        let f = psd_floor(&m);
        assert_eq!(f, f.transpose());
        assert!(min_eigenvalue(&f) > -1e-12);
    }

    #[test]
    fn equilibration_ignores_units() {
        // Well-posed but badly scaled: diag(1e-20, 1e20) has raw condition 1e40.
        let m = DMatrix::from_row_slice(2, 2, &[1e-20, 0.0, 0.0, 1e20]);
        let (inv, cond) = equilibrated_inverse(&m).unwrap();
        assert!((cond - 1.0).abs() < 1e-12);
        assert!((inv[(0, 0)] * 1e-20 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quad_form_matches_nalgebra() {
        let o = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v = [1.0, -3.0];
        let dv = DVector::from_column_slice(&v);
        let expect = (dv.transpose() * &o * &dv)[(0, 0)];
        assert!((quad_form(&v, &o) - expect).abs() < 1e-12);
    }
}
