use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for pseudoinverses.
pub const PINV_RCOND: f64 = 1e-10;

/// Minimum-norm least-squares solution of `a x = y` via SVD.
pub struct LeastSquares {
    pub solution: DVector<f64>,
    /// Orthonormal basis of the numerical nullspace of `a`, one column per direction.
    pub nullspace: DMatrix<f64>,
}

pub fn min_norm_lstsq(a: &DMatrix<f64>, y: &DVector<f64>, rcond: f64) -> LeastSquares {
    let n = a.ncols();
    // Thin SVD of a tall matrix only yields min(m, n) right vectors; pad to square.
    let padded = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, a.nrows()).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma_max = svd.singular_values.max();
    let cutoff = rcond * sigma_max;

    let mut solution = DVector::zeros(n);
    let mut null_cols = Vec::new();
    let y_padded = if a.nrows() < n {
        let mut yp = DVector::zeros(n);
        yp.rows_mut(0, a.nrows()).copy_from(y);
        yp
    } else {
        y.clone()
    };
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let v_k = v_t.row(k).transpose();
        if s > cutoff && s > 0.0 {
            let coeff = u.column(k).dot(&y_padded) / s;
            solution += v_k * coeff;
        } else {
            null_cols.push(v_k);
        }
    }
    let nullspace = if null_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    };
    LeastSquares {
        solution,
        nullspace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_deficient_min_norm() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let y = DVector::from_vec(vec![3.0, 4.0]);
        let ls = min_norm_lstsq(&a, &y, PINV_RCOND);
        assert!((ls.solution - DVector::from_vec(vec![3.0, 2.0, 0.0])).amax() < 1e-14);
        assert_eq!(ls.nullspace.ncols(), 1);
        assert!((ls.nullspace[(2, 0)].abs() - 1.0).abs() < 1e-14);
    }
}
