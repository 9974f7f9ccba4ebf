//! Dense matrices, kernel centering, eigensolvers and small statistics.

mod eigen;
mod matrix;

pub use eigen::{
    sym_spectrum, sym_spectrum_seeded, top_k_operator, Spectrum, Which, DEFAULT_TOL, MAX_FULL_DIM,
};
pub use matrix::{axpy, dot, norm, Matrix};

use crate::error::{Error, Result};

/// `C K C` with the centering matrix `C = I − 11ᵀ/n`.
pub fn center_kernel(k: &Matrix) -> Result<Matrix> {
    if !k.is_square() {
        return Err(Error::Dimension(format!(
            "kernel must be square, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    let n = k.rows();
    if n == 0 {
        return Ok(k.clone());
    }
    let inv = 1.0 / n as f64;
    let row_means: Vec<f64> = k.row_sums().iter().map(|s| s * inv).collect();
    let col_means: Vec<f64> = k.col_sums().iter().map(|s| s * inv).collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    Ok(Matrix::from_fn(n, n, |i, j| {
        k[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

/// Subtract the mean from every entry.
pub fn center_vector(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    v.iter().map(|x| x - m).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pearson correlation coefficient.
pub fn pearson_corr(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "correlation of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(Error::Degenerate(
            "correlation needs at least two entries".into(),
        ));
    }
    let cu = center_vector(u);
    let cv = center_vector(v);
    let nu = norm(&cu);
    let nv = norm(&cv);
    let tiny = |c: f64, raw: &[f64]| c <= 1e-14 * norm(raw).max(f64::MIN_POSITIVE);
    if nu == 0.0 || nv == 0.0 || tiny(nu, u) || tiny(nv, v) {
        return Err(Error::Degenerate(
            "zero variance in correlation input".into(),
        ));
    }
    Ok((dot(&cu, &cv) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn centering_constants_vanish() {
        let c = center_kernel(&Matrix::filled(4, 4, 1.0)).unwrap();
        assert!(c.max_abs() < 1e-15);
    }

    #[test]
    fn centering_identity() {
        let c = center_kernel(&Matrix::identity(2)).unwrap();
        let expect = Matrix::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]).unwrap();
        assert!(c.sub(&expect).max_abs() < 1e-15);
    }

    #[test]
    fn centering_matches_explicit_product() {
        let mut r = stream(11, Stream::Aux);
        let a = Matrix::from_fn(8, 8, |_, _| normal(&mut r));
        let k = a.add(&a.transpose());
        let n = 8.0;
        let c = Matrix::from_fn(8, 8, |i, j| if i == j { 1.0 - 1.0 / n } else { -1.0 / n });
        let explicit = c.matmul(&k).matmul(&c);
        let fast = center_kernel(&k).unwrap();
        assert!(explicit.sub(&fast).max_abs() < 1e-12);
        assert!(fast.row_sums().iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn centering_rejects_rectangular() {
        assert!(matches!(
            center_kernel(&Matrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pearson_examples() {
        let u = [1.0, 2.0, 3.0];
        assert!((pearson_corr(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_corr(&u, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // Hand arithmetic: centered u = (-1,0,1), v = (-4/3,-1/3,5/3);
        // dot = 3, |u| = √2, |v| = √(42/9) → 3/√(28/3).
        let expect = 3.0 / (28.0_f64 / 3.0).sqrt();
        let got = pearson_corr(&u, &[1.0, 2.0, 4.0]).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.981_980_506).abs() < 1e-9);
    }

    #[test]
    fn pearson_rejects_constant() {
        assert!(matches!(
            pearson_corr(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn centering_is_idempotent(vals in proptest::collection::vec(-10.0f64..10.0, 36)) {
            let k = Matrix::from_vec(6, 6, vals).unwrap();
            let once = center_kernel(&k).unwrap();
            let twice = center_kernel(&once).unwrap();
            let scale = once.frobenius_norm().max(1e-300);
            prop_assert!(twice.sub(&once).frobenius_norm() <= 1e-10 * scale.max(k.frobenius_norm()));
            let tol = 1e-9 * k.frobenius_norm().max(1e-300);
            prop_assert!(once.row_sums().iter().all(|s| s.abs() <= tol));
            prop_assert!(once.col_sums().iter().all(|s| s.abs() <= tol));
        }

        #[test]
        fn spectrum_preserves_trace_and_norm(vals in proptest::collection::vec(-5.0f64..5.0, 100)) {
            let a = Matrix::from_vec(10, 10, vals).unwrap();
            let mut m = a.add(&a.transpose());
            m.symmetrize();
            let s = sym_spectrum(&m, Which::All, DEFAULT_TOL).unwrap();
            let fro = m.frobenius_norm_sq().max(1e-300);
            let tr: f64 = s.eigenvalues.iter().sum();
            prop_assert!((tr - m.trace()).abs() <= 1e-8 * fro.sqrt().max(1.0));
            let sq: f64 = s.eigenvalues.iter().map(|x| x * x).sum();
            prop_assert!((sq - fro).abs() <= 1e-8 * fro);
        }

        #[test]
        fn pearson_is_bounded(u in proptest::collection::vec(-3.0f64..3.0, 5), v in proptest::collection::vec(-3.0f64..3.0, 5)) {
            if let Ok(c) = pearson_corr(&u, &v) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
