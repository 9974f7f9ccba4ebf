//! Symmetric eigensolvers.
//!
//! Full spectra use cyclic Jacobi rotations. Top-k problems (explicit
//! matrices or matrix-free operators) use a Krylov basis with full
//! reorthogonalization, Rayleigh-Ritz extraction and thick restarts.

use crate::error::{Error, Result};
use crate::linalg::matrix::{axpy, dot, norm, Matrix};
use crate::rng::{self, Stream};

/// Largest matrix accepted for full diagonalization.
pub const MAX_FULL_DIM: usize = 2048;

/// Default backward-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

/// How many eigenpairs to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    All,
    Top(usize),
}

/// Eigenpairs sorted by |λ| descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors, paired with `eigenvalues`.
    pub eigenvectors: Option<Matrix>,
    /// Per-pair backward error `‖Mv − λv‖ / scale`.
    pub residual_norms: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvector(&self, i: usize) -> Option<Vec<f64>> {
        self.eigenvectors.as_ref().map(|v| v.col(i))
    }

    pub fn max_residual(&self) -> f64 {
        self.residual_norms.iter().fold(0.0_f64, |m, &r| m.max(r))
    }
}

/// Eigenpairs of a symmetric matrix; see [`sym_spectrum_seeded`].
pub fn sym_spectrum(m: &Matrix, which: Which, tol: f64) -> Result<Spectrum> {
    sym_spectrum_seeded(m, which, tol, 0)
}

/// Eigenpairs of a symmetric matrix, ordered by |λ| descending.
///
/// `Which::All` diagonalizes densely (n ≤ [`MAX_FULL_DIM`]); `Which::Top(k)`
/// runs the Krylov solver, whose start and restart vectors come from `seed`.
/// Residuals are relative to ‖M‖_F.
pub fn sym_spectrum_seeded(m: &Matrix, which: Which, tol: f64, seed: u64) -> Result<Spectrum> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigensolver needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    m.ensure_finite("matrix")?;
    let n = m.rows();
    if n == 0 {
        return Err(Error::Degenerate("empty matrix".into()));
    }
    let scale = m.max_abs();
    let asym = m.max_asymmetry();
    if asym > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym / scale));
    }
    let fro = m.frobenius_norm();
    match which {
        Which::All => {
            if n > MAX_FULL_DIM {
                return Err(Error::Unsupported(format!(
                    "full diagonalization limited to n <= {MAX_FULL_DIM}, got {n}"
                )));
            }
            let mut sym = m.clone();
            sym.symmetrize();
            let (values, vectors) = jacobi(&sym)?;
            let spec = finish_dense(m, fro, values, vectors);
            check_tol(&spec, tol)?;
            Ok(spec)
        }
        Which::Top(k) => {
            if k == 0 || k > n {
                return Err(Error::Index(format!(
                    "requested {k} eigenpairs of an {n}x{n} matrix"
                )));
            }
            let mut spec = top_k_operator(n, k, tol, seed, Some(fro), |v| Ok(m.matvec(v)))?;
            // Report the exact residual against the explicit matrix.
            let vecs = spec.eigenvectors.as_ref().expect("krylov returns vectors");
            for (i, r) in spec.residual_norms.iter_mut().enumerate() {
                *r = pair_residual(m, &vecs.col(i), spec.eigenvalues[i], fro);
            }
            check_tol(&spec, tol)?;
            Ok(spec)
        }
    }
}

fn check_tol(spec: &Spectrum, tol: f64) -> Result<()> {
    let worst = spec.max_residual();
    if worst > tol {
        return Err(Error::NoConvergence {
            iterations: 0,
            best_residual: worst,
        });
    }
    Ok(())
}

fn pair_residual(m: &Matrix, v: &[f64], lambda: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let mut mv = m.matvec(v);
    axpy(-lambda, v, &mut mv);
    norm(&mv) / scale
}

fn finish_dense(m: &Matrix, fro: f64, values: Vec<f64>, vectors_t: Matrix) -> Spectrum {
    let n = values.len();
    let order = abs_desc_order(&values);
    let eigenvalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    // Rows of `vectors_t` are eigenvectors; gather them as columns.
    let sorted_t = vectors_t.select_rows(&order);
    let vectors = sorted_t.transpose();
    let residual_norms = if fro == 0.0 {
        vec![0.0; n]
    } else {
        let mv = m.matmul(&vectors);
        (0..n)
            .map(|j| {
                let mut s = 0.0;
                for i in 0..n {
                    let d = mv[(i, j)] - eigenvalues[j] * vectors[(i, j)];
                    s += d * d;
                }
                s.sqrt() / fro
            })
            .collect()
    };
    Spectrum {
        eigenvalues,
        eigenvectors: Some(vectors),
        residual_norms,
    }
}

/// Indices sorting `values` by |λ| descending; positive value first on ties.
fn abs_desc_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(values[b].total_cmp(&values[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Cyclic Jacobi on a symmetric matrix. Returns eigenvalues (unsorted) and a
/// matrix whose rows are the matching orthonormal eigenvectors.
pub(crate) fn jacobi(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    const MAX_SWEEPS: usize = 80;
    let n = a.rows();
    let mut a = a.clone();
    let mut vt = Matrix::identity(n);
    let fro_sq = a.frobenius_norm_sq();
    if fro_sq == 0.0 {
        return Ok((vec![0.0; n], vt));
    }
    let target = (f64::EPSILON * f64::EPSILON) * fro_sq * 1e-2;
    let mut off = off_diagonal_sq(&a);
    let mut sweep = 0;
    while off > target {
        if sweep == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                iterations: sweep,
                best_residual: (off / fro_sq).sqrt(),
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, p, q, c, s, t * apq);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        off = off_diagonal_sq(&a);
        sweep += 1;
    }
    let values = (0..n).map(|i| a[(i, i)]).collect();
    Ok((values, vt))
}

fn off_diagonal_sq(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for (j, &x) in a.row(i).iter().enumerate() {
            if i != j {
                s += x * x;
            }
        }
    }
    s
}

// Apply the (p,q) rotation J to both sides of the symmetric matrix: A ← JᵀAJ.
fn rotate(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t_apq: f64) {
    let n = a.rows();
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = a[(r, p)];
        let arq = a[(r, q)];
        let np = c * arp - s * arq;
        let nq = s * arp + c * arq;
        a[(r, p)] = np;
        a[(p, r)] = np;
        a[(r, q)] = nq;
        a[(q, r)] = nq;
    }
    a[(p, p)] -= t_apq;
    a[(q, q)] += t_apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
}

fn rotate_rows(vt: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = vt.cols();
    let data = vt.data_mut();
    let (lo, hi) = data.split_at_mut(q * n);
    let rp = &mut lo[p * n..(p + 1) * n];
    let rq = &mut hi[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let vp = *x;
        let vq = *y;
        *x = c * vp - s * vq;
        *y = s * vp + c * vq;
    }
}

/// Top-`k` eigenpairs (by |λ|) of a symmetric linear operator of dimension `n`.
///
/// `scale` normalizes residuals; when `None` the largest |Ritz value| is
/// used, i.e. residuals are relative to an estimate of ‖M‖₂. The operator is
/// only assumed symmetric up to noise: the projected matrix is symmetrized.
pub fn top_k_operator<F>(
    n: usize,
    k: usize,
    tol: f64,
    seed: u64,
    scale: Option<f64>,
    mut apply: F,
) -> Result<Spectrum>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if k == 0 || k > n {
        return Err(Error::Index(format!(
            "requested {k} eigenpairs in dimension {n}"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Eigen);
    let budget = 10usize.saturating_mul(n).saturating_mul(k).max(50);
    let max_basis = n.min((2 * k + 30).max(3 * k));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(max_basis);
    let mut next = rng::normal_vec(&mut rng, n);
    let mut matvecs = 0usize;
    let mut best = f64::INFINITY;

    loop {
        // Extend the basis with `next`, orthogonalized against everything.
        while basis.len() < max_basis {
            let fresh_norm = norm(&next);
            orthogonalize(&mut next, &basis);
            let mut nrm = norm(&next);
            if nrm <= 1e-10 * fresh_norm.max(f64::MIN_POSITIVE) || nrm == 0.0 {
                // Invariant subspace reached: restart from a random direction.
                if basis.len() == n {
                    break;
                }
                next = rng::normal_vec(&mut rng, n);
                orthogonalize(&mut next, &basis);
                nrm = norm(&next);
                if nrm == 0.0 {
                    break;
                }
            }
            next.iter_mut().for_each(|x| *x /= nrm);
            let image = apply(&next)?;
            if image.len() != n {
                return Err(Error::Dimension(format!(
                    "operator returned length {} for dimension {n}",
                    image.len()
                )));
            }
            if image.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("operator output".into()));
            }
            matvecs += 1;
            basis.push(std::mem::take(&mut next));
            next = image.clone();
            images.push(image);
        }

        // Rayleigh-Ritz on the current basis.
        let m = basis.len();
        let mut h = Matrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = 0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i]));
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        let (theta, s_t) = jacobi(&h)?;
        let order = abs_desc_order(&theta);
        let norm_scale = scale.unwrap_or_else(|| theta.iter().fold(0.0_f64, |a, t| a.max(t.abs())));

        let keep = k.min(m);
        let mut ritz_vecs = Vec::with_capacity(keep);
        let mut ritz_imgs = Vec::with_capacity(keep);
        let mut residuals = Vec::with_capacity(keep);
        for &idx in order.iter().take(keep) {
            let coeffs = s_t.row(idx);
            let y = combine(&basis, coeffs, n);
            let ay = combine(&images, coeffs, n);
            let mut r = ay.clone();
            axpy(-theta[idx], &y, &mut r);
            let res = if norm_scale == 0.0 {
                0.0
            } else {
                norm(&r) / norm_scale
            };
            residuals.push(res);
            ritz_vecs.push(y);
            ritz_imgs.push(ay);
        }
        let worst = residuals.iter().fold(0.0_f64, |a, &r| a.max(r));
        best = best.min(worst);

        if worst <= tol || m == n {
            let eigenvalues: Vec<f64> = order.iter().take(keep).map(|&i| theta[i]).collect();
            let mut vecs = Matrix::zeros(n, keep);
            for (j, y) in ritz_vecs.iter().enumerate() {
                vecs.set_col(j, y);
            }
            return Ok(Spectrum {
                eigenvalues,
                eigenvectors: Some(vecs),
                residual_norms: residuals,
            });
        }
        if matvecs >= budget {
            return Err(Error::NoConvergence {
                iterations: matvecs,
                best_residual: best,
            });
        }

        // Thick restart: keep the wanted Ritz pairs plus a few extras, then
        // continue from the residual direction of the last basis vector.
        let extra = (m - keep)
            .min(k.max(4) / 2)
            .min(max_basis.saturating_sub(keep + 2));
        for &idx in order.iter().skip(keep).take(extra) {
            let coeffs = s_t.row(idx);
            ritz_vecs.push(combine(&basis, coeffs, n));
            ritz_imgs.push(combine(&images, coeffs, n));
        }
        // The new direction must be orthogonal to the whole old basis, not
        // only to the kept Ritz vectors.
        next = images.pop().expect("nonempty basis");
        orthogonalize(&mut next, &basis);
        basis = ritz_vecs;
        images = ritz_imgs;
        // Re-orthonormalize the kept vectors to shed rounding drift.
        reorthonormalize(&mut basis, &mut images);
    }
}

fn combine(vectors: &[Vec<f64>], coeffs: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (v, &c) in vectors.iter().zip(coeffs) {
        if c != 0.0 {
            axpy(c, v, &mut out);
        }
    }
    out
}

// Two passes of classical Gram-Schmidt.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(b, v);
            axpy(-c, b, v);
        }
    }
}

fn reorthonormalize(basis: &mut [Vec<f64>], images: &mut [Vec<f64>]) {
    for i in 0..basis.len() {
        for j in 0..i {
            let c = dot(&basis[j], &basis[i]);
            if c != 0.0 {
                let (lo, hi) = basis.split_at_mut(i);
                axpy(-c, &lo[j], &mut hi[0]);
                let (lo, hi) = images.split_at_mut(i);
                axpy(-c, &lo[j], &mut hi[0]);
            }
        }
        let nrm = norm(&basis[i]);
        if nrm > 0.0 {
            basis[i].iter_mut().for_each(|x| *x /= nrm);
            images[i].iter_mut().for_each(|x| *x /= nrm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut r = stream(seed, Stream::Aux);
        let a = Matrix::from_fn(n, n, |_, _| normal(&mut r));
        let mut s = a.add(&a.transpose());
        s.scale_in_place(0.5);
        s
    }

    fn reconstruct(spec: &Spectrum) -> Matrix {
        let v = spec.eigenvectors.as_ref().unwrap();
        let scaled = Matrix::from_fn(v.rows(), v.cols(), |i, j| v[(i, j)] * spec.eigenvalues[j]);
        scaled.matmul_t(v)
    }

    #[test]
    fn diagonal_top_two_by_magnitude() {
        let m = Matrix::diag(&[3.0, 1.0, -5.0]);
        let s = sym_spectrum(&m, Which::Top(2), DEFAULT_TOL).unwrap();
        assert!((s.eigenvalues[0] + 5.0).abs() < 1e-12);
        assert!((s.eigenvalues[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_projector() {
        let u = [0.6, 0.0, -0.8];
        let m = Matrix::outer(&u, &u);
        let s = sym_spectrum(&m, Which::All, DEFAULT_TOL).unwrap();
        assert!((s.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(s.eigenvalues[1..].iter().all(|x| x.abs() < 1e-12));
        let v = s.eigenvector(0).unwrap();
        assert!((dot(&v, &u).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_reconstruction_64() {
        let m = random_symmetric(64, 3);
        let s = sym_spectrum(&m, Which::All, DEFAULT_TOL).unwrap();
        let err = reconstruct(&s).sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-8, "{err}");
        let trace: f64 = s.eigenvalues.iter().sum();
        assert!((trace - m.trace()).abs() < 1e-8 * m.frobenius_norm());
        let sq: f64 = s.eigenvalues.iter().map(|x| x * x).sum();
        assert!((sq - m.frobenius_norm_sq()).abs() < 1e-8 * m.frobenius_norm_sq());
        for w in s.eigenvalues.windows(2) {
            assert!(w[0].abs() >= w[1].abs());
        }
    }

    #[test]
    fn krylov_matches_dense_top_k() {
        let m = random_symmetric(120, 9);
        let full = sym_spectrum(&m, Which::All, DEFAULT_TOL).unwrap();
        let top = sym_spectrum(&m, Which::Top(6), DEFAULT_TOL).unwrap();
        for i in 0..6 {
            assert!((full.eigenvalues[i] - top.eigenvalues[i]).abs() < 1e-7);
            assert!(top.residual_norms[i] <= DEFAULT_TOL);
        }
        let v = top.eigenvectors.unwrap();
        for j in 0..6 {
            assert!((norm(&v.col(j)) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn krylov_handles_symmetric_plus_minus_spectrum() {
        // ±λ pairs stall plain power iteration; the Krylov solver must not care.
        let vals: Vec<f64> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    (i / 2 + 1) as f64
                } else {
                    -((i / 2 + 1) as f64)
                }
            })
            .collect();
        let q = {
            let r = random_symmetric(40, 5);
            let s = sym_spectrum(&r, Which::All, DEFAULT_TOL).unwrap();
            s.eigenvectors.unwrap()
        };
        let d = Matrix::from_fn(40, 40, |i, j| q[(i, j)] * vals[j]);
        let mut m = d.matmul_t(&q);
        m.symmetrize();
        let top = sym_spectrum(&m, Which::Top(4), DEFAULT_TOL).unwrap();
        let expect = [20.0, -20.0, 19.0, -19.0];
        for (got, want) in top.eigenvalues.iter().zip(expect) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            sym_spectrum(&m, Which::All, DEFAULT_TOL),
            Err(Error::NotSymmetric(_))
        ));
        assert!(matches!(
            sym_spectrum(&Matrix::zeros(2, 3), Which::All, DEFAULT_TOL),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            sym_spectrum(&Matrix::identity(2), Which::Top(3), DEFAULT_TOL),
            Err(Error::Index(_))
        ));
    }
}
