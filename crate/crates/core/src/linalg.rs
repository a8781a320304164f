//! Krylov-subspace kernels on Hermitian operators: the propagator action
//! `exp(-i dt H) ψ` and the lowest eigenpairs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hamiltonian::HermitianOp;
use crate::rng::rng_from_seed;
use crate::state::C64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Settings for [`expm_krylov`].
#[derive(Clone, Copy, Debug)]
pub struct KrylovOptions {
    /// Bound on the estimated error of one application, in vector norm.
    pub tol: f64,
    pub max_dim: usize,
    /// Full Gram-Schmidt against every earlier Lanczos vector.
    pub reorthogonalize: bool,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions { tol: 1e-12, max_dim: 64, reorthogonalize: false }
    }
}

/// `exp(-i dt T) e_0` for the real symmetric tridiagonal `T`.
fn tridiagonal_propagator(alpha: &[f64], beta: &[f64], dt: f64) -> Vec<C64> {
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let q = &eig.eigenvectors;
    (0..m)
        .map(|i| {
            (0..m)
                .map(|k| C64::from_polar(q[(i, k)] * q[(0, k)], -eig.eigenvalues[k] * dt))
                .sum()
        })
        .collect()
}

/// Replaces `psi` with `exp(-i dt H) psi` using a Lanczos basis that grows
/// until the a-posteriori error estimate drops below `opts.tol`. Returns the
/// Krylov dimension used.
pub fn expm_krylov(op: &dyn HermitianOp, psi: &mut [C64], dt: f64, opts: &KrylovOptions) -> Result<usize> {
    let n = op.dim();
    let beta0 = norm(psi);
    if beta0 == 0.0 || dt == 0.0 {
        return Ok(0);
    }
    let mut basis: Vec<Vec<C64>> = vec![psi.iter().map(|x| x / beta0).collect()];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![ZERO; n];
    let max_dim = opts.max_dim.min(n);
    for j in 0..max_dim {
        op.apply(&basis[j], &mut w);
        let a = dotc(&basis[j], &w).re;
        axpy(C64::new(-a, 0.0), &basis[j], &mut w);
        if j > 0 {
            axpy(C64::new(-beta[j - 1], 0.0), &basis[j - 1], &mut w);
        }
        if opts.reorthogonalize {
            for v in &basis {
                let c = dotc(v, &w);
                axpy(-c, v, &mut w);
            }
        }
        let b = norm(&w);
        alpha.push(a);
        let y = tridiagonal_propagator(&alpha, &beta, dt);
        let err = beta0 * b * y[j].norm();
        let exhausted = b <= 1e-13 * (a.abs() + beta.last().copied().unwrap_or(0.0) + 1.0);
        if err < opts.tol || exhausted || j + 1 == n {
            psi.fill(ZERO);
            for (v, c) in basis.iter().zip(&y) {
                axpy(c * beta0, v, psi);
            }
            return Ok(j + 1);
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    Err(Error::Integration(format!(
        "Krylov propagator did not reach tolerance {:e} within dimension {max_dim} (dt = {dt})",
        opts.tol
    )))
}

/// `exp(-i dt H)` for a dense Hermitian matrix.
pub fn expm_hermitian(h: &DMatrix<C64>, dt: f64) -> DMatrix<C64> {
    let eig = SymmetricEigen::new(h.clone());
    let v = &eig.eigenvectors;
    let phases = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&e| C64::from_polar(1.0, -e * dt)));
    let mut scaled = v.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= phases[k];
    }
    scaled * v.adjoint()
}

/// Lowest `count` eigenpairs, ascending. Small operators are diagonalised
/// densely; larger ones use Lanczos with explicit deflation of converged
/// vectors, so degenerate levels come back with their multiplicity.
pub fn lowest_eigenpairs(op: &dyn HermitianOp, count: usize, tol: f64) -> Result<Vec<(f64, Vec<C64>)>> {
    let n = op.dim();
    let count = count.min(n);
    if n <= 256 {
        let mut dense = DMatrix::from_element(n, n, ZERO);
        let mut e = vec![ZERO; n];
        let mut col = vec![ZERO; n];
        for j in 0..n {
            e.fill(ZERO);
            e[j] = C64::new(1.0, 0.0);
            op.apply(&e, &mut col);
            dense.set_column(j, &DVector::from_column_slice(&col));
        }
        let eig = SymmetricEigen::new(dense);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        return Ok(order
            .into_iter()
            .take(count)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().cloned().collect()))
            .collect());
    }
    let mut found: Vec<(f64, Vec<C64>)> = Vec::with_capacity(count);
    for level in 0..count {
        let deflate: Vec<&Vec<C64>> = found.iter().map(|(_, v)| v).collect();
        let pair = lanczos_lowest(op, &deflate, tol, level as u64)?;
        found.push(pair);
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(found)
}

fn project_out(w: &mut [C64], vs: &[&Vec<C64>]) {
    for v in vs {
        let c = dotc(v, w);
        axpy(-c, v, w);
    }
}

/// Lowest eigenpair of `op` restricted to the complement of `deflate`.
fn lanczos_lowest(op: &dyn HermitianOp, deflate: &[&Vec<C64>], tol: f64, seed: u64) -> Result<(f64, Vec<C64>)> {
    let n = op.dim();
    let max_iter = n.min(400);
    let mut rng = rng_from_seed(0x5eed ^ seed);
    let mut v0: Vec<C64> = (0..n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
    project_out(&mut v0, deflate);
    let nv = norm(&v0);
    v0.iter_mut().for_each(|x| *x /= nv);
    let mut basis = vec![v0];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![ZERO; n];
    for j in 0..max_iter {
        op.apply(&basis[j], &mut w);
        project_out(&mut w, deflate);
        let a = dotc(&basis[j], &w).re;
        alpha.push(a);
        for _ in 0..2 {
            let refs: Vec<&Vec<C64>> = basis.iter().collect();
            project_out(&mut w, &refs);
            project_out(&mut w, deflate);
        }
        let b = norm(&w);
        let check = j + 1 == max_iter || b < 1e-12 || (j >= 8 && j % 4 == 0);
        if check {
            let m = alpha.len();
            let mut t = DMatrix::<f64>::zeros(m, m);
            for i in 0..m {
                t[(i, i)] = alpha[i];
                if i + 1 < m {
                    t[(i, i + 1)] = beta[i];
                    t[(i + 1, i)] = beta[i];
                }
            }
            let eig = SymmetricEigen::new(t);
            let k = (0..m).min_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y])).unwrap();
            let residual = b * eig.eigenvectors[(m - 1, k)].abs();
            if residual < tol || b < 1e-12 || j + 1 == max_iter {
                if residual >= tol.max(1e-6) {
                    return Err(Error::Integration(format!("Lanczos stalled with residual {residual:e}")));
                }
                let mut vec = vec![ZERO; n];
                for (i, v) in basis.iter().enumerate() {
                    axpy(C64::new(eig.eigenvectors[(i, k)], 0.0), v, &mut vec);
                }
                project_out(&mut vec, deflate);
                let nv = norm(&vec);
                vec.iter_mut().for_each(|x| *x /= nv);
                return Ok((eig.eigenvalues[k], vec));
            }
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    unreachable!("loop returns on the final iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_hamiltonian, DriveFields};
    use crate::lattice::{interaction_matrix, ring_positions, Truncation, C6_DEFAULT};

    fn ring_h(sites: usize, omega: f64, delta: f64) -> crate::hamiltonian::RydbergHamiltonian {
        let u = interaction_matrix(&ring_positions(sites, 6.0).unwrap(), C6_DEFAULT, Truncation::Full).unwrap();
        build_hamiltonian(&u, &DriveFields::uniform(sites, omega, delta, 0.3)).unwrap()
    }

    #[test]
    fn krylov_matches_dense_exponential() {
        let h = ring_h(5, 12.0, 25.0);
        let dense = expm_hermitian(&h.to_dense(), 0.01);
        let mut psi: Vec<C64> = (0..32).map(|i| C64::new(1.0 + i as f64 * 0.1, -(i as f64) * 0.05)).collect();
        let nrm = norm(&psi);
        psi.iter_mut().for_each(|x| *x /= nrm);
        let expect = &dense * DVector::from_column_slice(&psi);
        expm_krylov(&h, &mut psi, 0.01, &KrylovOptions::default()).unwrap();
        let diff: f64 = psi.iter().zip(expect.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn krylov_reports_failure() {
        let h = ring_h(5, 12.0, 25.0);
        let mut psi = vec![C64::new(1.0 / 32f64.sqrt(), 0.0); 32];
        let opts = KrylovOptions { tol: 1e-14, max_dim: 3, reorthogonalize: true };
        assert!(matches!(expm_krylov(&h, &mut psi, 1.0, &opts), Err(Error::Integration(_))));
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let h = ring_h(9, 5.0, 20.0);
        let mut dense: Vec<f64> = h.to_dense().symmetric_eigenvalues().iter().cloned().collect();
        dense.sort_by(f64::total_cmp);
        let pairs = lowest_eigenpairs(&h, 4, 1e-9).unwrap();
        for (k, (e, v)) in pairs.iter().enumerate() {
            assert!((e - dense[k]).abs() < 1e-7, "level {k}: {e} vs {}", dense[k]);
            let mut hv = vec![ZERO; v.len()];
            h.apply(v, &mut hv);
            axpy(C64::new(-e, 0.0), v, &mut hv);
            assert!(norm(&hv) < 1e-6);
        }
    }
}
