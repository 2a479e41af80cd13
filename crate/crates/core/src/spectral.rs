//! Graph Laplacian and the partial graph Fourier basis.
//!
//! The basis holds the `m` lowest-frequency eigenvectors of the combinatorial
//! Laplacian `L = D - A`. Small or disconnected graphs are solved densely;
//! larger connected graphs use shift-invert Lanczos with full
//! reorthogonalisation on top of the sparse Cholesky factor of `L + delta I`.
//! Every returned pair is checked against the residual tolerance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{dot, gemm, norm2, CsrMatrix, Mat, SparseCholesky, View};

/// Residual tolerance `||L q - lambda q|| <= RESIDUAL_TOL * max(1, lambda)`.
pub const RESIDUAL_TOL: f64 = 1e-7;

/// `L = D - A` over the symmetrised adjacency.
pub fn combinatorial_laplacian(graph: &Graph) -> CsrMatrix {
    let a = graph.adjacency();
    let n = a.n_rows();
    let mut trip = Vec::with_capacity(a.nnz() + n);
    for u in 0..n {
        let (cols, vals) = a.row(u);
        let mut degree = 0.0;
        for (&v, &w) in cols.iter().zip(vals) {
            trip.push((u, v, -w));
            degree += w;
        }
        trip.push((u, u, degree));
    }
    CsrMatrix::from_triplets(n, n, &trip).expect("indices come from a valid adjacency")
}

/// The `m` lowest Laplacian eigenpairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    /// n x m, orthonormal columns
    q: Mat,
}

impl SpectralBasis {
    pub fn new(eigenvalues: Vec<f64>, q: Mat) -> Result<Self> {
        if q.cols() != eigenvalues.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} eigenvalues for {} eigenvectors",
                eigenvalues.len(),
                q.cols()
            )));
        }
        Ok(SpectralBasis { eigenvalues, q })
    }

    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn q_matrix(&self) -> &Mat {
        &self.q
    }
}

/// Eigensolver selection for [`lowest_eigenpairs_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenSolver {
    /// Dense for `n <= 1000`, for disconnected graphs, or when `m > n/4`;
    /// shift-invert Lanczos otherwise.
    Auto,
    Dense,
    /// Assumes the low end of the spectrum is simple; a repeated eigenvalue
    /// is found only once.
    ShiftInvertLanczos,
}

pub fn lowest_eigenpairs(laplacian: &CsrMatrix, m: usize) -> Result<SpectralBasis> {
    lowest_eigenpairs_with(laplacian, m, EigenSolver::Auto)
}

pub fn lowest_eigenpairs_with(
    laplacian: &CsrMatrix,
    m: usize,
    solver: EigenSolver,
) -> Result<SpectralBasis> {
    let n = laplacian.n_rows();
    if laplacian.n_cols() != n || m == 0 || m > n {
        return Err(Error::ShapeMismatch(format!(
            "{m} eigenpairs of a {}x{} matrix",
            n,
            laplacian.n_cols()
        )));
    }
    let solver = match solver {
        EigenSolver::Auto if n <= 1000 || 4 * m > n || component_count(laplacian) > 1 => {
            EigenSolver::Dense
        }
        EigenSolver::Auto => EigenSolver::ShiftInvertLanczos,
        s => s,
    };
    let (values, mut q) = match solver {
        EigenSolver::Dense => dense_lowest(laplacian, m),
        _ => lanczos_lowest(laplacian, m)?,
    };
    fix_signs(&mut q);
    check_residuals(laplacian, &values, &q)?;
    SpectralBasis::new(values, q)
}

fn component_count(a: &CsrMatrix) -> usize {
    let n = a.n_rows();
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            let (cols, vals) = a.row(u);
            for (&v, &w) in cols.iter().zip(vals) {
                if w != 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

fn dense_lowest(a: &CsrMatrix, m: usize) -> (Vec<f64>, Mat) {
    let n = a.n_rows();
    let dense = a.to_dense();
    let mat = DMatrix::from_row_slice(n, n, dense.as_slice());
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let mut q = Mat::zeros(n, m);
    let mut values = Vec::with_capacity(m);
    for (col, &i) in order.iter().take(m).enumerate() {
        values.push(eig.eigenvalues[i]);
        for r in 0..n {
            q.set(r, col, eig.eigenvectors[(r, i)]);
        }
    }
    (values, q)
}

fn lanczos_lowest(a: &CsrMatrix, m: usize) -> Result<(Vec<f64>, Mat)> {
    let n = a.n_rows();
    let mean_diag = (0..n).map(|i| a.get(i, i)).sum::<f64>() / n as f64;
    let delta = 1e-3 * mean_diag.max(f64::MIN_POSITIVE);
    let shifted = {
        let mut trip = Vec::with_capacity(a.nnz() + n);
        for r in 0..n {
            let (cols, vals) = a.row(r);
            trip.extend(cols.iter().zip(vals).map(|(&c, &v)| (r, c, v)));
            trip.push((r, r, delta));
        }
        CsrMatrix::from_triplets(n, n, &trip)?
    };
    let chol = SparseCholesky::factor(&shifted)?;
    let budget = n.min(12 * m + 200);

    // basis vectors stored as rows
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut v = start_vector(n, 0);
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut restarts = 1;

    while basis.len() < budget {
        basis.push(v.clone());
        let j = basis.len() - 1;
        let mut w = chol.solve(&basis[j])?;
        let a_j = dot(&w, &basis[j]);
        alpha.push(a_j);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(wi, bi)| *wi -= c * bi);
            }
        }
        let b_j = norm2(&w);
        let k = basis.len();
        let check = k >= m && (k % 10 == 0 || k == budget || b_j < 1e-12 * a_j.abs());
        if check {
            if let Some(found) = converged_pairs(a, &basis, &alpha, &beta, m)? {
                return Ok(found);
            }
        }
        if b_j < 1e-12 * a_j.abs().max(1e-300) {
            // invariant subspace: continue with a fresh orthogonal direction
            let mut fresh = start_vector(n, restarts);
            restarts += 1;
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&fresh, b);
                    fresh.iter_mut().zip(b).for_each(|(fi, bi)| *fi -= c * bi);
                }
            }
            let nf = norm2(&fresh);
            if nf < 1e-10 {
                break;
            }
            fresh.iter_mut().for_each(|x| *x /= nf);
            beta.push(0.0);
            v = fresh;
        } else {
            beta.push(b_j);
            v = w.into_iter().map(|x| x / b_j).collect();
        }
    }
    Err(Error::ConvergenceFailure(format!(
        "{m} eigenpairs not resolved within {budget} Lanczos steps"
    )))
}

fn start_vector(n: usize, salt: usize) -> Vec<f64> {
    // deterministic, aperiodic, nonzero on every node
    (0..n)
        .map(|i| {
            let x = (i as f64 + 1.0) * (0.618_033_988_749_895 + salt as f64 * 0.414_213_562_373_095);
            1.0 + 0.5 * (x.fract() - 0.5)
        })
        .collect()
}

/// Ritz pairs of the current Krylov space, if all `m` meet the tolerance.
fn converged_pairs(
    a: &CsrMatrix,
    basis: &[Vec<f64>],
    alpha: &[f64],
    beta: &[f64],
    m: usize,
) -> Result<Option<(Vec<f64>, Mat)>> {
    let k = basis.len();
    let n = a.n_rows();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    // largest Ritz values of the inverse are the smallest of L
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut s = Mat::zeros(k, m);
    for (col, &i) in order.iter().take(m).enumerate() {
        for r in 0..k {
            s.set(r, col, eig.eigenvectors[(r, i)]);
        }
    }
    let flat: Vec<f64> = basis.iter().flatten().copied().collect();
    // Y = V^T S, with V stored k x n
    let mut y = Mat::zeros(n, m);
    gemm(1.0, View::new(&flat, k, n).t(), s.view(), 0.0, y.as_mut_slice())?;
    let mut values = Vec::with_capacity(m);
    let mut col = vec![0.0; n];
    let mut lcol = vec![0.0; n];
    for c in 0..m {
        for r in 0..n {
            col[r] = y.get(r, c);
        }
        let nc = norm2(&col);
        col.iter_mut().for_each(|x| *x /= nc);
        a.mul_vec(&col, &mut lcol);
        let lambda = dot(&col, &lcol);
        let res: f64 = lcol
            .iter()
            .zip(&col)
            .map(|(l, q)| (l - lambda * q).powi(2))
            .sum::<f64>()
            .sqrt();
        if res > 0.1 * RESIDUAL_TOL * lambda.max(1.0) {
            return Ok(None);
        }
        for r in 0..n {
            y.set(r, c, col[r]);
        }
        values.push(lambda);
    }
    // Rayleigh quotients can reorder nearly equal pairs
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut q = Mat::zeros(n, m);
    let mut sorted = Vec::with_capacity(m);
    for (c, &i) in order.iter().enumerate() {
        sorted.push(values[i]);
        for r in 0..n {
            q.set(r, c, y.get(r, i));
        }
    }
    Ok(Some((sorted, q)))
}

/// Makes the largest-magnitude entry of every column positive.
fn fix_signs(q: &mut Mat) {
    for c in 0..q.cols() {
        let mut best = 0usize;
        for r in 0..q.rows() {
            if q.get(r, c).abs() > q.get(best, c).abs() {
                best = r;
            }
        }
        if q.get(best, c) < 0.0 {
            for r in 0..q.rows() {
                q.set(r, c, -q.get(r, c));
            }
        }
    }
}

fn check_residuals(a: &CsrMatrix, values: &[f64], q: &Mat) -> Result<()> {
    let n = q.rows();
    let mut col = vec![0.0; n];
    let mut lcol = vec![0.0; n];
    for (c, &lambda) in values.iter().enumerate() {
        for r in 0..n {
            col[r] = q.get(r, c);
        }
        a.mul_vec(&col, &mut lcol);
        let res = lcol
            .iter()
            .zip(&col)
            .map(|(l, x)| (l - lambda * x).powi(2))
            .sum::<f64>()
            .sqrt();
        if !(res <= RESIDUAL_TOL * lambda.max(1.0)) {
            return Err(Error::ConvergenceFailure(format!(
                "pair {c} (lambda = {lambda:e}) has residual {res:e}"
            )));
        }
    }
    Ok(())
}

/// Partial graph Fourier transform `Q_m^T x`.
pub fn gft(basis: &SpectralBasis, signal: &Mat) -> Result<Mat> {
    if signal.rows() != basis.n() {
        return Err(Error::ShapeMismatch(format!(
            "signal has {} rows, basis has {} nodes",
            signal.rows(),
            basis.n()
        )));
    }
    crate::linalg::matmul(basis.q.view().t(), signal.view())
}

/// Partial inverse transform `Q_m c`.
pub fn igft(basis: &SpectralBasis, coeffs: &Mat) -> Result<Mat> {
    if coeffs.rows() != basis.m() {
        return Err(Error::ShapeMismatch(format!(
            "{} coefficient rows for {} modes",
            coeffs.rows(),
            basis.m()
        )));
    }
    crate::linalg::matmul(basis.q.view(), coeffs.view())
}
