//! Small dense linear algebra: row-major matrices, a modified Cholesky
//! solver that drops collinear columns instead of failing, weighted least
//! squares, and sandwich covariance estimators (HC1 / CR1).
//!
//! Design sizes here are a few hundred columns at most, so an O(k^3)
//! dense factorization is plenty. The solver processes columns in input
//! order and skips any pivot below a relative tolerance, which makes the
//! set of dropped columns deterministic and reportable.

use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let rows = if cols == 0 { 0 } else { columns[0].len() };
        let mut m = Matrix::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "ragged column {j}");
            for (i, &v) in col.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// X'diag(w)X and X'diag(w)y in one pass over the rows.
    pub fn weighted_gram(&self, y: &[f64], w: &[f64]) -> (Matrix, Vec<f64>) {
        assert_eq!(y.len(), self.rows);
        assert_eq!(w.len(), self.rows);
        let k = self.cols;
        // Accumulate per-chunk partials in parallel, then combine in
        // fixed chunk order so the sums are schedule-independent.
        let chunk = 4096.max(self.rows / 64 + 1);
        let n_chunks = self.rows.div_ceil(chunk);
        let partials = par::map_indexed(n_chunks, |c| {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(self.rows);
            let mut g = vec![0.0; k * k];
            let mut v = vec![0.0; k];
            for i in lo..hi {
                let row = self.row(i);
                let wi = w[i];
                if wi == 0.0 {
                    continue;
                }
                for a in 0..k {
                    let wa = wi * row[a];
                    v[a] += wa * y[i];
                    for b in a..k {
                        g[a * k + b] += wa * row[b];
                    }
                }
            }
            (g, v)
        });
        let mut gram = Matrix::zeros(k, k);
        let mut xtwy = vec![0.0; k];
        for (g, v) in partials {
            for a in 0..k {
                xtwy[a] += v[a];
                for b in a..k {
                    gram[(a, b)] += g[a * k + b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        (gram, xtwy)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Result of a symmetric positive semi-definite solve with column drops.
#[derive(Debug, Clone)]
pub struct SymSolve {
    pub solution: Vec<f64>,
    /// Indices whose pivot fell below tolerance; their solution entries
    /// are exactly zero.
    pub dropped: Vec<usize>,
}

/// Modified Cholesky (LDL') of a symmetric PSD matrix that skips
/// near-zero pivots. Relative pivot tolerance is scaled by the original
/// diagonal entry, so the drop decision is invariant to column scaling.
struct LdlFactor {
    l: Matrix,
    d: Vec<f64>,
    kept: Vec<bool>,
}

fn ldl_factor(a: &Matrix, rel_tol: f64) -> LdlFactor {
    let n = a.cols;
    assert_eq!(a.rows, n);
    let mut l = Matrix::zeros(n, n);
    let mut d = vec![0.0; n];
    let mut kept = vec![false; n];
    for j in 0..n {
        let mut dj = a[(j, j)];
        for k in 0..j {
            if kept[k] {
                dj -= l[(j, k)] * l[(j, k)] * d[k];
            }
        }
        let scale = a[(j, j)].abs().max(1e-300);
        if dj <= rel_tol * scale {
            continue; // dropped
        }
        kept[j] = true;
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                if kept[k] {
                    v -= l[(i, k)] * l[(j, k)] * d[k];
                }
            }
            l[(i, j)] = v / dj;
        }
        l[(j, j)] = 1.0;
    }
    LdlFactor { l, d, kept }
}

impl LdlFactor {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut z = vec![0.0; n];
        for i in 0..n {
            if !self.kept[i] {
                continue;
            }
            let mut v = b[i];
            for k in 0..i {
                if self.kept[k] {
                    v -= self.l[(i, k)] * z[k];
                }
            }
            z[i] = v;
        }
        for i in 0..n {
            if self.kept[i] {
                z[i] /= self.d[i];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            if !self.kept[i] {
                continue;
            }
            let mut v = z[i];
            for k in (i + 1)..n {
                if self.kept[k] {
                    v -= self.l[(k, i)] * x[k];
                }
            }
            x[i] = v;
        }
        x
    }
}

pub const DEFAULT_PIVOT_TOL: f64 = 1e-10;

/// Solve `a x = b` for symmetric PSD `a`, dropping collinear columns.
pub fn solve_sym(a: &Matrix, b: &[f64], rel_tol: f64) -> SymSolve {
    let f = ldl_factor(a, rel_tol);
    let solution = f.solve(b);
    let dropped = f
        .kept
        .iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(i, _)| i)
        .collect();
    SymSolve { solution, dropped }
}

/// Inverse of the kept block of a symmetric PSD matrix; dropped rows and
/// columns are zero.
pub fn invert_sym(a: &Matrix, rel_tol: f64) -> (Matrix, Vec<usize>) {
    let n = a.cols;
    let f = ldl_factor(a, rel_tol);
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        if !f.kept[j] {
            continue;
        }
        e[j] = 1.0;
        let col = f.solve(&e);
        e[j] = 0.0;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    let dropped = f
        .kept
        .iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(i, _)| i)
        .collect();
    (inv, dropped)
}

/// Weighted least squares fit with collinearity drops.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefs: Vec<f64>,
    pub dropped: Vec<usize>,
    /// (X'WX)^-1 over kept columns, zero elsewhere.
    pub xtwx_inv: Matrix,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

pub fn wls(x: &Matrix, y: &[f64], w: &[f64]) -> WlsFit {
    wls_with_tol(x, y, w, DEFAULT_PIVOT_TOL)
}

pub fn wls_with_tol(x: &Matrix, y: &[f64], w: &[f64], rel_tol: f64) -> WlsFit {
    let (gram, xtwy) = x.weighted_gram(y, w);
    let (inv, dropped) = invert_sym(&gram, rel_tol);
    let coefs = inv.matvec(&xtwy);
    let fitted = x.matvec(&coefs);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    WlsFit {
        coefs,
        dropped,
        xtwx_inv: inv,
        fitted,
        residuals,
    }
}

/// HC1 sandwich covariance: (n/(n-k)) A^-1 (sum w_i^2 e_i^2 x_i x_i') A^-1.
pub fn cov_hc1(x: &Matrix, w: &[f64], residuals: &[f64], xtwx_inv: &Matrix, k_params: usize) -> Matrix {
    let n = x.rows;
    let k = x.cols;
    let mut meat = Matrix::zeros(k, k);
    for i in 0..n {
        let s = w[i] * residuals[i];
        if s == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..k {
            let sa = s * s * row[a];
            for b in a..k {
                meat[(a, b)] += sa * row[b];
            }
        }
    }
    symmetrize(&mut meat);
    let dof = if n > k_params { n - k_params } else { 1 };
    let factor = n as f64 / dof as f64;
    sandwich(xtwx_inv, &meat, factor)
}

/// CR1 cluster-robust covariance with the standard small-sample factor
/// G/(G-1) * (n-1)/(n-k). With singleton clusters this reduces exactly to
/// HC1's n/(n-k).
pub fn cov_cluster(
    x: &Matrix,
    w: &[f64],
    residuals: &[f64],
    clusters: &[usize],
    n_clusters: usize,
    xtwx_inv: &Matrix,
    k_params: usize,
) -> Matrix {
    let n = x.rows;
    let k = x.cols;
    let mut scores = vec![vec![0.0; k]; n_clusters];
    for i in 0..n {
        let s = w[i] * residuals[i];
        if s == 0.0 {
            continue;
        }
        let row = x.row(i);
        let g = &mut scores[clusters[i]];
        for a in 0..k {
            g[a] += s * row[a];
        }
    }
    let mut meat = Matrix::zeros(k, k);
    for g in &scores {
        for a in 0..k {
            for b in a..k {
                meat[(a, b)] += g[a] * g[b];
            }
        }
    }
    symmetrize(&mut meat);
    let gf = n_clusters as f64 / (n_clusters as f64 - 1.0).max(1.0);
    let dof = if n > k_params { n - k_params } else { 1 };
    let factor = gf * (n as f64 - 1.0) / dof as f64;
    sandwich(xtwx_inv, &meat, factor)
}

fn symmetrize(m: &mut Matrix) {
    for a in 0..m.cols {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
}

fn sandwich(bread: &Matrix, meat: &Matrix, factor: f64) -> Matrix {
    let k = bread.cols;
    let mut tmp = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut v = 0.0;
            for c in 0..k {
                v += bread[(a, c)] * meat[(c, b)];
            }
            tmp[(a, b)] = v;
        }
    }
    let mut out = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut v = 0.0;
            for c in 0..k {
                v += tmp[(a, c)] * bread[(c, b)];
            }
            out[(a, b)] = factor * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_known_system() {
        // A = [[4,2],[2,3]], b = [10, 9] -> x = [1.5, 2]
        let mut a = Matrix::zeros(2, 2);
        a[(0, 0)] = 4.0;
        a[(0, 1)] = 2.0;
        a[(1, 0)] = 2.0;
        a[(1, 1)] = 3.0;
        let s = solve_sym(&a, &[10.0, 9.0], DEFAULT_PIVOT_TOL);
        assert!(s.dropped.is_empty());
        assert!((s.solution[0] - 1.5).abs() < 1e-12);
        assert!((s.solution[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn drops_collinear_column() {
        // Second column duplicates the first.
        let x = Matrix::from_columns(&[
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![0.0, 1.0, 2.0, 3.0],
        ]);
        let y = vec![1.0, 3.0, 5.0, 7.0];
        let w = vec![1.0; 4];
        let fit = wls(&x, &y, &w);
        assert_eq!(fit.dropped, vec![1]);
        assert!((fit.coefs[0] - 1.0).abs() < 1e-10, "{:?}", fit.coefs);
        assert_eq!(fit.coefs[1], 0.0);
        assert!((fit.coefs[2] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn wls_matches_hand_computation() {
        // Minimize sum w (y - a - b x)^2 with w = {1,2,1}, x = {0,1,2},
        // y = {0,1,3}. Normal equations solved by hand.
        let x = Matrix::from_columns(&[vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]]);
        let y = vec![0.0, 1.0, 3.0];
        let w = vec![1.0, 2.0, 1.0];
        let fit = wls(&x, &y, &w);
        // X'WX = [[4, 4],[4, 6]], X'Wy = [5, 8] -> beta = [-0.25, 1.5]
        assert!((fit.coefs[0] + 0.25).abs() < 1e-12);
        assert!((fit.coefs[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cluster_cov_with_singletons_equals_hc1() {
        let x = Matrix::from_columns(&[vec![1.0; 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]]);
        let y = vec![0.1, 1.3, 1.9, 3.2, 4.4];
        let w = vec![1.0, 0.5, 2.0, 1.0, 1.5];
        let fit = wls(&x, &y, &w);
        let hc1 = cov_hc1(&x, &w, &fit.residuals, &fit.xtwx_inv, 2);
        let clusters: Vec<usize> = (0..5).collect();
        let cr1 = cov_cluster(&x, &w, &fit.residuals, &clusters, 5, &fit.xtwx_inv, 2);
        for a in 0..2 {
            for b in 0..2 {
                assert!((hc1[(a, b)] - cr1[(a, b)]).abs() < 1e-10 * hc1[(a, b)].abs().max(1.0));
            }
        }
    }
}
