//! Sparse rows and an envelope (skyline) Cholesky factorization.
//!
//! The constraint normal matrices produced by the solver are banded in the
//! time-major row order, so a profile factorization is both simple and
//! deterministic.

/// Compressed sparse rows with a builder interface.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    pub n_cols: usize,
    ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    pub fn new(n_cols: usize) -> Self {
        SparseRows { n_cols, ptr: vec![0], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            debug_assert!(c < self.n_cols);
            self.cols.push(c);
            self.vals.push(v);
        }
        self.ptr.push(self.cols.len());
    }

    pub fn n_rows(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.ptr[r], self.ptr[r + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    /// `out = Aᵀ y`.
    pub fn mul_t(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for (c, v) in self.row(r) {
                    out[c] += v * yr;
                }
            }
        }
    }

    /// `A diag(w) Aᵀ` in envelope storage.
    pub fn weighted_gram(&self, w: &[f64]) -> Envelope {
        let m = self.n_rows();
        // column -> rows touching it, to find row pairs that share a column
        let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); self.n_cols];
        for r in 0..m {
            for (c, _) in self.row(r) {
                col_rows[c].push(r);
            }
        }
        let mut first = (0..m).collect::<Vec<_>>();
        for rows in &col_rows {
            if let Some(&lo) = rows.iter().min() {
                for &r in rows {
                    first[r] = first[r].min(lo);
                }
            }
        }
        let mut env = Envelope::zeros(first);
        for (c, rows) in col_rows.iter().enumerate() {
            for &r in rows {
                let vr = self.coef(r, c);
                for &s in rows {
                    if s <= r {
                        let vs = self.coef(s, c);
                        env.add(r, s, vr * w[c] * vs);
                    }
                }
            }
        }
        env
    }

    fn coef(&self, r: usize, c: usize) -> f64 {
        self.row(r).filter(|&(cc, _)| cc == c).map(|(_, v)| v).sum()
    }
}

/// Symmetric matrix stored by rows of its lower envelope.
#[derive(Debug, Clone)]
pub struct Envelope {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Envelope {
    pub fn zeros(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i);
            start.push(acc);
            acc += i - f + 1;
        }
        start.push(acc);
        Envelope { first, start, data: vec![0.0; acc] }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Adds `v` at `(i, j)` with `j ≤ i`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i]);
        self.data[self.start[i] + j - self.first[i]] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.start[i] + j - self.first[i]]
        }
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    /// In-place Cholesky. Returns `None` if a pivot is not safely positive.
    pub fn cholesky(mut self) -> Option<Cholesky> {
        let n = self.dim();
        let mut max_diag = 0.0f64;
        for i in 0..n {
            max_diag = max_diag.max(self.get(i, i).abs());
        }
        let floor = max_diag * 1e-13;
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..=i {
                let fj = self.first[j];
                let sj = self.start[j];
                let lo = fi.max(fj);
                let mut sum = self.data[si + j - fi];
                for k in lo..j {
                    sum -= self.data[si + k - fi] * self.data[sj + k - fj];
                }
                if j == i {
                    if !(sum > floor) {
                        return None;
                    }
                    self.data[si + i - fi] = sum.sqrt();
                } else {
                    self.data[si + j - fi] = sum / self.data[sj + j - fj];
                }
            }
        }
        Some(Cholesky { l: self })
    }
}

/// Lower envelope factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Envelope,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.l.dim()
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let l = &self.l;
        let n = l.dim();
        for i in 0..n {
            let (fi, si) = (l.first[i], l.start[i]);
            let row = &l.data[si..si + i - fi];
            let s: f64 = row.iter().zip(&x[fi..i]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - s) / l.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let (fi, si) = (l.first[i], l.start[i]);
            x[i] /= l.data[si + i - fi];
            let xi = x[i];
            let row = &l.data[si..si + i - fi];
            for (xk, a) in x[fi..i].iter_mut().zip(row) {
                *xk -= a * xi;
            }
        }
    }
}

/// Solves a tridiagonal system; `lower[0]` and `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Dense Gaussian elimination with partial pivoting, for small vertex systems.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_gram(a: &SparseRows, w: &[f64]) -> Vec<Vec<f64>> {
        let m = a.n_rows();
        let mut g = vec![vec![0.0; m]; m];
        for r in 0..m {
            for s in 0..m {
                for (c, v) in a.row(r) {
                    for (cc, vv) in a.row(s) {
                        if c == cc {
                            g[r][s] += v * w[c] * vv;
                        }
                    }
                }
            }
        }
        g
    }

    proptest! {
        #[test]
        fn envelope_solve_matches_dense(
            seed in proptest::collection::vec(-2.0f64..2.0, 60),
            w in proptest::collection::vec(0.1f64..3.0, 12),
            rhs in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            // 6 rows over 12 columns, each row touching a sliding window
            let mut a = SparseRows::new(12);
            for r in 0..6 {
                let entries: Vec<(usize, f64)> = (0..4)
                    .map(|k| (2 * r + k, seed[r * 10 + k] + if k == 0 { 3.0 } else { 0.0 }))
                    .filter(|&(c, _)| c < 12)
                    .collect();
                a.push_row(&entries);
            }
            let env = a.weighted_gram(&w);
            let g = dense_gram(&a, &w);
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((env.get(i, j) - g[i][j]).abs() < 1e-12);
                }
            }
            let chol = env.cholesky().expect("full-rank gram matrix");
            let mut x = rhs.clone();
            chol.solve_in_place(&mut x);
            let dense = solve_dense(g.clone(), rhs.clone()).unwrap();
            for (p, q) in x.iter().zip(&dense) {
                prop_assert!((p - q).abs() < 1e-8 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn tridiagonal_matches_dense(
            n in 2usize..8,
            vals in proptest::collection::vec(-1.0f64..1.0, 24),
            rhs in proptest::collection::vec(-3.0f64..3.0, 8),
        ) {
            let lower: Vec<f64> = (0..n).map(|i| vals[i]).collect();
            let upper: Vec<f64> = (0..n).map(|i| vals[8 + i]).collect();
            let diag: Vec<f64> = (0..n).map(|i| 3.0 + vals[16 + i]).collect();
            let x = solve_tridiagonal(&lower, &diag, &upper, &rhs[..n]);
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                a[i][i] = diag[i];
                if i > 0 { a[i][i - 1] = lower[i]; }
                if i + 1 < n { a[i][i + 1] = upper[i]; }
            }
            let y = solve_dense(a, rhs[..n].to_vec()).unwrap();
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let mut a = SparseRows::new(2);
        a.push_row(&[(0, 1.0), (1, 1.0)]);
        a.push_row(&[(0, 2.0), (1, 2.0)]);
        assert!(a.weighted_gram(&[1.0, 1.0]).cholesky().is_none());
    }
}
