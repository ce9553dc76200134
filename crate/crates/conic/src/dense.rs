//! Small dense Cholesky factorization on row-major storage. Faster than the
//! generic nalgebra routines at the sizes the solver sees (tens of rows).

/// Lower-triangular factor `L` with `A = L L'`.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors the symmetric matrix whose lower triangle is stored in `a`
    /// (row-major, `n x n`). Returns `None` unless it is positive definite.
    pub(crate) fn new(mut a: Vec<f64>, n: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        for i in 0..n {
            let (done, rest) = a.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for j in 0..i {
                let row_j = &done[j * n..j * n + j + 1];
                let s: f64 = row_i[..j].iter().zip(&row_j[..j]).map(|(p, q)| p * q).sum();
                row_i[j] = (row_i[j] - s) / row_j[j];
            }
            let d = row_i[i] - row_i[..i].iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0 && d.is_finite()) {
                return None;
            }
            row_i[i] = d.sqrt();
        }
        Some(Self { n, l: a })
    }

    /// Overwrites `b` with `A^-1 b`.
    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i + 1];
            let s: f64 = row[..i].iter().zip(&b[..i]).map(|(p, q)| p * q).sum();
            b[i] = (b[i] - s) / row[i];
        }
        for i in (0..n).rev() {
            let row = &self.l[i * n..i * n + i + 1];
            b[i] /= row[i];
            let xi = b[i];
            for (bk, lik) in b[..i].iter_mut().zip(&row[..i]) {
                *bk -= lik * xi;
            }
        }
    }
}
