//! Minimal dense linear algebra for the toy channel.
//!
//! Everything is f64 row-major. Determinism matters more than peak speed:
//! dot products use a fixed four-way accumulation order and parallel loops
//! only ever split over disjoint output ranges.

use rayon::prelude::*;

use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

const GS_CHUNK: usize = 4096;

/// Thin QR of a seeded Gaussian matrix by classical Gram-Schmidt with
/// re-orthogonalization (two projection passes). Returns `(w, wt)` where
/// `w` is `m x n` with orthonormal columns and `wt` is its transpose.
pub(crate) fn seeded_orthonormal_columns(m: usize, n: usize, rng: &mut SeededRng) -> (Mat, Mat) {
    assert!(n <= m, "need at least as many rows as columns");
    // q holds finished columns as rows: q is w transposed, built in place.
    let mut q = Vec::with_capacity(n * m);
    for j in 0..n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
        for _ in 0..2 {
            if j == 0 {
                break;
            }
            let coeffs: Vec<f64> = (0..j)
                .into_par_iter()
                .map(|i| dot(&q[i * m..(i + 1) * m], &v))
                .collect();
            let q_ref = &q;
            v.par_chunks_mut(GS_CHUNK).enumerate().for_each(|(ci, chunk)| {
                let off = ci * GS_CHUNK;
                for (i, &c) in coeffs.iter().enumerate() {
                    let qrow = &q_ref[i * m + off..i * m + off + chunk.len()];
                    for (vv, qq) in chunk.iter_mut().zip(qrow) {
                        *vv -= c * qq;
                    }
                }
            });
        }
        let norm = dot(&v, &v).sqrt();
        assert!(norm > 0.0, "degenerate column in seeded QR");
        q.extend(v.iter().map(|x| x / norm));
    }

    let wt = Mat::from_data(n, m, q);
    let mut w = Mat::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            w.data[i * n + j] = wt.data[j * m + i];
        }
    }
    (w, wt)
}

/// Dense symmetric matrix `Q diag(e) Q^T` with seeded orthogonal `Q` and
/// eigenvalues uniform in `[-max_norm, max_norm]`, so the spectral norm is
/// at most `max_norm` exactly by construction.
pub(crate) fn seeded_symmetric_contraction(n: usize, rng: &mut SeededRng, max_norm: f64) -> Mat {
    let (_, qt) = seeded_orthonormal_columns(n, n, rng);
    let eig: Vec<f64> = (0..n)
        .map(|_| (2.0 * rng.next_f64() - 1.0) * max_norm)
        .collect();

    let mut a = Mat::zeros(n, n);
    a.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for j in 0..n {
                let coef = qt.data[j * n + i] * eig[j];
                if coef == 0.0 {
                    continue;
                }
                let qrow = &qt.data[j * n..(j + 1) * n];
                for (r, &q) in row.iter_mut().zip(qrow) {
                    *r += coef * q;
                }
            }
        });
    a
}
