//! Dense row-major f64 matrices with the handful of kernels training needs.
//!
//! Large buffers are recycled through a thread-local pool: attention tapes
//! allocate and drop several n^2 matrices per episode, and reusing warm
//! pages is markedly cheaper than faulting in fresh ones. Pooling changes
//! no numerics (every buffer is fully overwritten before use).

use std::cell::RefCell;

/// Buffers at or above this length participate in pooling.
const POOL_MIN_LEN: usize = 1 << 15;
const POOL_MAX_ENTRIES: usize = 12;

thread_local! {
    static BUF_POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A zeroed buffer, reusing a pooled allocation when one fits.
fn pooled_zeros(len: usize) -> Vec<f64> {
    if len >= POOL_MIN_LEN {
        if let Some(mut buf) = take_pooled(len) {
            buf.clear();
            buf.resize(len, 0.0);
            return buf;
        }
    }
    vec![0.0; len]
}

fn pooled_copy(src: &[f64]) -> Vec<f64> {
    if src.len() >= POOL_MIN_LEN {
        if let Some(mut buf) = take_pooled(src.len()) {
            buf.clear();
            buf.extend_from_slice(src);
            return buf;
        }
    }
    src.to_vec()
}

/// Smallest pooled buffer whose capacity fits `len`.
fn take_pooled(len: usize) -> Option<Vec<f64>> {
    BUF_POOL.with(|pool| {
        let mut pool = pool.borrow_mut();
        let mut best: Option<usize> = None;
        for (i, buf) in pool.iter().enumerate() {
            if buf.capacity() >= len && best.map_or(true, |b| buf.capacity() < pool[b].capacity())
            {
                best = Some(i);
            }
        }
        best.map(|i| pool.swap_remove(i))
    })
}

fn return_to_pool(data: &mut Vec<f64>) {
    if data.capacity() < POOL_MIN_LEN {
        return;
    }
    let buf = std::mem::take(data);
    BUF_POOL.with(|pool| {
        let mut pool = pool.borrow_mut();
        if pool.len() < POOL_MAX_ENTRIES {
            pool.push(buf);
        }
    });
}

/// Row-major dense matrix.
#[derive(Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Clone for Mat {
    fn clone(&self) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: pooled_copy(&self.data),
        }
    }
}

impl Drop for Mat {
    fn drop(&mut self) {
        return_to_pool(&mut self.data);
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: pooled_zeros(rows * cols),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Mat { rows, cols, data }
    }

    /// Column vector (n x 1).
    pub fn col(values: &[f64]) -> Self {
        Mat::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector (1 x n).
    pub fn row(values: &[f64]) -> Self {
        Mat::from_vec(1, values.len(), values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// self += other, elementwise.
    pub fn add_in_place(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += c * other, elementwise.
    pub fn axpy_in_place(&mut self, c: f64, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }
}

/// Four-lane dot product; the independent accumulators let LLVM vectorize
/// without reassociating a single FP chain. Deterministic for a given pair
/// of lengths.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let main = a.len() & !3;
    for (ca, cb) in a[..main].chunks_exact(4).zip(b[..main].chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in a[main..].iter().zip(&b[main..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-accumulator kernel for a fixed narrow output width N: keeps the
/// output row in registers across the long k dimension.
#[inline]
fn gemm_nn_narrow<const N: usize>(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    for i in 0..a.rows {
        let ai = a.row_slice(i);
        let mut acc = [0.0f64; N];
        for (&aip, bp) in ai.iter().zip(b.data.chunks_exact(N)) {
            for t in 0..N {
                acc[t] += aip * bp[t];
            }
        }
        let oi = out.row_slice_mut(i);
        for t in 0..N {
            oi[t] += alpha * acc[t];
        }
    }
}

fn gemm_nn_generic(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    let n = b.cols;
    for i in 0..a.rows {
        let ai = a.row_slice(i);
        let oi = out.row_slice_mut(i);
        for (&aip, bp) in ai.iter().zip(b.data.chunks_exact(n)) {
            let s = alpha * aip;
            for (o, &v) in oi.iter_mut().zip(bp) {
                *o += s * v;
            }
        }
    }
}

/// out += alpha * a . b   (a: m x k, b: k x n, out: m x n)
pub fn gemm_nn(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.rows, "gemm_nn inner dims");
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.cols);
    match b.cols {
        1 => gemm_nn_narrow::<1>(alpha, a, b, out),
        2 => gemm_nn_narrow::<2>(alpha, a, b, out),
        3 => gemm_nn_narrow::<3>(alpha, a, b, out),
        4 => gemm_nn_narrow::<4>(alpha, a, b, out),
        6 => gemm_nn_narrow::<6>(alpha, a, b, out),
        8 => gemm_nn_narrow::<8>(alpha, a, b, out),
        12 => gemm_nn_narrow::<12>(alpha, a, b, out),
        16 => gemm_nn_narrow::<16>(alpha, a, b, out),
        _ => gemm_nn_generic(alpha, a, b, out),
    }
}

/// k = 4 fast path for the attention score products: four output columns
/// per step, straight-line so the four dots vectorize across lanes.
fn gemm_nt_k4(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    let n = b.rows;
    let blocks = n / 4;
    for i in 0..a.rows {
        let ai = a.row_slice(i);
        let (a0, a1, a2, a3) = (ai[0], ai[1], ai[2], ai[3]);
        let oi = out.row_slice_mut(i);
        for (obl, bbl) in oi[..blocks * 4]
            .chunks_exact_mut(4)
            .zip(b.data[..blocks * 16].chunks_exact(16))
        {
            for t in 0..4 {
                let bj = &bbl[t * 4..(t + 1) * 4];
                obl[t] += alpha * ((a0 * bj[0] + a1 * bj[1]) + (a2 * bj[2] + a3 * bj[3]));
            }
        }
        for j in blocks * 4..n {
            let bj = &b.data[j * 4..(j + 1) * 4];
            oi[j] += alpha * ((a0 * bj[0] + a1 * bj[1]) + (a2 * bj[2] + a3 * bj[3]));
        }
    }
}

/// out += alpha * a . b^T   (a: m x k, b: n x k, out: m x n)
///
/// Inner loop is a dot of two contiguous rows, which is the cache-friendly
/// orientation for the n^2 attention products.
pub fn gemm_nt(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.cols, "gemm_nt inner dims");
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.rows);
    let k = a.cols;
    if k == 4 {
        return gemm_nt_k4(alpha, a, b, out);
    }
    for i in 0..a.rows {
        let ai = a.row_slice(i);
        let oi = out.row_slice_mut(i);
        for (oij, bj) in oi.iter_mut().zip(b.data.chunks_exact(k)) {
            *oij += alpha * dot(ai, bj);
        }
    }
}

#[inline]
fn gemm_tn_narrow<const N: usize>(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    for (ap, bp) in a
        .data
        .chunks_exact(a.cols)
        .zip(b.data.chunks_exact(N))
    {
        for (&api, oi) in ap.iter().zip(out.data.chunks_exact_mut(N)) {
            let s = alpha * api;
            for t in 0..N {
                oi[t] += s * bp[t];
            }
        }
    }
}

fn gemm_tn_generic(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    let n = b.cols;
    for (ap, bp) in a.data.chunks_exact(a.cols).zip(b.data.chunks_exact(n)) {
        for (&api, oi) in ap.iter().zip(out.data.chunks_exact_mut(n)) {
            let s = alpha * api;
            for (o, &v) in oi.iter_mut().zip(bp) {
                *o += s * v;
            }
        }
    }
}

/// out += alpha * a^T . b   (a: k x m, b: k x n, out: m x n)
pub fn gemm_tn(alpha: f64, a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.rows, b.rows, "gemm_tn inner dims");
    assert_eq!(out.rows, a.cols);
    assert_eq!(out.cols, b.cols);
    match b.cols {
        1 => gemm_tn_narrow::<1>(alpha, a, b, out),
        2 => gemm_tn_narrow::<2>(alpha, a, b, out),
        3 => gemm_tn_narrow::<3>(alpha, a, b, out),
        4 => gemm_tn_narrow::<4>(alpha, a, b, out),
        6 => gemm_tn_narrow::<6>(alpha, a, b, out),
        8 => gemm_tn_narrow::<8>(alpha, a, b, out),
        12 => gemm_tn_narrow::<12>(alpha, a, b, out),
        16 => gemm_tn_narrow::<16>(alpha, a, b, out),
        _ => gemm_tn_generic(alpha, a, b, out),
    }
}

/// Fresh m x n product a . b.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm_nn(1.0, a, b, &mut out);
    out
}

pub fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    euclidean_sq(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);

        // a . b == a . (b^T)^T via gemm_nt
        let bt = b.transpose();
        let mut c2 = Mat::zeros(2, 2);
        gemm_nt(1.0, &a, &bt, &mut c2);
        assert_eq!(c2.data, c.data);

        // a . b == (a^T)^T . b via gemm_tn
        let at = a.transpose();
        let mut c3 = Mat::zeros(2, 2);
        gemm_tn(1.0, &at, &b, &mut c3);
        assert_eq!(c3.data, c.data);
    }

    #[test]
    fn gemm_accumulates_with_alpha() {
        let a = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let b = Mat::from_vec(2, 1, vec![3.0, 4.0]);
        let mut out = Mat::from_vec(1, 1, vec![100.0]);
        gemm_nn(0.5, &a, &b, &mut out);
        assert_abs_diff_eq!(out.data[0], 100.0 + 0.5 * 11.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().transpose(), a);
    }
}
