//! Dense row-major f64 matrices and the numeric kernels shared by the graph
//! ops and the tape-free inference paths.

use rand::Rng;

/// A dense `rows x cols` matrix of f64, row-major. Vectors are `(1, C)` or
/// `(R, 1)`; scalars are `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    /// Fan-in scaled uniform init on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `C = alpha * A(view) . B(view) + beta * C(view)` on raw row-major
/// buffers with explicit offsets and strides, so transposed and sub-block
/// operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[f64],
    b_off: usize,
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a_off + (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(b_off + (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c_off + (m - 1) * rsc + (n - 1) * csc < c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain `A . B`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let mut c = Tensor::zeros(a.rows, b.cols);
    dgemm_strided(
        a.rows, a.cols, b.cols, 1.0, &a.data, 0, a.cols, 1, &b.data, 0, b.cols, 1, 0.0,
        &mut c.data, 0, b.cols, 1,
    );
    c
}

/// Double-precision `exp` via Cody-Waite range reduction and a degree-11
/// Taylor tail; relative error stays below ~2e-14, a few times faster than
/// libm and branch-light enough to pipeline in the softmax/tanh loops.
#[inline]
pub(crate) fn fast_exp(x: f64) -> f64 {
    const INV_LN2: f64 = 1.442_695_040_888_963_4;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        // Also catches -inf from masked softmax slots.
        return 0.0;
    }
    // Round-to-nearest via the shifter constant; |x * INV_LN2| < 2^51 here.
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let k = (x * INV_LN2 + SHIFTER) - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 39_916_800.0; // 1/11!
    for &c in &[
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = ((k as i64 + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

/// `tanh` through [`fast_exp`]; exact at 0 and saturating to ±1. Small
/// arguments go through an expm1-style tail so no cancellation occurs.
#[inline]
pub(crate) fn fast_tanh(x: f64) -> f64 {
    let a = x.abs();
    if a > 20.0 {
        return if x.is_nan() { x } else { 1.0f64.copysign(x) };
    }
    if a < 0.17 {
        // 2a stays inside the k = 0 reduction range: expm1 as r * poly(r).
        let r = 2.0 * a;
        let mut p = 1.0 / 39_916_800.0;
        for &c in &[
            1.0 / 3_628_800.0,
            1.0 / 362_880.0,
            1.0 / 40_320.0,
            1.0 / 5_040.0,
            1.0 / 720.0,
            1.0 / 120.0,
            1.0 / 24.0,
            1.0 / 6.0,
            0.5,
            1.0,
        ] {
            p = p * r + c;
        }
        let em = r * p;
        return (em / (em + 2.0)).copysign(x);
    }
    let e = fast_exp(2.0 * a);
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

pub(crate) fn add_row_inplace(x: &mut [f64], cols: usize, bias: &[f64]) {
    debug_assert_eq!(bias.len(), cols);
    for row in x.chunks_exact_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn tanh_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = fast_tanh(*v);
    }
}

pub(crate) fn sigmoid_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = 1.0 / (1.0 + fast_exp(-*v));
    }
}

/// Numerically stable softmax over each row; tolerates `-inf` entries.
pub(crate) fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = fast_exp(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Stable log-softmax over each row.
pub(crate) fn log_softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| fast_exp(v - max)).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm with learned gain and bias.
pub(crate) fn layer_norm_rows(x: &Tensor, gain: &[f64], bias: &[f64]) -> Tensor {
    let cols = x.cols();
    debug_assert_eq!(gain.len(), cols);
    debug_assert_eq!(bias.len(), cols);
    let mut out = Tensor::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out_row = out.row_mut(r);
        for c in 0..cols {
            out_row[c] = gain[c] * (row[c] - mean) * inv_std + bias[c];
        }
    }
    out
}

#[cfg(test)]
mod fast_math_tests {
    use super::{fast_exp, fast_tanh};

    #[test]
    fn fast_exp_matches_libm() {
        let mut x = -700.0;
        while x < 700.0 {
            let got = fast_exp(x);
            let want = x.exp();
            let rel = (got - want).abs() / want.max(f64::MIN_POSITIVE);
            assert!(rel < 5e-14, "exp({x}): {got} vs {want} rel {rel:e}");
            x += 0.137;
        }
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(fast_exp(800.0), f64::INFINITY);
        assert!(fast_exp(-800.0) == 0.0);
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let mut x = -25.0;
        while x < 25.0 {
            let got = fast_tanh(x);
            let want = x.tanh();
            assert!(
                (got - want).abs() < 5e-14,
                "tanh({x}): {got} vs {want}"
            );
            x += 0.0917;
        }
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(1e-300), 1e-300);
        assert_eq!(fast_tanh(30.0), 1.0);
        assert_eq!(fast_tanh(-30.0), -1.0);
    }
}
