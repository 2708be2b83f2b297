//! Dense f32 kernels used by the tiny encoder.

use half::f16;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Dense row-major `rows x cols`.
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Columns `col..col + width` of a dense row-major matrix with `stride` columns.
    pub fn columns(data: &'a [f32], rows: usize, stride: usize, col: usize, width: usize) -> Self {
        Self { data: &data[col..], rows, cols: width, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }

    fn rounded(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(round_half(self.data[r * self.rs + c * self.cs]));
            }
        }
        out
    }
}

/// Strided mutable output view.
pub struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols }
    }

    pub fn columns(data: &'a mut [f32], rows: usize, stride: usize, col: usize, width: usize) -> Self {
        Self { data: &mut data[col..], rows, cols: width, rs: stride }
    }
}

#[inline]
pub fn round_half(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

/// `c = alpha * a @ b + beta * c`. With `half`, operands are rounded to
/// binary16 first; accumulation stays in f32.
pub fn gemm(alpha: f32, a: View<'_>, b: View<'_>, beta: f32, c: ViewMut<'_>, half: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        assert!((c.rows - 1) * c.rs + c.cols - 1 < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if half {
        let ah = a.rounded();
        let bh = b.rounded();
        // SAFETY: dense buffers sized m*k and k*n; c bounds checked above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                ah.as_ptr(), k as isize, 1,
                bh.as_ptr(), n as isize, 1,
                beta, c.data.as_mut_ptr(), c.rs as isize, 1,
            );
        }
    } else {
        // SAFETY: every index touched is bounds-checked by the view checks above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.data.as_ptr(), a.rs as isize, a.cs as isize,
                b.data.as_ptr(), b.rs as isize, b.cs as isize,
                beta, c.data.as_mut_ptr(), c.rs as isize, 1,
            );
        }
    }
}

/// Add `bias` to every row of a dense `rows x bias.len()` matrix.
pub fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulate column sums of a dense matrix into `out`.
pub fn col_sum_into(x: &[f32], out: &mut [f32]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm. Returns the normalized rows and per-row inverse std for the backward pass.
pub fn layer_norm(x: &[f32], width: usize, gamma: &[f32], beta: &[f32], out: &mut [f32]) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f32>() / width as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..width {
            let h = (row[c] - mean) * is;
            xhat[r * width + c] = h;
            out[r * width + c] = h * gamma[c] + beta[c];
        }
    }
    (xhat, inv_std)
}

/// Backward of [`layer_norm`]: writes `dx`, accumulates `dgamma`/`dbeta`.
pub fn layer_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let width = gamma.len();
    let mut dxhat = vec![0.0; width];
    for (r, &is) in inv_std.iter().enumerate() {
        let dy_r = &dy[r * width..(r + 1) * width];
        let xh_r = &xhat[r * width..(r + 1) * width];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..width {
            dgamma[c] += dy_r[c] * xh_r[c];
            dbeta[c] += dy_r[c];
            dxhat[c] = dy_r[c] * gamma[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh_r[c];
        }
        mean_d /= width as f32;
        mean_dx /= width as f32;
        for c in 0..width {
            dx[r * width + c] = is * (dxhat[c] - mean_d - xh_r[c] * mean_dx);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place softmax of each `width`-wide row.
pub fn softmax_rows(x: &mut [f32], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
