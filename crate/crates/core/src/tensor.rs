//! Dense row-major `f64` tensors and the convolution kernels shared by the
//! autodiff graph and the fixed feature extractors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Panics if `data.len()` does not match the shape; callers construct
    /// tensors from buffers they sized themselves.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor data does not match shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        Self { shape, data }
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(items: &[Tensor]) -> Self {
        assert!(!items.is_empty(), "cannot concatenate zero tensors");
        let inner = items[0].shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for t in items {
            assert_eq!(&t.shape[1..], &inner[..], "concat shape mismatch");
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&inner);
        Self { shape, data }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * self.numel() / self.shape[0].max(1));
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { shape, data }
    }
}

/// One-hot rows for `labels` over `classes` categories.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.data_mut()[i * classes + c] = 1.0;
    }
    t
}

/// Stride-1 "same" convolution geometry for a single sample.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// For kernel offset `k`, the range of output positions along an axis
    /// of length `len` whose input tap `pos + k - pad` stays in bounds.
    #[inline]
    fn valid(&self, k: usize, len: usize) -> (usize, usize) {
        let shift = k as isize - self.pad();
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).min(len as isize).max(0) as usize;
        (lo, hi)
    }
}

/// Unfolds `x: [cin, h, w]` into `[cin * k * k, h * w]` patch columns.
fn im2col(g: ConvGeom, x: &[f64]) -> Vec<f64> {
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let plane = h * wd;
    let pad = g.pad();
    let mut col = vec![0.0; g.cin * k * k * plane];
    for i in 0..g.cin {
        let x_i = &x[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let (ylo, yhi) = g.valid(ky, h);
            for kx in 0..k {
                let (xlo, xhi) = g.valid(kx, wd);
                let row = &mut col[((i * k + ky) * k + kx) * plane..][..plane];
                let sx = kx as isize - pad;
                for y in ylo..yhi {
                    let iy = (y as isize + ky as isize - pad) as usize;
                    let src = &x_i[iy * wd..(iy + 1) * wd];
                    let dst = &mut row[y * wd..(y + 1) * wd];
                    for xx in xlo..xhi {
                        dst[xx] = src[(xx as isize + sx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adds patch columns back onto `dx: [cin, h, w]`.
fn col2im(g: ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let plane = h * wd;
    let pad = g.pad();
    for i in 0..g.cin {
        let dx_i = &mut dx[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let (ylo, yhi) = g.valid(ky, h);
            for kx in 0..k {
                let (xlo, xhi) = g.valid(kx, wd);
                let row = &col[((i * k + ky) * k + kx) * plane..][..plane];
                let sx = kx as isize - pad;
                for y in ylo..yhi {
                    let iy = (y as isize + ky as isize - pad) as usize;
                    let src = &row[y * wd..(y + 1) * wd];
                    let dst = &mut dx_i[iy * wd..(iy + 1) * wd];
                    for xx in xlo..xhi {
                        dst[(xx as isize + sx) as usize] += src[xx];
                    }
                }
            }
        }
    }
}

const OB: usize = 4;
const PB: usize = 8;

/// `out[m, n] += a[m, k] · b[k, n]`, all row-major.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_acc_avx2(a, b, out, m, k, n) };
        return;
    }
    gemm_acc_body(a, b, out, m, k, n)
}

// Same arithmetic in the same order, only wider vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc_body(a, b, out, m, k, n)
}

#[inline(always)]
fn gemm_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut o0 = 0;
    while o0 < m {
        let ob = OB.min(m - o0);
        let mut p0 = 0;
        while p0 < n {
            let pb = PB.min(n - p0);
            if ob == OB && pb == PB {
                let mut acc = [[0.0; PB]; OB];
                for j in 0..k {
                    let c: &[f64; PB] = b[j * n + p0..j * n + p0 + PB].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let wv = a[(o0 + r) * k + j];
                        for l in 0..PB {
                            row[l] += wv * c[l];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    let dst = &mut out[(o0 + r) * n + p0..(o0 + r) * n + p0 + PB];
                    for l in 0..PB {
                        dst[l] += row[l];
                    }
                }
            } else {
                for r in 0..ob {
                    for l in 0..pb {
                        let mut acc = 0.0;
                        for j in 0..k {
                            acc += a[(o0 + r) * k + j] * b[j * n + p0 + l];
                        }
                        out[(o0 + r) * n + p0 + l] += acc;
                    }
                }
            }
            p0 += pb;
        }
        o0 += ob;
    }
}

/// `out[m, k] += a[m, n] · b[k, n]ᵀ`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_nt_acc_avx2(a, b, out, m, k, n) };
        return;
    }
    gemm_nt_acc_body(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_acc_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nt_acc_body(a, b, out, m, k, n)
}

#[inline(always)]
fn gemm_nt_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const L: usize = 4;
    for r0 in (0..m).step_by(2) {
        let rb = 2.min(m - r0);
        for c0 in (0..k).step_by(2) {
            let cb = 2.min(k - c0);
            let mut acc = [[[0.0; L]; 2]; 2];
            let chunks = n / L;
            for q in 0..chunks {
                for r in 0..rb {
                    let ar: &[f64; L] = a[(r0 + r) * n + q * L..][..L].try_into().unwrap();
                    for c in 0..cb {
                        let bc: &[f64; L] = b[(c0 + c) * n + q * L..][..L].try_into().unwrap();
                        for l in 0..L {
                            acc[r][c][l] += ar[l] * bc[l];
                        }
                    }
                }
            }
            for r in 0..rb {
                for c in 0..cb {
                    let mut s: f64 = acc[r][c].iter().sum();
                    for p in chunks * L..n {
                        s += a[(r0 + r) * n + p] * b[(c0 + c) * n + p];
                    }
                    out[(r0 + r) * k + c0 + c] += s;
                }
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `out[o] += sum_i w[o,i] * x[i]` (cross-correlation, zero padding).
pub fn conv_forward(g: ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let plane = g.height * g.width;
    let taps = g.cin * g.kernel * g.kernel;
    if g.kernel == 1 {
        gemm_acc(w, x, out, g.cout, taps, plane);
    } else {
        gemm_acc(w, &im2col(g, x), out, g.cout, taps, plane);
    }
}

/// Accumulates the input gradient of [`conv_forward`] into `dx`.
pub fn conv_backward_input(g: ConvGeom, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let plane = g.height * g.width;
    let taps = g.cin * g.kernel * g.kernel;
    let wt = transpose(w, g.cout, taps);
    if g.kernel == 1 {
        gemm_acc(&wt, dy, dx, taps, g.cout, plane);
        return;
    }
    let mut dcol = vec![0.0; taps * plane];
    gemm_acc(&wt, dy, &mut dcol, taps, g.cout, plane);
    col2im(g, &dcol, dx);
}

/// Accumulates the weight gradient of [`conv_forward`] into `dw`.
pub fn conv_backward_weight(g: ConvGeom, x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let plane = g.height * g.width;
    let taps = g.cin * g.kernel * g.kernel;
    if g.kernel == 1 {
        gemm_nt_acc(dy, x, dw, g.cout, taps, plane);
    } else {
        gemm_nt_acc(dy, &im2col(g, x), dw, g.cout, taps, plane);
    }
}

/// 2x2 average pooling of a `[c, h, w]` block (odd trailing rows/cols dropped).
pub fn avg_pool2(c: usize, h: usize, w: usize, x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c2 = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = 0.25 * (a + b + c2 + d);
            }
        }
    }
}

pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        v * slope
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct evaluation of the zero-padded cross-correlation.
    fn naive_conv(g: ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (h, wd, k) = (g.height, g.width, g.kernel);
        let p = (k / 2) as isize;
        let mut out = vec![0.0; g.cout * h * wd];
        for o in 0..g.cout {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = 0.0;
                    for i in 0..g.cin {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (iy, ix) = (y + ky - p, xx + kx - p);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * g.cin + i) * k + ky as usize) * k + kx as usize]
                                    * x[(i * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * h + y as usize) * wd + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom {
            cin: 2,
            cout: 3,
            height: 5,
            width: 4,
            kernel: 3,
        };
        let x = Tensor::randn(&[2 * 5 * 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3 * 2 * 9], 1.0, &mut rng);
        let mut out = vec![0.0; 3 * 20];
        conv_forward(g, x.data(), w.data(), &mut out);
        let expect = naive_conv(g, x.data(), w.data());
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoint_identities() {
        // <conv(x), dy> == <x, conv_T(dy)> == <w, dW(x, dy)>
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom {
            cin: 3,
            cout: 2,
            height: 6,
            width: 7,
            kernel: 3,
        };
        let x = Tensor::randn(&[3 * 42], 1.0, &mut rng);
        let w = Tensor::randn(&[2 * 3 * 9], 1.0, &mut rng);
        let dy = Tensor::randn(&[2 * 42], 1.0, &mut rng);
        let mut y = vec![0.0; 84];
        conv_forward(g, x.data(), w.data(), &mut y);
        let lhs: f64 = y.iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 126];
        conv_backward_input(g, dy.data(), w.data(), &mut dx);
        let mid: f64 = dx.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; 54];
        conv_backward_weight(g, x.data(), dy.data(), &mut dw);
        let rhs: f64 = dw.iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
    }
}
