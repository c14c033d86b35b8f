//! Minimal CHW tensor ops with hand-written backward passes.

use num_traits::{Float, FromPrimitive};

/// Scalar type the network can run in. Implemented for `f32` (training) and
/// `f64` (gradient checks).
pub trait Real:
    Float + FromPrimitive + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    /// `C ← alpha·A·B + beta·C` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n`, `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m×n) ← op(A)·op(B) + beta·C`, where `A` is stored `m×k`
/// (or `k×m` when `ta`) and `B` is stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above cover every strided access.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Single-sample activation, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Self {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `ca` channels, rest.
    pub fn split(&self, ca: usize) -> (Self, Self) {
        let n = ca * self.hw();
        (
            Tensor {
                c: ca,
                h: self.h,
                w: self.w,
                data: self.data[..n].to_vec(),
            },
            Tensor {
                c: self.c - ca,
                h: self.h,
                w: self.w,
                data: self.data[n..].to_vec(),
            },
        )
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// `dy ⊙ silu'(x)`.
pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut out = dy.clone();
    for (o, &v) in out.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *o = *o * s * (T::one() + v * (T::one() - s));
    }
    out
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * x.hw()..(c + 1) * x.hw()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * x.w + 2 * j;
                let r1 = r0 + x.w;
                dst[i * w + j] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(dy.c, dy.h * 2, dy.w * 2);
    let ow = out.w;
    for c in 0..dy.c {
        let src = &dy.data[c * dy.hw()..(c + 1) * dy.hw()];
        let dst = &mut out.data[c * 4 * dy.hw()..(c + 1) * 4 * dy.hw()];
        for i in 0..dy.h {
            for j in 0..dy.w {
                let g = src[i * dy.w + j] * quarter;
                let r0 = 2 * i * ow + 2 * j;
                dst[r0] = g;
                dst[r0 + 1] = g;
                dst[r0 + ow] = g;
                dst[r0 + ow + 1] = g;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.c, x.h * 2, x.w * 2);
    let ow = out.w;
    for c in 0..x.c {
        let src = &x.data[c * x.hw()..(c + 1) * x.hw()];
        let dst = &mut out.data[c * 4 * x.hw()..(c + 1) * 4 * x.hw()];
        for i in 0..x.h {
            for j in 0..x.w {
                let v = src[i * x.w + j];
                let r0 = 2 * i * ow + 2 * j;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + ow] = v;
                dst[r0 + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = &dy.data[c * dy.hw()..(c + 1) * dy.hw()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * dy.w + 2 * j;
                dst[i * w + j] = src[r0] + src[r0 + 1] + src[r0 + dy.w] + src[r0 + dy.w + 1];
            }
        }
    }
    out
}

fn im2col3<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![T::zero(); x.c * 9 * hw];
    for c in 0..x.c {
        let src = &x.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for xx in x_lo..x_hi {
                        row[y * w + xx] = src[sy * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dst = &mut out.data[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for xx in x_lo..x_hi {
                        dst[sy * w + xx + kx - 1] = dst[sy * w + xx + kx - 1] + row[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Same-padded convolution with a square kernel of size 1 or 3. Weights
/// live in the model's flat parameter vector at `w` (`cout × cin·k²`) and
/// `b` (`cout`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, k: usize, offset: &mut usize) -> Self {
        assert!(k == 1 || k == 3);
        let w = *offset;
        let b = w + cout * cin * k * k;
        *offset = b + cout;
        Conv { cin, cout, k, w, b }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.hw();
        let kk = self.fan_in();
        let weights = &p[self.w..self.w + self.weight_len()];
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        for (co, chunk) in out.data.chunks_mut(hw).enumerate() {
            chunk.fill(p[self.b + co]);
        }
        if self.k == 1 {
            matmul(self.cout, kk, hw, weights, false, &x.data, false, T::one(), &mut out.data);
        } else {
            let cols = im2col3(x);
            matmul(self.cout, kk, hw, weights, false, &cols, false, T::one(), &mut out.data);
        }
        out
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let hw = x.hw();
        let kk = self.fan_in();
        for (co, chunk) in dy.data.chunks(hw).enumerate() {
            let s: T = chunk.iter().copied().sum();
            g[self.b + co] = g[self.b + co] + s;
        }
        let cols_owned;
        let cols: &[T] = if self.k == 1 {
            &x.data
        } else {
            cols_owned = im2col3(x);
            &cols_owned
        };
        let wlen = self.weight_len();
        matmul(self.cout, hw, kk, &dy.data, false, cols, true, T::one(), &mut g[self.w..self.w + wlen]);
        if !need_dx {
            return None;
        }
        let weights = &p[self.w..self.w + wlen];
        let mut dcols = vec![T::zero(); kk * hw];
        matmul(kk, self.cout, hw, weights, true, &dy.data, false, T::zero(), &mut dcols);
        if self.k == 1 {
            Some(Tensor {
                c: self.cin,
                h: x.h,
                w: x.w,
                data: dcols,
            })
        } else {
            Some(col2im3(&dcols, self.cin, x.h, x.w))
        }
    }
}

/// `y = skip(x) + conv2(silu(conv1(silu(x))))`, with a 1×1 skip when the
/// channel count changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct ResCache<T> {
    pub x: Tensor<T>,
    pub h1: Tensor<T>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, offset: &mut usize) -> Self {
        let conv1 = Conv::new(cin, cout, 3, offset);
        let conv2 = Conv::new(cout, cout, 3, offset);
        let skip = (cin != cout).then(|| Conv::new(cin, cout, 1, offset));
        ResBlock { conv1, conv2, skip }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        [&self.conv1, &self.conv2].into_iter().chain(self.skip.iter())
    }

    pub fn forward<T: Real>(&self, p: &[T], x: Tensor<T>) -> (Tensor<T>, ResCache<T>) {
        let h1 = self.conv1.forward(p, &silu(&x));
        let mut y = self.conv2.forward(p, &silu(&h1));
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(p, &x)),
            None => y.add_assign(&x),
        }
        (y, ResCache { x, h1 })
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &ResCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let da2 = self.conv2.backward(p, g, &silu(&cache.h1), dy, true).expect("dx");
        let dh1 = silu_backward(&cache.h1, &da2);
        let da1 = self.conv1.backward(p, g, &silu(&cache.x), &dh1, true).expect("dx");
        let mut dx = silu_backward(&cache.x, &da1);
        match &self.skip {
            Some(s) => dx.add_assign(&s.backward(p, g, &cache.x, dy, true).expect("dx")),
            None => dx.add_assign(dy),
        }
        dx
    }
}
