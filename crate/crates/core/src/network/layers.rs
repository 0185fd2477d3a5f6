//! Building blocks with hand-written backward passes. Tensors are
//! `(batch, channels, height, width)` in standard layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn cast<T: Real>(x: f64) -> T {
    T::from(x).expect("float cast")
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Square-kernel convolution, stride 1, zero padding that preserves the
/// spatial size. Kernel size is 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out, in, k, k)` flattened.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Array4<T>>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal initialization.
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = (0..out_channels * fan_in).map(|_| cast::<T>(normal.sample(rng))).collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(vec![T::zero(); out_channels])),
            input: None,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_channels, self.in_channels * self.kernel * self.kernel), &self.weight.value)
            .expect("weight shape")
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let mut out = Array4::<T>::zeros((b, self.out_channels, h, w));
        let wm = self.weight_matrix();
        let mut cols = Array2::<T>::zeros((c * self.kernel * self.kernel, hw));
        for n in 0..b {
            let xs = x.index_axis(Axis(0), n);
            let xs = xs.as_slice().expect("standard layout");
            let mut o = out.index_axis_mut(Axis(0), n).into_shape_with_order((self.out_channels, hw)).expect("contiguous");
            if self.kernel == 1 {
                let xv = ArrayView2::from_shape((c, hw), xs).expect("shape");
                general_mat_mul(T::one(), &wm, &xv, T::zero(), &mut o);
            } else {
                im2col3(xs, c, h, w, cols.as_slice_mut().expect("contiguous"));
                general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut o);
            }
            if let Some(bias) = &self.bias {
                for (mut row, &bv) in o.axis_iter_mut(Axis(0)).zip(&bias.value) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: Array4<T>) -> Array4<T> {
        let out = self.forward(&x);
        self.input = Some(x);
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("backward without forward_train");
        let (b, c, h, w) = x.dim();
        let hw = h * w;
        let k2 = self.kernel * self.kernel;
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let mut cols = Array2::<T>::zeros((c * k2, hw));
        let mut dcols = Array2::<T>::zeros((c * k2, hw));
        let wm = ArrayView2::from_shape((self.out_channels, c * k2), &self.weight.value).expect("weight shape").to_owned();
        let mut gw = ArrayViewMut2::from_shape((self.out_channels, c * k2), &mut self.weight.grad).expect("grad shape");
        for n in 0..b {
            let dyn_ = dy.index_axis(Axis(0), n);
            let dyn_ = dyn_.into_shape_with_order((self.out_channels, hw)).expect("contiguous");
            if let Some(bias) = &mut self.bias {
                for (g, row) in bias.grad.iter_mut().zip(dyn_.axis_iter(Axis(0))) {
                    *g = *g + row.sum();
                }
            }
            let xs = x.index_axis(Axis(0), n);
            let xs = xs.as_slice().expect("standard layout");
            let mut dxs = dx.index_axis_mut(Axis(0), n);
            let dxs = dxs.as_slice_mut().expect("standard layout");
            if self.kernel == 1 {
                let xv = ArrayView2::from_shape((c, hw), xs).expect("shape");
                general_mat_mul(T::one(), &dyn_, &xv.t(), T::one(), &mut gw);
                let mut dxv = ArrayViewMut2::from_shape((c, hw), dxs).expect("shape");
                general_mat_mul(T::one(), &wm.t(), &dyn_, T::zero(), &mut dxv);
            } else {
                im2col3(xs, c, h, w, cols.as_slice_mut().expect("contiguous"));
                general_mat_mul(T::one(), &dyn_, &cols.t(), T::one(), &mut gw);
                general_mat_mul(T::one(), &wm.t(), &dyn_, T::zero(), &mut dcols);
                col2im3(dcols.as_slice().expect("contiguous"), c, h, w, dxs);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }
}

/// Unfolds 3×3 neighborhoods (zero padded) into rows `c*9 + ky*3 + kx`.
fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => dst.copy_from_slice(s),
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]; overwrites `dx`.
fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    dx.fill(T::zero());
    for ch in 0..c {
        let dst = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&src[1..]).for_each(|(a, &b)| *a = *a + b),
                        1 => d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b),
                        _ => d[1..].iter_mut().zip(&src[..w - 1]).for_each(|(a, &b)| *a = *a + b),
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache<T: Real> {
    normalized: Array4<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Real> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    /// Inference mode: normalizes with the running statistics.
    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let eps = cast::<T>(BN_EPSILON);
        let mut out = x.clone();
        for ch in 0..self.channels {
            let inv = T::one() / (self.running_var[ch] + eps).sqrt();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * scale + shift);
        }
        out
    }

    /// Training mode: batch statistics, running statistics updated.
    pub fn forward_train(&mut self, x: Array4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        let count = b * h * w;
        let n = cast::<T>(count as f64);
        let eps = cast::<T>(BN_EPSILON);
        let momentum = cast::<T>(BN_MOMENTUM);
        let mut normalized = x;
        let mut inv_std = vec![T::zero(); c];
        let mut out = Array4::<T>::zeros((b, c, h, w));
        for ch in 0..c {
            let mut lane = normalized.index_axis_mut(Axis(1), ch);
            let mean = lane.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = lane.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mean) * inv);
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            out.index_axis_mut(Axis(1), ch).zip_mut_with(&lane, |o, &xh| *o = xh * g + bt);
            inv_std[ch] = inv;
            let unbiased = if count > 1 { var * n / (n - T::one()) } else { var };
            self.running_mean[ch] = (T::one() - momentum) * self.running_mean[ch] + momentum * mean;
            self.running_var[ch] = (T::one() - momentum) * self.running_var[ch] + momentum * unbiased;
        }
        self.cache = Some(BnCache { normalized, inv_std });
        out
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let BnCache { normalized, inv_std } = self.cache.take().expect("backward without forward_train");
        let (b, c, h, w) = dy.dim();
        let n = cast::<T>((b * h * w) as f64);
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = normalized.index_axis(Axis(1), ch);
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            ndarray::Zip::from(&dyc).and(&xh).for_each(|&d, &x| {
                sum_dy = sum_dy + d;
                sum_dy_xh = sum_dy_xh + d * x;
            });
            self.beta.grad[ch] = self.beta.grad[ch] + sum_dy;
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xh;
            let k = self.gamma.value[ch] * inv_std[ch] / n;
            ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch)).and(&dyc).and(&xh).for_each(|o, &d, &x| {
                *o = k * (n * d - sum_dy - x * sum_dy_xh);
            });
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

pub fn relu<T: Real>(mut x: Array4<T>) -> Array4<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    x
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(y: &Array4<T>, mut dy: Array4<T>) -> Array4<T> {
    dy.zip_mut_with(y, |d, &v| {
        if v <= T::zero() {
            *d = T::zero()
        }
    });
    dy
}

/// 2×2 max pooling; returns the pooled tensor and the flat argmax of each window.
pub fn max_pool2<T: Real>(x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((b, c, oh, ow));
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                os[o] = xs[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dy: &Array4<T>, arg: &[u32], input_dim: (usize, usize, usize, usize)) -> Array4<T> {
    let mut dx = Array4::<T>::zeros(input_dim);
    let ds = dx.as_slice_mut().expect("standard layout");
    for (&i, &d) in arg.iter().zip(dy.iter()) {
        ds[i as usize] = ds[i as usize] + d;
    }
    dx
}

/// Nearest-neighbor ×2 upsampling.
pub fn upsample2<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let ow = 2 * w;
    for plane in 0..b * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut os[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let i = 2 * y * ow + 2 * x;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + ow] = v;
                dst[i + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let ds = dy.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for plane in 0..b * c {
        let src = &ds[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut xs[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * w2 + 2 * x;
                dst[y * w + x] = src[i] + src[i + 1] + src[i + w2] + src[i + w2 + 1];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    assert_eq!((b.dim().0, b.dim().2, b.dim().3), (n, h, w), "concat spatial dims");
    let mut out = Array4::<T>::zeros((n, ca + cb, h, w));
    let (sa, sb) = (ca * h * w, cb * h * w);
    let (xa, xb) = (a.as_slice().expect("standard layout"), b.as_slice().expect("standard layout"));
    let os = out.as_slice_mut().expect("standard layout");
    for i in 0..n {
        let dst = &mut os[i * (sa + sb)..(i + 1) * (sa + sb)];
        dst[..sa].copy_from_slice(&xa[i * sa..(i + 1) * sa]);
        dst[sa..].copy_from_slice(&xb[i * sb..(i + 1) * sb]);
    }
    out
}

pub fn split_channels<T: Real>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let (a, b) = d.view().split_at(Axis(1), first);
    (a.to_owned(), b.to_owned())
}

/// Per-pixel two-channel softmax or one-channel sigmoid of logits.
pub fn head_activation<T: Real>(logits: &Array4<T>) -> Array4<T> {
    let channels = logits.dim().1;
    if channels == 1 {
        return logits.mapv(|z| T::one() / (T::one() + (-z).exp()));
    }
    let mut out = logits.clone();
    for mut pixel in out.lanes_mut(Axis(1)) {
        let m = pixel.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        pixel.mapv_inplace(|v| (v - m).exp());
        let s = pixel.sum();
        pixel.mapv_inplace(|v| v / s);
    }
    out
}

/// Maps a gradient with respect to head probabilities to one with respect to logits.
pub fn head_activation_backward<T: Real>(probs: &Array4<T>, dprobs: &Array4<T>) -> Array4<T> {
    let channels = probs.dim().1;
    if channels == 1 {
        let mut out = dprobs.clone();
        out.zip_mut_with(probs, |d, &p| *d = *d * p * (T::one() - p));
        return out;
    }
    let mut out = dprobs.clone();
    for (mut d, p) in out.lanes_mut(Axis(1)).into_iter().zip(probs.lanes(Axis(1))) {
        let dot = d.iter().zip(p.iter()).fold(T::zero(), |a, (&dv, &pv)| a + dv * pv);
        d.zip_mut_with(&p, |dv, &pv| *dv = pv * (*dv - dot));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Array4<f64>, conv: &Conv2d<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = Array4::zeros((b, conv.out_channels, h, w));
        for n in 0..b {
            for o in 0..conv.out_channels {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bias| bias.value[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - r;
                                    let sx = xx + kx - r;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * conv.kernel + ky as usize) * conv.kernel + kx as usize;
                                    acc += conv.weight.value[wi] * x[[n, ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                        out[[n, o, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [1, 3] {
            let mut conv = Conv2d::<f64>::new(3, 4, kernel, true, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = Array4::from_shape_fn((2, 3, 5, 6), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 - 5.0);
            let fast = conv.forward(&x);
            let slow = naive_conv(&x, &conv);
            assert!(fast.iter().zip(slow.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c * 9 * h * w];
        im2col3(&x, c, h, w, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im3(&y, c, h, w, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, i, j)| (c * 16 + i * 4 + j) as f32);
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.dim(), (1, 2, 2, 2));
        assert_eq!(p[[0, 0, 0, 0]], 5.0);
        let d = max_pool2_backward(&Array4::<f32>::ones((1, 2, 2, 2)), &arg, x.dim());
        assert_eq!(d.sum(), 8.0);
        assert_eq!(d[[0, 0, 1, 1]], 1.0);
        let u = upsample2(&p);
        assert_eq!(u.dim(), (1, 2, 4, 4));
        assert_eq!(upsample2_backward(&u).mapv(|v| v / 4.0), p);
    }

    #[test]
    fn softmax_sums_to_one() {
        let z = Array4::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| (a + 2 * b) as f64 * 0.7 - (c * d) as f64);
        let p = head_activation(&z);
        for lane in p.lanes(Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
    }
}
