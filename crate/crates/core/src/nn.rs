//! Layer primitives with explicit forward/backward passes.
//!
//! All convolutions use a 4×4 kernel, stride 2 and padding 1, the only
//! geometry the U-Net needs: a down convolution halves the spatial size and an
//! up (transposed) convolution doubles it.

use crate::tensor::{Real, Tensor};

const K: usize = 4;
const TAPS: usize = K * K;

/// Unrolls 4×4/stride-2/pad-1 patches of a `c×h×w` plane stack into a
/// `(c·16) × (h/2·w/2)` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let n = ho * wo;
    debug_assert_eq!(cols.len(), c * TAPS * n);
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[(ci * TAPS + ky * K + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (2 * oy + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back into planes.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let n = ho * wo;
    debug_assert_eq!(cols.len(), c * TAPS * n);
    out.fill(T::zero());
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[(ci * TAPS + ky * K + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Which way a convolution changes resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Stride-2 convolution; weights stored `[out][in·16]`.
    Down,
    /// Stride-2 transposed convolution; weights stored `[in][out·16]`.
    Up,
}

/// Shape bookkeeping for one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub(crate) struct ConvCache<T> {
    /// Down: unrolled input per sample. Up: the input itself.
    saved: Vec<Vec<T>>,
    in_shape: [usize; 4],
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * TAPS
    }

    pub fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        let [n, _, h, w] = input;
        match self.kind {
            ConvKind::Down => [n, self.out_channels, h / 2, w / 2],
            ConvKind::Up => [n, self.out_channels, h * 2, w * 2],
        }
    }

    pub(crate) fn forward<T: Real>(
        &self,
        x: &Tensor<T>,
        weight: &[T],
        bias: Option<&[T]>,
        keep: bool,
    ) -> (Tensor<T>, Option<ConvCache<T>>) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let in_shape = x.shape();
        let out_shape = self.output_shape(in_shape);
        let mut out = Tensor::zeros(out_shape);
        let mut saved = Vec::new();
        let (cin, cout) = (self.in_channels, self.out_channels);
        match self.kind {
            ConvKind::Down => {
                let (h, w) = (x.height(), x.width());
                let n = (h / 2) * (w / 2);
                let kk = cin * TAPS;
                for s in 0..x.batch() {
                    let mut cols = vec![T::zero(); kk * n];
                    im2col(x.sample(s), cin, h, w, &mut cols);
                    T::gemm(
                        cout,
                        kk,
                        n,
                        T::one(),
                        (weight, kk as isize, 1),
                        (&cols, n as isize, 1),
                        T::zero(),
                        (out.sample_mut(s), n as isize, 1),
                    );
                    if keep {
                        saved.push(cols);
                    }
                }
            }
            ConvKind::Up => {
                let (h, w) = (x.height(), x.width());
                let n = h * w;
                let kc = cout * TAPS;
                let mut cols = vec![T::zero(); kc * n];
                for s in 0..x.batch() {
                    T::gemm(
                        kc,
                        cin,
                        n,
                        T::one(),
                        (weight, 1, kc as isize),
                        (x.sample(s), n as isize, 1),
                        T::zero(),
                        (&mut cols, n as isize, 1),
                    );
                    col2im(&cols, cout, 2 * h, 2 * w, out.sample_mut(s));
                    if keep {
                        saved.push(x.sample(s).to_vec());
                    }
                }
            }
        }
        if let Some(b) = bias {
            let plane = out.plane();
            for s in 0..out.batch() {
                for (co, chunk) in out.sample_mut(s).chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        }
        (out, keep.then_some(ConvCache { saved, in_shape }))
    }

    /// Returns the input gradient (unless `need_input` is false) and
    /// accumulates into `grad_w` / `grad_b`.
    pub(crate) fn backward<T: Real>(
        &self,
        cache: &ConvCache<T>,
        grad_out: &Tensor<T>,
        weight: &[T],
        grad_w: &mut [T],
        grad_b: Option<&mut [T]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let (cin, cout) = (self.in_channels, self.out_channels);
        let [batch, _, h, w] = cache.in_shape;
        let mut grad_in = need_input.then(|| Tensor::zeros(cache.in_shape));
        if let Some(gb) = grad_b {
            let plane = grad_out.plane();
            for s in 0..batch {
                for (co, chunk) in grad_out.sample(s).chunks(plane).enumerate() {
                    gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
                }
            }
        }
        match self.kind {
            ConvKind::Down => {
                let n = (h / 2) * (w / 2);
                let kk = cin * TAPS;
                let mut gcols = vec![T::zero(); kk * n];
                for s in 0..batch {
                    let cols = &cache.saved[s];
                    let go = grad_out.sample(s);
                    T::gemm(
                        cout,
                        n,
                        kk,
                        T::one(),
                        (go, n as isize, 1),
                        (cols, 1, n as isize),
                        T::one(),
                        (grad_w, kk as isize, 1),
                    );
                    if let Some(gi) = grad_in.as_mut() {
                        T::gemm(
                            kk,
                            cout,
                            n,
                            T::one(),
                            (weight, 1, kk as isize),
                            (go, n as isize, 1),
                            T::zero(),
                            (&mut gcols, n as isize, 1),
                        );
                        col2im(&gcols, cin, h, w, gi.sample_mut(s));
                    }
                }
            }
            ConvKind::Up => {
                let n = h * w;
                let kc = cout * TAPS;
                let mut gcols = vec![T::zero(); kc * n];
                for s in 0..batch {
                    im2col(grad_out.sample(s), cout, 2 * h, 2 * w, &mut gcols);
                    let x = &cache.saved[s];
                    T::gemm(
                        cin,
                        n,
                        kc,
                        T::one(),
                        (x, n as isize, 1),
                        (&gcols, 1, n as isize),
                        T::one(),
                        (grad_w, kc as isize, 1),
                    );
                    if let Some(gi) = grad_in.as_mut() {
                        T::gemm(
                            cin,
                            kc,
                            n,
                            T::one(),
                            (weight, kc as isize, 1),
                            (&gcols, n as isize, 1),
                            T::zero(),
                            (gi.sample_mut(s), n as isize, 1),
                        );
                    }
                }
            }
        }
        grad_in
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

pub(crate) struct BatchNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

/// Batch normalization with batch statistics over `(batch, height, width)`.
///
/// Statistics always come from the current batch, at training and inference
/// time alike, so no running averages are kept.
pub(crate) fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    keep: bool,
) -> (Tensor<T>, Option<BatchNormCache<T>>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let count = T::from_usize(n * plane).unwrap();
    let eps = T::lit(BN_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut normalized = keep.then(|| Tensor::zeros(x.shape()));
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = T::zero();
        for s in 0..n {
            sum = sum + x.sample(s)[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut var = T::zero();
        for s in 0..n {
            for &v in &x.sample(s)[ch * plane..(ch + 1) * plane] {
                var = var + (v - mean) * (v - mean);
            }
        }
        let inv_std = T::one() / (var / count + eps).sqrt();
        inv_stds.push(inv_std);
        for s in 0..n {
            let range = ch * plane..(ch + 1) * plane;
            let src = &x.sample(s)[range.clone()];
            let dst = &mut out.sample_mut(s)[range.clone()];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv_std;
            }
            if let Some(nrm) = normalized.as_mut() {
                nrm.sample_mut(s)[range.clone()].copy_from_slice(dst);
            }
            for d in dst.iter_mut() {
                *d = *d * gamma[ch] + beta[ch];
            }
        }
    }
    let cache = normalized.map(|normalized| BatchNormCache {
        normalized,
        inv_std: inv_stds,
    });
    (out, cache)
}

pub(crate) fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Tensor<T> {
    let xhat = &cache.normalized;
    let [n, c, _, _] = xhat.shape();
    let plane = xhat.plane();
    let count = T::from_usize(n * plane).unwrap();
    let mut grad_in = Tensor::zeros(xhat.shape());
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let range = ch * plane..(ch + 1) * plane;
            for (&dy, &xh) in grad_out.sample(s)[range.clone()]
                .iter()
                .zip(&xhat.sample(s)[range])
            {
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * xh;
            }
        }
        grad_gamma[ch] = grad_gamma[ch] + sum_dy_xhat;
        grad_beta[ch] = grad_beta[ch] + sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch] / count;
        for s in 0..n {
            let range = ch * plane..(ch + 1) * plane;
            let dy = &grad_out.sample(s)[range.clone()];
            let xh = &xhat.sample(s)[range.clone()];
            let dst = &mut grad_in.sample_mut(s)[range];
            for ((d, &g), &xv) in dst.iter_mut().zip(dy).zip(xh) {
                *d = scale * (count * g - sum_dy - xv * sum_dy_xhat);
            }
        }
    }
    grad_in
}

pub(crate) fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// `pre` is the activation input.
pub(crate) fn leaky_relu_backward<T: Real>(pre: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *d = *d * slope;
        }
    }
    g
}

/// `out` is the tanh output.
pub(crate) fn tanh_backward<T: Real>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &y) in g.data_mut().iter_mut().zip(out.data()) {
        *d = *d * (T::one() - y * y);
    }
    g
}
