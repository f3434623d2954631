//! 3D convolution lowered to GEMM through an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{Module, Param};
use crate::real::Real;

/// Target size of one im2col chunk (elements).
const COL_CHUNK_ELEMS: usize = 1 << 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    /// Periodic boundary; makes stride-1 convolutions exactly shift-equivariant.
    Circular,
}

#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
}

impl<T: Real> Conv3d<T> {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_ch * kernel.pow(3);
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = out_ch * fan_in;
        let w: Vec<T> = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_ch, in_ch, kernel, kernel, kernel],
                w,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn scale_weights(&mut self, s: f64) {
        let s = T::lit(s);
        self.weight.value.iter_mut().for_each(|w| *w *= s);
    }

    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        let pad = self.kernel / 2;
        input.map(|n| (n + 2 * pad - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_ch, self.in_ch * self.kernel.pow(3)), &self.weight.value)
            .expect("weight layout")
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self, input: [usize; 3]) -> u64 {
        let p: usize = self.output_shape(input).iter().product();
        (p * self.out_ch * self.in_ch * self.kernel.pow(3)) as u64
    }

    /// Output depth slices per im2col chunk, keeping the column buffer near
    /// `COL_CHUNK_ELEMS` entries.
    fn chunk_depth(&self, oh: usize, ow: usize) -> usize {
        let per_slice = self.in_ch * self.kernel.pow(3) * oh * ow;
        (COL_CHUNK_ELEMS / per_slice.max(1)).max(1)
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (c, d, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let out = self.output_shape([d, h, w]);
        let p = out.iter().product::<usize>();
        let mut y = Array2::<T>::zeros((self.out_ch, p));
        if self.is_pointwise() {
            let xs = x.view().into_shape_with_order((c, p)).expect("contiguous input");
            general_mat_mul(T::one(), &self.weight_matrix(), &xs, T::zero(), &mut y);
        } else {
            let maps = self.maps([d, h, w]);
            let plane = out[1] * out[2];
            let step = self.chunk_depth(out[1], out[2]);
            let mut buf = Vec::new();
            for z0 in (0..out[0]).step_by(step) {
                let z1 = (z0 + step).min(out[0]);
                let col = self.im2col(x, &maps, z0..z1, &mut buf);
                let mut yc = y.slice_mut(s![.., z0 * plane..z1 * plane]);
                general_mat_mul(T::one(), &self.weight_matrix(), &col, T::zero(), &mut yc);
            }
        }
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(&b.value) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        y.into_shape_with_order((self.out_ch, out[0], out[1], out[2]))
            .expect("output reshape")
    }

    /// Accumulates parameter gradients and returns the input gradient when requested.
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let (c, d, h, w) = x.dim();
        let out = self.output_shape([d, h, w]);
        let p = out.iter().product::<usize>();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_ch, p))
            .expect("contiguous grad");
        if let Some(b) = &mut self.bias {
            for (g, row) in b.grad.iter_mut().zip(dy2.axis_iter(Axis(0))) {
                *g += row.sum();
            }
        }
        let k = self.in_ch * self.kernel.pow(3);
        if self.is_pointwise() {
            let col = x.view().into_shape_with_order((c, p)).expect("contiguous input");
            let mut gw = ndarray::ArrayViewMut2::from_shape((self.out_ch, k), &mut self.weight.grad)
                .expect("grad layout");
            general_mat_mul(T::one(), &dy2, &col.t(), T::one(), &mut gw);
            if !need_input_grad {
                return None;
            }
            let mut dx = Array2::<T>::zeros((k, p));
            general_mat_mul(T::one(), &self.weight_matrix().t(), &dy2, T::zero(), &mut dx);
            return Some(dx.into_shape_with_order((c, d, h, w)).expect("reshape"));
        }
        let maps = self.maps([d, h, w]);
        let plane = out[1] * out[2];
        let step = self.chunk_depth(out[1], out[2]);
        let mut buf = Vec::new();
        let mut dbuf = Vec::new();
        let mut dx = need_input_grad.then(|| vec![T::zero(); c * d * h * w]);
        for z0 in (0..out[0]).step_by(step) {
            let z1 = (z0 + step).min(out[0]);
            let dyc = dy2.slice(s![.., z0 * plane..z1 * plane]);
            {
                let col = self.im2col(x, &maps, z0..z1, &mut buf);
                let mut gw = ndarray::ArrayViewMut2::from_shape((self.out_ch, k), &mut self.weight.grad)
                    .expect("grad layout");
                general_mat_mul(T::one(), &dyc, &col.t(), T::one(), &mut gw);
            }
            if let Some(dx) = dx.as_mut() {
                let pc = (z1 - z0) * plane;
                dbuf.clear();
                dbuf.resize(k * pc, T::zero());
                let mut dcol = ndarray::ArrayViewMut2::from_shape((k, pc), &mut dbuf[..]).expect("dcol layout");
                general_mat_mul(T::one(), &self.weight_matrix().t(), &dyc, T::zero(), &mut dcol);
                self.col2im(&dbuf, &maps, z0..z1, [d, h, w], dx);
            }
        }
        dx.map(|v| Array4::from_shape_vec((c, d, h, w), v).expect("dx layout"))
    }

    fn maps(&self, input: [usize; 3]) -> [Vec<Vec<Option<usize>>>; 3] {
        let out = self.output_shape(input);
        std::array::from_fn(|a| self.axis_map(input[a], out[a]))
    }

    /// For each kernel tap and output index, the source index along one axis
    /// (`None` where zero padding applies).
    fn axis_map(&self, n_in: usize, n_out: usize) -> Vec<Vec<Option<usize>>> {
        let pad = (self.kernel / 2) as isize;
        (0..self.kernel)
            .map(|kk| {
                (0..n_out)
                    .map(|o| {
                        let i = (o * self.stride) as isize + kk as isize - pad;
                        match self.padding {
                            Padding::Zero => (i >= 0 && i < n_in as isize).then_some(i as usize),
                            Padding::Circular => Some(i.rem_euclid(n_in as isize) as usize),
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Column matrix for output depth slices `zs`, built in `buf`.
    fn im2col<'a>(
        &self,
        x: &Array4<T>,
        maps: &[Vec<Vec<Option<usize>>>; 3],
        zs: std::ops::Range<usize>,
        buf: &'a mut Vec<T>,
    ) -> ArrayView2<'a, T> {
        let (c, _, h, w) = x.dim();
        let d = x.dim().1;
        let (oh, ow) = (maps[1][0].len(), maps[2][0].len());
        let p = zs.len() * oh * ow;
        let k = self.kernel;
        let [md, mh, mw] = maps;
        let xs = x.as_slice().expect("standard layout input");
        buf.clear();
        buf.resize(c * k * k * k * p, T::zero());
        let mut r = 0;
        for ci in 0..c {
            let cbase = ci * d * h * w;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = &mut buf[r * p..(r + 1) * p];
                        let mw = &mw[kw];
                        let mut q = 0;
                        for od_i in zs.clone() {
                            let Some(id) = md[kd][od_i] else {
                                q += oh * ow;
                                continue;
                            };
                            for oh_i in 0..oh {
                                if let Some(ih) = mh[kh][oh_i] {
                                    let base = cbase + (id * h + ih) * w;
                                    let src = &xs[base..base + w];
                                    for (dst, m) in row[q..q + ow].iter_mut().zip(mw) {
                                        if let Some(iw) = *m {
                                            *dst = src[iw];
                                        }
                                    }
                                }
                                q += ow;
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
        ArrayView2::from_shape((c * k * k * k, p), &buf[..]).expect("col layout")
    }

    /// Scatters the column gradient of output depth slices `zs` into `dx`.
    fn col2im(
        &self,
        dcol: &[T],
        maps: &[Vec<Vec<Option<usize>>>; 3],
        zs: std::ops::Range<usize>,
        input: [usize; 3],
        dx: &mut [T],
    ) {
        let [d, h, w] = input;
        let (oh, ow) = (maps[1][0].len(), maps[2][0].len());
        let p = zs.len() * oh * ow;
        let k = self.kernel;
        let [md, mh, mw] = maps;
        let mut r = 0;
        for ci in 0..self.in_ch {
            let cbase = ci * d * h * w;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = &dcol[r * p..(r + 1) * p];
                        let mw = &mw[kw];
                        let mut q = 0;
                        for od_i in zs.clone() {
                            let Some(id) = md[kd][od_i] else {
                                q += oh * ow;
                                continue;
                            };
                            for oh_i in 0..oh {
                                if let Some(ih) = mh[kh][oh_i] {
                                    let base = cbase + (id * h + ih) * w;
                                    let dst = &mut dx[base..base + w];
                                    for (g, m) in row[q..q + ow].iter().zip(mw) {
                                        if let Some(iw) = *m {
                                            dst[iw] += *g;
                                        }
                                    }
                                }
                                q += ow;
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

impl<T: Real> Module<T> for Conv3d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(conv: &Conv3d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (c, d, h, w) = x.dim();
        let [od, oh, ow] = conv.output_shape([d, h, w]);
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut y = Array4::zeros((conv.out_ch, od, oh, ow));
        for o in 0..conv.out_ch {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for ci in 0..c {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let src = [
                                            (z * conv.stride) as isize + kd as isize - pad,
                                            (yy * conv.stride) as isize + kh as isize - pad,
                                            (xx * conv.stride) as isize + kw as isize - pad,
                                        ];
                                        let dims = [d as isize, h as isize, w as isize];
                                        let idx: Option<Vec<usize>> = (0..3)
                                            .map(|a| match conv.padding {
                                                Padding::Zero => (src[a] >= 0 && src[a] < dims[a]).then_some(src[a] as usize),
                                                Padding::Circular => Some(src[a].rem_euclid(dims[a]) as usize),
                                            })
                                            .collect();
                                        if let Some(i) = idx {
                                            let wi = (((o * c + ci) * k + kd) * k + kh) * k + kw;
                                            acc += conv.weight.value[wi] * x[(ci, i[0], i[1], i[2])];
                                        }
                                    }
                                }
                            }
                        }
                        y[(o, z, yy, xx)] = acc;
                    }
                }
            }
        }
        y
    }

    fn input(c: usize, s: [usize; 3]) -> Array4<f64> {
        Array4::from_shape_fn((c, s[0], s[1], s[2]), |(a, b, cc, dd)| {
            (((a * 31 + b * 7 + cc * 3 + dd * 11) % 17) as f64 - 8.0) / 5.0
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, padding, kernel) in [
            (1, Padding::Zero, 3),
            (2, Padding::Zero, 3),
            (1, Padding::Circular, 3),
            (1, Padding::Zero, 1),
        ] {
            let mut conv = Conv3d::<f64>::new("c", 2, 3, kernel, stride, padding, true, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3];
            let x = input(2, [4, 6, 4]);
            let got = conv.forward(&x);
            let want = naive(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, padding) in [(1, Padding::Zero), (2, Padding::Zero), (1, Padding::Circular)] {
            let mut conv = Conv3d::<f64>::new("c", 2, 2, 3, stride, padding, true, &mut rng);
            let x = input(2, [4, 4, 4]);
            let y = conv.forward(&x);
            // loss = sum(y * r) with a fixed weighting r
            let r = Array4::from_shape_fn(y.raw_dim(), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0);
            let loss = |cv: &Conv3d<f64>, xx: &Array4<f64>| (&cv.forward(xx) * &r).sum();
            let dx = conv.backward(&x, &r, true).unwrap();
            let h = 1e-5;
            for i in (0..conv.weight.len()).step_by(7) {
                let mut cp = conv.clone();
                cp.weight.value[i] += h;
                let lp = loss(&cp, &x);
                cp.weight.value[i] -= 2.0 * h;
                let lm = loss(&cp, &x);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - conv.weight.grad[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
            for idx in [(0, 0, 0, 0), (1, 3, 2, 1), (0, 2, 3, 3)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let lp = loss(&conv, &xp);
                xp[idx] -= 2.0 * h;
                let lm = loss(&conv, &xp);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn chunked_columns_match_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3d::<f64>::new("c", 20, 2, 3, 1, Padding::Zero, true, &mut rng);
        let x = input(20, [3, 32, 32]);
        assert_eq!(conv.chunk_depth(32, 32), 1);
        let y = conv.forward(&x);
        let want = naive(&conv, &x);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let r = Array4::from_shape_fn(y.raw_dim(), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0);
        let dx = conv.backward(&x, &r, true).unwrap();
        let loss = |cv: &Conv3d<f64>, xx: &Array4<f64>| (&cv.forward(xx) * &r).sum();
        let h = 1e-5;
        for idx in [(0, 0, 0, 0), (7, 1, 16, 3), (19, 2, 31, 30)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let lp = loss(&conv, &xp);
            xp[idx] -= 2.0 * h;
            let lm = loss(&conv, &xp);
            assert!(((lp - lm) / (2.0 * h) - dx[idx]).abs() < 1e-5);
        }
        for i in [0, 333, 1079] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let lp = loss(&cp, &x);
            cp.weight.value[i] -= 2.0 * h;
            let lm = loss(&cp, &x);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}
