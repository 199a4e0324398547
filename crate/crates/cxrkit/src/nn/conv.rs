//! 2D convolution via im2col and matrix multiplication.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3};

use super::{import_slice, Layer, Tensor};
use crate::error::Result;

pub struct Conv2d {
    pub weight: Array4<f32>, // (out, in, kh, kw)
    pub bias: Array1<f32>,
    wgrad: Array4<f32>,
    bgrad: Array1<f32>,
    stride: (usize, usize),
    pad: (usize, usize),
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Array1<f32>, stride: (usize, usize), pad: (usize, usize)) -> Self {
        let wgrad = Array4::zeros(weight.raw_dim());
        let bgrad = Array1::zeros(bias.raw_dim());
        Conv2d {
            weight,
            bias,
            wgrad,
            bgrad,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = dims4(&self.weight);
        let oh = (h + 2 * self.pad.0 - kh) / self.stride.0 + 1;
        let ow = (w + 2 * self.pad.1 - kw) / self.stride.1 + 1;
        (oh, ow)
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let (n, c_in, h, w) = dims4(x);
        let (c_out, wc_in, kh, kw) = dims4(&self.weight);
        assert_eq!(
            c_in, wc_in,
            "conv expects {wc_in} input channels, got {c_in}"
        );
        let (oh, ow) = self.out_dims(h, w);
        let k = c_in * kh * kw;
        let w2: ArrayView2<f32> = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .expect("weight is contiguous");
        let mut out = Tensor::zeros((n, c_out, oh, ow));
        let mut col = Array2::<f32>::zeros((k, oh * ow));
        for i in 0..n {
            im2col(
                &x.index_axis(ndarray::Axis(0), i),
                kh,
                kw,
                self.stride,
                self.pad,
                &mut col,
            );
            let y = w2.dot(&col); // (c_out, oh*ow)
            let mut out_i = out.index_axis_mut(ndarray::Axis(0), i);
            for oc in 0..c_out {
                let b = self.bias[oc];
                let row = y.row(oc);
                let mut plane = out_i.index_axis_mut(ndarray::Axis(0), oc);
                let plane = plane.as_slice_mut().expect("contiguous");
                for (dst, &src) in plane.iter_mut().zip(row.iter()) {
                    *dst = src + b;
                }
            }
        }
        out
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.run(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("forward before backward");
        let (n, c_in, h, w) = dims4(&x);
        let (c_out, _, kh, kw) = dims4(&self.weight);
        let (oh, ow) = self.out_dims(h, w);
        let k = c_in * kh * kw;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .expect("weight is contiguous");
        let mut gx = Tensor::zeros((n, c_in, h, w));
        let mut col = Array2::<f32>::zeros((k, oh * ow));
        let mut wg = Array2::<f32>::zeros((c_out, k));
        for i in 0..n {
            let gyi: ArrayView2<f32> = gy
                .index_axis(ndarray::Axis(0), i)
                .into_shape_with_order((c_out, oh * ow))
                .expect("contiguous");
            // parameter gradients
            im2col(
                &x.index_axis(ndarray::Axis(0), i),
                kh,
                kw,
                self.stride,
                self.pad,
                &mut col,
            );
            wg.assign(&gyi.dot(&col.t()));
            let wgflat = self.wgrad.as_slice_mut().expect("contiguous");
            for (dst, &src) in wgflat.iter_mut().zip(wg.iter()) {
                *dst += src;
            }
            for oc in 0..c_out {
                self.bgrad[oc] += gyi.row(oc).sum();
            }
            // input gradient
            let gcol = w2.t().dot(&gyi); // (k, oh*ow)
            col2im(
                &gcol,
                &mut gx.index_axis_mut(ndarray::Axis(0), i),
                kh,
                kw,
                self.stride,
                self.pad,
                oh,
                ow,
            );
        }
        gx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.weight.as_slice_mut().expect("contiguous"),
            self.wgrad.as_slice_mut().expect("contiguous"),
        );
        f(
            self.bias.as_slice_mut().expect("contiguous"),
            self.bgrad.as_slice_mut().expect("contiguous"),
        );
    }

    fn zero_grad(&mut self) {
        self.wgrad.fill(0.0);
        self.bgrad.fill(0.0);
    }

    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        out.push(self.weight.as_slice().expect("contiguous").to_vec());
        out.push(self.bias.as_slice().expect("contiguous").to_vec());
    }

    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        let w = import_slice(src, self.weight.len(), "conv weight")?;
        self.weight
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&w);
        let b = import_slice(src, self.bias.len(), "conv bias")?;
        self.bias
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&b);
        Ok(())
    }
}

pub(crate) fn dims4(t: &Array4<f32>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Unfolds one image (C, H, W) into a (C*KH*KW, OH*OW) patch matrix with
/// zero padding.
fn im2col(
    x: &ArrayView3<f32>,
    kh: usize,
    kw: usize,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    col: &mut Array2<f32>,
) {
    let (c_in, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2])
    };
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    debug_assert_eq!(col.shape(), &[c_in * kh * kw, oh * ow]);
    let xs = x.as_slice().expect("contiguous");
    let cs = col.as_slice_mut().expect("contiguous");
    for c in 0..c_in {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let dst = &mut cs[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a (C*KH*KW, OH*OW) gradient matrix back onto the (C, H, W)
/// input gradient, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f32>,
    gx: &mut ndarray::ArrayViewMut3<f32>,
    kh: usize,
    kw: usize,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    oh: usize,
    ow: usize,
) {
    let (c_in, h, w) = {
        let s = gx.shape();
        (s[0], s[1], s[2])
    };
    let gs = gcol.as_slice().expect("contiguous");
    let out = gx.as_slice_mut().expect("contiguous");
    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &gs[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}
