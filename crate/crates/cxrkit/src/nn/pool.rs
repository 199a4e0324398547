//! Pooling, activation, reshaping, and upsampling layers.

use super::conv::dims4;
use super::{Layer, Tensor};

/// Max pooling with optional zero-area padding (padded cells never win:
/// they are treated as negative infinity).
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    argmax: Option<Vec<usize>>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
            argmax: None,
            in_shape: (0, 0, 0, 0),
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn run(&self, x: &Tensor, mut record: Option<&mut Vec<usize>>) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Tensor::zeros((n, c, oh, ow));
        let xs = x.as_slice().expect("contiguous");
        let os = out.as_slice_mut().expect("contiguous");
        if let Some(rec) = record.as_deref_mut() {
            rec.clear();
            rec.resize(n * c * oh * ow, 0);
        }
        for nc in 0..n * c {
            let plane = &xs[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            let v = plane[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    os[nc * oh * ow + oy * ow + ox] = best;
                    if let Some(rec) = record.as_deref_mut() {
                        rec[nc * oh * ow + oy * ow + ox] = nc * h * w + best_idx;
                    }
                }
            }
        }
        out
    }
}

impl Layer for MaxPool2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = dims4(x);
        let mut argmax = self.argmax.take().unwrap_or_default();
        let y = self.run(x, Some(&mut argmax));
        self.argmax = Some(argmax);
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let argmax = self.argmax.take().expect("forward before backward");
        let mut gx = Tensor::zeros(self.in_shape);
        let gxs = gx.as_slice_mut().expect("contiguous");
        for (&src_idx, &g) in argmax.iter().zip(gy.as_slice().expect("contiguous")) {
            gxs[src_idx] += g;
        }
        gx
    }
}

/// Average pooling with zero padding counted in the divisor (window area is
/// always kernel squared).
pub struct AvgPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    in_shape: (usize, usize, usize, usize),
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        AvgPool2d {
            kernel,
            stride,
            pad,
            in_shape: (0, 0, 0, 0),
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let (oh, ow) = self.out_dims(h, w);
        let scale = 1.0 / (self.kernel * self.kernel) as f32;
        let mut out = Tensor::zeros((n, c, oh, ow));
        let xs = x.as_slice().expect("contiguous");
        let os = out.as_slice_mut().expect("contiguous");
        for nc in 0..n * c {
            let plane = &xs[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += plane[iy as usize * w + ix as usize];
                        }
                    }
                    os[nc * oh * ow + oy * ow + ox] = acc * scale;
                }
            }
        }
        out
    }
}

impl Layer for AvgPool2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = dims4(x);
        self.run(x)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_shape;
        let (oh, ow) = self.out_dims(h, w);
        let scale = 1.0 / (self.kernel * self.kernel) as f32;
        let mut gx = Tensor::zeros(self.in_shape);
        let gxs = gx.as_slice_mut().expect("contiguous");
        let gys = gy.as_slice().expect("contiguous");
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gys[nc * oh * ow + oy * ow + ox] * scale;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gxs[nc * h * w + iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Collapses each channel to its spatial mean: (N, C, H, W) -> (N, C, 1, 1).
pub struct GlobalAvgPool {
    in_shape: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool {
            in_shape: (0, 0, 0, 0),
        }
    }

    fn run(x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let scale = 1.0 / (h * w) as f32;
        let mut out = Tensor::zeros((n, c, 1, 1));
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for v in x
                    .index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), ch)
                    .iter()
                {
                    acc += v;
                }
                out[[i, ch, 0, 0]] = acc * scale;
            }
        }
        out
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        Self::run(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = dims4(x);
        Self::run(x)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_shape;
        let scale = 1.0 / (h * w) as f32;
        let mut gx = Tensor::zeros(self.in_shape);
        for i in 0..n {
            for ch in 0..c {
                let g = gy[[i, ch, 0, 0]] * scale;
                gx.index_axis_mut(ndarray::Axis(0), i)
                    .index_axis_mut(ndarray::Axis(0), ch)
                    .fill(g);
            }
        }
        gx
    }
}

/// Reshapes (N, C, H, W) to (N, C*H*W, 1, 1) so 1x1 convolutions can act as
/// fully connected layers.
pub struct Flatten {
    in_shape: (usize, usize, usize, usize),
}

impl Flatten {
    pub fn new() -> Self {
        Flatten {
            in_shape: (0, 0, 0, 0),
        }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x);
        x.clone()
            .into_shape_with_order((n, c * h * w, 1, 1))
            .expect("contiguous")
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = dims4(x);
        self.infer(x)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        gy.clone()
            .into_shape_with_order(self.in_shape)
            .expect("contiguous")
    }
}

pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn infer(&self, x: &Tensor) -> Tensor {
        x.mapv(|v| v.max(0.0))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        self.infer(x)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("forward before backward");
        let mut gx = gy.clone();
        for (g, keep) in gx.iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        gx
    }
}

/// Doubles spatial resolution by pixel replication.
pub struct UpsampleNearest2x {
    in_shape: (usize, usize, usize, usize),
}

impl UpsampleNearest2x {
    pub fn new() -> Self {
        UpsampleNearest2x {
            in_shape: (0, 0, 0, 0),
        }
    }
}

impl Default for UpsampleNearest2x {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for UpsampleNearest2x {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let mut out = Tensor::zeros((n, c, h * 2, w * 2));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[i, ch, y, xx]];
                        out[[i, ch, 2 * y, 2 * xx]] = v;
                        out[[i, ch, 2 * y, 2 * xx + 1]] = v;
                        out[[i, ch, 2 * y + 1, 2 * xx]] = v;
                        out[[i, ch, 2 * y + 1, 2 * xx + 1]] = v;
                    }
                }
            }
        }
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = dims4(x);
        self.infer(x)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_shape;
        let mut gx = Tensor::zeros(self.in_shape);
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[[i, ch, y, xx]] = gy[[i, ch, 2 * y, 2 * xx]]
                            + gy[[i, ch, 2 * y, 2 * xx + 1]]
                            + gy[[i, ch, 2 * y + 1, 2 * xx]]
                            + gy[[i, ch, 2 * y + 1, 2 * xx + 1]];
                    }
                }
            }
        }
        gx
    }
}
