//! Batch normalization over the channel axis.

use ndarray::Array1;

use super::conv::dims4;
use super::{import_slice, Layer, Tensor};
use crate::error::Result;

pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    running_mean: Array1<f32>,
    running_var: Array1<f32>,
    ggrad: Array1<f32>,
    bgrad: Array1<f32>,
    momentum: f32,
    eps: f32,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Tensor,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            ggrad: Array1::zeros(channels),
            bgrad: Array1::zeros(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let mut out = Tensor::zeros((n, c, h, w));
        for ch in 0..c {
            let scale = self.gamma[ch] / (self.running_var[ch] + self.eps).sqrt();
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        out[[i, ch, y, xx]] = x[[i, ch, y, xx]] * scale + shift;
                    }
                }
            }
        }
        out
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x);
        let m = (n * h * w) as f32;
        let mut xhat = Tensor::zeros((n, c, h, w));
        let mut inv_std = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let mut mean = 0.0f32;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        mean += x[[i, ch, y, xx]];
                    }
                }
            }
            mean /= m;
            let mut var = 0.0f32;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = x[[i, ch, y, xx]] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        xhat[[i, ch, y, xx]] = (x[[i, ch, y, xx]] - mean) * istd;
                    }
                }
            }
            // running stats use the unbiased variance estimate
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        let mut out = Tensor::zeros((n, c, h, w));
        for ch in 0..c {
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        out[[i, ch, y, xx]] = self.gamma[ch] * xhat[[i, ch, y, xx]] + self.beta[ch];
                    }
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std });
        out
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = dims4(gy);
        let m = (n * h * w) as f32;
        let mut gx = Tensor::zeros((n, c, h, w));
        for ch in 0..c {
            let mut sum_gy = 0.0f32;
            let mut sum_gy_xhat = 0.0f32;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let g = gy[[i, ch, y, xx]];
                        sum_gy += g;
                        sum_gy_xhat += g * xhat[[i, ch, y, xx]];
                    }
                }
            }
            self.bgrad[ch] += sum_gy;
            self.ggrad[ch] += sum_gy_xhat;
            let coef = self.gamma[ch] * inv_std[ch] / m;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let g = gy[[i, ch, y, xx]];
                        gx[[i, ch, y, xx]] =
                            coef * (m * g - sum_gy - xhat[[i, ch, y, xx]] * sum_gy_xhat);
                    }
                }
            }
        }
        gx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        f(
            self.gamma.as_slice_mut().expect("contiguous"),
            self.ggrad.as_slice_mut().expect("contiguous"),
        );
        f(
            self.beta.as_slice_mut().expect("contiguous"),
            self.bgrad.as_slice_mut().expect("contiguous"),
        );
    }

    fn zero_grad(&mut self) {
        self.ggrad.fill(0.0);
        self.bgrad.fill(0.0);
    }

    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        out.push(self.gamma.to_vec());
        out.push(self.beta.to_vec());
        out.push(self.running_mean.to_vec());
        out.push(self.running_var.to_vec());
    }

    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        let n = self.gamma.len();
        self.gamma = Array1::from_vec(import_slice(src, n, "bn gamma")?);
        self.beta = Array1::from_vec(import_slice(src, n, "bn beta")?);
        self.running_mean = Array1::from_vec(import_slice(src, n, "bn running mean")?);
        self.running_var = Array1::from_vec(import_slice(src, n, "bn running var")?);
        Ok(())
    }
}
