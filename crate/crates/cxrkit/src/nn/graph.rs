//! Composite layers: sequential chains, channel-concatenated branches, and
//! residual blocks.

use ndarray::Axis;

use super::conv::dims4;
use super::{Layer, Tensor};
use crate::error::Result;

pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Box<dyn Layer>) {
        self.layers.push(layer);
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur);
        }
        cur
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur);
        }
        cur
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut cur = gy.clone();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur);
        }
        cur
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }

    fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.zero_grad();
        }
    }

    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        for l in &self.layers {
            l.export_state(out);
        }
    }

    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        for l in &mut self.layers {
            l.import_state(src)?;
        }
        Ok(())
    }
}

/// Concatenates along the channel axis into a freshly allocated
/// standard-layout tensor.
///
/// `ndarray::concatenate` grows along the chosen axis, so concatenating a
/// middle axis leaves that axis outermost in memory; per-image views of the
/// result are then not contiguous, which the conv kernels require. Copying
/// into a zeroed tensor keeps every layer boundary in standard layout.
pub(crate) fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = dims4(parts[0]);
    let channels: usize = parts.iter().map(|p| dims4(p).1).sum();
    let mut out = Tensor::zeros((n, channels, h, w));
    let mut offset = 0;
    for p in parts {
        let c = dims4(p).1;
        out.slice_axis_mut(Axis(1), ndarray::Slice::from(offset..offset + c))
            .assign(p);
        offset += c;
    }
    out
}

/// Runs each branch on the same input and concatenates their outputs along
/// the channel axis.
pub struct Concat {
    branches: Vec<Sequential>,
    splits: Vec<usize>,
}

impl Concat {
    pub fn new(branches: Vec<Sequential>) -> Self {
        Concat {
            branches,
            splits: Vec::new(),
        }
    }

    fn join(parts: Vec<Tensor>) -> Tensor {
        let refs: Vec<&Tensor> = parts.iter().collect();
        concat_channels(&refs)
    }
}

impl Layer for Concat {
    fn infer(&self, x: &Tensor) -> Tensor {
        Self::join(self.branches.iter().map(|b| b.infer(x)).collect())
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut parts = Vec::with_capacity(self.branches.len());
        self.splits.clear();
        for b in &mut self.branches {
            let y = b.forward(x);
            self.splits.push(dims4(&y).1);
            parts.push(y);
        }
        Self::join(parts)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut gx: Option<Tensor> = None;
        let mut offset = 0;
        for (b, &ch) in self.branches.iter_mut().zip(&self.splits) {
            let slice = gy
                .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + ch))
                .to_owned();
            let g = b.backward(&slice);
            match &mut gx {
                Some(acc) => *acc += &g,
                None => gx = Some(g),
            }
            offset += ch;
        }
        gx.expect("concat has at least one branch")
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        for b in &mut self.branches {
            b.visit_params(f);
        }
    }

    fn zero_grad(&mut self) {
        for b in &mut self.branches {
            b.zero_grad();
        }
    }

    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        for b in &self.branches {
            b.export_state(out);
        }
    }

    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        for b in &mut self.branches {
            b.import_state(src)?;
        }
        Ok(())
    }
}

/// y = main(x) + shortcut(x); the shortcut defaults to identity.
pub struct Residual {
    main: Sequential,
    shortcut: Option<Sequential>,
}

impl Residual {
    pub fn new(main: Sequential, shortcut: Option<Sequential>) -> Self {
        Residual { main, shortcut }
    }
}

impl Layer for Residual {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.main.infer(x);
        match &self.shortcut {
            Some(s) => y += &s.infer(x),
            None => y += x,
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.main.forward(x);
        match &mut self.shortcut {
            Some(s) => y += &s.forward(x),
            None => y += x,
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut gx = self.main.backward(gy);
        match &mut self.shortcut {
            Some(s) => gx += &s.backward(gy),
            None => gx += gy,
        }
        gx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.main.visit_params(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(f);
        }
    }

    fn zero_grad(&mut self) {
        self.main.zero_grad();
        if let Some(s) = &mut self.shortcut {
            s.zero_grad();
        }
    }

    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        self.main.export_state(out);
        if let Some(s) = &self.shortcut {
            s.export_state(out);
        }
    }

    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        self.main.import_state(src)?;
        if let Some(s) = &mut self.shortcut {
            s.import_state(src)?;
        }
        Ok(())
    }
}
