//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    pub fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    pub fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn out_size(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Validates shapes. `weight` is `[Cout, Cin/g, kh, kw]`, or
/// `[N, Cout, Cin/g, kh, kw]` when `per_sample`.
fn geometry(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
    per_sample: bool,
) -> Result<Geom> {
    let (n, cin, h, w) = x.dims4()?;
    let ws = weight.shape();
    let (wn, cout, cin_g, kh, kw) = match (per_sample, ws) {
        (false, &[co, ci, kh, kw]) => (n, co, ci, kh, kw),
        (true, &[wn, co, ci, kh, kw]) => (wn, co, ci, kh, kw),
        _ => return Err(shape_err("conv2d", format!("bad weight shape {ws:?}"))),
    };
    let groups = spec.groups.max(1);
    if wn != n {
        return Err(shape_err("conv2d", format!("per-sample weights for {wn} samples, batch is {n}")));
    }
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(shape_err(
            "conv2d",
            format!("input channels {cin}, weight {ws:?}, groups {groups}"),
        ));
    }
    if let Some(b) = bias {
        let ok = if per_sample {
            b.shape() == [n, cout]
        } else {
            b.shape() == [cout]
        };
        if !ok {
            return Err(shape_err("conv2d", format!("bias shape {:?}", b.shape())));
        }
    }
    let oh = out_size(h, kh, spec.stride, spec.padding)
        .ok_or_else(|| shape_err("conv2d", "kernel larger than padded input"))?;
    let ow = out_size(w, kw, spec.stride, spec.padding)
        .ok_or_else(|| shape_err("conv2d", "kernel larger than padded input"))?;
    Ok(Geom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride: spec.stride,
        pad: spec.padding,
        groups,
        oh,
        ow,
    })
}

/// Unfolds one group of one sample into `[cin_g*kh*kw, oh*ow]`.
pub(crate) fn im2col(x: &[f64], g: &Geom, group: usize, col: &mut [f64]) {
    let ohw = g.out_hw();
    let c0 = group * g.cin_g();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `dx`.
pub(crate) fn col2im(col: &[f64], g: &Geom, group: usize, dx: &mut [f64]) {
    let ohw = g.out_hw();
    let c0 = group * g.cin_g();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut dx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &Geom, per_sample: bool) -> Tensor {
    let (cin_g, cout_g, rows, ohw) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_hw());
    let wsize = g.cout * rows;
    let mut out = vec![0.0; g.n * g.cout * ohw];
    let mut col = vec![0.0; rows * ohw];
    let xd = x.data();
    for n in 0..g.n {
        let xn = &xd[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let wn = if per_sample { &w.data()[n * wsize..(n + 1) * wsize] } else { w.data() };
        for grp in 0..g.groups {
            let colref: &[f64] = if g.is_pointwise() {
                &xn[grp * cin_g * ohw..(grp + 1) * cin_g * ohw]
            } else {
                im2col(xn, g, grp, &mut col);
                &col
            };
            let wg = &wn[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let o0 = (n * g.cout + grp * cout_g) * ohw;
            gemm(
                1.0,
                MatRef::new(wg, cout_g, rows),
                MatRef::new(colref, rows, ohw),
                0.0,
                &mut out[o0..o0 + cout_g * ohw],
            );
        }
        if let Some(b) = b {
            let bn = if per_sample { &b.data()[n * g.cout..(n + 1) * g.cout] } else { b.data() };
            for co in 0..g.cout {
                let o0 = (n * g.cout + co) * ohw;
                out[o0..o0 + ohw].iter_mut().for_each(|v| *v += bn[co]);
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out).expect("conv output shape")
}

fn conv_backward(c: &BackwardCtx<'_>, g: &Geom, per_sample: bool) -> Result<Vec<Option<Tensor>>> {
    let (x, w) = (c.inputs[0], c.inputs[1]);
    let (cin_g, cout_g, rows, ohw) = (g.cin_g(), g.cout_g(), g.col_rows(), g.out_hw());
    let wsize = g.cout * rows;
    let gd = c.grad.data();
    let xd = x.data();
    let mut dx = c.needs[0].then(|| vec![0.0; x.len()]);
    let mut dw = c.needs[1].then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; rows * ohw];
    let mut dcol = vec![0.0; rows * ohw];
    for n in 0..g.n {
        let xn = &xd[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let woff = if per_sample { n * wsize } else { 0 };
        for grp in 0..g.groups {
            let go = &gd[(n * g.cout + grp * cout_g) * ohw..(n * g.cout + (grp + 1) * cout_g) * ohw];
            let wg_off = woff + grp * cout_g * rows;
            if let Some(dw) = dw.as_mut() {
                let colref: &[f64] = if g.is_pointwise() {
                    &xn[grp * cin_g * ohw..(grp + 1) * cin_g * ohw]
                } else {
                    im2col(xn, g, grp, &mut col);
                    &col
                };
                gemm(
                    1.0,
                    MatRef::new(go, cout_g, ohw),
                    MatRef::t(colref, rows, ohw),
                    1.0,
                    &mut dw[wg_off..wg_off + cout_g * rows],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[wg_off..wg_off + cout_g * rows];
                let dxn = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
                if g.is_pointwise() {
                    gemm(
                        1.0,
                        MatRef::t(wg, cout_g, rows),
                        MatRef::new(go, cout_g, ohw),
                        1.0,
                        &mut dxn[grp * cin_g * ohw..(grp + 1) * cin_g * ohw],
                    );
                } else {
                    gemm(
                        1.0,
                        MatRef::t(wg, cout_g, rows),
                        MatRef::new(go, cout_g, ohw),
                        0.0,
                        &mut dcol,
                    );
                    col2im(&dcol, g, grp, dxn);
                }
            }
        }
    }
    let mut out = vec![
        dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
    ];
    if c.inputs.len() == 3 {
        let b = c.inputs[2];
        let mut db = vec![0.0; b.len()];
        for n in 0..g.n {
            for co in 0..g.cout {
                let s: f64 = gd[(n * g.cout + co) * ohw..(n * g.cout + co + 1) * ohw].iter().sum();
                let idx = if per_sample { n * g.cout + co } else { co };
                db[idx] += s;
            }
        }
        out.push(Some(Tensor::from_vec(b.shape(), db)?));
    }
    Ok(out)
}

impl Graph<'_> {
    fn conv_impl(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
        per_sample: bool,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let tb = bias.map(|b| self.value(b));
        let geom = geometry(tx, tw, tb, spec, per_sample)?;
        let out = conv_forward(tx, tw, tb, &geom, per_sample);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(
            out,
            &inputs,
            Box::new(move |c: &BackwardCtx<'_>| conv_backward(c, &geom, per_sample)),
        ))
    }

    /// Cross-correlation of `x: [N, Cin, H, W]` with `weight: [Cout, Cin/g,
    /// kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        self.conv_impl(x, weight, bias, spec, false)
    }

    /// Like [`Graph::conv2d`] but with a separate kernel per batch element:
    /// `weight: [N, Cout, Cin/g, kh, kw]`, `bias: [N, Cout]`.
    pub fn conv2d_per_sample(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        self.conv_impl(x, weight, bias, spec, true)
    }
}
