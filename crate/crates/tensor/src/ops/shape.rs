use crate::error::{shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

impl Graph<'_> {
    /// Concatenates `[N, C_i, H, W]` maps along channels, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat_channels", "no operands"));
        }
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(x).shape(), self.value(xs[0]).shape()),
                ));
            }
            chans.push(xc);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[n, ctot, h, w], out)?;
        Ok(self.push_op(
            out,
            xs,
            Box::new(move |cx: &BackwardCtx<'_>| {
                let g = cx.grad.data();
                let mut grads: Vec<Vec<f64>> = chans.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
                for s in 0..n {
                    let mut off = s * ctot * hw;
                    for (gi, &c) in grads.iter_mut().zip(&chans) {
                        gi.extend_from_slice(&g[off..off + c * hw]);
                        off += c * hw;
                    }
                }
                grads
                    .into_iter()
                    .zip(&cx.inputs)
                    .map(|(d, t)| Tensor::from_vec(t.shape(), d).map(Some))
                    .collect()
            }),
        ))
    }

    /// Channels `[start, start + len)` of an `[N, C, H, W]` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(shape_err("slice_channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&self.value(x).data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let out = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let mut dx = vec![0.0; n * c * hw];
                for s in 0..n {
                    dx[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&cx.grad.data()[s * len * hw..(s + 1) * len * hw]);
                }
                Ok(vec![Some(Tensor::from_vec(&[n, c, h, w], dx)?)])
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(|cx: &BackwardCtx<'_>| Ok(vec![Some(cx.grad.reshaped(cx.inputs[0].shape())?)])),
        ))
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, oh, ow]` with half-pixel
    /// centres (`align_corners = false`).
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(shape_err("bilinear_resize", "empty target size"));
        }
        let ys = axis_taps(h, oh);
        let xs = axis_taps(w, ow);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    dst[oy * ow + ox] = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * ((1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let g = cx.grad.data();
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let v = gp[oy * ow + ox];
                            dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += v * ly * (1.0 - lx);
                            dst[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_vec(&[n, c, h, w], dx)?)])
            }),
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.bilinear_resize(x, 2 * h, 2 * w)
    }
}

/// Source indices and weight along one axis for half-pixel bilinear resize.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}
