use crate::error::{invalid, shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

impl Graph<'_> {
    /// Non-overlapping `k x k` max pooling. Spatial sizes must divide by `k`.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("maxpool2d", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let xd = tx.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if xd[i] > best {
                                best = xd[i];
                                bi = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let mut dx = vec![0.0; cx.inputs[0].len()];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += cx.grad.data()[o];
                }
                Ok(vec![Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?)])
            }),
        ))
    }

    /// Global average pool `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        let hw = h * w;
        let out: Vec<f64> = tx.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::from_vec(&[n, c, 1, 1], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &g in cx.grad.data() {
                    dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                Ok(vec![Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?)])
            }),
        ))
    }

    /// Global max pool `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        let hw = h * w;
        let mut arg = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for (pi, p) in tx.data().chunks(hw).enumerate() {
            let (bi, bv) = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            out.push(bv);
            arg.push(pi * hw + bi);
        }
        let out = Tensor::from_vec(&[n, c, 1, 1], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let mut dx = vec![0.0; cx.inputs[0].len()];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += cx.grad.data()[o];
                }
                Ok(vec![Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?)])
            }),
        ))
    }

    /// Mean over channels `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        if c == 0 {
            return Err(invalid("channel_mean", "zero channels"));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &tx.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += v / c as f64;
                }
            }
        }
        let out = Tensor::from_vec(&[n, 1, h, w], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let g = cx.grad.data();
                let mut dx = vec![0.0; n * c * hw];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(s * c + ch) * hw + p] = g[s * hw + p] / c as f64;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?)])
            }),
        ))
    }

    /// Max over channels `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        let hw = h * w;
        let mut out = vec![f64::NEG_INFINITY; n * hw];
        let mut arg = vec![0usize; n * hw];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (s * c + ch) * hw + p;
                    if tx.data()[i] > out[s * hw + p] {
                        out[s * hw + p] = tx.data()[i];
                        arg[s * hw + p] = i;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, 1, h, w], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let mut dx = vec![0.0; cx.inputs[0].len()];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += cx.grad.data()[o];
                }
                Ok(vec![Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?)])
            }),
        ))
    }
}
