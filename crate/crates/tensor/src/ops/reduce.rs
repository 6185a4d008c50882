use crate::error::{shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::tensor::{same_shape, Tensor};

impl Graph<'_> {
    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push_op(
            out,
            &[x],
            Box::new(|cx: &BackwardCtx<'_>| {
                Ok(vec![Some(Tensor::full(cx.inputs[0].shape(), cx.grad.item()))])
            }),
        ))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute deviation between two same-shape tensors.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape("l1_loss", p, t)?;
        let n = p.len() as f64;
        let v: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        Ok(self.push_op(
            Tensor::scalar(v),
            &[pred, target],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let g = cx.grad.item() / n;
                let d: Vec<f64> = cx.inputs[0]
                    .data()
                    .iter()
                    .zip(cx.inputs[1].data())
                    .map(|(a, b)| {
                        if a > b {
                            g
                        } else if a < b {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = cx.inputs[0].shape();
                let neg = d.iter().map(|v| -v).collect();
                Ok(vec![
                    Some(Tensor::from_vec(shape, d)?),
                    Some(Tensor::from_vec(shape, neg)?),
                ])
            }),
        ))
    }

    /// Softmax over the last axis of a rank-2 `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[n, k] = tx.shape() else {
            return Err(shape_err("softmax", format!("expected [N, K], got {:?}", tx.shape())));
        };
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let row = &tx.data()[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            out[r * k..(r + 1) * k].iter_mut().for_each(|o| *o /= z);
        }
        let out = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let (y, g) = (cx.output.data(), cx.grad.data());
                let mut dx = vec![0.0; n * k];
                for r in 0..n {
                    let dot: f64 = (0..k).map(|j| y[r * k + j] * g[r * k + j]).sum();
                    for j in 0..k {
                        dx[r * k + j] = y[r * k + j] * (g[r * k + j] - dot);
                    }
                }
                Ok(vec![Some(Tensor::from_vec(&[n, k], dx)?)])
            }),
        ))
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (&[n, din], &[dout, win]) = (tx.shape(), tw.shape()) else {
            return Err(shape_err("linear", format!("{:?} x {:?}", tx.shape(), tw.shape())));
        };
        if win != din {
            return Err(shape_err("linear", format!("input width {din}, weight {:?}", tw.shape())));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [dout] {
                return Err(shape_err("linear", "bias shape"));
            }
        }
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            for o in 0..dout {
                let mut s = bias.map_or(0.0, |b| self.value(b).data()[o]);
                for i in 0..din {
                    s += tx.data()[r * din + i] * tw.data()[o * din + i];
                }
                out[r * dout + o] = s;
            }
        }
        let out = Tensor::from_vec(&[n, dout], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(
            out,
            &inputs,
            Box::new(move |cx: &BackwardCtx<'_>| {
                let (xd, wd, g) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad.data());
                let mut dx = vec![0.0; n * din];
                let mut dw = vec![0.0; dout * din];
                let mut db = vec![0.0; dout];
                for r in 0..n {
                    for o in 0..dout {
                        let go = g[r * dout + o];
                        db[o] += go;
                        for i in 0..din {
                            dx[r * din + i] += go * wd[o * din + i];
                            dw[o * din + i] += go * xd[r * din + i];
                        }
                    }
                }
                let mut res = vec![
                    Some(Tensor::from_vec(&[n, din], dx)?),
                    Some(Tensor::from_vec(&[dout, din], dw)?),
                ];
                if cx.inputs.len() == 3 {
                    res.push(Some(Tensor::from_vec(&[dout], db)?));
                }
                Ok(res)
            }),
        ))
    }

    /// Per-sample convex mixture of a bank of tensors:
    /// `out[n] = sum_k alpha[n, k] * bank[k]` for `alpha: [N, K]`,
    /// `bank: [K, ...]`, giving `[N, ...]`.
    pub fn mix_bank(&mut self, alpha: Var, bank: Var) -> Result<Var> {
        let (ta, tb) = (self.value(alpha), self.value(bank));
        let &[n, k] = ta.shape() else {
            return Err(shape_err("mix_bank", format!("alpha shape {:?}", ta.shape())));
        };
        if tb.shape().first() != Some(&k) {
            return Err(shape_err("mix_bank", format!("bank {:?} for {k} weights", tb.shape())));
        }
        let item = tb.len() / k;
        let mut out = vec![0.0; n * item];
        for r in 0..n {
            for j in 0..k {
                let a = ta.data()[r * k + j];
                for (o, b) in out[r * item..(r + 1) * item]
                    .iter_mut()
                    .zip(&tb.data()[j * item..(j + 1) * item])
                {
                    *o += a * b;
                }
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tb.shape()[1..]);
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push_op(
            out,
            &[alpha, bank],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let (ad, bd, g) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad.data());
                let mut da = vec![0.0; n * k];
                let mut dbk = vec![0.0; k * item];
                for r in 0..n {
                    let gr = &g[r * item..(r + 1) * item];
                    for j in 0..k {
                        let bj = &bd[j * item..(j + 1) * item];
                        da[r * k + j] = gr.iter().zip(bj).map(|(a, b)| a * b).sum();
                        let a = ad[r * k + j];
                        for (d, gv) in dbk[j * item..(j + 1) * item].iter_mut().zip(gr) {
                            *d += a * gv;
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(&[n, k], da)?),
                    Some(Tensor::from_vec(cx.inputs[1].shape(), dbk)?),
                ])
            }),
        ))
    }
}
