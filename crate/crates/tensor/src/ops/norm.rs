use crate::error::{shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Mode, StatUpdate, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

fn check_affine(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            op,
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Normalized-input gradient shared by batch norm and layer norm:
/// `dx = invstd/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))`.
fn norm_input_grad(dxhat: &[f64], xhat: &[f64], invstd: f64, dx: &mut [f64]) {
    let m = dxhat.len() as f64;
    let s1: f64 = dxhat.iter().sum();
    let s2: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for i in 0..dxhat.len() {
        dx[i] = invstd / m * (m * dxhat[i] - s1 - xhat[i] * s2);
    }
}

impl Graph<'_> {
    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics and records a running-stat
    /// update for `running_mean`/`running_var`; eval mode applies the stored
    /// running statistics as a fixed affine map.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &str,
        running_var: &str,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        check_affine("batchnorm2d", c, self.value(gamma), self.value(beta))?;
        let hw = h * w;
        let m = n * hw;
        let (gd, bd) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let xd = tx.data();
        let (mean, var) = match self.mode() {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        s += xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut v = 0.0;
                    for s_i in 0..n {
                        v += xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                            .iter()
                            .map(|x| (x - mu) * (x - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m as f64;
                }
                (mean, var)
            }
            Mode::Eval => {
                let params = self.params()?;
                (
                    params.get(running_mean)?.tensor.data().to_vec(),
                    params.get(running_var)?.tensor.data().to_vec(),
                )
            }
        };
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics size"));
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for p in base..base + hw {
                    xhat[p] = (xd[p] - mean[ch]) * invstd[ch];
                    out[p] = gd[ch] * xhat[p] + bd[ch];
                }
            }
        }
        let train = self.mode() == Mode::Train;
        if train {
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            self.record_stat_update(StatUpdate {
                mean_name: running_mean.to_string(),
                var_name: running_var.to_string(),
                batch_mean: mean.clone(),
                batch_var_unbiased: var.iter().map(|v| v * unbiased).collect(),
                momentum: BN_MOMENTUM,
            });
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let g = cx.grad.data();
                let gam = cx.inputs[1].data();
                let mut dx = vec![0.0; g.len()];
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                let mut dxhat = vec![0.0; m];
                let mut xh = vec![0.0; m];
                let mut dxc = vec![0.0; m];
                for ch in 0..c {
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        for p in 0..hw {
                            let i = base + p;
                            dgam[ch] += g[i] * xhat[i];
                            dbet[ch] += g[i];
                            dxhat[s_i * hw + p] = g[i] * gam[ch];
                            xh[s_i * hw + p] = xhat[i];
                        }
                    }
                    if train {
                        norm_input_grad(&dxhat, &xh, invstd[ch], &mut dxc);
                    } else {
                        for (d, v) in dxc.iter_mut().zip(&dxhat) {
                            *d = v * invstd[ch];
                        }
                    }
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        dx[base..base + hw].copy_from_slice(&dxc[s_i * hw..(s_i + 1) * hw]);
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?),
                    Some(Tensor::from_vec(&[c], dgam)?),
                    Some(Tensor::from_vec(&[c], dbet)?),
                ])
            }),
        ))
    }

    /// Layer normalization across channels at every spatial position of an
    /// `[N, C, H, W]` map (channels-last LayerNorm).
    pub fn layernorm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4()?;
        check_affine("layernorm", c, self.value(gamma), self.value(beta))?;
        let hw = h * w;
        let xd = tx.data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut invstd = vec![0.0; n * hw];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (s * c + ch) * hw + p;
                let mu = (0..c).map(|ch| xd[idx(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[idx(ch)] - mu).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                invstd[s * hw + p] = is;
                for ch in 0..c {
                    let i = idx(ch);
                    xhat[i] = (xd[i] - mu) * is;
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |cx: &BackwardCtx<'_>| {
                let g = cx.grad.data();
                let gam = cx.inputs[1].data();
                let mut dx = vec![0.0; g.len()];
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                let mut xh = vec![0.0; c];
                let mut dxc = vec![0.0; c];
                for s in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            let i = (s * c + ch) * hw + p;
                            dgam[ch] += g[i] * xhat[i];
                            dbet[ch] += g[i];
                            dxhat[ch] = g[i] * gam[ch];
                            xh[ch] = xhat[i];
                        }
                        norm_input_grad(&dxhat, &xh, invstd[s * hw + p], &mut dxc);
                        for ch in 0..c {
                            dx[(s * c + ch) * hw + p] = dxc[ch];
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(cx.inputs[0].shape(), dx)?),
                    Some(Tensor::from_vec(&[c], dgam)?),
                    Some(Tensor::from_vec(&[c], dbet)?),
                ])
            }),
        ))
    }
}
