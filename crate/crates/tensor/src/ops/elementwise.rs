use statrs::function::erf::erf;

use crate::error::{shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::tensor::{same_shape, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Output shape and per-operand strides (0 on broadcast axes).
fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return None;
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; s.len()];
        let mut acc = 1;
        for i in (0..s.len()).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    Some((out, strides(a), strides(b)))
}

/// Visits every output element with the flat offsets into both operands.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

impl Graph<'_> {
    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        back: fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push_op(out, &[a, b], Box::new(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.map(|v| -v))])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, |c| {
            let g = c.grad.data();
            let ga = g.iter().zip(c.inputs[1].data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(c.inputs[0].data()).map(|(g, x)| g * x).collect();
            Ok(vec![
                Some(Tensor::from_vec(c.grad.shape(), ga)?),
                Some(Tensor::from_vec(c.grad.shape(), gb)?),
            ])
        })
    }

    /// Sum of several same-shape tensors, in argument order.
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("sum_all", "no operands"))?;
        let mut acc = first;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    fn binary_bcast(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (out_shape, sa, sb) = broadcast_plan(ta.shape(), tb.shape()).ok_or_else(|| {
            shape_err(op, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
        })?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; out_shape.iter().product()];
        for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| {
            out[o] = if mul { da[ia] * db[ib] } else { da[ia] + db[ib] };
        });
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |c: &BackwardCtx<'_>| {
                let (ta, tb) = (c.inputs[0], c.inputs[1]);
                let g = c.grad.data();
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                let (da, db) = (ta.data(), tb.data());
                for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| {
                    if mul {
                        ga[ia] += g[o] * db[ib];
                        gb[ib] += g[o] * da[ia];
                    } else {
                        ga[ia] += g[o];
                        gb[ib] += g[o];
                    }
                });
                Ok(vec![
                    Some(Tensor::from_vec(ta.shape(), ga)?),
                    Some(Tensor::from_vec(tb.shape(), gb)?),
                ])
            }),
        ))
    }

    /// Elementwise sum with size-1 axes broadcast.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast("add_bcast", a, b, false)
    }

    /// Elementwise product with size-1 axes broadcast.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_bcast("mul_bcast", a, b, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |c: &BackwardCtx<'_>| Ok(vec![Some(c.grad.map(|g| g * s))])),
        ))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        Ok(self.push_op(
            out,
            &[x],
            Box::new(|c: &BackwardCtx<'_>| Ok(vec![Some(c.grad.clone())])),
        ))
    }

    /// Pointwise map with derivative `df(x, y)` expressed through input and
    /// output.
    fn unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |c: &BackwardCtx<'_>| {
                let g = c
                    .grad
                    .data()
                    .iter()
                    .zip(c.inputs[0].data())
                    .zip(c.output.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::from_vec(c.grad.shape(), g)?)])
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)),
            |x, _| 0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp(),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }
}
