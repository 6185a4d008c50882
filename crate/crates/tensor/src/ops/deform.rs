//! Deformable convolution: a regular `k x k` grid displaced per output pixel
//! by learned fractional offsets, read with bilinear interpolation.
//!
//! Offsets are `[N, 2*k*k, H, W]` with channel `2*i` holding the row (y)
//! displacement of tap `i` and `2*i + 1` the column (x) displacement. Stride
//! is 1 and padding `k/2`, so the output keeps the input's spatial size.
//! Bilinear corners that fall outside the image read 0.

use crate::error::{shape_err, Result};
use crate::graph::{BackwardCtx, Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Corner offsets (flat index into a plane, or -1 when outside) and weights
/// for one bilinear sample, plus the fractional parts needed for derivatives.
#[derive(Clone, Copy)]
struct Tap {
    idx: [isize; 4],
    wt: [f64; 4],
    ly: f64,
    lx: f64,
}

fn tap(h: usize, w: usize, y: f64, x: f64) -> Tap {
    // Beyond one pixel outside the image every corner reads zero, so
    // clamping there changes neither value nor gradient.
    let y = y.clamp(-2.0, h as f64 + 1.0);
    let x = x.clamp(-2.0, w as f64 + 1.0);
    let y0 = y.floor();
    let x0 = x.floor();
    let (ly, lx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> isize {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            -1
        } else {
            yy * w as isize + xx
        }
    };
    Tap {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        wt: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
        ly,
        lx,
    }
}

fn corners(t: &Tap, plane: &[f64]) -> [f64; 4] {
    let mut v = [0.0; 4];
    for i in 0..4 {
        if t.idx[i] >= 0 {
            v[i] = plane[t.idx[i] as usize];
        }
    }
    v
}

/// Bilinear read of `plane` (`h x w`) at fractional `(y, x)`, zero outside.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let t = tap(h, w, y, x);
    let v = corners(&t, plane);
    (0..4).map(|i| t.wt[i] * v[i]).sum()
}

#[derive(Clone, Copy)]
struct DGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

impl DGeom {
    fn kk(&self) -> usize {
        self.k * self.k
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Sampling taps for sample `n`, indexed `[tap_index * hw + pixel]`.
fn taps_for(off: &[f64], g: &DGeom, n: usize) -> Vec<Tap> {
    let (kk, hw) = (g.kk(), g.hw());
    let pad = (g.k / 2) as f64;
    let on = &off[n * 2 * kk * hw..(n + 1) * 2 * kk * hw];
    let mut taps = Vec::with_capacity(kk * hw);
    for ki in 0..kk {
        let (ky, kx) = ((ki / g.k) as f64, (ki % g.k) as f64);
        for p in 0..hw {
            let (oy, ox) = ((p / g.w) as f64, (p % g.w) as f64);
            let y = oy - pad + ky + on[2 * ki * hw + p];
            let x = ox - pad + kx + on[(2 * ki + 1) * hw + p];
            taps.push(tap(g.h, g.w, y, x));
        }
    }
    taps
}

fn fill_col(xn: &[f64], taps: &[Tap], g: &DGeom, col: &mut [f64]) {
    let (kk, hw) = (g.kk(), g.hw());
    for c in 0..g.cin {
        let plane = &xn[c * hw..(c + 1) * hw];
        for ki in 0..kk {
            let row = &mut col[(c * kk + ki) * hw..(c * kk + ki + 1) * hw];
            for (p, v) in row.iter_mut().enumerate() {
                let t = &taps[ki * hw + p];
                let cv = corners(t, plane);
                *v = t.wt[0] * cv[0] + t.wt[1] * cv[1] + t.wt[2] * cv[2] + t.wt[3] * cv[3];
            }
        }
    }
}

impl Graph<'_> {
    pub fn deform_conv2d(&mut self, x: Var, weight: Var, offsets: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw, to) = (self.value(x), self.value(weight), self.value(offsets));
        let (n, cin, h, w) = tx.dims4()?;
        let (cout, wcin, kh, kw) = tw.dims4()?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(shape_err(
                "deform_conv2d",
                format!("weight {:?} for input {:?}", tw.shape(), tx.shape()),
            ));
        }
        let g = DGeom { n, cin, h, w, cout, k: kh };
        if to.shape() != [n, 2 * g.kk(), h, w] {
            return Err(shape_err(
                "deform_conv2d",
                format!("offsets {:?}, expected {:?}", to.shape(), [n, 2 * g.kk(), h, w]),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("deform_conv2d", "bias shape"));
            }
        }
        let (kk, hw) = (g.kk(), g.hw());
        let rows = cin * kk;
        let mut out = vec![0.0; n * cout * hw];
        let mut col = vec![0.0; rows * hw];
        for s in 0..n {
            let taps = taps_for(to.data(), &g, s);
            fill_col(&tx.data()[s * cin * hw..(s + 1) * cin * hw], &taps, &g, &mut col);
            gemm(
                1.0,
                MatRef::new(tw.data(), cout, rows),
                MatRef::new(&col, rows, hw),
                0.0,
                &mut out[s * cout * hw..(s + 1) * cout * hw],
            );
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for co in 0..cout {
                    out[(s * cout + co) * hw..(s * cout + co + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += bd[co]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, cout, h, w], out)?;
        let mut inputs = vec![x, weight, offsets];
        inputs.extend(bias);
        Ok(self.push_op(out, &inputs, Box::new(move |c: &BackwardCtx<'_>| deform_backward(c, &g))))
    }
}

fn deform_backward(c: &BackwardCtx<'_>, g: &DGeom) -> Result<Vec<Option<Tensor>>> {
    let (x, w, off) = (c.inputs[0], c.inputs[1], c.inputs[2]);
    let (kk, hw, cin, cout) = (g.kk(), g.hw(), g.cin, g.cout);
    let rows = cin * kk;
    let gd = c.grad.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut doff = vec![0.0; off.len()];
    let mut col = vec![0.0; rows * hw];
    let mut dcol = vec![0.0; rows * hw];
    for s in 0..g.n {
        let taps = taps_for(off.data(), g, s);
        let xn = &x.data()[s * cin * hw..(s + 1) * cin * hw];
        let go = &gd[s * cout * hw..(s + 1) * cout * hw];
        if c.needs[1] {
            fill_col(xn, &taps, g, &mut col);
            gemm(1.0, MatRef::new(go, cout, hw), MatRef::t(&col, rows, hw), 1.0, &mut dw);
        }
        if !(c.needs[0] || c.needs[2]) {
            continue;
        }
        gemm(1.0, MatRef::t(w.data(), cout, rows), MatRef::new(go, cout, hw), 0.0, &mut dcol);
        let dxn = &mut dx[s * cin * hw..(s + 1) * cin * hw];
        let don = &mut doff[s * 2 * kk * hw..(s + 1) * 2 * kk * hw];
        for ch in 0..cin {
            let plane = &xn[ch * hw..(ch + 1) * hw];
            let dplane = &mut dxn[ch * hw..(ch + 1) * hw];
            for ki in 0..kk {
                let drow = &dcol[(ch * kk + ki) * hw..(ch * kk + ki + 1) * hw];
                for p in 0..hw {
                    let gv = drow[p];
                    if gv == 0.0 {
                        continue;
                    }
                    let t = &taps[ki * hw + p];
                    for i in 0..4 {
                        if t.idx[i] >= 0 {
                            dplane[t.idx[i] as usize] += gv * t.wt[i];
                        }
                    }
                    let v = corners(t, plane);
                    let dvy = (1.0 - t.lx) * (v[2] - v[0]) + t.lx * (v[3] - v[1]);
                    let dvx = (1.0 - t.ly) * (v[1] - v[0]) + t.ly * (v[3] - v[2]);
                    don[2 * ki * hw + p] += gv * dvy;
                    don[(2 * ki + 1) * hw + p] += gv * dvx;
                }
            }
        }
    }
    let mut out = vec![
        Some(Tensor::from_vec(x.shape(), dx)?),
        Some(Tensor::from_vec(w.shape(), dw)?),
        Some(Tensor::from_vec(off.shape(), doff)?),
    ];
    if c.inputs.len() == 4 {
        let mut db = vec![0.0; cout];
        for s in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += gd[(s * cout + co) * hw..(s * cout + co + 1) * hw].iter().sum::<f64>();
            }
        }
        out.push(Some(Tensor::from_vec(&[cout], db)?));
    }
    Ok(out)
}
