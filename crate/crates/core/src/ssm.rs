//! Selective state-space scans.
//!
//! A diagonal continuous system `h' = A h + B x`, `y = C h + D x` is
//! discretized per step with a zero-order hold,
//! `A_bar = exp(delta A)`, `B_bar = (delta A)^-1 (exp(delta A) - 1) delta B`,
//! and scanned along 1-D sequences. The 2-D variant flattens a feature map
//! along four traversal orders and sums the four scans.

use rand::Rng;
use sarfah_tensor::nn::{Conv2d, LayerNorm2d};
use sarfah_tensor::{BackwardCtx, Conv2dSpec, Graph, Init, ParamBuilder, Tensor, Var};

use crate::error::{domain, Result};

/// Below this `|delta * a|` the hold uses its analytic limit `B_bar = delta B`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// `(A_bar, B_bar / B)` for one diagonal entry.
#[inline]
fn zoh_factors(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let q = if z.abs() < ZOH_LIMIT { delta } else { z.exp_m1() / a };
    (z.exp(), q)
}

/// Zero-order-hold discretization of a diagonal system.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(domain(format!("timescale must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(domain(format!("A has {} entries, B has {}", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&ai, &bi)| {
            let (abar, q) = zoh_factors(ai, delta);
            (abar, q * bi)
        })
        .unzip())
}

/// Parameters of one selective scan over `T` steps with state size `S`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// Diagonal of `A`, length `S`.
    pub a: Vec<f64>,
    /// Input projection per step, `T x S`.
    pub b: Vec<Vec<f64>>,
    /// Output projection per step, `T x S`.
    pub c: Vec<Vec<f64>>,
    pub d: f64,
    /// Positive timescale per step.
    pub delta: Vec<f64>,
}

/// `h_s = A_bar h_{s-1} + B_bar x_s`, `y_s = C h_s + D x_s` from `h_0 = 0`.
pub fn ssm_scan(x: &[f64], p: &SsmParams) -> Result<Vec<f64>> {
    let steps = x.len();
    if steps == 0 {
        return Err(domain("empty sequence"));
    }
    if p.b.len() != steps || p.c.len() != steps || p.delta.len() != steps {
        return Err(domain("per-step parameters do not match sequence length"));
    }
    let mut h = vec![0.0; p.a.len()];
    let mut y = Vec::with_capacity(steps);
    for s in 0..steps {
        let (abar, bbar) = zoh_discretize(&p.a, &p.b[s], p.delta[s])?;
        let mut ys = p.d * x[s];
        for i in 0..h.len() {
            h[i] = abar[i] * h[i] + bbar[i] * x[s];
            ys += p.c[s][i] * h[i];
        }
        y.push(ys);
    }
    Ok(y)
}

/// Traversal of an `h x w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowForward,
    RowBackward,
    ColumnForward,
    ColumnBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColumnForward,
        ScanDirection::ColumnBackward,
    ];

    fn tag(self) -> &'static str {
        match self {
            ScanDirection::RowForward => "row_fwd",
            ScanDirection::RowBackward => "row_bwd",
            ScanDirection::ColumnForward => "col_fwd",
            ScanDirection::ColumnBackward => "col_bwd",
        }
    }
}

/// Flat pixel index visited at each sequence step.
pub fn scan_order(dir: ScanDirection, h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let column_major = |t: usize| (t % h) * w + t / h;
    match dir {
        ScanDirection::RowForward => (0..n).collect(),
        ScanDirection::RowBackward => (0..n).rev().collect(),
        ScanDirection::ColumnForward => (0..n).map(column_major).collect(),
        ScanDirection::ColumnBackward => (0..n).rev().map(column_major).collect(),
    }
}

#[derive(Clone, Copy)]
struct ScanShape {
    n: usize,
    d: usize,
    s: usize,
    hw: usize,
}

/// Forward scan of one `(sample, channel)` sequence into `out`; `hist`, when
/// given, receives the state after every step (`T x S`).
#[allow(clippy::too_many_arguments)]
fn scan_channel(
    sh: &ScanShape,
    order: &[usize],
    u: &[f64],
    delta: &[f64],
    bm: &[f64],
    cm: &[f64],
    a: &[f64],
    dskip: f64,
    out: &mut [f64],
    mut hist: Option<&mut [f64]>,
) {
    let s_dim = sh.s;
    let mut h = vec![0.0; s_dim];
    for (t, &p) in order.iter().enumerate() {
        let x = u[p];
        let dt = delta[p];
        let mut y = dskip * x;
        for s in 0..s_dim {
            let (abar, q) = zoh_factors(a[s], dt);
            h[s] = abar * h[s] + q * bm[s * sh.hw + p] * x;
            y += cm[s * sh.hw + p] * h[s];
        }
        if let Some(hist) = hist.as_deref_mut() {
            hist[t * s_dim..(t + 1) * s_dim].copy_from_slice(&h);
        }
        out[p] = y;
    }
}

/// One directional selective scan over `[N, D, H, W]` maps.
///
/// Inputs: `u` and `delta` `[N, D, H, W]` (delta positive), `b` and `c`
/// `[N, S, H, W]`, `a_log` `[D, S]` with `A = -exp(a_log)`, `d_skip` `[D]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_2d(
    g: &mut Graph<'_>,
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    a_log: Var,
    d_skip: Var,
    dir: ScanDirection,
) -> Result<Var> {
    let (n, d, h, w) = g.value(u).dims4()?;
    let s = g.value(a_log).shape().get(1).copied().unwrap_or(0);
    if g.shape(delta) != g.shape(u)
        || g.shape(b) != [n, s, h, w]
        || g.shape(c) != [n, s, h, w]
        || g.shape(a_log) != [d, s]
        || g.shape(d_skip) != [d]
        || s == 0
    {
        return Err(domain(format!(
            "selective scan shapes u {:?} delta {:?} B {:?} C {:?} A {:?} D {:?}",
            g.shape(u),
            g.shape(delta),
            g.shape(b),
            g.shape(c),
            g.shape(a_log),
            g.shape(d_skip)
        )));
    }
    let sh = ScanShape { n, d, s, hw: h * w };
    let order = scan_order(dir, h, w);
    let a: Vec<f64> = g.value(a_log).data().iter().map(|v| -v.exp()).collect();
    let mut out = vec![0.0; n * d * sh.hw];
    {
        let (ud, dd, bd, cd, ds) = (
            g.value(u).data(),
            g.value(delta).data(),
            g.value(b).data(),
            g.value(c).data(),
            g.value(d_skip).data(),
        );
        for ni in 0..n {
            let bm = &bd[ni * s * sh.hw..(ni + 1) * s * sh.hw];
            let cm = &cd[ni * s * sh.hw..(ni + 1) * s * sh.hw];
            for di in 0..d {
                let off = (ni * d + di) * sh.hw;
                scan_channel(
                    &sh,
                    &order,
                    &ud[off..off + sh.hw],
                    &dd[off..off + sh.hw],
                    bm,
                    cm,
                    &a[di * s..(di + 1) * s],
                    ds[di],
                    &mut out[off..off + sh.hw],
                    None,
                );
            }
        }
    }
    let out = Tensor::from_vec(&[n, d, h, w], out)?;
    Ok(g.push_op(
        out,
        &[u, delta, b, c, a_log, d_skip],
        Box::new(move |cx: &BackwardCtx<'_>| scan_backward(cx, &sh, &order, &a)),
    ))
}

fn scan_backward(
    cx: &BackwardCtx<'_>,
    sh: &ScanShape,
    order: &[usize],
    a: &[f64],
) -> sarfah_tensor::Result<Vec<Option<Tensor>>> {
    let (ud, dd, bd, cd, ds) = (
        cx.inputs[0].data(),
        cx.inputs[1].data(),
        cx.inputs[2].data(),
        cx.inputs[3].data(),
        cx.inputs[5].data(),
    );
    let gy = cx.grad.data();
    let ScanShape { n, d, s, hw } = *sh;
    let mut du = vec![0.0; n * d * hw];
    let mut ddelta = vec![0.0; n * d * hw];
    let mut db = vec![0.0; n * s * hw];
    let mut dc = vec![0.0; n * s * hw];
    let mut da = vec![0.0; d * s];
    let mut dd_skip = vec![0.0; d];
    let mut hist = vec![0.0; hw * s];
    let mut scratch = vec![0.0; hw];
    let mut gh = vec![0.0; s];
    for ni in 0..n {
        let bm = &bd[ni * s * hw..(ni + 1) * s * hw];
        let cm = &cd[ni * s * hw..(ni + 1) * s * hw];
        for di in 0..d {
            let off = (ni * d + di) * hw;
            let (u_c, dl_c) = (&ud[off..off + hw], &dd[off..off + hw]);
            let a_c = &a[di * s..(di + 1) * s];
            scan_channel(sh, order, u_c, dl_c, bm, cm, a_c, ds[di], &mut scratch, Some(&mut hist));
            gh.fill(0.0);
            for t in (0..hw).rev() {
                let p = order[t];
                let (x, dt, g) = (u_c[p], dl_c[p], gy[off + p]);
                dd_skip[di] += g * x;
                let mut dx = ds[di] * g;
                let mut d_dt = 0.0;
                for si in 0..s {
                    let h_t = hist[t * s + si];
                    let h_prev = if t == 0 { 0.0 } else { hist[(t - 1) * s + si] };
                    let bi = ni * s * hw + si * hw + p;
                    dc[bi] += g * h_t;
                    let ght = gh[si] + g * cm[si * hw + p];
                    let ai = a_c[si];
                    let z = dt * ai;
                    let abar = z.exp();
                    let (q, dq_ddt, dq_da) = if z.abs() < ZOH_LIMIT {
                        (dt, 1.0, 0.5 * dt * dt)
                    } else {
                        let em1 = z.exp_m1();
                        (em1 / ai, abar, (z * abar - em1) / (ai * ai))
                    };
                    let bv = bm[si * hw + p];
                    let d_abar = ght * h_prev;
                    let d_q = ght * bv * x;
                    db[bi] += ght * q * x;
                    dx += ght * q * bv;
                    d_dt += d_abar * abar * ai + d_q * dq_ddt;
                    // dA/da_log = A.
                    da[di * s + si] += (d_abar * abar * dt + d_q * dq_da) * ai;
                    gh[si] = ght * abar;
                }
                du[off + p] += dx;
                ddelta[off + p] += d_dt;
            }
        }
    }
    let h = cx.inputs[0].shape()[2];
    let w = cx.inputs[0].shape()[3];
    Ok(vec![
        Some(Tensor::from_vec(&[n, d, h, w], du)?),
        Some(Tensor::from_vec(&[n, d, h, w], ddelta)?),
        Some(Tensor::from_vec(&[n, s, h, w], db)?),
        Some(Tensor::from_vec(&[n, s, h, w], dc)?),
        Some(Tensor::from_vec(&[d, s], da)?),
        Some(Tensor::from_vec(&[d], dd_skip)?),
    ])
}

/// Per-direction projections producing `delta`, `B`, `C` from the tokens.
#[derive(Debug, Clone)]
pub struct ScanBranch {
    pub dir: ScanDirection,
    pub dt_proj: Conv2d,
    pub b_proj: Conv2d,
    pub c_proj: Conv2d,
    pub a_log: String,
    pub d_skip: String,
}

/// Four-direction selective scan with direction-specific parameters.
#[derive(Debug, Clone)]
pub struct Ss2d {
    pub branches: Vec<ScanBranch>,
    pub channels: usize,
    pub state_dim: usize,
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

impl Ss2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, state_dim: usize) -> Result<Self> {
        if state_dim == 0 {
            return Err(domain("state dimension must be at least 1"));
        }
        pb.push(name);
        let mut branches = Vec::with_capacity(4);
        for dir in ScanDirection::ALL {
            pb.push(dir.tag());
            let pointwise = Conv2dSpec::default();
            let dt_proj = Conv2d::with_spec(pb, "dt_proj", channels, channels, 1, pointwise, false)?;
            // Bias = softplus^-1(dt) with dt log-uniform in [DT_MIN, DT_MAX].
            let bias: Vec<f64> = (0..channels)
                .map(|_| {
                    let u: f64 = pb.rng().random();
                    let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect();
            let bias_name = pb.add_values("dt_proj.bias", Tensor::from_vec(&[channels], bias)?)?;
            let dt_proj = Conv2d {
                bias: Some(bias_name),
                ..dt_proj
            };
            let b_proj = Conv2d::with_spec(pb, "b_proj", channels, state_dim, 1, pointwise, false)?;
            let c_proj = Conv2d::with_spec(pb, "c_proj", channels, state_dim, 1, pointwise, false)?;
            let a_init: Vec<f64> = (0..channels)
                .flat_map(|_| (1..=state_dim).map(|k| (k as f64).ln()))
                .collect();
            let a_log = pb.add_values("a_log", Tensor::from_vec(&[channels, state_dim], a_init)?)?;
            let d_skip = pb.add("d_skip", &[channels], Init::Const(1.0))?;
            branches.push(ScanBranch {
                dir,
                dt_proj,
                b_proj,
                c_proj,
                a_log,
                d_skip,
            });
            pb.pop();
        }
        pb.pop();
        Ok(Self {
            branches,
            channels,
            state_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(4);
        for br in &self.branches {
            let dt = br.dt_proj.forward(g, x)?;
            let delta = g.softplus(dt)?;
            let b = br.b_proj.forward(g, x)?;
            let c = br.c_proj.forward(g, x)?;
            let a_log = g.param(&br.a_log)?;
            let d_skip = g.param(&br.d_skip)?;
            outs.push(selective_scan_2d(g, x, delta, b, c, a_log, d_skip, br.dir)?);
        }
        Ok(g.sum_all(&outs)?)
    }
}

/// Visual state-space block:
///
/// ```text
/// m    = LN(Conv1x1(f) + pos)
/// gate = SiLU(FC(m))
/// scan = LN(SS2D(SiLU(FC(DWConv3x3(m)))))
/// v    = FC_out(gate * scan) + m
/// out  = v + FC(GELU(FC(v)))
/// ```
///
/// `FC_out` and the last FFN layer start at zero, so a fresh block maps
/// `f` to `m`.
#[derive(Debug, Clone)]
pub struct VssBlock {
    pub in_proj: Conv2d,
    pub pos_embed: String,
    pub pos_hw: (usize, usize),
    pub ln_in: LayerNorm2d,
    pub gate: Conv2d,
    pub dwconv: Conv2d,
    pub scan_proj: Conv2d,
    pub ss2d: Ss2d,
    pub ln_scan: LayerNorm2d,
    pub out_proj: Conv2d,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
}

impl VssBlock {
    /// `pos_hw` is the spatial size the positional embedding is stored at;
    /// other sizes use a bilinear resize of it.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        state_dim: usize,
        pos_hw: (usize, usize),
    ) -> Result<Self> {
        let c = channels;
        pb.push(name);
        let block = Self {
            in_proj: Conv2d::new(pb, "in_proj", c, c, 1)?,
            pos_embed: pb.add("pos_embed", &[1, c, pos_hw.0, pos_hw.1], Init::Normal(0.02))?,
            pos_hw,
            ln_in: LayerNorm2d::new(pb, "ln_in", c)?,
            gate: Conv2d::new(pb, "gate", c, c, 1)?,
            dwconv: Conv2d::with_spec(
                pb,
                "dwconv",
                c,
                c,
                3,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: c,
                },
                true,
            )?,
            scan_proj: Conv2d::new(pb, "scan_proj", c, c, 1)?,
            ss2d: Ss2d::new(pb, "ss2d", c, state_dim)?,
            ln_scan: LayerNorm2d::new(pb, "ln_scan", c)?,
            out_proj: Conv2d::zeroed(pb, "out_proj", c, c, 1)?,
            ffn_in: Conv2d::new(pb, "ffn_in", c, 2 * c, 1)?,
            ffn_out: Conv2d::zeroed(pb, "ffn_out", 2 * c, c, 1)?,
        };
        pb.pop();
        Ok(block)
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(f).dims4()?;
        let x = self.in_proj.forward(g, f)?;
        let mut pos = g.param(&self.pos_embed)?;
        if (h, w) != self.pos_hw {
            pos = g.bilinear_resize(pos, h, w)?;
        }
        let x = g.add_bcast(x, pos)?;
        let m = self.ln_in.forward(g, x)?;

        let gate = self.gate.forward(g, m)?;
        let gate = g.silu(gate)?;

        let s = self.dwconv.forward(g, m)?;
        let s = self.scan_proj.forward(g, s)?;
        let s = g.silu(s)?;
        let s = self.ss2d.forward(g, s)?;
        let scan = self.ln_scan.forward(g, s)?;

        let mixed = g.mul(gate, scan)?;
        let mixed = self.out_proj.forward(g, mixed)?;
        let v = g.add(mixed, m)?;

        let hid = self.ffn_in.forward(g, v)?;
        let hid = g.gelu(hid)?;
        let ffn = self.ffn_out.forward(g, hid)?;
        Ok(g.add(v, ffn)?)
    }
}
