//! Orthonormal 2-D Haar analysis and synthesis.
//!
//! Each 2x2 block `[[a, b], [c, d]]` (top-left at `(2k, 2l)`) maps to
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (-a - b + c + d) / 2
//! HL = (-a + b - c + d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! The 4x4 matrix is orthogonal and symmetric up to row order, so synthesis
//! is its transpose.

use sarfah_tensor::{BackwardCtx, Graph, Tensor, Var};

use crate::error::{domain, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct SubBands {
    pub ll: Image,
    pub lh: Image,
    pub hl: Image,
    pub hh: Image,
}

impl SubBands {
    pub fn width(&self) -> usize {
        self.ll.width()
    }

    pub fn height(&self) -> usize {
        self.ll.height()
    }

    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.lh.energy() + self.hl.energy() + self.hh.energy()
    }

    pub fn bands(&self) -> [&Image; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }
}

#[inline]
fn analyze_block(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [
        0.5 * (a + b + c + d),
        0.5 * (-a - b + c + d),
        0.5 * (-a + b - c + d),
        0.5 * (a - b - c + d),
    ]
}

#[inline]
fn synthesize_block(ll: f64, lh: f64, hl: f64, hh: f64) -> [f64; 4] {
    [
        0.5 * (ll - lh - hl + hh),
        0.5 * (ll - lh + hl - hh),
        0.5 * (ll + lh - hl - hh),
        0.5 * (ll + lh + hl + hh),
    ]
}

/// Analysis of one `h x w` plane into four `h/2 x w/2` planes.
fn analyze_plane(src: &[f64], h: usize, w: usize, dst: [&mut [f64]; 4]) {
    let (hw2, [ll, lh, hl, hh]) = (w / 2, dst);
    for k in 0..h / 2 {
        let r0 = &src[2 * k * w..(2 * k + 1) * w];
        let r1 = &src[(2 * k + 1) * w..(2 * k + 2) * w];
        for l in 0..hw2 {
            let [a, b, c, d] = analyze_block(r0[2 * l], r0[2 * l + 1], r1[2 * l], r1[2 * l + 1]);
            let o = k * hw2 + l;
            ll[o] = a;
            lh[o] = b;
            hl[o] = c;
            hh[o] = d;
        }
    }
}

/// Synthesis of four `h x w` planes into one `2h x 2w` plane.
fn synthesize_plane(src: [&[f64]; 4], h: usize, w: usize, dst: &mut [f64]) {
    let [ll, lh, hl, hh] = src;
    let ow = 2 * w;
    for k in 0..h {
        for l in 0..w {
            let i = k * w + l;
            let [a, b, c, d] = synthesize_block(ll[i], lh[i], hl[i], hh[i]);
            dst[2 * k * ow + 2 * l] = a;
            dst[2 * k * ow + 2 * l + 1] = b;
            dst[(2 * k + 1) * ow + 2 * l] = c;
            dst[(2 * k + 1) * ow + 2 * l + 1] = d;
        }
    }
}

pub fn dwt2_haar(img: &Image) -> Result<SubBands> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(domain(format!("Haar analysis needs even dimensions, got {w}x{h}")));
    }
    let n = (w / 2) * (h / 2);
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    {
        let [a, b, c, d] = &mut planes;
        analyze_plane(img.pixels(), h, w, [a, b, c, d]);
    }
    let [ll, lh, hl, hh] = planes.map(|p| Image::new(w / 2, h / 2, p).expect("plane size"));
    Ok(SubBands { ll, lh, hl, hh })
}

pub fn idwt2_haar(sb: &SubBands) -> Result<Image> {
    let (w, h) = (sb.ll.width(), sb.ll.height());
    if sb.bands().iter().any(|b| b.width() != w || b.height() != h) {
        return Err(domain("sub-band planes differ in size"));
    }
    let mut out = vec![0.0; 4 * w * h];
    synthesize_plane(
        [sb.ll.pixels(), sb.lh.pixels(), sb.hl.pixels(), sb.hh.pixels()],
        h,
        w,
        &mut out,
    );
    Image::new(2 * w, 2 * h, out)
}

#[derive(Debug, Clone)]
pub struct Cascade {
    /// Detail bands per level, level 1 first. Each entry's `ll` is the
    /// approximation that the next level decomposes.
    pub levels: Vec<SubBands>,
}

impl Cascade {
    pub fn final_ll(&self) -> &Image {
        &self.levels.last().expect("at least one level").ll
    }

    /// Energy of every emitted plane: all detail bands plus the final LL.
    pub fn energy(&self) -> f64 {
        let details: f64 = self
            .levels
            .iter()
            .map(|s| s.lh.energy() + s.hl.energy() + s.hh.energy())
            .sum();
        details + self.final_ll().energy()
    }
}

/// Repeated analysis of successive LL planes.
pub fn dwt2_cascade(img: &Image, levels: usize) -> Result<Cascade> {
    if levels == 0 {
        return Err(domain("cascade depth must be at least 1"));
    }
    let div = 1usize << levels;
    if !img.width().is_multiple_of(div) || !img.height().is_multiple_of(div) {
        return Err(domain(format!(
            "{}x{} not divisible by 2^{levels}",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = dwt2_haar(img)?;
    for _ in 1..levels {
        let next = dwt2_haar(&cur.ll)?;
        out.push(cur);
        cur = next;
    }
    out.push(cur);
    Ok(Cascade { levels: out })
}

/// Haar analysis as a recorded operation: `[N, 1, H, W]` to
/// `[N, 4, H/2, W/2]` with channels ordered LL, LH, HL, HH.
pub fn dwt_op(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if c != 1 || h % 2 != 0 || w % 2 != 0 {
        return Err(domain(format!("Haar analysis of {:?}", g.shape(x))));
    }
    let q = (h / 2) * (w / 2);
    let mut out = vec![0.0; n * 4 * q];
    for s in 0..n {
        let src = &g.value(x).data()[s * h * w..(s + 1) * h * w];
        let (ll, rest) = out[s * 4 * q..(s + 1) * 4 * q].split_at_mut(q);
        let (lh, rest) = rest.split_at_mut(q);
        let (hl, hh) = rest.split_at_mut(q);
        analyze_plane(src, h, w, [ll, lh, hl, hh]);
    }
    let out = Tensor::from_vec(&[n, 4, h / 2, w / 2], out)?;
    Ok(g.push_op(
        out,
        &[x],
        Box::new(move |cx: &BackwardCtx<'_>| {
            let gd = cx.grad.data();
            let mut dx = vec![0.0; n * h * w];
            for s in 0..n {
                let b = &gd[s * 4 * q..(s + 1) * 4 * q];
                synthesize_plane(
                    [&b[..q], &b[q..2 * q], &b[2 * q..3 * q], &b[3 * q..]],
                    h / 2,
                    w / 2,
                    &mut dx[s * h * w..(s + 1) * h * w],
                );
            }
            Ok(vec![Some(Tensor::from_vec(&[n, 1, h, w], dx)?)])
        }),
    ))
}

/// Haar synthesis as a recorded operation: `[N, 4, h, w]` (LL, LH, HL, HH)
/// to `[N, 1, 2h, 2w]`.
pub fn idwt_op(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if c != 4 {
        return Err(domain(format!("Haar synthesis of {:?}", g.shape(x))));
    }
    let q = h * w;
    let mut out = vec![0.0; n * 4 * q];
    for s in 0..n {
        let b = &g.value(x).data()[s * 4 * q..(s + 1) * 4 * q];
        synthesize_plane(
            [&b[..q], &b[q..2 * q], &b[2 * q..3 * q], &b[3 * q..]],
            h,
            w,
            &mut out[s * 4 * q..(s + 1) * 4 * q],
        );
    }
    let out = Tensor::from_vec(&[n, 1, 2 * h, 2 * w], out)?;
    Ok(g.push_op(
        out,
        &[x],
        Box::new(move |cx: &BackwardCtx<'_>| {
            let gd = cx.grad.data();
            let mut dx = vec![0.0; n * 4 * q];
            for s in 0..n {
                let (ll, rest) = dx[s * 4 * q..(s + 1) * 4 * q].split_at_mut(q);
                let (lh, rest) = rest.split_at_mut(q);
                let (hl, hh) = rest.split_at_mut(q);
                analyze_plane(&gd[s * 4 * q..(s + 1) * 4 * q], 2 * h, 2 * w, [ll, lh, hl, hh]);
            }
            Ok(vec![Some(Tensor::from_vec(&[n, 4, h, w], dx)?)])
        }),
    ))
}
