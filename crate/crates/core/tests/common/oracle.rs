//! Naive loop references.

use rand::Rng;
use sarfah_core::metrics::{Direction, Region};
use sarfah_core::ssm::SsmParams;
use sarfah_core::Image;
use sarfah_tensor::{Conv2dSpec, Tensor};

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, kh, kw) = w.dims4().unwrap();
    let cout_g = cout / spec.groups;
    let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        let cx = grp * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * cin + cx) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

/// Deformable 3x3-style convolution with integer offsets `[N, 2k^2, H, W]`
/// laid out as `(dy, dx)` per tap; samples outside the image read zero.
pub fn deform_conv2d_integer(x: &Tensor, w: &Tensor, off: &[i64]) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, k, _) = w.dims4().unwrap();
    let pad = (k / 2) as i64;
    let hw = h * wd;
    let mut out = vec![0.0; n * cout * hw];
    for s in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let tap = ky * k + kx;
                            let dy = off[((s * 2 * k * k + 2 * tap) * h + y) * wd + xx];
                            let dx = off[((s * 2 * k * k + 2 * tap + 1) * h + y) * wd + xx];
                            let sy = y as i64 + ky as i64 - pad + dy;
                            let sx = xx as i64 + kx as i64 - pad + dx;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[(s * cin + ci) * hw + sy as usize * wd + sx as usize];
                                acc += xv * w.data()[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(s * cout + co) * hw + y * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, h, wd], out).unwrap()
}

/// Step-by-step recurrence with the hold written out from scratch.
pub fn ssm_scan(x: &[f64], p: &SsmParams) -> Vec<f64> {
    let s_dim = p.a.len();
    let mut h = vec![0.0; s_dim];
    let mut y = Vec::new();
    for t in 0..x.len() {
        let mut out = p.d * x[t];
        for i in 0..s_dim {
            let dt = p.delta[t];
            let abar = (dt * p.a[i]).exp();
            let bbar = if p.a[i] == 0.0 {
                dt * p.b[t][i]
            } else {
                ((dt * p.a[i]).exp() - 1.0) / p.a[i] * p.b[t][i]
            };
            h[i] = abar * h[i] + bbar * x[t];
            out += p.c[t][i] * h[i];
        }
        y.push(out);
    }
    y
}

pub fn random_ssm(r: &mut impl Rng, steps: usize, s_dim: usize) -> SsmParams {
    SsmParams {
        a: (0..s_dim).map(|_| -r.random_range(0.05..4.0)).collect(),
        b: (0..steps).map(|_| (0..s_dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
        c: (0..steps).map(|_| (0..s_dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
        d: r.random_range(-1.0..1.0),
        delta: (0..steps).map(|_| r.random_range(0.01..1.0)).collect(),
    }
}

/// Local SSIM per fully contained 11x11 window, each computed with a fresh
/// 2-D Gaussian weight table and centered moments.
pub fn ssim_windows(a: &Image, b: &Image) -> Vec<f64> {
    const WIN: usize = 11;
    let sigma: f64 = 1.5;
    let mut wt = [[0.0; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in wt.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut out = Vec::new();
    for y0 in 0..=a.height() - WIN {
        for x0 in 0..=a.width() - WIN {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let w = wt[i][j] / total;
                    ma += w * a.get(x0 + j, y0 + i);
                    mb += w * b.get(x0 + j, y0 + i);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let w = wt[i][j] / total;
                    let da = a.get(x0 + j, y0 + i) - ma;
                    let db = b.get(x0 + j, y0 + i) - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            out.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    out
}

pub fn epd_roa(denoised: &Image, noisy: &Image, r: &Region, dir: Direction) -> f64 {
    let (mut d, mut n) = (0.0, 0.0);
    for y in r.y0..r.y0 + r.height {
        for x in r.x0..r.x0 + r.width {
            let (x2, y2) = match dir {
                Direction::Horizontal => (x + 1, y),
                Direction::Vertical => (x, y + 1),
            };
            if x2 >= r.x0 + r.width || y2 >= r.y0 + r.height {
                continue;
            }
            d += (denoised.get(x, y) / denoised.get(x2, y2)).abs();
            n += (noisy.get(x, y) / noisy.get(x2, y2)).abs();
        }
    }
    d / n
}
