//! Bilinear resizing of whole maps and bilinear sampling at free points.
//!
//! Both use the half-pixel (`align_corners = false`) convention: normalized
//! coordinate `u` in `[0, 1]` maps to pixel coordinate `u * n - 0.5`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn resize_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - l, w1: l }
        })
        .collect()
}

fn check4(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected [B,C,H,W], got {shape:?}")));
    }
    Ok(())
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    check4("bilinear_resize", x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "output size must be at least 1x1"));
    }
    let &[b, c, h, w] = x.shape() else { unreachable!() };
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in xd.chunks_exact(h * w) {
        for t in &ty {
            let r0 = &plane[t.i0 * w..][..w];
            let r1 = &plane[t.i1 * w..][..w];
            for s in &tx {
                let top = s.w0 * r0[s.i0] + s.w1 * r0[s.i1];
                let bot = s.w0 * r1[s.i0] + s.w1 * r1[s.i1];
                out.push(t.w0 * top + t.w1 * bot);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], out))
}

pub(crate) fn bilinear_resize_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let &[_, _, h, w] = in_shape else { unreachable!() };
    let (out_h, out_w) = (gout.shape()[2], gout.shape()[3]);
    if out_h == h && out_w == w {
        return gout.clone();
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut gx = vec![0.0; in_shape.iter().product()];
    for (gplane, gin) in gout.data().chunks_exact(out_h * out_w).zip(gx.chunks_exact_mut(h * w)) {
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let g = gplane[oy * out_w + ox];
                gin[t.i0 * w + s.i0] += t.w0 * s.w0 * g;
                gin[t.i0 * w + s.i1] += t.w0 * s.w1 * g;
                gin[t.i1 * w + s.i0] += t.w1 * s.w0 * g;
                gin[t.i1 * w + s.i1] += t.w1 * s.w1 * g;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

/// Pixel coordinate of normalized `u` along an axis of length `n`, clamped to
/// the border. The flag reports whether the coordinate lies strictly inside
/// the clamp range (so that d(coord)/du = n).
#[derive(Clone, Copy, Debug)]
struct Coord {
    i0: usize,
    i1: usize,
    frac: f64,
    live: bool,
}

fn coord(u: f64, n: usize) -> Coord {
    let raw = u * n as f64 - 0.5;
    let hi = (n - 1) as f64;
    let c = raw.clamp(0.0, hi);
    let live = raw > 0.0 && raw < hi;
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Coord { i0, i1, frac: c - i0 as f64, live }
}

fn check_sample(value: &[usize], points: &[usize]) -> Result<()> {
    check4("bilinear_sample", value)?;
    if points.len() != 3 || points[2] != 2 {
        return Err(Error::shape("bilinear_sample", format!("points must be [B,P,2], got {points:?}")));
    }
    if points[0] != value[0] {
        return Err(Error::shape(
            "bilinear_sample",
            format!("batch dim: value has {}, points have {}", value[0], points[0]),
        ));
    }
    Ok(())
}

/// Samples `value` ([B,C,H,W]) at `points` ([B,P,2], each `(row, col)` in
/// normalized `[0, 1]` units). Returns [B,C,P]. Out-of-range points clamp to
/// the border.
pub fn bilinear_sample(value: &Tensor, points: &Tensor) -> Result<Tensor> {
    check_sample(value.shape(), points.shape())?;
    let &[b, c, h, w] = value.shape() else { unreachable!() };
    let np = points.shape()[1];
    let vd = value.data();
    let pd = points.data();
    let mut out = vec![0.0; b * c * np];
    for bi in 0..b {
        for p in 0..np {
            let pi = (bi * np + p) * 2;
            let cy = coord(pd[pi], h);
            let cx = coord(pd[pi + 1], w);
            let (wy0, wy1) = (1.0 - cy.frac, cy.frac);
            let (wx0, wx1) = (1.0 - cx.frac, cx.frac);
            for ch in 0..c {
                let plane = &vd[(bi * c + ch) * h * w..][..h * w];
                let v = wy0 * (wx0 * plane[cy.i0 * w + cx.i0] + wx1 * plane[cy.i0 * w + cx.i1])
                    + wy1 * (wx0 * plane[cy.i1 * w + cx.i0] + wx1 * plane[cy.i1 * w + cx.i1]);
                out[(bi * c + ch) * np + p] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, np], out))
}

pub(crate) fn bilinear_sample_backward(
    value: &Tensor,
    points: &Tensor,
    gout: &Tensor,
    need: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let &[b, c, h, w] = value.shape() else { unreachable!() };
    let np = points.shape()[1];
    let vd = value.data();
    let pd = points.data();
    let gd = gout.data();
    let mut gv = if need.0 { vec![0.0; vd.len()] } else { Vec::new() };
    let mut gp = if need.1 { vec![0.0; pd.len()] } else { Vec::new() };
    for bi in 0..b {
        for p in 0..np {
            let pi = (bi * np + p) * 2;
            let cy = coord(pd[pi], h);
            let cx = coord(pd[pi + 1], w);
            let (wy0, wy1) = (1.0 - cy.frac, cy.frac);
            let (wx0, wx1) = (1.0 - cx.frac, cx.frac);
            let (mut dy, mut dx) = (0.0, 0.0);
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let g = gd[(bi * c + ch) * np + p];
                let i00 = base + cy.i0 * w + cx.i0;
                let i01 = base + cy.i0 * w + cx.i1;
                let i10 = base + cy.i1 * w + cx.i0;
                let i11 = base + cy.i1 * w + cx.i1;
                if need.0 {
                    gv[i00] += g * wy0 * wx0;
                    gv[i01] += g * wy0 * wx1;
                    gv[i10] += g * wy1 * wx0;
                    gv[i11] += g * wy1 * wx1;
                }
                if need.1 {
                    let (v00, v01, v10, v11) = (vd[i00], vd[i01], vd[i10], vd[i11]);
                    dy += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                    dx += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                }
            }
            if need.1 {
                if cy.live {
                    gp[pi] = dy * h as f64;
                }
                if cx.live {
                    gp[pi + 1] = dx * w as f64;
                }
            }
        }
    }
    (
        need.0.then(|| Tensor::from_parts(value.shape().to_vec(), gv)),
        need.1.then(|| Tensor::from_parts(points.shape().to_vec(), gp)),
    )
}
