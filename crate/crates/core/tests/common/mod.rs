//! Independent reference implementations used by the oracle tests. Each is
//! written as directly as possible from the definition, with no sharing of
//! code paths with the library.
#![allow(dead_code)]

use dino_unet::config::{AdapterConfig, FapmConfig};
use dino_unet::params::ParamStore;
use dino_unet::trainer::Model;
use dino_unet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

/// Overwrites every entry under `prefix` with uniform noise in `[-a, a]`.
pub fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng, a: f64) {
    for (_, e) in store.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
        let shape = e.value.shape().to_vec();
        e.value = rand_tensor(rng, &shape, a);
    }
}

fn at4(t: &Tensor, a: usize, b: usize, c: usize, d: usize) -> f64 {
    let s = t.shape();
    t.data()[((a * s[1] + b) * s[2] + c) * s[3] + d]
}

pub fn conv2d_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin_g * groups, cin);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Vec::new();
    for bi in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at4(x, bi, g * cin_g + ci, iy as usize, ix as usize) * at4(w, co, ci, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Bilinear value at pixel coordinates `(u, v)` as a tent-kernel sum over
/// the whole plane, after clamping into the pixel-centre hull.
pub fn tent(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (h - 1) as f64);
    let v = v.clamp(0.0, (w - 1) as f64);
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let ky = (1.0 - (u - i as f64).abs()).max(0.0);
            let kx = (1.0 - (v - j as f64).abs()).max(0.0);
            acc += ky * kx * plane[i * w + j];
        }
    }
    acc
}

/// `value [B, C, H, W]`, normalized `(row, col)` points `[B, P, 2]`.
pub fn sample_oracle(value: &Tensor, points: &Tensor) -> Tensor {
    let (b, c, h, w) = (value.shape()[0], value.shape()[1], value.shape()[2], value.shape()[3]);
    let p = points.shape()[1];
    let mut out = Vec::new();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &value.data()[(bi * c + ci) * h * w..][..h * w];
            for pi in 0..p {
                let y = points.data()[(bi * p + pi) * 2];
                let x = points.data()[(bi * p + pi) * 2 + 1];
                out.push(tent(plane, h, w, y * h as f64 - 0.5, x * w as f64 - 0.5));
            }
        }
    }
    Tensor::new(&[b, c, p], out).unwrap()
}

pub fn resize_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w).take(b * c) {
        for i in 0..oh {
            for j in 0..ow {
                let u = (i as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let v = (j as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                out.push(tent(plane, h, w, u, v));
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out).unwrap()
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.value(name).unwrap().data()
}

/// `out[c] = b[c] + sum_k W[c, k] x[k]` at every pixel of `x [B, Cin, H, W]`.
pub fn pointwise(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = b.len();
    let mut out = vec![0.0; n * cout * h * wd];
    for bi in 0..n {
        for co in 0..cout {
            for p in 0..h * wd {
                let mut acc = b[co];
                for ci in 0..cin {
                    acc += w[co * cin + ci] * x.data()[(bi * cin + ci) * h * wd + p];
                }
                out[(bi * cout + co) * h * wd + p] = acc;
            }
        }
    }
    Tensor::new(&[n, cout, h, wd], out).unwrap()
}

fn pointwise_named(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    pointwise(x, param(store, &format!("{name}.weight")), param(store, &format!("{name}.bias")))
}

pub fn deformable_oracle(store: &ParamStore, cfg: &AdapterConfig, prefix: &str, query: &Tensor, value: &Tensor) -> Tensor {
    let (b, d, hq, wq) = (query.shape()[0], query.shape()[1], query.shape()[2], query.shape()[3]);
    let (hv, wv) = (value.shape()[2], value.shape()[3]);
    let (heads, k) = (cfg.num_heads, cfg.num_points);
    let dh = d / heads;
    let v = pointwise_named(store, &format!("{prefix}.value_proj"), value);
    let off = pointwise_named(store, &format!("{prefix}.offsets"), query);
    let logit = pointwise_named(store, &format!("{prefix}.weights"), query);
    let unit = 1.0 / hv.max(wv) as f64;
    let mut mixed = vec![0.0; b * d * hq * wq];
    for bi in 0..b {
        for head in 0..heads {
            for i in 0..hq {
                for j in 0..wq {
                    let lg: Vec<f64> = (0..k).map(|kk| at4(&logit, bi, head * k + kk, i, j)).collect();
                    let m = lg.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = lg.iter().map(|l| (l - m).exp()).sum();
                    for kk in 0..k {
                        let a = (lg[kk] - m).exp() / z;
                        let ch = (head * k + kk) * 2;
                        let y = (i as f64 + 0.5) / hq as f64 + at4(&off, bi, ch, i, j) * unit;
                        let x = (j as f64 + 0.5) / wq as f64 + at4(&off, bi, ch + 1, i, j) * unit;
                        for c in 0..dh {
                            let vc = head * dh + c;
                            let plane = &v.data()[(bi * d + vc) * hv * wv..][..hv * wv];
                            let s = tent(plane, hv, wv, y * hv as f64 - 0.5, x * wv as f64 - 0.5);
                            mixed[((bi * d + vc) * hq + i) * wq + j] += a * s;
                        }
                    }
                }
            }
        }
    }
    let mixed = Tensor::new(&[b, d, hq, wq], mixed).unwrap();
    pointwise_named(store, &format!("{prefix}.out_proj"), &mixed)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// One FAPM scale, straight from its defining equations.
pub fn fapm_scale_oracle(store: &ParamStore, cfg: &FapmConfig, i: usize, c: &Tensor) -> Tensor {
    let pre = format!("fapm.scales.{i}");
    let r = cfg.rank;
    let o = cfg.out_dims[i];
    let (n, h, w) = (c.shape()[0], c.shape()[2], c.shape()[3]);
    let hw = h * w;
    let z_ctx = pointwise_named(store, "fapm.ctx", c);
    let z_sp = pointwise_named(store, &format!("{pre}.sp"), c);
    let g = pointwise_named(store, &format!("{pre}.gen"), &z_ctx);
    let mut z_mod = vec![0.0; n * r * hw];
    for bi in 0..n {
        for ch in 0..r {
            for p in 0..hw {
                let gamma = g.data()[(bi * 2 * r + ch) * hw + p];
                let beta = g.data()[(bi * 2 * r + r + ch) * hw + p];
                z_mod[(bi * r + ch) * hw + p] = gamma * z_sp.data()[(bi * r + ch) * hw + p] + beta;
            }
        }
    }
    let z_mod = Tensor::new(&[n, r, h, w], z_mod).unwrap();
    let y = pointwise_named(store, &format!("{pre}.reduce"), &z_mod);
    let (dw, dwb) = (param(store, &format!("{pre}.dw.weight")), param(store, &format!("{pre}.dw.bias")));
    let k = cfg.dw_kernel;
    let half = (k / 2) as isize;
    let mut yd = vec![0.0; n * o * hw];
    for bi in 0..n {
        for ch in 0..o {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = dwb[ch];
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let (sy, sx) = (yy + ky - half, xx + kx - half);
                            if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                acc += dw[(ch * k + ky as usize) * k + kx as usize]
                                    * y.data()[(bi * o + ch) * hw + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    yd[(bi * o + ch) * hw + yy as usize * w + xx as usize] = if cfg.dw_gelu { gelu(acc) } else { acc };
                }
            }
        }
    }
    let yd = Tensor::new(&[n, o, h, w], yd).unwrap();
    let yp = pointwise_named(store, &format!("{pre}.pw"), &yd);
    let (w1, b1) = (param(store, &format!("{pre}.se_fc1.weight")), param(store, &format!("{pre}.se_fc1.bias")));
    let (w2, b2) = (param(store, &format!("{pre}.se_fc2.weight")), param(store, &format!("{pre}.se_fc2.bias")));
    let hid = b1.len();
    let shortcut = if r == o { z_mod.clone() } else { pointwise_named(store, &format!("{pre}.shortcut"), &z_mod) };
    let mut out = vec![0.0; n * o * hw];
    for bi in 0..n {
        let gap: Vec<f64> = (0..o).map(|ch| yp.data()[(bi * o + ch) * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
        let hidden: Vec<f64> =
            (0..hid).map(|j| (b1[j] + (0..o).map(|ch| w1[j * o + ch] * gap[ch]).sum::<f64>()).max(0.0)).collect();
        for ch in 0..o {
            let s = 1.0 / (1.0 + (-(b2[ch] + (0..hid).map(|j| w2[ch * hid + j] * hidden[j]).sum::<f64>())).exp());
            for p in 0..hw {
                let idx = (bi * o + ch) * hw + p;
                out[idx] = yp.data()[idx] * s + shortcut.data()[idx];
            }
        }
    }
    Tensor::new(&[n, o, h, w], out).unwrap()
}

/// Sliding-window inference by materializing every tile, its logits and
/// its weight map before blending.
pub fn sliding_oracle(model: &Model, image: &Tensor, window: usize, overlap: f64) -> Tensor {
    let (b, c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2], image.shape()[3]);
    let stride = (window as f64 * (1.0 - overlap)) as usize;
    let positions = |len: usize| -> Vec<usize> {
        let steps = (len - window).div_ceil(stride) + 1;
        (0..steps).map(|i| (i * stride).min(len - window)).collect()
    };
    let sigma = window as f64 / 8.0;
    let centre = (window as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..window).map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let peak = g1.iter().cloned().fold(0.0, f64::max).powi(2);
    let mut tiles = Vec::new();
    for &y0 in &positions(h) {
        for &x0 in &positions(w) {
            let mut crop = Vec::new();
            for bi in 0..b {
                for ch in 0..c {
                    for y in y0..y0 + window {
                        for x in x0..x0 + window {
                            crop.push(at4(image, bi, ch, y, x));
                        }
                    }
                }
            }
            let logits = model.logits(&Tensor::new(&[b, c, window, window], crop).unwrap()).unwrap();
            let weight: Vec<f64> = (0..window * window).map(|p| g1[p / window] * g1[p % window] / peak).collect();
            tiles.push((y0, x0, logits, weight));
        }
    }
    let k = tiles[0].2.shape()[1];
    let mut num = vec![0.0; b * k * h * w];
    let mut den = vec![0.0; h * w];
    for (y0, x0, logits, weight) in &tiles {
        for y in 0..window {
            for x in 0..window {
                den[(y0 + y) * w + x0 + x] += weight[y * window + x];
                for bi in 0..b {
                    for kk in 0..k {
                        num[((bi * k + kk) * h + y0 + y) * w + x0 + x] += at4(logits, bi, kk, y, x) * weight[y * window + x];
                    }
                }
            }
        }
    }
    let out: Vec<f64> = num.iter().enumerate().map(|(i, v)| v / den[i % (h * w)]).collect();
    Tensor::new(&[b, k, h, w], out).unwrap()
}

/// HD95 by brute force over all boundary pairs.
pub fn hd95_oracle(a: &[usize], b: &[usize], h: usize, w: usize, class: usize) -> f64 {
    let edge = |m: &[usize]| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if m[(y * w as i64 + x) as usize] != class {
                    continue;
                }
                let mut border = false;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        let outside = ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64;
                        if outside || m[(ny * w as i64 + nx) as usize] != class {
                            border = true;
                        }
                    }
                }
                if border {
                    out.push((y, x));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() && eb.is_empty() {
        return 0.0;
    }
    if ea.is_empty() || eb.is_empty() {
        return ((h * h + w * w) as f64).sqrt();
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&(y, x)| {
                let best = to.iter().map(|&(ty, tx)| (y - ty).pow(2) + (x - tx).pow(2)).min().unwrap();
                (best as f64).sqrt()
            })
            .collect();
        d.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let rank = 0.95 * (d.len() - 1) as f64;
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        d[lo] + (d[hi] - d[lo]) * (rank - lo as f64)
    };
    directed(&ea, &eb).max(directed(&eb, &ea))
}

/// Random blobby mask: a few rectangles of random classes on background.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> Vec<usize> {
    let mut m = vec![0; h * w];
    for _ in 0..rng.random_range(0..4) {
        let c = rng.random_range(1..classes);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = c;
            }
        }
    }
    // salt a few isolated pixels
    for _ in 0..rng.random_range(0..6) {
        m[rng.random_range(0..h * w)] = rng.random_range(0..classes);
    }
    m
}
