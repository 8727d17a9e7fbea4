use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tile origins along an axis of length `len`: multiples of `stride` while
/// the tile fits, then one tile flush with the far edge.
pub fn tile_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut p = 0;
    while p + tile < len {
        starts.push(p);
        p += stride;
    }
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Separable Gaussian over a `th x tw` tile, sigma = side/8 per axis,
/// centred at `(side - 1)/2` and scaled so its maximum is 1.
pub fn gaussian_importance(th: usize, tw: usize) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let sigma = n as f64 / 8.0;
        let c = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (gy, gx) = (axis(th), axis(tw));
    let mut g: Vec<f64> = gy.iter().flat_map(|&a| gx.iter().map(move |&b| a * b)).collect();
    let peak = g.iter().copied().fold(0.0, f64::max);
    g.iter_mut().for_each(|v| *v /= peak);
    g
}

fn crop(image: &Tensor, y0: usize, x0: usize, th: usize, tw: usize) -> Tensor {
    let s = image.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = image.data();
    let mut out = Vec::with_capacity(b * c * th * tw);
    for plane in 0..b * c {
        for y in y0..y0 + th {
            let row = (plane * h + y) * w;
            out.extend_from_slice(&d[row + x0..row + x0 + tw]);
        }
    }
    Tensor::new(&[b, c, th, tw], out).expect("non-empty crop")
}

/// Gaussian-weighted tiled inference. A window covering the whole image
/// (in both axes) is a plain forward pass.
pub fn sliding_window_infer(model: &Model, image: &Tensor, window: usize, overlap: f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::shape("sliding_window_infer", format!("image {s:?} must be [B, 3, H, W]")));
    }
    let m = model.cfg.size_multiple();
    if window == 0 || !window.is_multiple_of(m) {
        return Err(Error::Config(format!("window={window} must be a positive multiple of {m}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap={overlap} must be in [0, 1)")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if window >= h && window >= w {
        return model.logits(image);
    }
    let (th, tw) = (window.min(h), window.min(w));
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let g = gaussian_importance(th, tw);
    let classes = model.cfg.decoder.num_classes;
    let mut acc = vec![0.0; b * classes * h * w];
    let mut wsum = vec![0.0; h * w];
    for &y0 in &tile_starts(h, th, stride) {
        for &x0 in &tile_starts(w, tw, stride) {
            let logits = model.logits(&crop(image, y0, x0, th, tw))?;
            let ld = logits.data();
            for plane in 0..b * classes {
                for ty in 0..th {
                    for tx in 0..tw {
                        acc[(plane * h + y0 + ty) * w + x0 + tx] += ld[(plane * th + ty) * tw + tx] * g[ty * tw + tx];
                    }
                }
            }
            for ty in 0..th {
                for tx in 0..tw {
                    wsum[(y0 + ty) * w + x0 + tx] += g[ty * tw + tx];
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= wsum[i % (h * w)];
    }
    Tensor::new(&[b, classes, h, w], acc)
}
