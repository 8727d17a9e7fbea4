//! U-Net decoder over the skip pyramid.
//!
//! Starting from the deepest skip, each step upsamples x2 (bilinear),
//! concatenates the next-shallower skip and applies two 3x3 conv + GELU
//! blocks at that skip's width. A 1x1 head maps to class logits at the
//! shallowest stride, followed by a bilinear upsample to input resolution.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::params::{Init, ParamStore};

pub const PREFIX: &str = "decoder.";

pub fn init_decoder<R: Rng>(cfg: &DecoderConfig, store: &mut ParamStore, rng: &mut R) {
    let dims = &cfg.skip_dims;
    let mut init = Init { rng };
    for i in (0..dims.len().saturating_sub(1)).rev() {
        let cin = dims[i + 1] + dims[i];
        init.conv(store, &format!("decoder.up{i}.conv1"), dims[i], cin, 3, true);
        init.conv(store, &format!("decoder.up{i}.conv2"), dims[i], dims[i], 3, true);
    }
    init.conv(store, "decoder.head", cfg.num_classes, dims[0], 1, true);
}

pub fn decoder_param_count(cfg: &DecoderConfig) -> usize {
    let d = &cfg.skip_dims;
    let stages: usize = (0..d.len() - 1)
        .map(|i| (d[i] * (d[i + 1] + d[i]) * 9 + d[i]) + (d[i] * d[i] * 9 + d[i]))
        .sum();
    stages + cfg.num_classes * d[0] + cfg.num_classes
}

fn conv_gelu(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, Some(b), Conv2dSpec::new(1, 1, 1))?;
    Ok(tape.gelu(y))
}

fn check_skips(tape: &Tape, cfg: &DecoderConfig, skips: &[Var]) -> Result<()> {
    if skips.len() != cfg.skip_dims.len() {
        return Err(Error::shape("decoder_forward", format!("{} skips, expected {}", skips.len(), cfg.skip_dims.len())));
    }
    let s0 = tape.shape(skips[0]).to_vec();
    for (i, &s) in skips.iter().enumerate() {
        let sh = tape.shape(s);
        if sh.len() != 4 || sh[0] != s0[0] || sh[1] != cfg.skip_dims[i] {
            return Err(Error::shape(
                "decoder_forward",
                format!("skip {i} has shape {sh:?}, expected [{}, {}, _, _]", s0[0], cfg.skip_dims[i]),
            ));
        }
        if i > 0 {
            let prev = tape.shape(skips[i - 1]);
            if prev[2] != 2 * sh[2] || prev[3] != 2 * sh[3] {
                return Err(Error::shape(
                    "decoder_forward",
                    format!("skip {i} spatial {:?} is not half of skip {} spatial {:?}", &sh[2..], i - 1, &prev[2..]),
                ));
            }
        }
    }
    Ok(())
}

/// Class logits at `final_upsample` times the shallowest skip's resolution.
pub fn decoder_forward(tape: &mut Tape, store: &ParamStore, cfg: &DecoderConfig, skips: &[Var]) -> Result<Var> {
    check_skips(tape, cfg, skips)?;
    let mut h = *skips.last().unwrap();
    for i in (0..skips.len() - 1).rev() {
        let (th, tw) = (tape.shape(skips[i])[2], tape.shape(skips[i])[3]);
        let up = tape.bilinear_resize(h, th, tw)?;
        let cat = tape.concat(&[up, skips[i]], 1)?;
        let c1 = conv_gelu(tape, store, &format!("decoder.up{i}.conv1"), cat)?;
        h = conv_gelu(tape, store, &format!("decoder.up{i}.conv2"), c1)?;
    }
    let w = tape.param(store, "decoder.head.weight")?;
    let b = tape.param(store, "decoder.head.bias")?;
    let logits = tape.conv2d(h, w, Some(b), Conv2dSpec::default())?;
    let (lh, lw) = (tape.shape(logits)[2], tape.shape(logits)[3]);
    let f = cfg.final_upsample;
    tape.bilinear_resize(logits, lh * f, lw * f)
}

/// Argmax over the class axis of `[B, C, H, W]` logits; ties go to the
/// lowest class index. Returns labels flattened as `[B, H, W]`.
pub fn predict_mask(logits: &crate::tensor::Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (b, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            let mut best_v = d[bi * c * hw + px];
            for k in 1..c {
                let v = d[(bi * c + k) * hw + px];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}
