//! Frozen ViT-style feature extractor.
//!
//! Patch embedding plus a learned positional grid, followed by pre-norm
//! transformer blocks. Only patch tokens exist (no class token). Token maps
//! are captured after each tap layer and reshaped to `[B, D, H/p, W/p]`.
//! Weights come from a seeded random init and are registered frozen.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "backbone.";

/// Per-tap token maps, all on the same patch grid.
#[derive(Clone, Debug)]
pub struct VitFeatures {
    pub taps: Vec<Var>,
}

pub fn init_backbone<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let hidden = cfg.mlp_ratio * d;
    let mut init = Init { rng };
    init.conv(store, "backbone.patch_embed", d, 3, p, false);
    let pos = init.normal(&[1, d, cfg.pos_grid.0, cfg.pos_grid.1], 0.02);
    store.insert("backbone.pos_embed", pos, false);
    for l in 0..cfg.depth {
        let pre = format!("backbone.blocks.{l}");
        for norm in ["norm1", "norm2"] {
            store.insert(format!("{pre}.{norm}.weight"), Tensor::ones(&[d]), false);
            store.insert(format!("{pre}.{norm}.bias"), Tensor::zeros(&[d]), false);
        }
        init.linear(store, &format!("{pre}.attn.qkv"), 3 * d, d, false);
        init.linear(store, &format!("{pre}.attn.proj"), d, d, false);
        init.linear(store, &format!("{pre}.mlp.fc1"), hidden, d, false);
        init.linear(store, &format!("{pre}.mlp.fc2"), d, hidden, false);
    }
}

/// Frozen backbone parameter count for `cfg`.
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let (d, p, m) = (cfg.embed_dim, cfg.patch_size, cfg.mlp_ratio);
    let patch = 3 * p * p * d + d;
    let pos = d * cfg.pos_grid.0 * cfg.pos_grid.1;
    let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (m * d * d + m * d) + (m * d * d + d);
    patch + pos + cfg.depth * block
}

fn param(tape: &mut Tape, store: &ParamStore, name: String) -> Result<Var> {
    tape.param(store, &name)
}

pub fn backbone_forward(tape: &mut Tape, store: &ParamStore, cfg: &BackboneConfig, x: Var) -> Result<VitFeatures> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != 3 {
        return Err(Error::shape("backbone_forward", format!("expected [B,3,H,W] image, got {xs:?}")));
    }
    let p = cfg.patch_size;
    if !xs[2].is_multiple_of(p) || !xs[3].is_multiple_of(p) {
        return Err(Error::shape(
            "backbone_forward",
            format!("image {}x{} must be a multiple of the patch size {p}", xs[2], xs[3]),
        ));
    }
    let (b, d, heads) = (xs[0], cfg.embed_dim, cfg.num_heads);
    let dh = d / heads;
    let (gh, gw) = (xs[2] / p, xs[3] / p);
    let t = gh * gw;

    let pw = param(tape, store, "backbone.patch_embed.weight".into())?;
    let pb = param(tape, store, "backbone.patch_embed.bias".into())?;
    let emb = tape.conv2d(x, pw, Some(pb), Conv2dSpec::new(p, 0, 1))?;
    let mut pos = param(tape, store, "backbone.pos_embed".into())?;
    if (gh, gw) != cfg.pos_grid {
        pos = tape.bilinear_resize(pos, gh, gw)?;
    }
    let pos = if b > 1 { tape.concat(&vec![pos; b], 0)? } else { pos };
    let emb = tape.add(emb, pos)?;
    let emb = tape.reshape(emb, &[b, d, t])?;
    let mut h = tape.permute(emb, &[0, 2, 1])?; // [B, T, D]

    let mut taps = Vec::with_capacity(cfg.tap_layers.len());
    for l in 0..cfg.depth {
        let pre = format!("backbone.blocks.{l}");
        // attention
        let g1 = param(tape, store, format!("{pre}.norm1.weight"))?;
        let b1 = param(tape, store, format!("{pre}.norm1.bias"))?;
        let n1 = tape.layer_norm(h, g1, b1, 2)?;
        let wqkv = param(tape, store, format!("{pre}.attn.qkv.weight"))?;
        let bqkv = param(tape, store, format!("{pre}.attn.qkv.bias"))?;
        let qkv = tape.linear(n1, wqkv, Some(bqkv))?;
        let qkv = tape.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, H, T, dh]
        let mut parts = [x; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = tape.narrow(qkv, 0, i, 1)?;
            *part = tape.reshape(s, &[b, heads, t, dh])?;
        }
        let [q, k, v] = parts;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(att, v)?; // [B, H, T, dh]
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let wp = param(tape, store, format!("{pre}.attn.proj.weight"))?;
        let bp = param(tape, store, format!("{pre}.attn.proj.bias"))?;
        let attn_out = tape.linear(ctx, wp, Some(bp))?;
        h = tape.add(h, attn_out)?;
        // mlp
        let g2 = param(tape, store, format!("{pre}.norm2.weight"))?;
        let b2 = param(tape, store, format!("{pre}.norm2.bias"))?;
        let n2 = tape.layer_norm(h, g2, b2, 2)?;
        let w1 = param(tape, store, format!("{pre}.mlp.fc1.weight"))?;
        let bb1 = param(tape, store, format!("{pre}.mlp.fc1.bias"))?;
        let f = tape.linear(n2, w1, Some(bb1))?;
        let f = tape.gelu(f);
        let w2 = param(tape, store, format!("{pre}.mlp.fc2.weight"))?;
        let bb2 = param(tape, store, format!("{pre}.mlp.fc2.bias"))?;
        let f = tape.linear(f, w2, Some(bb2))?;
        h = tape.add(h, f)?;

        if cfg.tap_layers.contains(&(l + 1)) {
            let m = tape.permute(h, &[0, 2, 1])?;
            taps.push(tape.reshape(m, &[b, d, gh, gw])?);
        }
    }
    Ok(VitFeatures { taps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64) -> (BackboneConfig, ParamStore) {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        init_backbone(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (cfg, store)
    }

    fn image(b: usize, h: usize, w: usize) -> Tensor {
        let data = (0..b * 3 * h * w).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        Tensor::new(&[b, 3, h, w], data).unwrap()
    }

    #[test]
    fn tap_shapes() {
        let (cfg, store) = build(1);
        let mut tape = Tape::new();
        let x = tape.constant(image(2, 64, 64));
        let f = backbone_forward(&mut tape, &store, &cfg, x).unwrap();
        assert_eq!(f.taps.len(), 4);
        for &t in &f.taps {
            assert_eq!(tape.shape(t), &[2, 32, 4, 4]);
            assert!(tape.value(t).all_finite());
        }
    }

    #[test]
    fn other_grid_sizes_resize_positions() {
        let (cfg, store) = build(1);
        let mut tape = Tape::new();
        let x = tape.constant(image(1, 32, 48));
        let f = backbone_forward(&mut tape, &store, &cfg, x).unwrap();
        assert_eq!(tape.shape(f.taps[0]), &[1, 32, 2, 3]);
    }

    #[test]
    fn rejects_non_multiple_input() {
        let (cfg, store) = build(1);
        let mut tape = Tape::new();
        let x = tape.constant(image(1, 40, 64));
        let err = backbone_forward(&mut tape, &store, &cfg, x).unwrap_err().to_string();
        assert!(err.contains("multiple of the patch size 16"), "{err}");
    }

    #[test]
    fn deterministic_forward_and_init() {
        let (cfg, a) = build(7);
        let (_, b) = build(7);
        let (_, c) = build(8);
        assert_eq!(a, b);
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x.value != y.value));
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(image(1, 64, 64));
            let f = backbone_forward(&mut tape, &a, &cfg, x).unwrap();
            tape.value(*f.taps.last().unwrap()).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn all_frozen_and_counted() {
        let (cfg, store) = build(3);
        assert!(store.iter().all(|(k, e)| k.starts_with(PREFIX) && !e.trainable));
        // registry enumeration vs closed form
        let enumerated: usize = store.iter().map(|(_, e)| e.value.numel()).sum();
        assert_eq!(enumerated, backbone_param_count(&cfg));
        assert_eq!(store.len(), 3 + cfg.depth * 12);
    }

    #[test]
    fn frozen_backbone_outputs_carry_no_grad() {
        let (cfg, store) = build(3);
        let mut tape = Tape::new();
        let x = tape.constant(image(1, 32, 32));
        let f = backbone_forward(&mut tape, &store, &cfg, x).unwrap();
        assert!(f.taps.iter().all(|&t| !tape.requires_grad(t)));
    }
}
