//! Dual-branch encoder front-end.
//!
//! The spatial prior module (SPM) turns the image into a conv pyramid at the
//! configured strides, projected to the backbone width D. Interaction stages
//! then enrich every pyramid level against one backbone tap each through
//! deformable cross-attention.
//!
//! Initialization: the output projection and the attention-logit head start
//! at zero, so every stage initially adds an exact zero and (with the
//! residual on) the adapter reproduces the SPM output bit for bit. The offset
//! head has zero weights but a fixed bias that spreads the K points of each
//! head along a ray (see [`offset_bias_pattern`]). With an all-zero offset
//! head the K points coincide, their gradients stay identical, and the logit
//! head never receives a gradient.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::VitFeatures;
use crate::config::AdapterConfig;
use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "adapter.";

/// One map per pyramid level, shallow to deep, each `[B, D, H/s_i, W/s_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidState {
    pub maps: Vec<Var>,
}

/// A plain convolution of the SPM chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpmConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Index of the pyramid level this conv's output feeds, if any.
    pub emits: Option<usize>,
}

/// SPM layout for `cfg`: two stride-2 stem convs reach stride 4, then one
/// stride-2 conv per further doubling. Channel width is `spm_width * 2^j`
/// for the j-th emitted level, capped at 4x.
pub fn spm_plan(cfg: &AdapterConfig) -> Vec<SpmConv> {
    let c = cfg.spm_width;
    let width = |level: usize| c << level.min(2);
    let mut plan = vec![
        SpmConv { name: "adapter.spm.stem1".into(), cin: 3, cout: c, kernel: 3, stride: 2, emits: None },
        SpmConv { name: "adapter.spm.stem2".into(), cin: c, cout: c, kernel: 3, stride: 2, emits: None },
    ];
    let mut stride = 4;
    let mut ch = c;
    let mut down = 0;
    for (level, &target) in cfg.pyramid_strides.iter().enumerate() {
        while stride < target {
            let cout = width(level);
            plan.push(SpmConv {
                name: format!("adapter.spm.down{down}"),
                cin: ch,
                cout,
                kernel: 3,
                stride: 2,
                emits: None,
            });
            down += 1;
            ch = cout;
            stride *= 2;
        }
        plan.last_mut().unwrap().emits = Some(level);
    }
    plan
}

/// Width of the SPM feature feeding level `level`.
fn spm_level_width(plan: &[SpmConv], level: usize) -> usize {
    plan.iter().find(|c| c.emits == Some(level)).map(|c| c.cout).unwrap()
}

pub fn init_adapter<R: Rng>(cfg: &AdapterConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.channels;
    let plan = spm_plan(cfg);
    let mut init = Init { rng };
    for conv in &plan {
        init.conv(store, &conv.name, conv.cout, conv.cin, conv.kernel, true);
    }
    for level in 0..cfg.num_scales() {
        init.conv(store, &format!("adapter.spm.proj{level}"), d, spm_level_width(&plan, level), 1, true);
    }
    for stage in 0..cfg.num_scales() {
        init_deformable_attn(cfg, store, &mut init, &format!("adapter.stages.{stage}"));
    }
}

fn init_deformable_attn<R: Rng>(cfg: &AdapterConfig, store: &mut ParamStore, init: &mut Init<'_, R>, prefix: &str) {
    let d = cfg.channels;
    let hk = cfg.num_heads * cfg.num_points;
    init.conv(store, &format!("{prefix}.value_proj"), d, d, 1, true);
    for (name, cout) in [("offsets", 2 * hk), ("weights", hk), ("out_proj", d)] {
        store.insert(format!("{prefix}.{name}.weight"), Tensor::zeros(&[cout, d, 1, 1]), true);
        let bias = if name == "offsets" { offset_bias_pattern(cfg.num_heads, cfg.num_points) } else { Tensor::zeros(&[cout]) };
        store.insert(format!("{prefix}.{name}.bias"), bias, true);
    }
}

/// Initial offsets bias, `[heads*K*2]` laid out as (head, point, row/col).
/// Head h points along angle 2πh/heads, scaled so the larger component is 1;
/// point k sits k+1 value-map pixels out along that ray.
pub fn offset_bias_pattern(heads: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(heads * k * 2);
    for h in 0..heads {
        let theta = std::f64::consts::TAU * h as f64 / heads as f64;
        let (dr, dc) = (theta.sin(), theta.cos());
        let norm = dr.abs().max(dc.abs());
        for p in 0..k {
            let r = (p + 1) as f64;
            data.push(r * dr / norm);
            data.push(r * dc / norm);
        }
    }
    Tensor::from_parts(vec![heads * k * 2], data)
}

/// Trainable parameter count of the adapter for `cfg`.
pub fn adapter_param_count(cfg: &AdapterConfig) -> usize {
    let d = cfg.channels;
    let plan = spm_plan(cfg);
    let convs: usize = plan.iter().map(|c| c.cout * c.cin * c.kernel * c.kernel + c.cout).sum();
    let projs: usize = (0..cfg.num_scales()).map(|l| d * spm_level_width(&plan, l) + d).sum();
    let hk = cfg.num_heads * cfg.num_points;
    let stage = (d * d + d) + (2 * hk * d + 2 * hk) + (hk * d + hk) + (d * d + d);
    convs + projs + cfg.num_scales() * stage
}

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), spec)
}

/// Builds the initial pyramid `{C_i}` from the image.
pub fn spm_forward(tape: &mut Tape, store: &ParamStore, cfg: &AdapterConfig, x: Var) -> Result<PyramidState> {
    let xs = tape.shape(x).to_vec();
    let m = cfg.max_stride();
    if xs.len() != 4 || xs[1] != 3 {
        return Err(Error::shape("spm_forward", format!("expected [B,3,H,W] image, got {xs:?}")));
    }
    if !xs[2].is_multiple_of(m) || !xs[3].is_multiple_of(m) {
        return Err(Error::shape(
            "spm_forward",
            format!("image {}x{} must be a multiple of the largest stride {m}", xs[2], xs[3]),
        ));
    }
    let mut h = x;
    let mut maps = Vec::with_capacity(cfg.num_scales());
    for c in spm_plan(cfg) {
        h = conv(tape, store, &c.name, h, Conv2dSpec::new(c.stride, c.kernel / 2, 1))?;
        h = tape.relu(h);
        if let Some(level) = c.emits {
            maps.push(conv(tape, store, &format!("adapter.spm.proj{level}"), h, Conv2dSpec::default())?);
        }
    }
    Ok(PyramidState { maps })
}

/// Normalized `(row, col)` centers of every query cell, repeated for each
/// of `k` points and `n` leading groups: `[n, h*w*k, 2]`.
pub fn reference_points(n: usize, h: usize, w: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * h * w * k * 2);
    for _ in 0..n {
        for i in 0..h {
            for j in 0..w {
                for _ in 0..k {
                    data.push((i as f64 + 0.5) / h as f64);
                    data.push((j as f64 + 0.5) / w as f64);
                }
            }
        }
    }
    Tensor::from_parts(vec![n, h * w * k, 2], data)
}

/// Deformable cross-attention: each query location predicts K offsets and K
/// logits, samples the projected value map at reference + offset (offsets in
/// units of `1 / max(Hv, Wv)`), softmax-weights the samples and applies the
/// output projection. `value` is the already projected value map.
pub fn deformable_attn_projected(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &AdapterConfig,
    prefix: &str,
    query: Var,
    value: Var,
) -> Result<Var> {
    let qs = tape.shape(query).to_vec();
    let vs = tape.shape(value).to_vec();
    if qs.len() != 4 || vs.len() != 4 || qs[1] != vs[1] || qs[0] != vs[0] {
        return Err(Error::shape("deformable_cross_attn", format!("query {qs:?} vs value {vs:?}")));
    }
    let (b, d, hq, wq) = (qs[0], qs[1], qs[2], qs[3]);
    let (hv, wv) = (vs[2], vs[3]);
    let (heads, k) = (cfg.num_heads, cfg.num_points);
    let dh = d / heads;
    let nq = hq * wq;

    let v = tape.reshape(value, &[b * heads, dh, hv, wv])?;

    let off = conv(tape, store, &format!("{prefix}.offsets"), query, Conv2dSpec::default())?;
    let off = tape.reshape(off, &[b, heads, k, 2, hq, wq])?;
    let off = tape.permute(off, &[0, 1, 4, 5, 2, 3])?;
    let off = tape.reshape(off, &[b * heads, nq * k, 2])?;
    let off = tape.scale(off, 1.0 / hv.max(wv) as f64);
    let refs = tape.constant(reference_points(b * heads, hq, wq, k));
    let pts = tape.add(refs, off)?;

    let sampled = tape.bilinear_sample(v, pts)?;
    let sampled = tape.reshape(sampled, &[b * heads, dh, nq, k])?;

    let logits = conv(tape, store, &format!("{prefix}.weights"), query, Conv2dSpec::default())?;
    let logits = tape.reshape(logits, &[b, heads, k, hq, wq])?;
    let logits = tape.permute(logits, &[0, 1, 3, 4, 2])?;
    let logits = tape.reshape(logits, &[b * heads, nq, k])?;
    let weights = tape.softmax(logits, 2)?;

    let mixed = tape.point_weighted_sum(sampled, weights)?;
    let mixed = tape.reshape(mixed, &[b, d, hq, wq])?;
    conv(tape, store, &format!("{prefix}.out_proj"), mixed, Conv2dSpec::default())
}

/// Deformable cross-attention of `query` against the raw `value` map using
/// the parameters under `prefix`.
pub fn deformable_cross_attn(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &AdapterConfig,
    prefix: &str,
    query: Var,
    value: Var,
) -> Result<Var> {
    let v = conv(tape, store, &format!("{prefix}.value_proj"), value, Conv2dSpec::default())?;
    deformable_attn_projected(tape, store, cfg, prefix, query, v)
}

/// One interaction stage: every level attends to the stage's backbone tap.
pub fn interaction_block(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &AdapterConfig,
    stage: usize,
    state: &PyramidState,
    f_vit: Var,
) -> Result<PyramidState> {
    let prefix = format!("adapter.stages.{stage}");
    let v = conv(tape, store, &format!("{prefix}.value_proj"), f_vit, Conv2dSpec::default())?;
    let mut maps = Vec::with_capacity(state.maps.len());
    for &m in &state.maps {
        let a = deformable_attn_projected(tape, store, cfg, &prefix, m, v)?;
        maps.push(if cfg.interaction_residual { tape.add(m, a)? } else { a });
    }
    Ok(PyramidState { maps })
}

/// SPM followed by one interaction stage per backbone tap, stage i using tap i.
pub fn adapter_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &AdapterConfig,
    x: Var,
    vit: &VitFeatures,
) -> Result<PyramidState> {
    if vit.taps.len() != cfg.num_scales() {
        return Err(Error::shape(
            "adapter_forward",
            format!("{} backbone taps for {} interaction stages", vit.taps.len(), cfg.num_scales()),
        ));
    }
    let mut state = spm_forward(tape, store, cfg, x)?;
    for (stage, &tap) in vit.taps.iter().enumerate() {
        state = interaction_block(tape, store, cfg, stage, &state, tap)?;
    }
    Ok(state)
}
