//! Fidelity-aware projection module.
//!
//! Per scale i, with a single context projection shared by all scales:
//!
//! ```text
//! Z_ctx = W_ctx * C'_i            Z_sp = W_sp,i * C'_i          (1x1 convs, D -> R)
//! (gamma, beta) = split(G_i(Z_ctx))                             (1x1 conv, R -> 2R)
//! Z_mod = gamma . Z_sp + beta                                   (elementwise)
//! Y  = W_r,i * Z_mod              Y' = pointwise(depthwise(Y))
//! s  = sigmoid(fc2(relu(fc1(GAP(Y')))))
//! S_i = Y' . s + P_i(Z_mod)       P_i = identity when R == D'_i
//! ```
//!
//! `G_i` starts with zero weights and a bias of 1 on the gamma half, so
//! `Z_mod == Z_sp` exactly before training.

use rand::Rng;

use crate::adapter::PyramidState;
use crate::autodiff::{Tape, Var};
use crate::config::FapmConfig;
use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "fapm.";
pub const BASELINE_PREFIX: &str = "fapm_baseline.";

/// Intermediate tensors of one scale, exposed for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct ScaleTrace {
    pub z_ctx: Var,
    pub z_sp: Var,
    pub gamma: Var,
    pub beta: Var,
    pub z_mod: Var,
    pub y_refined: Var,
    pub se: Var,
    pub out: Var,
}

pub fn init_fapm<R: Rng>(cfg: &FapmConfig, store: &mut ParamStore, rng: &mut R) {
    let (d, r, k) = (cfg.in_dim, cfg.rank, cfg.dw_kernel);
    let mut init = Init { rng };
    init.conv(store, "fapm.ctx", r, d, 1, true);
    for (i, &dout) in cfg.out_dims.iter().enumerate() {
        let pre = format!("fapm.scales.{i}");
        init.conv(store, &format!("{pre}.sp"), r, d, 1, true);
        let mut gen_bias = Tensor::zeros(&[2 * r]);
        gen_bias.data_mut()[..r].fill(1.0);
        store.insert(format!("{pre}.gen.weight"), Tensor::zeros(&[2 * r, r, 1, 1]), true);
        store.insert(format!("{pre}.gen.bias"), gen_bias, true);
        init.conv(store, &format!("{pre}.reduce"), dout, r, 1, true);
        init.conv(store, &format!("{pre}.dw"), dout, 1, k, true);
        init.conv(store, &format!("{pre}.pw"), dout, dout, 1, true);
        let hidden = cfg.se_hidden(dout);
        init.linear(store, &format!("{pre}.se_fc1"), hidden, dout, true);
        init.linear(store, &format!("{pre}.se_fc2"), dout, hidden, true);
        if r != dout {
            init.conv(store, &format!("{pre}.shortcut"), dout, r, 1, true);
        }
    }
}

/// Per-scale 1x1 projection D -> D'_i used in place of FAPM in the ablation.
pub fn init_baseline<R: Rng>(cfg: &FapmConfig, store: &mut ParamStore, rng: &mut R) {
    let mut init = Init { rng };
    for (i, &dout) in cfg.out_dims.iter().enumerate() {
        init.conv(store, &format!("fapm_baseline.scales.{i}.proj"), dout, cfg.in_dim, 1, true);
    }
}

fn conv1x1(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    conv_named(tape, store, name, x, Conv2dSpec::default())
}

fn conv_named(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), spec)
}

/// Squared Frobenius norm of `W_ctx^T W_sp,i` (both `[R, D]`): zero when
/// the shared and scale-specific bases span orthogonal input directions.
/// Diagnostic only; nothing in the training loss uses it.
pub fn basis_overlap(store: &ParamStore, scale: usize) -> Result<f64> {
    let ctx = store.value("fapm.ctx.weight")?;
    let sp = store.value(&format!("fapm.scales.{scale}.sp.weight"))?;
    let (r, d) = (ctx.shape()[0], ctx.shape()[1]);
    if sp.shape()[..2] != [r, d] {
        return Err(Error::shape("basis_overlap", format!("{:?} vs {:?}", sp.shape(), ctx.shape())));
    }
    let (c, s) = (ctx.data(), sp.data());
    let mut total = 0.0;
    for i in 0..r {
        for j in 0..r {
            let dot: f64 = (0..d).map(|k| c[i * d + k] * s[j * d + k]).sum();
            total += dot * dot;
        }
    }
    Ok(total)
}

/// Shared-context and scale-specific projections into the rank-R space.
pub fn decompose(tape: &mut Tape, store: &ParamStore, scale: usize, c_prime: Var) -> Result<(Var, Var)> {
    let z_ctx = conv1x1(tape, store, "fapm.ctx", c_prime)?;
    let z_sp = conv1x1(tape, store, &format!("fapm.scales.{scale}.sp"), c_prime)?;
    Ok((z_ctx, z_sp))
}

/// Generates (gamma, beta) from `z_ctx` and modulates `z_sp`.
pub fn film_modulate(tape: &mut Tape, store: &ParamStore, scale: usize, z_ctx: Var, z_sp: Var) -> Result<(Var, Var, Var)> {
    if tape.shape(z_ctx) != tape.shape(z_sp) {
        return Err(Error::shape(
            "film_modulate",
            format!("Z_ctx {:?} vs Z_sp {:?}", tape.shape(z_ctx), tape.shape(z_sp)),
        ));
    }
    let r = tape.shape(z_ctx)[1];
    let gb = conv1x1(tape, store, &format!("fapm.scales.{scale}.gen"), z_ctx)?;
    let gamma = tape.narrow(gb, 1, 0, r)?;
    let beta = tape.narrow(gb, 1, r, r)?;
    let z_mod = modulate(tape, gamma, beta, z_sp)?;
    Ok((gamma, beta, z_mod))
}

/// `gamma . z + beta`, elementwise.
pub fn modulate(tape: &mut Tape, gamma: Var, beta: Var, z: Var) -> Result<Var> {
    let scaled = tape.mul(gamma, z)?;
    tape.add(scaled, beta)
}

/// Refinement block: reduce, depthwise-separable conv, SE recalibration and
/// the projection shortcut. Returns `(Y', s, S_i)`.
pub fn refine(tape: &mut Tape, store: &ParamStore, cfg: &FapmConfig, scale: usize, z_mod: Var) -> Result<(Var, Var, Var)> {
    let pre = format!("fapm.scales.{scale}");
    let dout = cfg.out_dims[scale];
    let k = cfg.dw_kernel;
    let y = conv1x1(tape, store, &format!("{pre}.reduce"), z_mod)?;
    let mut y = conv_named(tape, store, &format!("{pre}.dw"), y, Conv2dSpec::new(1, k / 2, dout))?;
    if cfg.dw_gelu {
        y = tape.gelu(y);
    }
    let y = conv1x1(tape, store, &format!("{pre}.pw"), y)?;

    let pooled = tape.global_avg_pool(y)?;
    let w1 = tape.param(store, &format!("{pre}.se_fc1.weight"))?;
    let b1 = tape.param(store, &format!("{pre}.se_fc1.bias"))?;
    let h = tape.linear(pooled, w1, Some(b1))?;
    let h = tape.relu(h);
    let w2 = tape.param(store, &format!("{pre}.se_fc2.weight"))?;
    let b2 = tape.param(store, &format!("{pre}.se_fc2.bias"))?;
    let s = tape.linear(h, w2, Some(b2))?;
    let s = tape.sigmoid(s);

    let recal = tape.mul_channel(y, s)?;
    let shortcut = if cfg.rank == dout { z_mod } else { conv1x1(tape, store, &format!("{pre}.shortcut"), z_mod)? };
    let out = tape.add(recal, shortcut)?;
    Ok((y, s, out))
}

pub fn fapm_scale(tape: &mut Tape, store: &ParamStore, cfg: &FapmConfig, scale: usize, c_prime: Var) -> Result<ScaleTrace> {
    let d = tape.shape(c_prime).get(1).copied().unwrap_or(0);
    if d != cfg.in_dim {
        return Err(Error::shape("fapm", format!("scale {scale} has {d} channels, expected D={}", cfg.in_dim)));
    }
    let (z_ctx, z_sp) = decompose(tape, store, scale, c_prime)?;
    let (gamma, beta, z_mod) = film_modulate(tape, store, scale, z_ctx, z_sp)?;
    let (y_refined, se, out) = refine(tape, store, cfg, scale, z_mod)?;
    Ok(ScaleTrace { z_ctx, z_sp, gamma, beta, z_mod, y_refined, se, out })
}

fn check_scales(op: &'static str, pyramid: &PyramidState, n: usize) -> Result<()> {
    if pyramid.maps.len() != n {
        return Err(Error::shape(op, format!("{} pyramid levels, configured for {n}", pyramid.maps.len())));
    }
    Ok(())
}

/// Skip connections `{S_i}` for every pyramid level.
pub fn fapm_forward(tape: &mut Tape, store: &ParamStore, cfg: &FapmConfig, pyramid: &PyramidState) -> Result<Vec<Var>> {
    Ok(fapm_trace(tape, store, cfg, pyramid)?.into_iter().map(|t| t.out).collect())
}

pub fn fapm_trace(tape: &mut Tape, store: &ParamStore, cfg: &FapmConfig, pyramid: &PyramidState) -> Result<Vec<ScaleTrace>> {
    check_scales("fapm_forward", pyramid, cfg.out_dims.len())?;
    pyramid.maps.iter().enumerate().map(|(i, &m)| fapm_scale(tape, store, cfg, i, m)).collect()
}

pub fn baseline_forward(tape: &mut Tape, store: &ParamStore, cfg: &FapmConfig, pyramid: &PyramidState) -> Result<Vec<Var>> {
    check_scales("baseline_forward", pyramid, cfg.out_dims.len())?;
    pyramid
        .maps
        .iter()
        .enumerate()
        .map(|(i, &m)| conv1x1(tape, store, &format!("fapm_baseline.scales.{i}.proj"), m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &FapmConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_fapm(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(5));
        s
    }

    fn pyramid(tape: &mut Tape, d: usize) -> PyramidState {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init { rng: &mut rng };
        let maps = [16, 8, 4, 2].iter().map(|&s| tape.constant(init.normal(&[2, d, s, s], 1.0))).collect();
        PyramidState { maps }
    }

    #[test]
    fn one_shared_context_entry() {
        let cfg = FapmConfig::default();
        let s = store(&cfg);
        assert_eq!(s.iter().filter(|(k, _)| k.contains("ctx")).count(), 2); // weight + bias
        assert!(s.iter().all(|(k, e)| e.trainable && k.starts_with(PREFIX)));
        // shortcut only where R != D'
        assert!(!s.contains("fapm.scales.0.shortcut.weight"));
        assert!(s.contains("fapm.scales.1.shortcut.weight"));
    }

    #[test]
    fn desk_shape_contract_for_both_projections() {
        let cfg = FapmConfig::default();
        let mut s = store(&cfg);
        init_baseline(&cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let p = pyramid(&mut tape, 32);
        let a = fapm_forward(&mut tape, &s, &cfg, &p).unwrap();
        let b = baseline_forward(&mut tape, &s, &cfg, &p).unwrap();
        let expect = [[2, 16, 16, 16], [2, 32, 8, 8], [2, 64, 4, 4], [2, 128, 2, 2]];
        for i in 0..4 {
            assert_eq!(tape.shape(a[i]), expect[i]);
            assert_eq!(tape.shape(b[i]), expect[i]);
        }
    }

    #[test]
    fn film_is_identity_at_init() {
        let cfg = FapmConfig::default();
        let s = store(&cfg);
        let mut tape = Tape::new();
        let p = pyramid(&mut tape, 32);
        for t in fapm_trace(&mut tape, &s, &cfg, &p).unwrap() {
            assert!(tape.value(t.z_mod).bit_eq(tape.value(t.z_sp)));
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let b = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![0.5, 0.25, -1.0, 2.0]).unwrap());
        let m = modulate(&mut tape, g, b, z).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(b).data());
    }

    #[test]
    fn scale_count_mismatch_rejected() {
        let cfg = FapmConfig::default();
        let s = store(&cfg);
        let mut tape = Tape::new();
        let mut p = pyramid(&mut tape, 32);
        p.maps.pop();
        assert!(fapm_forward(&mut tape, &s, &cfg, &p).is_err());
    }

    #[test]
    fn basis_overlap_zero_for_disjoint_inputs() {
        let cfg = FapmConfig { rank: 2, in_dim: 4, out_dims: vec![2], ..Default::default() };
        let mut store = ParamStore::new();
        init_fapm(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        *store.value_mut("fapm.ctx.weight").unwrap() = Tensor::new(&[2, 4, 1, 1], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        *store.value_mut("fapm.scales.0.sp.weight").unwrap() = Tensor::new(&[2, 4, 1, 1], vec![0., 0., 1., 0., 0., 0., 0., 2.]).unwrap();
        assert_eq!(basis_overlap(&store, 0).unwrap(), 0.0);
        *store.value_mut("fapm.scales.0.sp.weight").unwrap() = Tensor::new(&[2, 4, 1, 1], vec![3., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(basis_overlap(&store, 0).unwrap(), 9.0);
    }
}
