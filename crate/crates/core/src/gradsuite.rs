//! Catalogue of gradient checks: every differentiable tape op plus the
//! composed modules, each on small random instances.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{deformable_cross_attn, init_adapter, interaction_block, spm_forward, PyramidState};
use crate::autodiff::{Tape, Var};
use crate::backbone::{backbone_forward, init_backbone};
use crate::config::{AdapterConfig, BackboneConfig, DecoderConfig, FapmConfig};
use crate::decoder::{decoder_forward, init_decoder};
use crate::error::{Error, Result};
use crate::fapm::{baseline_forward, fapm_forward, init_baseline, init_fapm};
use crate::gradcheck::{gradcheck, uniform, GradcheckOptions, GradcheckReport};
use crate::losses::{total_loss, DiceReduction, dice_loss, DICE_EPS};
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Inputs = Vec<(String, Tensor)>;

pub const OP_CASES: &[&str] = &[
    "conv2d",
    "bilinear_resize",
    "bilinear_sample",
    "linear",
    "matmul",
    "softmax",
    "sigmoid",
    "gelu",
    "relu",
    "add",
    "mul",
    "scale",
    "add_scalar",
    "mul_channel",
    "concat",
    "narrow",
    "global_avg_pool",
    "layer_norm",
    "reshape",
    "permute",
    "sum",
    "point_weighted_sum",
    "soft_dice",
    "soft_dice_batch",
    "cross_entropy",
];

pub const MODULE_CASES: &[&str] =
    &["backbone", "spm", "deformable_attn", "adapter_stage", "fapm", "fapm_baseline", "decoder", "losses"];

/// Default seeds: three independent instances per case.
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

pub fn is_module(name: &str) -> bool {
    MODULE_CASES.contains(&name)
}

pub fn all_cases() -> impl Iterator<Item = &'static str> {
    OP_CASES.iter().chain(MODULE_CASES).copied()
}

/// Options per case: module checks sample a subset of coordinates.
pub fn options_for(name: &str, seed: u64) -> GradcheckOptions {
    GradcheckOptions { max_coords: is_module(name).then_some(48), seed, ..Default::default() }
}

fn named(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Replaces every entry under `prefix` with uniform noise in `[-a, a]` and
/// returns the entries as gradcheck inputs.
fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng, a: f64) -> Inputs {
    let mut out = Vec::new();
    for (name, e) in store.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
        e.value = uniform(rng, e.value.shape(), -a, a);
        out.push((name.to_string(), e.value.clone()));
    }
    out
}

fn bind(tape: &mut Tape, names: &[String], vars: &[Var]) {
    for (n, &v) in names.iter().zip(vars) {
        tape.bind_param(n, v);
    }
}

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Option<(Inputs, Forward)> {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    let case: (Inputs, Forward) = match name {
        "conv2d" => {
            let specs = [Conv2dSpec::new(1, 1, 1), Conv2dSpec::new(2, 1, 2), Conv2dSpec::new(1, 0, 4), Conv2dSpec::new(2, 2, 1)];
            let spec = *specs.choose(rng).unwrap();
            let (cin, cout, k) = (4, 4, rng.random_range(1..=3));
            let inputs = vec![
                named("x", u(rng, &[2, cin, 6, 5])),
                named("w", u(rng, &[cout, cin / spec.groups, k, k])),
                named("b", u(rng, &[cout])),
            ];
            (inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)))
        }
        "bilinear_resize" => {
            let (oh, ow) = (rng.random_range(2..9), rng.random_range(2..9));
            (vec![named("x", u(rng, &[2, 3, 4, 5]))], Box::new(move |t, v| t.bilinear_resize(v[0], oh, ow)))
        }
        "bilinear_sample" => {
            let inputs = vec![named("value", u(rng, &[2, 3, 5, 6])), named("points", uniform(rng, &[2, 7, 2], -0.1, 1.1))];
            (inputs, Box::new(|t, v| t.bilinear_sample(v[0], v[1])))
        }
        "linear" => {
            let inputs = vec![named("x", u(rng, &[2, 3, 5])), named("w", u(rng, &[4, 5])), named("b", u(rng, &[4]))];
            (inputs, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
        }
        "matmul" => (vec![named("a", u(rng, &[3, 4, 5])), named("b", u(rng, &[3, 5, 2]))], Box::new(|t, v| t.matmul(v[0], v[1]))),
        "softmax" => {
            let axis = rng.random_range(0..3);
            (vec![named("x", uniform(rng, &[2, 5, 3], -3.0, 3.0))], Box::new(move |t, v| t.softmax(v[0], axis)))
        }
        "sigmoid" => (vec![named("x", uniform(rng, &[3, 7], -4.0, 4.0))], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        "gelu" => (vec![named("x", uniform(rng, &[3, 7], -4.0, 4.0))], Box::new(|t, v| Ok(t.gelu(v[0])))),
        "relu" => (vec![named("x", u(rng, &[3, 7]))], Box::new(|t, v| Ok(t.relu(v[0])))),
        "add" => (vec![named("a", u(rng, &[2, 3, 4])), named("b", u(rng, &[2, 3, 4]))], Box::new(|t, v| t.add(v[0], v[1]))),
        "mul" => (vec![named("a", u(rng, &[2, 3, 4])), named("b", u(rng, &[2, 3, 4]))], Box::new(|t, v| t.mul(v[0], v[1]))),
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            (vec![named("x", u(rng, &[4, 3]))], Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }
        "add_scalar" => {
            let c = rng.random_range(-2.0..2.0);
            (vec![named("x", u(rng, &[4, 3]))], Box::new(move |t, v| Ok(t.add_scalar(v[0], c))))
        }
        "mul_channel" => {
            (vec![named("x", u(rng, &[2, 3, 4, 4])), named("s", u(rng, &[2, 3]))], Box::new(|t, v| t.mul_channel(v[0], v[1])))
        }
        "concat" => {
            let axis = rng.random_range(0..3);
            let mut shapes = [[2, 3, 4]; 3];
            for (i, s) in shapes.iter_mut().enumerate() {
                s[axis] = i + 1;
            }
            let inputs = shapes.iter().enumerate().map(|(i, s)| named(&format!("x{i}"), u(rng, s))).collect();
            (inputs, Box::new(move |t, v| t.concat(v, axis)))
        }
        "narrow" => {
            let axis = rng.random_range(0..3);
            let (start, len) = (1, 2);
            (vec![named("x", u(rng, &[4, 4, 4]))], Box::new(move |t, v| t.narrow(v[0], axis, start, len)))
        }
        "global_avg_pool" => (vec![named("x", u(rng, &[2, 3, 4, 5]))], Box::new(|t, v| t.global_avg_pool(v[0]))),
        "layer_norm" => {
            let inputs = vec![named("x", uniform(rng, &[2, 5, 6], -2.0, 2.0)), named("gain", u(rng, &[6])), named("bias", u(rng, &[6]))];
            (inputs, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 2)))
        }
        "reshape" => (vec![named("x", u(rng, &[2, 3, 4]))], Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        "permute" => {
            let mut perm = vec![0, 1, 2, 3];
            perm.shuffle(rng);
            (vec![named("x", u(rng, &[2, 3, 4, 5]))], Box::new(move |t, v| t.permute(v[0], &perm)))
        }
        "sum" => (vec![named("x", u(rng, &[3, 5]))], Box::new(|t, v| Ok(t.sum(v[0])))),
        "point_weighted_sum" => {
            let inputs = vec![named("samples", u(rng, &[2, 3, 4, 5])), named("weights", u(rng, &[2, 4, 5]))];
            (inputs, Box::new(|t, v| t.point_weighted_sum(v[0], v[1])))
        }
        "soft_dice" | "soft_dice_batch" => {
            let per_sample = name == "soft_dice";
            let target = labels(rng, 2 * 5 * 4, 3);
            let inputs = vec![named("logits", uniform(rng, &[2, 3, 5, 4], -2.0, 2.0))];
            (inputs, Box::new(move |t, v| t.soft_dice_loss(v[0], &target, DICE_EPS, per_sample)))
        }
        "cross_entropy" => {
            let target = labels(rng, 2 * 5 * 4, 3);
            let inputs = vec![named("logits", uniform(rng, &[2, 3, 5, 4], -2.0, 2.0))];
            (inputs, Box::new(move |t, v| t.cross_entropy(v[0], &target)))
        }
        _ => return None,
    };
    Some(case)
}

fn small_adapter() -> AdapterConfig {
    AdapterConfig { pyramid_strides: vec![4, 8], channels: 8, num_points: 3, num_heads: 2, interaction_residual: true, spm_width: 4 }
}

fn small_fapm() -> FapmConfig {
    FapmConfig { rank: 4, in_dim: 8, out_dims: vec![4, 6], se_reduction: 2, dw_kernel: 3, dw_gelu: true }
}

/// Inputs are `fixed` tensors followed by the randomized parameters whose
/// names are bound on the tape before `run` is called.
fn module_case(
    fixed: Inputs,
    params: Inputs,
    store: ParamStore,
    run: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + 'static,
) -> (Inputs, Forward) {
    let nf = fixed.len();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs = fixed;
    inputs.extend(params);
    let f: Forward = Box::new(move |t, v| {
        bind(t, &names, &v[nf..]);
        run(t, &store, &v[..nf])
    });
    (inputs, f)
}

fn concat_all(t: &mut Tape, outs: &[Var]) -> Result<Var> {
    let flat: Vec<Var> = outs
        .iter()
        .map(|&o| {
            let n = t.value(o).numel();
            t.reshape(o, &[n])
        })
        .collect::<Result<_>>()?;
    t.concat(&flat, 0)
}

fn module(name: &str, rng: &mut ChaCha8Rng) -> Option<(Inputs, Forward)> {
    let case = match name {
        "backbone" => {
            let cfg = BackboneConfig { patch_size: 4, embed_dim: 8, depth: 2, num_heads: 2, mlp_ratio: 2, tap_layers: vec![1, 2], pos_grid: (2, 2) };
            let mut store = ParamStore::new();
            init_backbone(&cfg, &mut store, rng);
            let x = uniform(rng, &[1, 3, 12, 8], -1.0, 1.0);
            module_case(vec![named("x", x)], Vec::new(), store, move |t, s, v| {
                let f = backbone_forward(t, s, &cfg, v[0])?;
                concat_all(t, &f.taps)
            })
        }
        "spm" => {
            let cfg = small_adapter();
            let mut store = ParamStore::new();
            init_adapter(&cfg, &mut store, rng);
            let params = randomize(&mut store, "adapter.spm", rng, 0.5);
            let x = uniform(rng, &[1, 3, 16, 16], -1.0, 1.0);
            module_case(vec![named("x", x)], params, store, move |t, s, v| {
                let p = spm_forward(t, s, &cfg, v[0])?;
                concat_all(t, &p.maps)
            })
        }
        "deformable_attn" => {
            let cfg = small_adapter();
            let mut store = ParamStore::new();
            init_adapter(&cfg, &mut store, rng);
            let params = randomize(&mut store, "adapter.stages.0.", rng, 0.5);
            let fixed = vec![named("query", uniform(rng, &[2, 8, 4, 4], -1.0, 1.0)), named("value", uniform(rng, &[2, 8, 3, 5], -1.0, 1.0))];
            module_case(fixed, params, store, move |t, s, v| deformable_cross_attn(t, s, &cfg, "adapter.stages.0", v[0], v[1]))
        }
        "adapter_stage" => {
            let cfg = small_adapter();
            let mut store = ParamStore::new();
            init_adapter(&cfg, &mut store, rng);
            let params = randomize(&mut store, "adapter.stages.1.", rng, 0.5);
            let fixed = vec![
                named("c0", uniform(rng, &[1, 8, 4, 4], -1.0, 1.0)),
                named("c1", uniform(rng, &[1, 8, 2, 2], -1.0, 1.0)),
                named("f_vit", uniform(rng, &[1, 8, 2, 2], -1.0, 1.0)),
            ];
            module_case(fixed, params, store, move |t, s, v| {
                let state = PyramidState { maps: vec![v[0], v[1]] };
                let out = interaction_block(t, s, &cfg, 1, &state, v[2])?;
                concat_all(t, &out.maps)
            })
        }
        "fapm" | "fapm_baseline" => {
            let cfg = small_fapm();
            let mut store = ParamStore::new();
            let baseline = name == "fapm_baseline";
            if baseline {
                init_baseline(&cfg, &mut store, rng);
            } else {
                init_fapm(&cfg, &mut store, rng);
            }
            let params = randomize(&mut store, if baseline { "fapm_baseline." } else { "fapm." }, rng, 0.5);
            let fixed = vec![named("c0", uniform(rng, &[2, 8, 4, 4], -1.0, 1.0)), named("c1", uniform(rng, &[2, 8, 2, 2], -1.0, 1.0))];
            module_case(fixed, params, store, move |t, s, v| {
                let p = PyramidState { maps: vec![v[0], v[1]] };
                let outs = if baseline { baseline_forward(t, s, &cfg, &p)? } else { fapm_forward(t, s, &cfg, &p)? };
                concat_all(t, &outs)
            })
        }
        "decoder" => {
            let cfg = DecoderConfig { skip_dims: vec![4, 6], num_classes: 3, final_upsample: 2 };
            let mut store = ParamStore::new();
            init_decoder(&cfg, &mut store, rng);
            let params = randomize(&mut store, "decoder.", rng, 0.5);
            let fixed = vec![named("s0", uniform(rng, &[1, 4, 4, 4], -1.0, 1.0)), named("s1", uniform(rng, &[1, 6, 2, 2], -1.0, 1.0))];
            module_case(fixed, params, store, move |t, s, v| decoder_forward(t, s, &cfg, &[v[0], v[1]]))
        }
        "losses" => {
            let target = labels(rng, 2 * 4 * 4, 3);
            let logits = uniform(rng, &[2, 3, 4, 4], -2.0, 2.0);
            let batch = rng.random_bool(0.5);
            module_case(vec![named("logits", logits)], Vec::new(), ParamStore::new(), move |t, _, v| {
                if batch {
                    let d = dice_loss(t, v[0], &target, DICE_EPS, DiceReduction::Batch)?;
                    let c = t.cross_entropy(v[0], &target)?;
                    t.add(d, c)
                } else {
                    Ok(total_loss(t, v[0], &target)?.total)
                }
            })
        }
        _ => return None,
    };
    Some(case)
}

/// Runs the named case on the instance drawn from `seed`.
pub fn run_case(name: &str, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, f) = op_case(name, &mut rng)
        .or_else(|| module(name, &mut rng))
        .ok_or_else(|| Error::Config(format!("unknown gradcheck case `{name}`")))?;
    gradcheck(f, &inputs, opts)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradcheckReport,
}

/// Every case (or just `only`) on every seed in `seeds`.
pub fn run_suite(only: Option<&str>, seeds: &[u64]) -> Result<Vec<CaseResult>> {
    let names: Vec<&'static str> = match only {
        Some(n) => vec![all_cases().find(|&c| c == n).ok_or_else(|| Error::Config(format!("unknown gradcheck case `{n}`")))?],
        None => all_cases().collect(),
    };
    let mut out = Vec::new();
    for name in names {
        for &seed in seeds {
            let report = run_case(name, seed, &options_for(name, seed))?;
            out.push(CaseResult { name, seed, report });
        }
    }
    Ok(out)
}
