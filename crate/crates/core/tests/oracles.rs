mod common;

use common::*;
use dino_unet::adapter::{deformable_cross_attn, init_adapter};
use dino_unet::config::{AdapterConfig, FapmConfig, ModelConfig};
use dino_unet::fapm::{fapm_forward, init_fapm};
use dino_unet::metrics::hd95;
use dino_unet::ops::{bilinear_resize, bilinear_sample, conv2d, Conv2dSpec};
use dino_unet::params::ParamStore;
use dino_unet::trainer::{sliding_window_infer, Model};
use dino_unet::adapter::PyramidState;
use dino_unet::{Tape, Tensor};
use rand::Rng;

const TOL: f64 = 1e-6;

#[test]
fn conv2d_matches_loops() {
    let mut r = rng(11);
    for (stride, pad, groups, k) in [(1, 0, 1, 3), (1, 1, 1, 3), (2, 1, 1, 3), (2, 0, 2, 2), (1, 1, 4, 3), (1, 0, 1, 1), (3, 2, 2, 5)] {
        for _ in 0..3 {
            let (cin, cout) = (4, 8);
            let x = rand_tensor(&mut r, &[2, cin, 9, 7], 1.0);
            let w = rand_tensor(&mut r, &[cout, cin / groups, k, k], 1.0);
            let b = rand_tensor(&mut r, &[cout], 1.0);
            let got = conv2d(&x, &w, Some(&b), Conv2dSpec::new(stride, pad, groups)).unwrap();
            let want = conv2d_oracle(&x, &w, Some(&b), stride, pad, groups);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_rel_diff(&want) <= TOL, "s{stride} p{pad} g{groups} k{k}");
        }
    }
}

#[test]
fn bilinear_sample_matches_tent_sum() {
    let mut r = rng(12);
    for _ in 0..5 {
        let v = rand_tensor(&mut r, &[2, 3, 5, 7], 1.0);
        let n = 40;
        let pts: Vec<f64> = (0..2 * n * 2).map(|_| r.random_range(-0.2..1.2)).collect();
        let pts = Tensor::new(&[2, n, 2], pts).unwrap();
        let got = bilinear_sample(&v, &pts).unwrap();
        assert!(got.max_rel_diff(&sample_oracle(&v, &pts)) <= TOL);
    }
}

#[test]
fn bilinear_resize_matches_tent_sum() {
    let mut r = rng(13);
    for (oh, ow) in [(10, 14), (2, 3), (5, 7), (1, 1), (16, 4)] {
        let x = rand_tensor(&mut r, &[2, 3, 5, 7], 1.0);
        let got = bilinear_resize(&x, oh, ow).unwrap();
        assert!(got.max_rel_diff(&resize_oracle(&x, oh, ow)) <= TOL, "{oh}x{ow}");
    }
}

#[test]
fn deformable_attention_matches_loops() {
    for (seed, heads, k) in [(0, 1, 4), (1, 2, 3), (2, 4, 2)] {
        let cfg = AdapterConfig { channels: 8, num_heads: heads, num_points: k, ..Default::default() };
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        init_adapter(&cfg, &mut store, &mut r);
        randomize(&mut store, "adapter.stages.0.", &mut r, 0.6);
        let q = rand_tensor(&mut r, &[2, 8, 4, 6], 1.0);
        let v = rand_tensor(&mut r, &[2, 8, 3, 5], 1.0);
        let mut tape = Tape::new();
        let (qv, vv) = (tape.constant(q.clone()), tape.constant(v.clone()));
        let y = deformable_cross_attn(&mut tape, &store, &cfg, "adapter.stages.0", qv, vv).unwrap();
        let want = deformable_oracle(&store, &cfg, "adapter.stages.0", &q, &v);
        assert!(tape.value(y).max_rel_diff(&want) <= TOL, "seed {seed}");
    }
}

#[test]
fn fapm_matches_straight_line() {
    for (seed, rank, dw_gelu) in [(0, 4, false), (1, 6, true), (2, 5, true)] {
        let cfg = FapmConfig { rank, in_dim: 8, out_dims: vec![4, 6, 10], se_reduction: 4, dw_kernel: 3, dw_gelu };
        let mut r = rng(200 + seed);
        let mut store = ParamStore::new();
        init_fapm(&cfg, &mut store, &mut r);
        randomize(&mut store, "fapm.", &mut r, 0.5);
        let maps: Vec<Tensor> = [8, 4, 2].iter().map(|&s| rand_tensor(&mut r, &[2, 8, s, s], 1.0)).collect();
        let mut tape = Tape::new();
        let pyr = PyramidState { maps: maps.iter().map(|m| tape.constant(m.clone())).collect() };
        let outs = fapm_forward(&mut tape, &store, &cfg, &pyr).unwrap();
        for (i, (o, m)) in outs.iter().zip(&maps).enumerate() {
            let want = fapm_scale_oracle(&store, &cfg, i, m);
            assert!(tape.value(*o).max_rel_diff(&want) <= TOL, "seed {seed} scale {i}");
        }
    }
}

#[test]
fn sliding_window_matches_materialized_tiles() {
    let model = Model::build(ModelConfig::default()).unwrap();
    let mut r = rng(300);
    let image = rand_tensor(&mut r, &[1, 3, 64, 64], 1.0);
    for overlap in [0.5, 0.25, 0.0] {
        let got = sliding_window_infer(&model, &image, 32, overlap).unwrap();
        let want = sliding_oracle(&model, &image, 32, overlap);
        assert!(got.max_rel_diff(&want) <= TOL, "overlap {overlap}");
    }
}

#[test]
fn hd95_matches_all_pairs() {
    let mut r = rng(400);
    let mut nontrivial = 0;
    for _ in 0..50 {
        let a = random_mask(&mut r, 16, 16, 3);
        let b = random_mask(&mut r, 16, 16, 3);
        for class in 1..3 {
            let got = hd95(&a, &b, 16, 16, class).value;
            let want = hd95_oracle(&a, &b, 16, 16, class);
            assert_eq!(got.to_bits(), want.to_bits(), "class {class}: {got} vs {want}");
            nontrivial += usize::from(want > 0.0);
        }
    }
    assert!(nontrivial > 30);
}
