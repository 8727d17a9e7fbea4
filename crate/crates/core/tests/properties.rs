//! Property tests for op-level and metric invariants.

use dino_unet::decoder::predict_mask;
use dino_unet::metrics::{dice_metric, hd95, Hd95Flag};
use dino_unet::ops::{bilinear_resize, bilinear_sample, conv2d, Conv2dSpec};
use dino_unet::trainer::poly_lr;
use dino_unet::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn mask(h: usize, w: usize, classes: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, h * w)
}

/// Boundary with 8-neighbourhood and out-of-image counted as outside.
fn boundary_points(m: &[usize], h: usize, w: usize, c: usize) -> Vec<(f64, f64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize] == c;
    let mut pts = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && (-1..=1).any(|dy| (-1..=1).any(|dx| !at(y + dy, x + dx))) {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|&(y, x)| q.iter().map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(x in tensor(vec![2, 5, 3], -30.0, 30.0), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let sa = tape.softmax(a, 1).unwrap();
        let b = tape.constant(x.map(|v| v + shift));
        let sb = tape.softmax(b, 1).unwrap();
        let (pa, pb) = (tape.value(sa).data(), tape.value(sb).data());
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|c| pa[o * 15 + c * 3 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        for (u, v) in pa.iter().zip(pb) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_is_linear_in_input(
        x in tensor(vec![1, 4, 6, 5], -1.0, 1.0),
        y in tensor(vec![1, 4, 6, 5], -1.0, 1.0),
        w in tensor(vec![6, 2, 3, 3], -1.0, 1.0),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        stride in 1usize..3,
    ) {
        let spec = Conv2dSpec::new(stride, 1, 2);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect();
        let lhs = conv2d(&Tensor::new(x.shape(), mix).unwrap(), &w, None, spec).unwrap();
        let (cx, cy) = (conv2d(&x, &w, None, spec).unwrap(), conv2d(&y, &w, None, spec).unwrap());
        for ((l, u), v) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * u + b * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_identity_kernel_is_bit_exact(x in tensor(vec![2, 3, 4, 7], -1e3, 1e3)) {
        let y = conv2d(&x, &Tensor::ones(&[3, 1, 1, 1]), None, Conv2dSpec::new(1, 0, 3)).unwrap();
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn resize_of_constant_is_constant(c in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let y = bilinear_resize(&Tensor::full(&[1, 2, h, w], c), oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, oh, ow][..]);
        prop_assert!(y.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn samples_stay_within_plane_range(v in tensor(vec![1, 1, 5, 6], -3.0, 3.0), pts in tensor(vec![1, 20, 2], -0.5, 1.5)) {
        let out = bilinear_sample(&v, &pts).unwrap();
        let lo = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|&s| s >= lo - 1e-12 && s <= hi + 1e-12));
    }

    #[test]
    fn layer_norm_standardizes(x in tensor(vec![3, 8], -10.0, 10.0)) {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[8]));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(xv, g, b, 1).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            // eps inside the normalizer pulls the variance just below 1
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn predict_mask_ignores_per_pixel_shift(logits in tensor(vec![2, 4, 3, 3], -4.0, 4.0), shifts in prop::collection::vec(-100.0f64..100.0, 18)) {
        let mut shifted = logits.clone();
        let d = shifted.data_mut();
        for b in 0..2 {
            for c in 0..4 {
                for p in 0..9 {
                    d[(b * 4 + c) * 9 + p] += shifts[b * 9 + p];
                }
            }
        }
        prop_assert_eq!(predict_mask(&logits), predict_mask(&shifted));
    }

    #[test]
    fn dice_metric_symmetric_and_bounded(a in mask(8, 8, 3), b in mask(8, 8, 3), c in 0usize..3) {
        let (ab, ba) = (dice_metric(&a, &b, c), dice_metric(&b, &a, c));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn hd95_symmetric_and_below_hausdorff(a in mask(10, 9, 2), b in mask(10, 9, 2)) {
        let (ab, ba) = (hd95(&a, &b, 10, 9, 1), hd95(&b, &a, 10, 9, 1));
        prop_assert_eq!(ab, ba);
        if ab.flag == Hd95Flag::Ok {
            let full = hausdorff(&boundary_points(&a, 10, 9, 1), &boundary_points(&b, 10, 9, 1));
            prop_assert!(ab.value <= full + 1e-12);
        }
    }

    #[test]
    fn poly_lr_non_increasing(total in 1usize..2000, lr0 in 1e-5f64..1.0, power in 0.1f64..3.0) {
        prop_assert_eq!(poly_lr(0, total, lr0, power), lr0);
        prop_assert_eq!(poly_lr(total, total, lr0, power), 0.0);
        let mut prev = lr0;
        for t in 0..=total {
            let lr = poly_lr(t, total, lr0, power);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

#[test]
fn shared_subexpression_sums_both_paths() {
    // f(x) = sum(x*x + sigmoid(x) * x), with x feeding three uses
    let x0 = Tensor::new(&[5], vec![-1.3, -0.2, 0.0, 0.7, 2.1]).unwrap();
    let f = |x: &Tensor| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sq = tape.mul(xv, xv).unwrap();
        let sg = tape.sigmoid(xv);
        let gated = tape.mul(sg, xv).unwrap();
        let s = tape.add(sq, gated).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        (tape.value(loss).item(), tape.grad(xv).cloned())
    };
    let (_, grad) = f(&x0);
    let grad = grad.unwrap();
    let eps = 1e-5;
    for i in 0..5 {
        let mut p = x0.clone();
        p.data_mut()[i] += eps;
        let mut m = x0.clone();
        m.data_mut()[i] -= eps;
        let num = (f(&p).0 - f(&m).0) / (2.0 * eps);
        assert!((num - grad.data()[i]).abs() < 1e-8, "coord {i}: {num} vs {}", grad.data()[i]);
    }
}
