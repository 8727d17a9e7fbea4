//! Training objective: soft Dice plus cross-entropy.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

pub const DICE_EPS: f64 = 1e-5;

/// How soft-Dice statistics are pooled before averaging over classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DiceReduction {
    /// Per sample and class, then averaged over both.
    #[default]
    PerSample,
    /// Sums run jointly over the batch, averaged over classes.
    Batch,
}

/// `1 - mean_c (2 sum p_c g_c + eps) / (sum p_c + sum g_c + eps)` with
/// `p = softmax(logits)`; the background class is included in the mean.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &[usize], eps: f64, reduction: DiceReduction) -> Result<Var> {
    tape.soft_dice_loss(logits, target, eps, reduction == DiceReduction::PerSample)
}

pub fn ce_loss(tape: &mut Tape, logits: Var, target: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, target)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub dice: Var,
    pub ce: Var,
    pub total: Var,
}

pub fn total_loss(tape: &mut Tape, logits: Var, target: &[usize]) -> Result<LossTerms> {
    let dice = dice_loss(tape, logits, target, DICE_EPS, DiceReduction::default())?;
    let ce = ce_loss(tape, logits, target)?;
    let total = tape.add(dice, ce)?;
    Ok(LossTerms { dice, ce, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn peaked(target: &[usize], c: usize, margin: f64) -> Tensor {
        let hw = target.len();
        let mut d = vec![0.0; c * hw];
        for (px, &t) in target.iter().enumerate() {
            d[t * hw + px] = margin;
        }
        Tensor::new(&[1, c, 1, hw], d).unwrap()
    }

    #[test]
    fn saturated_logits_give_near_zero_dice_loss() {
        let target = [0, 1, 1, 2, 0, 2, 1, 0];
        let mut tape = Tape::new();
        let x = tape.leaf(peaked(&target, 3, 20.0));
        let l = dice_loss(&mut tape, x, &target, DICE_EPS, DiceReduction::PerSample).unwrap();
        assert!(tape.value(l).item() <= 1e-3);
    }

    #[test]
    fn uniform_binary_half_foreground_closed_form() {
        let target = [1, 1, 0, 0, 1, 0, 1, 0];
        let (omega, g) = (8.0, 4.0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 4]));
        let l = dice_loss(&mut tape, x, &target, DICE_EPS, DiceReduction::PerSample).unwrap();
        let d_fg = (2.0 * 0.5 * g + DICE_EPS) / (0.5 * omega + g + DICE_EPS);
        let d_bg = (2.0 * 0.5 * (omega - g) + DICE_EPS) / (0.5 * omega + (omega - g) + DICE_EPS);
        let expect = 1.0 - 0.5 * (d_fg + d_bg);
        assert!((tape.value(l).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn ce_closed_forms() {
        let target = [0, 2, 1, 3, 3, 0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 2, 3]));
        let l = ce_loss(&mut tape, x, &target).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let m = 3.0;
        let y = tape.leaf(peaked(&target, 4, m));
        let l = ce_loss(&mut tape, y, &target).unwrap();
        assert!((tape.value(l).item() - (1.0 + 3.0 * (-m).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_sum() {
        let target = [0, 1, 1, 0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 2, 2], vec![0.3, -1.0, 2.0, 0.1, 0.7, 0.2, -0.4, 1.1]).unwrap());
        let t = total_loss(&mut tape, x, &target).unwrap();
        let sum = tape.value(t.dice).item() + tape.value(t.ce).item();
        assert_eq!(tape.value(t.total).item().to_bits(), sum.to_bits());
    }

    #[test]
    fn batch_and_per_sample_agree_for_one_sample() {
        let target = [0, 1, 1, 0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 2, 2], vec![0.3, -1.0, 2.0, 0.1, 0.7, 0.2, -0.4, 1.1]).unwrap());
        let a = dice_loss(&mut tape, x, &target, DICE_EPS, DiceReduction::PerSample).unwrap();
        let b = dice_loss(&mut tape, x, &target, DICE_EPS, DiceReduction::Batch).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }
}
