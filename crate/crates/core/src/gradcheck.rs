//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding compare by absolute difference.
    pub floor: f64,
    /// Check at most this many coordinates per input (seeded subset).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Largest tolerated share of coordinates classified as kinks; one
    /// near-zero relu input upstream can touch many parameters at once.
    pub max_kink_fraction: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { eps: 1e-4, tol: 1e-4, floor: 1e-6, max_coords: None, seed: 0, max_kink_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates whose `eps` stencil straddles a non-differentiable point
    /// (relu, bilinear cell edge). They are excluded from `max_rel_err`.
    pub kinks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
    pub max_kink_fraction: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.inputs.iter().map(|r| r.kinks).sum()
    }

    pub fn coords_checked(&self) -> usize {
        self.inputs.iter().map(|r| r.coords_checked).sum()
    }

    pub fn passed(&self) -> bool {
        let kink_share = self.kinks() as f64 / self.coords_checked().max(1) as f64;
        self.inputs.iter().all(|r| r.max_rel_err <= self.tol) && kink_share <= self.max_kink_fraction
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic and central-difference gradients of `f` w.r.t. each
/// named input. Non-scalar outputs are reduced to `sum(out * r)` with a
/// fixed random `r`, so every output element contributes.
///
/// A coordinate failing at `eps` is classified as a kink only if its two
/// one-sided differences disagree beyond `tol` and the central difference
/// at `eps / 100` matches the analytic value; anything else counts as a
/// genuine mismatch.
pub fn gradcheck<F>(f: F, inputs: &[(String, Tensor)], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut projection: Option<Tensor> = None;

    let mut eval = |values: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).is_scalar() {
            out
        } else {
            let r = projection
                .get_or_insert_with(|| uniform(&mut rng, tape.value(out).shape(), -1.0, 1.0))
                .clone();
            let r = tape.constant(r);
            let p = tape.mul(out, r)?;
            tape.sum(p)
        };
        let value = tape.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v).cloned()).collect()))
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (f0, analytic) = eval(&values, true)?;
    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut pick, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let zero = Tensor::zeros(t.shape());
        let grad = analytic[i].as_ref().unwrap_or(&zero);
        let (mut max_rel, mut max_abs, mut kinks) = (0.0f64, 0.0f64, 0usize);
        for &c in &coords {
            let a = grad.data()[c];
            let mut probe = |h: f64| -> Result<(f64, f64)> {
                let orig = values[i].data()[c];
                values[i].data_mut()[c] = orig + h;
                let (fp, _) = eval(&values, false)?;
                values[i].data_mut()[c] = orig - h;
                let (fm, _) = eval(&values, false)?;
                values[i].data_mut()[c] = orig;
                Ok((fp, fm))
            };
            let (fp, fm) = probe(opts.eps)?;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let err = rel_err(a, numeric, opts.floor);
            if err > opts.tol {
                let (fwd, bwd) = ((fp - f0) / opts.eps, (f0 - fm) / opts.eps);
                if rel_err(fwd, bwd, opts.floor) > opts.tol {
                    let h = opts.eps * 1e-2;
                    let (fp2, fm2) = probe(h)?;
                    if rel_err(a, (fp2 - fm2) / (2.0 * h), opts.floor.max(1e-4)) <= opts.tol {
                        kinks += 1;
                        continue;
                    }
                }
            }
            max_rel = max_rel.max(err);
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(InputReport { name: name.clone(), coords_checked: coords.len(), max_rel_err: max_rel, max_abs_err: max_abs, kinks });
    }
    Ok(GradcheckReport { inputs: reports, tol: opts.tol, max_kink_fraction: opts.max_kink_fraction })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}
