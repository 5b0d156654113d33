//! Gradient verification by central finite differences.
//!
//! The numeric side re-evaluates the *forward* computation at perturbed
//! inputs and never touches the recorded backward rules, so it is an
//! independent oracle for them. Per-op checks run in the `f64` shadow
//! domain where the difference quotient is accurate enough for tight
//! tolerances; whole-model checks run at `f32` with a correspondingly
//! looser threshold.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;

use super::{BatchNormState, BnMode, Element, Tensor};

/// Result of checking one scalar-valued function against finite
/// differences.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    /// Largest relative error observed.
    pub max_rel_err: f64,
    /// (param index, coordinate, analytic, numeric) of the worst pair.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl OpCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(floor);
    (a - n).abs() / denom
}

/// Compares analytic gradients of `f` w.r.t. every coordinate of every
/// entry in `params` against central differences with the given `step`.
///
/// `params` must be leaves created with [`Tensor::param`]. `floor` bounds
/// the relative-error denominator away from zero so coordinates with a
/// true zero gradient compare cleanly.
pub fn check_scalar_fn<E, F>(
    name: &str,
    f: F,
    params: &[Tensor<E>],
    step: f64,
    floor: f64,
) -> Result<OpCheck>
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f(params)?;
    loss.backward()?;
    let analytic: Vec<Vec<E>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let eval = |vals: &[Vec<E>]| -> Result<f64> {
        let plain: Vec<Tensor<E>> = vals
            .iter()
            .zip(params)
            .map(|(v, p)| Tensor::from_vec(p.shape().to_vec(), v.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&plain)?.item()?.to_f64())
    };

    let mut vals: Vec<Vec<E>> = params.iter().map(|p| p.data().to_vec()).collect();
    let mut out = OpCheck { name: name.to_string(), checked: 0, max_rel_err: 0.0, worst: None };
    for pi in 0..params.len() {
        for ci in 0..vals[pi].len() {
            let orig = vals[pi][ci];
            vals[pi][ci] = orig + E::from_f64(step);
            let up = eval(&vals)?;
            vals[pi][ci] = orig - E::from_f64(step);
            let down = eval(&vals)?;
            vals[pi][ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][ci].to_f64();
            let e = rel_err(a, numeric, floor);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    Ok(out)
}

fn rand_vec(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values bounded away from zero (for kinked ops like relu).
fn rand_vec_gapped(rng: &mut ChaCha20Rng, n: usize, gap: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(gap..hi)
        })
        .collect()
}

fn param(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape.to_vec(), rand_vec(rng, n, lo, hi)).expect("shape/data agree")
}

/// Random-looking values whose pairwise gaps all exceed 0.03 (a shuffled
/// uniform grid), so argmax decisions survive the FD perturbation.
fn separated_vals(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    ranks.into_iter().map(|r| r as f64 * 0.037 - 1.0).collect()
}

/// Runs the finite-difference oracle over every differentiable op at `f64`
/// on small random tensors. Same seed, same outcome.
pub fn standard_op_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let step = 1e-3;
    let floor = 1e-6;
    let mut checks = Vec::new();

    // conv2d, stride 1 with padding
    {
        let x = param(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w = param(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = param(&mut rng, &[3], -0.5, 0.5);
        let probe = Tensor::from_vec(vec![1, 3, 5, 5], rand_vec(&mut rng, 75, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "conv2d s1 p1",
            |p| p[0].conv2d(&p[1], &p[2], 1, 1)?.mul(&probe)?.sum_all(),
            &[x, w, b],
            step,
            floor,
        )?);
    }

    // conv2d, stride 2 without padding
    {
        let x = param(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
        let w = param(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = param(&mut rng, &[2], -0.5, 0.5);
        let probe = Tensor::from_vec(vec![2, 2, 2, 2], rand_vec(&mut rng, 16, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "conv2d s2 p0",
            |p| p[0].conv2d(&p[1], &p[2], 2, 0)?.mul(&probe)?.sum_all(),
            &[x, w, b],
            step,
            floor,
        )?);
    }

    // conv_transpose2d, stride 2
    {
        let x = param(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let w = param(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let b = param(&mut rng, &[3], -0.5, 0.5);
        let oh = super::ops::conv_transpose2d_output_dim(3, 4, 2, 1).unwrap();
        let probe = Tensor::from_vec(
            vec![1, 3, oh, oh],
            rand_vec(&mut rng, 3 * oh * oh, -1.0, 1.0),
        )?;
        checks.push(check_scalar_fn(
            "conv_transpose2d s2 p1",
            |p| p[0].conv_transpose2d(&p[1], &p[2], 2, 1)?.mul(&probe)?.sum_all(),
            &[x, w, b],
            step,
            floor,
        )?);
    }

    // max_pool2d: values drawn from a shuffled grid so every pair is
    // separated by more than the finite-difference step and no
    // perturbation can flip an argmax
    {
        let x = Tensor::param(vec![2, 2, 6, 6], separated_vals(&mut rng, 2 * 2 * 6 * 6))?;
        let probe = Tensor::from_vec(vec![2, 2, 3, 3], rand_vec(&mut rng, 36, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "max_pool2d 2x2 s2",
            |p| p[0].max_pool2d(2, 2, 0)?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
    }

    // max_pool2d with padding
    {
        let x = Tensor::param(vec![1, 2, 8, 8], separated_vals(&mut rng, 2 * 8 * 8))?;
        let probe = Tensor::from_vec(vec![1, 2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "max_pool2d 3x3 s2 p1",
            |p| p[0].max_pool2d(3, 2, 1)?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
    }

    // batch_norm2d, train mode (gradient through the batch statistics)
    {
        let x = param(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let gamma = param(&mut rng, &[3], 0.5, 1.5);
        let beta = param(&mut rng, &[3], -0.5, 0.5);
        let probe = Tensor::from_vec(vec![2, 3, 4, 4], rand_vec(&mut rng, 96, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "batch_norm2d train",
            |p| {
                let mut state = BatchNormState::new(3);
                p[0].batch_norm2d(&p[1], &p[2], &mut state, BnMode::Train)?
                    .mul(&probe)?
                    .sum_all()
            },
            &[x, gamma, beta],
            step,
            floor,
        )?);
    }

    // batch_norm2d, eval mode (fixed running stats)
    {
        let x = param(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let gamma = param(&mut rng, &[3], 0.5, 1.5);
        let beta = param(&mut rng, &[3], -0.5, 0.5);
        let probe = Tensor::from_vec(vec![2, 3, 4, 4], rand_vec(&mut rng, 96, -1.0, 1.0))?;
        let mut state = BatchNormState::new(3);
        state.running_mean = rand_vec(&mut rng, 3, -0.3, 0.3);
        state.running_var = rand_vec(&mut rng, 3, 0.5, 1.5);
        checks.push(check_scalar_fn(
            "batch_norm2d eval",
            |p| {
                let mut s = state.clone();
                p[0].batch_norm2d(&p[1], &p[2], &mut s, BnMode::Eval)?
                    .mul(&probe)?
                    .sum_all()
            },
            &[x, gamma, beta],
            step,
            floor,
        )?);
    }

    // relu (inputs bounded away from the kink)
    {
        let x = Tensor::param(vec![2, 2, 4, 4], rand_vec_gapped(&mut rng, 64, 0.05, 1.0))?;
        let probe = Tensor::from_vec(vec![2, 2, 4, 4], rand_vec(&mut rng, 64, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "relu",
            |p| p[0].relu()?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
    }

    // sigmoid and a relu(sigmoid(x)) composition
    {
        let x = param(&mut rng, &[2, 2, 4, 4], -2.0, 2.0);
        let probe = Tensor::from_vec(vec![2, 2, 4, 4], rand_vec(&mut rng, 64, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "sigmoid",
            |p| p[0].sigmoid()?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
        let x = param(&mut rng, &[1, 2, 3, 3], -2.0, 2.0);
        let probe = Tensor::from_vec(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "relu(sigmoid(x))",
            |p| p[0].sigmoid()?.relu()?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
    }

    // add / mul
    {
        let a = param(&mut rng, &[3, 4], -1.0, 1.0);
        let b = param(&mut rng, &[3, 4], -1.0, 1.0);
        let probe = Tensor::from_vec(vec![3, 4], rand_vec(&mut rng, 12, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "add",
            |p| p[0].add(&p[1])?.mul(&probe)?.sum_all(),
            &[a.clone(), b.clone()],
            step,
            floor,
        )?);
        checks.push(check_scalar_fn(
            "mul",
            |p| p[0].mul(&p[1])?.mul(&probe)?.sum_all(),
            &[a, b],
            step,
            floor,
        )?);
    }

    // scale_channels
    {
        let x = param(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let s = param(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
        let probe = Tensor::from_vec(vec![2, 3, 4, 4], rand_vec(&mut rng, 96, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "scale_channels",
            |p| p[0].scale_channels(&p[1])?.mul(&probe)?.sum_all(),
            &[x, s],
            step,
            floor,
        )?);
    }

    // global_avg_pool
    {
        let x = param(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
        let probe = Tensor::from_vec(vec![2, 3, 1, 1], rand_vec(&mut rng, 6, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "global_avg_pool",
            |p| p[0].global_avg_pool()?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
    }

    // concat_channels
    {
        let a = param(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = param(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let probe = Tensor::from_vec(vec![2, 5, 3, 3], rand_vec(&mut rng, 90, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "concat_channels",
            |p| Tensor::concat_channels(&p[0], &p[1])?.mul(&probe)?.sum_all(),
            &[a, b],
            step,
            floor,
        )?);
    }

    // smooth_l1, mixing coordinates on both sides of |d| = 1 but away
    // from the switch point
    {
        let target = Tensor::from_vec(vec![8], vec![0.0; 8])?;
        let mut vals = rand_vec_gapped(&mut rng, 8, 0.1, 0.8);
        vals[0] = 1.7; // quadratic and linear branches both exercised
        vals[1] = -2.3;
        let pred = Tensor::param(vec![8], vals)?;
        checks.push(check_scalar_fn(
            "smooth_l1",
            |p| p[0].smooth_l1(&target),
            &[pred],
            step,
            floor,
        )?);
    }

    // pixel_shuffle
    {
        let x = param(&mut rng, &[1, 8, 2, 3], -1.0, 1.0);
        let probe = Tensor::from_vec(vec![1, 2, 4, 6], rand_vec(&mut rng, 48, -1.0, 1.0))?;
        checks.push(check_scalar_fn(
            "pixel_shuffle",
            |p| p[0].pixel_shuffle(2)?.mul(&probe)?.sum_all(),
            &[x],
            step,
            floor,
        )?);
    }

    Ok(checks)
}
