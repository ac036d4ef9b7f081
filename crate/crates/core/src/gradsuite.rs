//! Named finite-difference checks covering every differentiable op, the
//! fusion module, both losses and the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{cgra_loss, cross_correlation, selfcl_loss_a, selfcl_loss_v, total_loss, LossConfig};
use crate::model::{affine, amfm_forward, encode, BoundAmfm, BoundLinear, GateFn};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};
use crate::train::cross_entropy;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 10;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst relative error over all seeds and inputs.
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Uniform entries in ±[0.1, 1), kept away from ReLU's kink.
fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn positive_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).expect("shape matches")
}

fn worst(errs: Vec<f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn project<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(&y.tape().constant(w.reshape(&y.shape())?))?.sum())
}

fn check_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, w) = (rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2]), rand_t(rng, &[6]));
    Ok(worst(grad_check_many(|_, v| project(v[0].matmul(&v[1])?, &w), &[a, b], EPS)?))
}

fn check_elementwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, w) = (rand_t(rng, &[2, 3]), rand_t(rng, &[2, 3]), rand_t(rng, &[6]));
    Ok(worst(grad_check_many(
        |_, v| {
            let y = v[0].add(&v[1])?.mul(&v[0].sub(&v[1])?)?.scale(0.7).offset(0.3).square();
            project(y, &w)
        },
        &[a, b],
        EPS,
    )?))
}

fn check_div(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, w) = (rand_t(rng, &[2, 3]), positive_t(rng, &[2, 3]), rand_t(rng, &[6]));
    Ok(worst(grad_check_many(|_, v| project(v[0].div(&v[1])?, &w), &[a, b], EPS)?))
}

fn check_scalar_broadcast(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, s, w) = (rand_t(rng, &[2, 3]), positive_t(rng, &[1]), rand_t(rng, &[6]));
    Ok(worst(grad_check_many(
        |_, v| project(v[0].mul(&v[1])?.add(&v[1])?.div(&v[1].offset(1.0))?, &w),
        &[a, s],
        EPS,
    )?))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, w) = (rand_t(rng, &[3, 3]), rand_t(rng, &[9]));
    Ok(worst(grad_check_many(|_, v| project(v[0].relu(), &w), &[a], EPS)?))
}

fn check_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, w) = (rand_t(rng, &[3, 3]), rand_t(rng, &[9]));
    Ok(worst(grad_check_many(|_, v| project(v[0].scale(3.0).sigmoid(), &w), &[a], EPS)?))
}

fn check_exp_log(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, p, w) = (rand_t(rng, &[2, 3]), positive_t(rng, &[2, 3]), rand_t(rng, &[6]));
    Ok(worst(grad_check_many(|_, v| project(v[0].exp().add(&v[1].log()?)?, &w), &[a, p], EPS)?))
}

fn check_shape_ops(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, w) = (rand_t(rng, &[2, 3]), rand_t(rng, &[2, 2]), rand_t(rng, &[4]));
    Ok(worst(grad_check_many(
        |_, v| {
            let y = v[0].concat_cols(&v[1])?.slice_cols(1, 5)?.transpose()?.reshape(&[2, 4])?;
            project(y.slice_cols(0, 2)?, &w)
        },
        &[a, b],
        EPS,
    )?))
}

fn check_reductions(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, w0, w1) = (rand_t(rng, &[3, 4]), rand_t(rng, &[4]), rand_t(rng, &[3]));
    Ok(worst(grad_check_many(
        |_, v| {
            let s0 = project(v[0].sum_axis(0)?, &w0)?;
            let s1 = project(v[0].sum_axis(1)?, &w1)?;
            s0.add(&s1)?.add(&v[0].sum().square())
        },
        &[a],
        EPS,
    )?))
}

fn check_norms(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, w0, w1) = (rand_t(rng, &[3, 4]), rand_t(rng, &[4]), rand_t(rng, &[3]));
    Ok(worst(grad_check_many(
        |_, v| {
            let n0 = project(v[0].l2_norm_axis(0)?, &w0)?;
            let n1 = project(v[0].l2_norm_axis(1)?, &w1)?;
            n0.add(&n1)?.add(&v[0].l2_norm()?)
        },
        &[a],
        EPS,
    )?))
}

fn check_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = vec![
        rand_t(rng, &[4, 5]),
        rand_t(rng, &[6, 5]),
        rand_t(rng, &[6]),
        rand_t(rng, &[3, 6]),
        rand_t(rng, &[3]),
    ];
    let w = rand_t(rng, &[12]);
    Ok(worst(grad_check_many(
        |_, v| {
            let layers = [
                BoundLinear { weight: v[1], bias: v[2] },
                BoundLinear { weight: v[3], bias: v[4] },
            ];
            project(encode(v[0], &layers)?, &w)
        },
        &inputs,
        EPS,
    )?))
}

fn amfm_inputs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<Tensor> {
    vec![
        rand_t(rng, &[b, c]),
        rand_t(rng, &[b, c]),
        rand_t(rng, &[c, 2 * c]),
        rand_t(rng, &[c]),
        rand_t(rng, &[c, c]),
        rand_t(rng, &[c]),
    ]
}

fn amfm_check(rng: &mut ChaCha8Rng, gate: GateFn) -> Result<f64> {
    let inputs = amfm_inputs(rng, 3, 4);
    let (wv, wa) = (rand_t(rng, &[12]), rand_t(rng, &[12]));
    Ok(worst(grad_check_many(
        |_, v| {
            let p = BoundAmfm { w_s: v[2], b_s: v[3], w_e: v[4], b_e: v[5] };
            let (fv, fa) = amfm_forward(v[0], v[1], &p, gate)?;
            project(fv, &wv)?.add(&project(fa, &wa)?)
        },
        &inputs,
        EPS,
    )?))
}

fn check_amfm_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    amfm_check(rng, GateFn::Relu)
}

fn check_amfm_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    amfm_check(rng, GateFn::Sigmoid)
}

fn check_cross_correlation(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, w) = (rand_t(rng, &[5, 3]), rand_t(rng, &[5, 3]), rand_t(rng, &[9]));
    Ok(worst(grad_check_many(|_, v| project(cross_correlation(v[0], v[1], false)?, &w), &[a, b], EPS)?))
}

fn check_cgra(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (rand_t(rng, &[5, 4]), rand_t(rng, &[5, 4]));
    Ok(worst(grad_check_many(
        |_, v| cgra_loss(cross_correlation(v[0], v[1], false)?, 0.005),
        &[a, b],
        EPS,
    )?))
}

fn check_selfcl_v(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (rand_t(rng, &[4, 3]), rand_t(rng, &[4, 3]));
    Ok(worst(grad_check_many(|_, v| selfcl_loss_v(v[0], v[1], 0.5), &[a, b], EPS)?))
}

fn check_selfcl_a(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b) = (rand_t(rng, &[4, 3]), rand_t(rng, &[4, 3]));
    Ok(worst(grad_check_many(|_, v| selfcl_loss_a(v[0], v[1], 0.5), &[a, b], EPS)?))
}

/// The training objective end to end: two encoders, fusion and the weighted
/// loss on a 4-sample batch, differentiated w.r.t. every parameter.
fn check_end_to_end(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, vin, ain, h, c) = (4, 5, 6, 4, 3);
    let mut inputs = vec![rand_t(rng, &[b, vin]), rand_t(rng, &[b, ain])];
    for (i, o) in [(vin, h), (h, c), (ain, h), (h, c)] {
        inputs.push(rand_t(rng, &[o, i]));
        inputs.push(rand_t(rng, &[o]));
    }
    inputs.extend(amfm_inputs(rng, 1, c).into_iter().skip(2));
    let cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
    Ok(worst(grad_check_many(
        |_, v| {
            let vis = [BoundLinear { weight: v[2], bias: v[3] }, BoundLinear { weight: v[4], bias: v[5] }];
            let aud = [BoundLinear { weight: v[6], bias: v[7] }, BoundLinear { weight: v[8], bias: v[9] }];
            let p = BoundAmfm { w_s: v[10], b_s: v[11], w_e: v[12], b_e: v[13] };
            let (fv, fa) = amfm_forward(encode(v[0], &vis)?, encode(v[1], &aud)?, &p, GateFn::Sigmoid)?;
            total_loss(fv, fa, &cfg)
        },
        &inputs,
        EPS,
    )?))
}

fn check_probe_head(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (x, w, b) = (rand_t(rng, &[5, 4]), rand_t(rng, &[3, 4]), rand_t(rng, &[3]));
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    Ok(worst(grad_check_many(|_, v| cross_entropy(affine(v[0], v[1], v[2])?, &labels), &[x, w, b], EPS)?))
}

/// Deliberately wrong gradient: the second factor is detached, so the tape
/// reports half the true derivative of `x²`.
fn check_broken_fixture(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, w) = (rand_t(rng, &[2, 3]), rand_t(rng, &[6]));
    Ok(worst(grad_check_many(
        |tape: &Tape, v| {
            let detached = tape.constant((*v[0].value()).clone());
            project(v[0].mul(&detached)?, &w)
        },
        &[a],
        EPS,
    )?))
}

pub const CHECKS: &[(&str, CheckFn)] = &[
    ("matmul", check_matmul),
    ("add_sub_mul_scale_offset_square", check_elementwise),
    ("div", check_div),
    ("scalar_broadcast", check_scalar_broadcast),
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("exp_log", check_exp_log),
    ("concat_slice_transpose_reshape", check_shape_ops),
    ("sum_sum_axis", check_reductions),
    ("l2_norm_l2_norm_axis", check_norms),
    ("encoder", check_encoder),
    ("amfm_relu", check_amfm_relu),
    ("amfm_sigmoid", check_amfm_sigmoid),
    ("cross_correlation", check_cross_correlation),
    ("cgra_loss", check_cgra),
    ("selfcl_loss_v", check_selfcl_v),
    ("selfcl_loss_a", check_selfcl_a),
    ("probe_cross_entropy", check_probe_head),
    ("total_loss_end_to_end", check_end_to_end),
];

/// Runs every check on `n_seeds` random draws. With `inject_fault`, a
/// deliberately broken check is appended so callers can confirm the
/// detector fires.
pub fn run_suite(n_seeds: u64, inject_fault: bool) -> Result<Vec<CheckResult>> {
    let broken: &[(&str, CheckFn)] = &[("broken_gradient_fixture", check_broken_fixture)];
    let extra = if inject_fault { broken } else { &[] };
    CHECKS
        .iter()
        .chain(extra)
        .enumerate()
        .map(|(k, &(name, f))| {
            let mut max_rel_error: f64 = 0.0;
            for seed in 0..n_seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                max_rel_error = max_rel_error.max(f(&mut rng)?);
            }
            Ok(CheckResult { name, max_rel_error })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_broad() {
        let results = run_suite(DEFAULT_SEEDS, false).unwrap();
        assert!(results.len() >= 12);
        for r in &results {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let results = run_suite(2, true).unwrap();
        let bad = results.last().unwrap();
        assert_eq!(bad.name, "broken_gradient_fixture");
        assert!(!bad.passed());
        assert!(results[..results.len() - 1].iter().all(CheckResult::passed));
    }
}
