//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of `f` at `x` and its
/// central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Like [`grad_check`] for a function of several inputs; returns one maximum
/// relative error per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("gradcheck eps {eps} outside (0, 1e-2]")));
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "gradcheck function must be scalar-valued, got shape {:?}",
                out.shape()
            )));
        }
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut probe = inputs.to_vec();
    let mut worst = Vec::with_capacity(inputs.len());
    for (which, grad) in analytic.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for i in 0..probe[which].numel() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            max_err = max_err.max(relative_error(grad.data()[i], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector(&(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
    }

    #[test]
    fn sum_is_exact() {
        let x = random(7, 1, -2.0, 2.0);
        let err = grad_check(|_, x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn mul_gradient_is_other_operand() {
        for seed in 0..10 {
            let x = random(8, seed, -1.0, 1.0);
            let y = random(8, seed + 100, -1.0, 1.0);
            let errs = grad_check_many(
                |_, v| Ok(v[0].mul(&v[1])?.sum()),
                &[x.clone(), y.clone()],
                1e-5,
            )
            .unwrap();
            assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
        }
    }

    #[test]
    fn detached_path_is_detected() {
        // x ⊙ stop_grad(x): true derivative 2x, tape sees only x
        let x = random(5, 4, 0.5, 1.5);
        let err = grad_check(
            |t, x| {
                let frozen = t.constant((*x.value()).clone());
                Ok(x.mul(&frozen)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = random(3, 0, -1.0, 1.0);
        assert!(grad_check(|_, x| Ok(x.sum()), &x, 0.0).is_err());
        assert!(grad_check(|_, x| Ok(x.sum()), &x, 0.1).is_err());
        assert!(matches!(
            grad_check(|_, x| Ok(x.relu()), &x, 1e-5),
            Err(Error::Contract(_))
        ));
    }
}
