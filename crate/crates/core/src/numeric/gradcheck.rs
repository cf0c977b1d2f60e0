use super::tape::{GradTape, ParamId, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients with central finite differences.
///
/// `loss_fn` receives a fresh tape and one parameter handle per entry of
/// `params` (registered as `ParamId(i)`) and returns the scalar loss node.
/// Returns the worst relative error over every parameter element.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let eval = |ps: &[Tensor]| -> Result<(f64, GradTape, Var)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(ParamId(i), p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        Ok((value, tape, loss))
    };

    let (_, tape, loss) = eval(params)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = &grads[&ParamId(pi)];
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let (up, _, _) = eval(&work)?;
            work[pi].data_mut()[e] = orig - epsilon;
            let (down, _, _) = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(tape: &mut GradTape, vars: &[Var]) -> Result<Var> {
        // ‖W‖² = trace(W Wᵀ), summed from diagonal cells.
        let gram = tape.matmul_bt(vars[0], vars[0])?;
        let r = tape.value(gram).rows();
        let mut total = None;
        for i in 0..r {
            let row = tape.slice_rows(gram, i, 1)?;
            let cell = tape.slice_cols(row, i, 1)?;
            total = Some(match total {
                None => cell,
                Some(t) => tape.add(t, cell)?,
            });
        }
        Ok(total.expect("at least one row"))
    }

    #[test]
    fn quadratic_loss_checks_tightly() {
        let w = Tensor::matrix(3, 2, vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]).unwrap();
        let err = grad_check(sum_of_squares, &[w], 1e-5).unwrap();
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = |tape: &mut GradTape, _vars: &[Var]| Ok(tape.constant(Tensor::scalar(1.5)));
        assert_eq!(grad_check(f, &[w.clone()], 1e-4).unwrap(), 0.0);

        let mut tape = GradTape::new();
        tape.param(ParamId(0), w);
        let c = tape.constant(Tensor::scalar(1.5));
        let g = tape.backward(c).unwrap();
        assert!(g[&ParamId(0)].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let f = |tape: &mut GradTape, vars: &[Var]| Ok(tape.scale(vars[0], 1.0));
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 1e-2).is_err());
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let f = |tape: &mut GradTape, _vars: &[Var]| Ok(tape.constant(Tensor::scalar(f64::NAN)));
        assert!(matches!(grad_check(f, &[Tensor::scalar(1.0)], 1e-4), Err(Error::NonFinite(_))));
    }
}
