use super::{Tape, TapeError, Tensor, Var};

/// Max relative error between reverse-mode and central-difference gradients.
///
/// `f` builds a scalar graph from one trainable leaf per entry of `params`.
/// The error for each coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], step: f64, f: F) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    grad_check_with(params, step, None, f)
}

/// Like [`grad_check`], probing at most `max_coords` evenly strided
/// coordinates per parameter array (all of them when `None`).
pub fn grad_check_with<F>(
    params: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    f: F,
) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.var(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.scalar(root);
        if !v.is_finite() {
            return Err(TapeError::NonFinite(format!("objective = {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.scalar(root).is_finite() {
        return Err(TapeError::NonFinite(format!("objective = {}", tape.scalar(root))));
    }
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[pi].len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = params[pi].as_slice_memory_order().expect("contiguous")[idx];
            let slot = |w: &mut Vec<Tensor>, v: f64| {
                w[pi].as_slice_memory_order_mut().expect("contiguous")[idx] = v;
            };
            slot(&mut work, orig + step);
            let fp = eval(&work)?;
            slot(&mut work, orig - step);
            let fm = eval(&work)?;
            slot(&mut work, orig);
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.as_slice_memory_order().expect("contiguous")[idx];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn square_at_three() {
        let err = grad_check(&[arr1(&[3.0]).into_dyn()], 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_error() {
        let r = grad_check(&[arr1(&[0.0]).into_dyn()], 1e-5, |t, v| {
            let s = t.scale(v[0], f64::INFINITY);
            Ok(t.sum(s))
        });
        assert!(matches!(r, Err(TapeError::NonFinite(_))));
    }
}
