use super::{TapeError, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates and step counter for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect(),
        }
    }
}

/// One Adam update with decoupled weight decay.
///
/// Decay is applied first as `p <- p - lr * weight_decay * p`, then the
/// bias-corrected Adam step.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TapeError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TapeError::Shape {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TapeError::Shape {
                op: "adam_step",
                detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TapeError::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *p -= lr * weight_decay * *p;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![arr1(&[1.0, -2.0]).into_dyn()];
        let g = vec![arr1(&[0.0, 0.0]).into_dyn()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 1e-3, 0.0).unwrap();
        assert_eq!(p[0], arr1(&[1.0, -2.0]).into_dyn());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![arr1(&[0.0]).into_dyn()];
        let g = vec![arr1(&[5.0]).into_dyn()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        assert!((p[0][[0]] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = vec![arr1(&[2.0]).into_dyn()];
        let g = vec![arr1(&[0.0]).into_dyn()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 1e-3, 1e-4).unwrap();
        assert!((p[0][[0]] - 2.0 * (1.0 - 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = vec![arr1(&[0.0]).into_dyn()];
        let g = vec![arr1(&[f64::NAN]).into_dyn()];
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut s, 1e-3, 0.0).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![arr1(&[0.3, -0.7]).into_dyn()];
            let g = vec![arr1(&[0.1, 2.0]).into_dyn()];
            let mut s = AdamState::new(&p);
            for _ in 0..5 {
                adam_step(&mut p, &g, &mut s, 1e-2, 1e-4).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
