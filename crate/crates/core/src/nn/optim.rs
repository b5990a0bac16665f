use super::{NnError, Tensor};
use crate::scalar::Scalar;

/// SGD-with-momentum state; one velocity tensor per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub learning_rate: T,
    pub momentum: T,
    velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(learning_rate: T, momentum: T, param_shapes: &[Vec<usize>]) -> Self {
        Self {
            learning_rate,
            momentum,
            velocities: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }
}

/// One update: v <- momentum * v + g; p <- p - lr * v.
///
/// The whole step aborts (no parameter touched) when any gradient is
/// non-finite or shapes disagree.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(NnError::InvalidTensor(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.shape() != g.shape() {
            return Err(NnError::InvalidTensor(format!(
                "sgd_step: param {i} shape {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient(format!("param #{i}")));
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocities.iter_mut())
    {
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data().iter())
            .zip(v.data_mut().iter_mut())
        {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_step(p0: f64, g0: f64, lr: f64, mu: f64) -> f64 {
        let mut p = Tensor::scalar_value(p0);
        let g = Tensor::scalar_value(g0);
        let mut state = OptimizerState::new(lr, mu, &[vec![1]]);
        sgd_step(&mut [&mut p], &[&g], &mut state).unwrap();
        p.item().unwrap()
    }

    #[test]
    fn plain_step_matches_closed_form() {
        assert!((run_step(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        assert_eq!(run_step(0.37, 0.0, 0.5, 0.9), 0.37);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = Tensor::scalar_value(0.0f64);
        let g = Tensor::scalar_value(1.0f64);
        let mut state = OptimizerState::new(0.1, 0.5, &[vec![1]]);
        sgd_step(&mut [&mut p], &[&g], &mut state).unwrap();
        sgd_step(&mut [&mut p], &[&g], &mut state).unwrap();
        // v1 = 1, p1 = -0.1; v2 = 1.5, p2 = -0.25
        assert!((p.item().unwrap() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut p0 = Tensor::scalar_value(1.0f64);
        let mut p1 = Tensor::scalar_value(2.0f64);
        let good = Tensor::scalar_value(0.5f64);
        let bad = Tensor::scalar_value(f64::NAN);
        let mut state = OptimizerState::new(0.1, 0.0, &[vec![1], vec![1]]);
        let r = sgd_step(&mut [&mut p0, &mut p1], &[&good, &bad], &mut state);
        assert!(matches!(r, Err(NnError::NonFiniteGradient(_))));
        assert_eq!(p0.item().unwrap(), 1.0);
        assert_eq!(p1.item().unwrap(), 2.0);
    }

    #[test]
    fn quadratic_bowl_descends_three_orders() {
        // f(p) = 0.5 |p - target|^2, gradient p - target
        let target = [0.3f64, -1.2, 0.7];
        let mut p = Tensor::new(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        // overdamped setting: strictly monotone descent on a quadratic
        let mut state = OptimizerState::new(0.1, 0.3, &[vec![3]]);
        let loss = |p: &Tensor<f64>| -> f64 {
            p.data()
                .iter()
                .zip(target.iter())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let start = loss(&p);
        let mut prev = start;
        for _ in 0..100 {
            let g = Tensor::new(
                &[3],
                p.data()
                    .iter()
                    .zip(target.iter())
                    .map(|(a, b)| a - b)
                    .collect(),
            )
            .unwrap();
            sgd_step(&mut [&mut p], &[&g], &mut state).unwrap();
            let now = loss(&p);
            assert!(now < prev, "descent must be strict: {now} vs {prev}");
            prev = now;
        }
        assert!(prev < start * 1e-3, "final {prev} vs start {start}");
    }
}
