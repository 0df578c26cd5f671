//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct OptimState {
    /// first-moment accumulators, one per parameter
    pub m: Vec<Tensor>,
    /// second-moment accumulators, one per parameter
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(param_shapes: &[Vec<usize>], lr: f64, weight_decay: f64) -> Self {
        OptimState {
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW step over a parameter list. Decoupled decay is applied
/// multiplicatively before the moment update.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if state.lr <= 0.0 {
        return Err(Error::contract("adamw_step: lr must be positive"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(format!(
                "adamw_step: param {:?} vs grad {:?} vs moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        let decay = 1.0 - state.lr * state.weight_decay;
        let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let pd = p.data_mut();
            pd[i] *= decay;
            let md = m.data_mut();
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            let vd = v.data_mut();
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.assert_finite("adamw_step parameter update")?;
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_keeps_params() {
        let mut p = vec![Tensor::new(vec![2], vec![1.5, -2.5]).unwrap()];
        let g = vec![Tensor::zeros(vec![2])];
        let mut st = OptimState::new(&[vec![2]], 1e-3, 0.0);
        adamw_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_with_decay_scales() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -4.0]).unwrap()];
        let g = vec![Tensor::zeros(vec![2])];
        let (lr, wd) = (0.01, 0.1);
        let mut st = OptimState::new(&[vec![2]], lr, wd);
        adamw_step(&mut p, &g, &mut st).unwrap();
        let k = 1.0 - lr * wd;
        assert!((p[0].data()[0] - 1.0 * k).abs() < 1e-15);
        assert!((p[0].data()[1] - -4.0 * k).abs() < 1e-15);
    }

    #[test]
    fn scalar_step_matches_hand_formula() {
        let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9, 0.999, 1e-8);
        let (p0, g0) = (2.0, 0.5);
        let mut p = vec![Tensor::new(vec![1], vec![p0]).unwrap()];
        let g = vec![Tensor::new(vec![1], vec![g0]).unwrap()];
        let mut st = OptimState::new(&[vec![1]], lr, wd);
        adamw_step(&mut p, &g, &mut st).unwrap();

        let pd = p0 * (1.0 - lr * wd);
        let m = (1.0 - b1) * g0;
        let v: f64 = (1.0 - b2) * g0 * g0;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expect = pd - lr * mhat / (vhat.sqrt() + eps);
        assert!((p[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_state() {
        let run = || {
            let mut p = vec![Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()];
            let g = vec![Tensor::new(vec![3], vec![-0.3, 0.9, 0.0]).unwrap()];
            let mut st = OptimState::new(&[vec![3]], 0.05, 1e-4);
            adamw_step(&mut p, &g, &mut st).unwrap();
            adamw_step(&mut p, &g, &mut st).unwrap();
            p[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(vec![2])];
        let g = vec![Tensor::zeros(vec![3])];
        let mut st = OptimState::new(&[vec![2]], 0.1, 0.0);
        assert!(matches!(adamw_step(&mut p, &g, &mut st), Err(Error::Dim(_))));
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut g = vec![
            Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), // norm 5
        ];
        let pre = clip_global_norm(&mut g, 0.1);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = g[0].data().iter().map(|x| x * x).sum::<f64>();
        assert!(post.sqrt() <= 0.1 + 1e-9);
        // below the cap nothing changes
        let mut g2 = vec![Tensor::new(vec![2], vec![0.03, 0.04]).unwrap()];
        clip_global_norm(&mut g2, 0.1);
        assert_eq!(g2[0].data(), &[0.03, 0.04]);
    }
}
