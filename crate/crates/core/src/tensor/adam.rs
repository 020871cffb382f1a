use super::Tensor;
use crate::error::{Error, Result};

/// Moment buffers and hyperparameters for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], lr: f64) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(&shapes, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), state.first.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[4], |i| i as f64 - 1.5)];
        let before = p.clone();
        let mut st = AdamState::for_params(&p, 0.1);
        for _ in 0..10 {
            adam_step(&mut p, &[Tensor::zeros(&[4])], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = vec![Tensor::zeros(&[2])];
        let g = Tensor::new(&[2], vec![0.7, -3.0]).unwrap();
        let mut st = AdamState::for_params(&p, 1e-2);
        for _ in 0..100 {
            adam_step(&mut p, std::slice::from_ref(&g), &mut st).unwrap();
        }
        assert!(p[0].data()[0] < 0.0 && p[0].data()[1] > 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(p) = ½‖p − p*‖², minimum at p* by construction.
        let target = Tensor::new(&[3], vec![0.3, -0.2, 0.1]).unwrap();
        let mut p = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::for_params(&p, 1e-2);
        for _ in 0..500 {
            let g = p[0].sub(&target).unwrap();
            adam_step(&mut p, &[g], &mut st).unwrap();
        }
        assert!(p[0].sub(&target).unwrap().norm() < 1e-3);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::for_params(&p, 1e-2);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).is_err());
    }
}
