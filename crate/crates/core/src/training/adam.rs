use crate::encoder::Parameters;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment buffers mirroring the parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Global L2 norm over every gradient leaf.
pub fn global_norm(grads: &Parameters) -> f64 {
    grads
        .leaves()
        .iter()
        .flat_map(|a| a.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update in place. Nothing is modified when a
/// gradient is non-finite.
pub fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let shapes = |p: &Parameters| p.leaves().iter().map(|a| a.shape.clone()).collect::<Vec<_>>();
    if shapes(params) != shapes(grads) || shapes(params) != shapes(&state.m) || shapes(params) != shapes(&state.v) {
        return Err(Error::Contract("adam_step: parameter, gradient and moment shapes differ".into()));
    }
    for (name, g) in grads.named() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name} at optimizer step {}",
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let leaves = params
        .leaves_mut()
        .into_iter()
        .zip(grads.leaves())
        .zip(state.m.leaves_mut())
        .zip(state.v.leaves_mut());
    for (((p, g), m), v) in leaves {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
            v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, ModelConfig};

    fn small() -> Parameters {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            hidden: 4,
            ffn: 4,
            vocab_size: 6,
            max_len: 4,
            n_classes: 2,
            dropout: 0.0,
            seed: 1,
        };
        init_params(&cfg).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = small();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &before.zeros_like(), &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = small();
        let before = p.clone();
        let grads = p.map(|a| crate::numerics::Array::filled(&a.shape, 1.0));
        let mut st = OptimizerState::new(&p);
        let lr = 1e-3;
        adam_step(&mut p, &grads, &mut st, lr).unwrap();
        let expected = -lr / (1.0 + EPSILON);
        for (a, b) in p.leaves().iter().zip(before.leaves()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!(((x - y) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = small();
        let before = p.clone();
        let mut grads = p.zeros_like();
        grads.classifier_bias.data[0] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        assert!(matches!(adam_step(&mut p, &grads, &mut st, 1e-3), Err(Error::Numeric(_))));
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }
}
