use crate::diffgraph::{ParamStore, Scalar};
use crate::error::{Error, Result};

use super::TrainConfig;

/// Adam moment buffers, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub first: Vec<Vec<F>>,
    pub second: Vec<Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = |p: &crate::diffgraph::Parameter<F>| vec![F::zero(); p.tensor.numel()];
        OptimizerState { step: 0, first: params.iter().map(zeros).collect(), second: params.iter().map(zeros).collect() }
    }
}

/// One bias-corrected Adam update from the accumulated gradient buffers,
/// which are cleared. Parameters without a gradient buffer keep their
/// value and moments. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_step<F: Scalar>(params: &mut ParamStore<F>, state: &mut OptimizerState<F>, cfg: &TrainConfig) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Config("optimizer state does not match the parameter set".into()));
    }
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at index {i}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (F::lit(b1), F::lit(b2));
    let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
    let (c1f, c2f) = (F::lit(c1), F::lit(c2));
    let (lr, eps) = (F::lit(cfg.learning_rate), F::lit(cfg.eps));

    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let Some(grad) = p.tensor.take_grad() else { continue };
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1f * m[i] + one_b1 * g;
            v[i] = b2f * v[i] + one_b2 * g * g;
            let m_hat = m[i] / c1f;
            let v_hat = v[i] / c2f;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
