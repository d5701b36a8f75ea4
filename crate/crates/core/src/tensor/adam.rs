use super::{MlpParams, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// One bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero keep their value; their moments
/// still decay.
pub fn adam_step(params: &mut MlpParams, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    {
        let tensors = params.tensors();
        if grads.len() != tensors.len() || grads.iter().zip(&tensors).any(|(g, p)| !g.same_shape(p))
        {
            return Err(Error::Dimension(
                "gradients do not match parameter shapes".into(),
            ));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    params.step_count += 1;
    let t = params.step_count as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut ms = std::mem::take(&mut params.adam_m);
    let mut vs = std::mem::take(&mut params.adam_v);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(ms.iter_mut())
        .zip(vs.iter_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            if g != 0.0 {
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
    params.adam_m = ms;
    params.adam_v = vs;
    Ok(())
}
