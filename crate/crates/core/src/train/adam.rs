//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::net::checkpoint::Container;
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of updates applied so far.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Moments stored as `m.<name>` and `v.<name>` layers.
    pub fn to_container(&self, names: &[String]) -> Container {
        let mut layers = Vec::with_capacity(2 * names.len());
        for (n, t) in names.iter().zip(&self.m) {
            layers.push((format!("m.{n}"), t.clone()));
        }
        for (n, t) in names.iter().zip(&self.v) {
            layers.push((format!("v.{n}"), t.clone()));
        }
        Container {
            layers,
            metadata: vec![
                ("step".into(), self.step.to_string()),
                ("beta1".into(), self.beta1.to_string()),
                ("beta2".into(), self.beta2.to_string()),
                ("eps".into(), self.eps.to_string()),
            ],
        }
    }

    /// Restores moments for the named parameters, checking each shape.
    pub fn from_container(c: &Container, names: &[String], params: &[&Tensor<f32>]) -> Result<Self> {
        let get = |prefix: &str, name: &str, p: &Tensor<f32>| -> Result<Tensor<f32>> {
            let key = format!("{prefix}.{name}");
            let t = c
                .layer(&key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {key}: expected shape {:?}, found {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (n, p) in names.iter().zip(params) {
            m.push(get("m", n, p)?);
            v.push(get("v", n, p)?);
        }
        let num = |key: &str| -> Result<f64> {
            c.meta(key)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks numeric {key}")))
        };
        let step = c
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks step".into()))?;
        Ok(AdamState {
            m,
            v,
            step,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
        })
    }
}

/// One Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            "parameter count",
            state.m.len(),
            (params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam_step", format!("parameter {i}"), p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let (nb1, nb2) = ((1.0 - state.beta1) as f32, (1.0 - state.beta2) as f32);
    let c1 = (1.0 - state.beta1.powi(t)) as f32;
    let c2 = (1.0 - state.beta2.powi(t)) as f32;
    let (lr, eps) = (lr as f32, state.eps as f32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gr), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + nb1 * gr;
            *vi = b2 * *vi + nb2 * gr * gr;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
