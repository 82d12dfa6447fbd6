use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay, applied to rank ≥ 2 tensors only (biases and
/// layer-norm gains are not decayed).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Tensor<T>], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Training("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr_t = T::lit(lr);
        for (i, p) in params.iter_mut().enumerate() {
            if grads[i].shape() != p.shape() {
                return Err(Error::shape("adamw", format!("grad {:?} vs param {:?}", grads[i].shape(), p.shape())));
            }
            let shrink = if p.rank() >= 2 { one - lr_t * T::lit(self.weight_decay) } else { one };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w = *w * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as a little-endian f32 blob: every first moment, then every second.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for t in self.m.iter().chain(&self.v) {
            for x in t.data() {
                buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path, params: &[Tensor<T>], weight_decay: f64, steps_taken: u64) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut opt = Self::new(params, weight_decay);
        let total: usize = params.iter().map(Tensor::len).sum::<usize>() * 2;
        if bytes.len() != 4 * total {
            return Err(Error::Training(format!(
                "{}: expected {} bytes of optimizer state, found {}",
                path.display(),
                4 * total,
                bytes.len()
            )));
        }
        let mut vals = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for x in t.data_mut() {
                *x = vals.next().expect("length checked");
            }
        }
        opt.step = steps_taken;
        Ok(opt)
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = T::lit(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= f;
            }
        }
    }
    norm
}
