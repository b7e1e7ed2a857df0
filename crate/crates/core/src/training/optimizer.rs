//! Rectified Adam.

use crate::diffcore::{ParamStore, Scalar};
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RAdam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Per-parameter step counts; a parameter without a gradient is not stepped.
    t: Vec<u64>,
}

impl<T: Scalar> RAdam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.tensor.len()])
                .collect::<Vec<_>>()
        };
        RAdam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: vec![0; store.len()],
        }
    }

    pub fn steps(&self, param: usize) -> u64 {
        self.t[param]
    }

    /// Length of the approximated simple moving average after `t` steps.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// One update; `grads[i] = None` leaves parameter `i` and its state untouched.
    /// A non-finite gradient aborts before anything changes.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            bail!(
                Contract,
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            );
        }
        for (p, g) in store.params().iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.len() {
                    bail!(
                        Contract,
                        "gradient for {} has {} entries, expected {}",
                        p.name,
                        g.len(),
                        p.tensor.len()
                    );
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    bail!(
                        Numeric,
                        "non-finite gradient for parameter {} at index {i}",
                        p.name
                    );
                }
            }
        }
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (i, (p, g)) in store.params_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i];
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let rho = self.rho(t);
            let rect = if rho > 4.0 {
                Some(
                    ((rho - 4.0) * (rho - 2.0) * rho_inf
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                        .sqrt(),
                )
            } else {
                None
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = mi.as_f64() / bc1;
                let update = match rect {
                    Some(r) => r * m_hat / ((vi.as_f64() / bc2).sqrt() + self.eps),
                    None => m_hat,
                };
                *w = *w - T::of(lr * update);
            }
        }
        Ok(())
    }
}
