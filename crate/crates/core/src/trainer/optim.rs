//! Adam with decoupled weight decay.

use crate::model::{ModelParams, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state over a [`ModelParams`] layout. Tensors flagged frozen
/// are never read or written, and their moment buffers stay empty.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    frozen: Vec<bool>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    /// `frozen[i]` and `decay[i]` follow the manifest order of `params`.
    pub fn new(
        params: &ModelParams<T>,
        config: AdamWConfig,
        frozen: Vec<bool>,
        decay: Vec<bool>,
    ) -> Self {
        let tensors = params.tensors();
        assert_eq!(tensors.len(), frozen.len());
        assert_eq!(tensors.len(), decay.len());
        let zeros = |i: usize, t: &Vec<T>| {
            if frozen[i] {
                Vec::new()
            } else {
                vec![T::zero(); t.len()]
            }
        };
        AdamW {
            config,
            step: 0,
            first: tensors
                .iter()
                .enumerate()
                .map(|(i, t)| zeros(i, t))
                .collect(),
            second: tensors
                .iter()
                .enumerate()
                .map(|(i, t)| zeros(i, t))
                .collect(),
            frozen,
            decay,
        }
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.first[index], &self.second[index])
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) {
        self.step += 1;
        for (i, (p, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .enumerate()
        {
            if self.frozen[i] {
                continue;
            }
            adamw_update(
                p,
                g,
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                lr,
                &self.config,
                self.decay[i],
            );
        }
    }
}

/// One decoupled-weight-decay Adam step on a flat tensor; `step` counts
/// from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    c: &AdamWConfig,
    decay: bool,
) {
    let t = step as i32;
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let eps = T::lit(c.eps);
    let lr_t = T::lit(lr);
    let shrink = T::lit(1.0 - lr * c.weight_decay);
    let decay = decay && c.weight_decay != 0.0;
    for j in 0..p.len() {
        let gj = g[j];
        if decay {
            p[j] *= shrink;
        }
        m[j] = b1 * m[j] + (one - b1) * gj;
        v[j] = b2 * v[j] + (one - b2) * gj * gj;
        let mhat = m[j] / bc1;
        let vhat = v[j] / bc2;
        p[j] -= lr_t * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_parameter_hand_example() {
        // Two steps with lr 0.1, wd 0.5, betas (0.9, 0.999), eps 1e-8.
        let c = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let mut p = [1.0f64, -2.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        adamw_update(&mut p, &[0.5, -1.0], &mut m, &mut v, 1, 0.1, &c, true);
        // Step 1: p *= 0.95; mhat = g, vhat = g^2, so the Adam term is
        // g / (|g| + eps).
        let want1 = [
            1.0 * 0.95 - 0.1 * 0.5 / (0.5 + 1e-8),
            -2.0 * 0.95 + 0.1 * 1.0 / (1.0 + 1e-8),
        ];
        assert!((p[0] - want1[0]).abs() < 1e-12 && (p[1] - want1[1]).abs() < 1e-12);
        adamw_update(&mut p, &[0.25, 0.5], &mut m, &mut v, 2, 0.1, &c, true);
        let m2: [f64; 2] = [0.9 * 0.05 + 0.1 * 0.25, 0.9 * -0.1 + 0.1 * 0.5];
        let v2: [f64; 2] = [
            0.999 * 0.001 * 0.25 + 0.001 * 0.0625,
            0.999 * 0.001 * 1.0 + 0.001 * 0.25,
        ];
        for j in 0..2 {
            let mhat = m2[j] / (1.0 - 0.81);
            let vhat = v2[j] / (1.0 - 0.998001);
            let want = want1[j] * 0.95 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p[j] - want).abs() < 1e-12, "{j}: {} vs {want}", p[j]);
        }
    }

    #[test]
    fn no_decay_flag() {
        let c = AdamWConfig::default();
        let mut p = [3.0f64];
        adamw_update(&mut p, &[0.0], &mut [0.0], &mut [0.0], 1, 0.1, &c, false);
        assert_eq!(p[0], 3.0);
    }
}
