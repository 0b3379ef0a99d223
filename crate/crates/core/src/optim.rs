//! Adam over a [`ModelParams`] tree.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let g: Vec<&[f64]> = grads
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.data.as_slice())
            .collect();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g[k][i];
                if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                    continue;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::TaskMode;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = EncoderConfig {
            d: 4,
            layers: 1,
            vocab_buckets: 4,
            window: 1,
            max_n: 3,
        };
        let mut p = ModelParams::init(cfg, TaskMode::Aope, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.detector.cls_b.data[0] = 3.0;
        g.detector.cls_b.data[1] = -0.2;
        let mut opt = Adam::new(&p, 0.01);
        opt.step(&mut p, &g);
        assert!((before.detector.cls_b.data[0] - p.detector.cls_b.data[0] - 0.01).abs() < 1e-9);
        assert!((p.detector.cls_b.data[1] - before.detector.cls_b.data[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.encoder, before.encoder);
    }
}
