use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{loss_and_gradient, window_loss, Mlp};
use crate::error::{Error, Result};
use crate::simkit::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableMask {
    All,
    BiasesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Collections per optimizer step.
    pub batch_size: usize,
    /// Model integration steps per rollout.
    pub horizon: usize,
    /// Data samples per model step; the model step is `dt * stride`.
    pub stride: usize,
    /// Spacing of the data samples.
    pub dt: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub mask: TrainableMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 300,
            batch_size: 10,
            horizon: 50,
            stride: 5,
            dt: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(10.0),
            seed: 0,
            mask: TrainableMask::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.epochs > 0
            && self.batch_size > 0
            && self.horizon > 0
            && self.stride > 0
            && self.dt > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid training config {self:?}")))
        }
    }

    /// Samples covered by one rollout window, endpoints included.
    pub fn window_span(&self) -> usize {
        self.horizon * self.stride + 1
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Best iterate by evaluation loss (possibly the input network).
    pub net: Mlp,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Epoch that produced `net`; 0 means no epoch improved on the input.
    pub best_epoch: usize,
    /// Evaluation loss after each epoch.
    pub history: Vec<f64>,
}

fn eval_offsets(len: usize, span: usize) -> Vec<usize> {
    let last = len - span;
    let step = ((span - 1) / 2).max(1);
    let mut offs: Vec<usize> = (0..=last).step_by(step).collect();
    if offs.is_empty() {
        offs.push(0);
    }
    offs
}

/// Deterministic evaluation loss: mean window loss over half-overlapping
/// rollout windows tiling every collection.
pub fn dataset_loss(net: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let span = cfg.window_span();
    if data.is_empty() || data.window_len() < span {
        return Err(Error::contract(format!(
            "collections of {} samples cannot hold a rollout window of {span}",
            data.window_len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in &data.collections {
        for off in eval_offsets(c.samples.len(), span) {
            total += window_loss(net, &c.samples[off..off + span], cfg.horizon, cfg.stride, cfg.dt)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Trains `net` on `data` and returns the best iterate. See [`train_with_history`].
pub fn train(net: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<Mlp> {
    Ok(train_with_history(net, data, cfg)?.net)
}

/// Adam over seeded shuffles of the collections. Each collection
/// contributes one rollout window per epoch, starting at a random offset.
/// The returned network is the iterate with the lowest [`dataset_loss`],
/// the input network included, so training never returns something worse
/// than it was given. With [`TrainableMask::BiasesOnly`] weight entries are
/// never written.
pub fn train_with_history(net: &Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let span = cfg.window_span();
    if data.collections.iter().any(|c| c.samples.len() < span) {
        return Err(Error::contract(format!(
            "rollout window of {span} samples exceeds collection length"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable: Vec<bool> = match cfg.mask {
        TrainableMask::All => vec![true; net.num_params()],
        TrainableMask::BiasesOnly => net.weight_mask().iter().map(|w| !w).collect(),
    };

    let initial_loss = dataset_loss(net, data, cfg)?;
    let mut best_loss = initial_loss;
    let mut best_epoch = 0;
    let mut best = net.clone();

    let mut cur = net.clone();
    let mut params = cur.params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut t = 0i32;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let windows: Vec<&[Vec<f64>]> = chunk
                .iter()
                .map(|&i| {
                    let s = &data.collections[i].samples;
                    let off = rng.random_range(0..=s.len() - span);
                    &s[off..off + span]
                })
                .collect();
            let lg = loss_and_gradient(&cur, &windows, cfg).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training {
                    batch: step,
                    message,
                },
                other => other,
            })?;
            let mut g = lg.gradient;
            if let Some(clip) = cfg.clip_norm {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
            t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..params.len() {
                if !trainable[i] {
                    continue;
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
            cur.set_params(&params);
            step += 1;
        }
        let eval = dataset_loss(&cur, data, cfg).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training {
                batch: step,
                message,
            },
            other => other,
        })?;
        history.push(eval);
        if eval < best_loss {
            best_loss = eval;
            best_epoch = epoch;
            best = cur.clone();
        }
        if epoch % 50 == 0 {
            debug!(epoch, eval, best_loss, "training progress");
        }
    }

    Ok(TrainReport {
        net: best,
        initial_loss,
        best_loss,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralfield::{rollout, Activation};
    use crate::simkit::{integrate_rk4, sample_collections};

    fn linear_decay_data() -> Dataset {
        let trajs: Vec<_> = [1.0, -0.8, 0.5, -0.2]
            .iter()
            .map(|z0| integrate_rk4(|_, z| vec![-z[0]], &[*z0], (0.0, 5.0), 0.01).unwrap())
            .collect();
        sample_collections(&trajs, 16, 101, 7).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 150,
            batch_size: 4,
            horizon: 20,
            stride: 5,
            dt: 0.01,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_linear_decay() {
        let data = linear_decay_data();
        let net = Mlp::random(&[1, 8, 1], Activation::Tanh, 1).unwrap();
        let trained = train(&net, &data, &cfg()).unwrap();
        let truth = integrate_rk4(|_, z| vec![-z[0]], &[0.7], (0.0, 5.0), 0.01).unwrap();
        let model = rollout(&trained, &[0.7], 500, 0.01).unwrap();
        let rmse = (truth
            .samples
            .iter()
            .zip(&model.samples)
            .map(|(a, b)| (a[0] - b[0]).powi(2))
            .sum::<f64>()
            / truth.len() as f64)
            .sqrt();
        assert!(rmse < 0.05, "held-out rmse {rmse}");
    }

    #[test]
    fn deterministic_given_seed() {
        let data = linear_decay_data();
        let net = Mlp::random(&[1, 4, 1], Activation::LeakyRelu { a: 0.2 }, 2).unwrap();
        let c = TrainConfig { epochs: 10, ..cfg() };
        let a = train(&net, &data, &c).unwrap();
        let b = train(&net, &data, &c).unwrap();
        let bits = |m: &Mlp| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn biases_only_keeps_weights_bitwise() {
        let data = linear_decay_data();
        let net = Mlp::random(&[1, 6, 1], Activation::Tanh, 4).unwrap();
        let c = TrainConfig {
            epochs: 20,
            mask: TrainableMask::BiasesOnly,
            ..cfg()
        };
        let r = train_with_history(&net, &data, &c).unwrap();
        for (a, b) in net.weights().zip(r.net.weights()) {
            let ab: Vec<u64> = a.as_slice().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert!(r.best_loss <= r.initial_loss);
    }

    #[test]
    fn rejects_bad_config() {
        let data = linear_decay_data();
        let net = Mlp::random(&[1, 2, 1], Activation::Tanh, 0).unwrap();
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        assert!(train(&net, &data, &c).is_err());
        let c = TrainConfig {
            horizon: 1000,
            ..cfg()
        };
        assert!(train(&net, &data, &c).is_err());
    }
}
