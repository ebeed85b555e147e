//! Critical-state classifier: a dropout network whose stochastic passes give
//! a danger probability together with its spread.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, Adam, Container, Gradients, Mlp};
use crate::seed;
use crate::sim::{DiscreteAction, EgoObservation, EnvAction, ENV_AGENTS, OBS_LEN};

pub const FEATURE_LEN: usize = DiscreteAction::COUNT * (1 + ENV_AGENTS) + OBS_LEN;
const DISCRETE_LEN: usize = DiscreteAction::COUNT * (1 + ENV_AGENTS);
pub const HCS_VERSION: u32 = 1;
const HCS_FILE: Container = Container {
    magic: *b"ASTH",
    version: HCS_VERSION,
};
/// Output index of the danger class.
pub const DANGER: usize = 1;

/// One-hot ego action, one-hot env actions in slot order, then the
/// flattened ego observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_LEN {
            return Err(Error::Usage(format!(
                "feature vector needs {FEATURE_LEN} entries, got {}",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Recovers the discrete part, if it is a valid one-hot layout.
    pub fn decode_actions(&self) -> Option<(DiscreteAction, EnvAction)> {
        let pick = |chunk: &[f64]| -> Option<DiscreteAction> {
            let ones: Vec<usize> = chunk
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == 1.0)
                .map(|(i, _)| i)
                .collect();
            let zeros = chunk.iter().filter(|v| **v == 0.0).count();
            match ones.as_slice() {
                [i] if zeros == chunk.len() - 1 => DiscreteAction::from_index(*i),
                _ => None,
            }
        };
        let mut chunks = self.0[..DISCRETE_LEN].chunks_exact(DiscreteAction::COUNT);
        let ego = pick(chunks.next()?)?;
        let mut env = [DiscreteAction::Idle; ENV_AGENTS];
        for (slot, chunk) in env.iter_mut().zip(chunks) {
            *slot = pick(chunk)?;
        }
        Some((ego, EnvAction(env)))
    }

    pub fn observation(&self) -> EgoObservation {
        EgoObservation::from_flat(&self.0[DISCRETE_LEN..]).expect("fixed layout")
    }
}

pub fn featurize(a_ego: DiscreteAction, a_env: &EnvAction, o_ego: &EgoObservation) -> FeatureVector {
    let mut v = vec![0.0; FEATURE_LEN];
    v[a_ego.index()] = 1.0;
    for (slot, a) in a_env.0.iter().enumerate() {
        v[DiscreteAction::COUNT * (1 + slot) + a.index()] = 1.0;
    }
    v[DISCRETE_LEN..].copy_from_slice(&o_ego.flatten());
    FeatureVector(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mu: f64,
    pub sigma2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HcsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for HcsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            dropout_p: 0.15,
            seed: 0,
        }
    }
}

impl HcsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_p > 0.0 && self.dropout_p <= 0.5) {
            return Err(Error::config("hcs.dropout_p", "must lie in (0, 0.5]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hcs.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("hcs.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcsNetwork {
    net: Mlp,
    pub dropout_p: f64,
}

fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

impl HcsNetwork {
    /// Freshly initialized `65 -> 64 -> 64 -> 2` network.
    pub fn new(dropout_p: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            net: Mlp::new(&[FEATURE_LEN, 64, 64, 2], &mut rng),
            dropout_p,
        }
    }

    pub fn from_mlp(net: Mlp, dropout_p: f64) -> Result<Self> {
        if net.input_dim() != FEATURE_LEN || net.output_dim() != 2 || net.layers.len() < 2 {
            return Err(Error::Integrity(format!(
                "classifier must map {FEATURE_LEN} inputs to 2 outputs, got {:?}",
                net.dims()
            )));
        }
        if !(dropout_p > 0.0 && dropout_p < 1.0) {
            return Err(Error::Integrity(format!("dropout rate {dropout_p} out of range")));
        }
        Ok(Self { net, dropout_p })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Class probabilities with dropout disabled.
    pub fn forward(&self, f: &FeatureVector) -> [f64; 2] {
        softmax2(&self.net.forward(f.as_slice()))
    }

    /// Class probabilities of one pass with dropout active.
    pub fn forward_stochastic(&self, f: &FeatureVector, rng: &mut seed::Rng) -> [f64; 2] {
        let trace = self.net.forward_trace(f.as_slice(), Some((self.dropout_p, rng)));
        softmax2(trace.output())
    }

    /// Monte Carlo dropout: `n` stochastic passes, returning the mean and
    /// population variance of the danger probability.
    pub fn predict(&self, f: &FeatureVector, n: usize, seed: u64) -> Prediction {
        assert!(n >= 2, "prediction needs at least two passes");
        let mut rng = seed::rng(seed);
        let layers = &self.net.layers;
        let last = layers.len() - 1;

        // The first layer sees no dropout on its input; compute it once.
        let mut first = Vec::with_capacity(layers[0].outputs);
        layers[0].forward_into(f.as_slice(), &mut first);
        first.iter_mut().for_each(|x| *x = x.max(0.0));

        let mut samples = Vec::with_capacity(n);
        let mut cur = Vec::new();
        let mut next = Vec::new();
        for _ in 0..n {
            cur.clone_from(&first);
            for (i, layer) in layers.iter().enumerate().skip(1) {
                let mask = dropout_mask(cur.len(), self.dropout_p, &mut rng);
                cur.iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
                layer.forward_into(&cur, &mut next);
                if i < last {
                    next.iter_mut().for_each(|x| *x = x.max(0.0));
                }
                std::mem::swap(&mut cur, &mut next);
            }
            samples.push(softmax2(&cur)[DANGER]);
        }
        let mu = samples.iter().sum::<f64>() / n as f64;
        let sigma2 = samples.iter().map(|p| (p - mu).powi(2)).sum::<f64>() / n as f64;
        Prediction {
            mu: mu.clamp(0.0, 1.0),
            sigma2,
            n,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        HCS_FILE.write(&mut bytes, &self.net, &[self.dropout_p])?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let err = |message: String| Error::ModelFile {
            path: path.to_path_buf(),
            message,
        };
        let (net, extra) = HCS_FILE.read("classifier", &bytes).map_err(err)?;
        let [dropout_p] = extra[..] else {
            return Err(err(format!("expected 1 header field, found {}", extra.len())));
        };
        if !net.all_finite() {
            return Err(err("non-finite weights".into()));
        }
        Self::from_mlp(net, dropout_p)
    }
}

/// Binary cross-entropy of the danger probability and its gradient with
/// respect to the two logits.
pub fn bce_with_logit_grad(logits: &[f64], label: u8) -> (f64, [f64; 2]) {
    let p = softmax2(logits)[DANGER];
    let l = f64::from(label);
    let eps = 1e-12;
    let loss = -(l * p.max(eps).ln() + (1.0 - l) * (1.0 - p).max(eps).ln());
    (loss, [l - p, p - l])
}

/// Mean BCE over a dataset with dropout disabled.
pub fn dataset_loss(net: &HcsNetwork, data: &[(FeatureVector, u8)]) -> f64 {
    data.iter()
        .map(|(f, l)| bce_with_logit_grad(&net.net.forward(f.as_slice()), *l).0)
        .sum::<f64>()
        / data.len().max(1) as f64
}

pub fn train(data: &[(FeatureVector, u8)], cfg: &HcsTrainConfig) -> Result<HcsNetwork> {
    train_with_history(data, cfg).map(|(net, _)| net)
}

/// Trains with mini-batch Adam on binary cross-entropy, dropout active.
/// Also returns the deterministic training loss after each epoch.
pub fn train_with_history(
    data: &[(FeatureVector, u8)],
    cfg: &HcsTrainConfig,
) -> Result<(HcsNetwork, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    if let Some((_, l)) = data.iter().find(|(_, l)| *l > 1) {
        return Err(Error::Usage(format!("label {l} is not 0 or 1")));
    }
    let mut net = HcsNetwork::new(cfg.dropout_p, seed::derive(cfg.seed, 0));
    let mut adam = Adam::new(&net.net, cfg.learning_rate);
    let mut grads = Gradients::zeros_like(&net.net);
    let mut rng = seed::rng(seed::derive(cfg.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let mut loss = 0.0;
            for &i in batch {
                let (f, label) = &data[i];
                let trace = net
                    .net
                    .forward_trace(f.as_slice(), Some((net.dropout_p, &mut rng)));
                let (l, d) = bce_with_logit_grad(trace.output(), *label);
                loss += l;
                net.net.backward(&trace, &d, &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite classifier loss at epoch {epoch}"
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut net.net, &grads);
        }
        history.push(dataset_loss(&net, data));
    }
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_error;
    use rand::Rng as _;

    fn random_feature(rng: &mut seed::Rng) -> FeatureVector {
        let ego = DiscreteAction::ALL[rng.gen_range(0..5)];
        let env = EnvAction::random(rng);
        let obs: Vec<f64> = (0..OBS_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        featurize(ego, &env, &EgoObservation::from_flat(&obs).unwrap())
    }

    /// Danger iff feature 50 (the first observation's dy entry) is positive.
    fn separable(n: usize, seed: u64) -> Vec<(FeatureVector, u8)> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let f = random_feature(&mut rng);
                let label = u8::from(f.as_slice()[50] > 0.0);
                (f, label)
            })
            .collect()
    }

    #[test]
    fn idle_layout() {
        let f = featurize(
            DiscreteAction::Idle,
            &EnvAction::idle(),
            &EgoObservation::zeros(),
        );
        let ones: Vec<usize> = f
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect();
        let mut expected = vec![1];
        expected.extend([1, 6, 11, 16, 21, 26, 31, 36].map(|k| 5 + k));
        assert_eq!(ones, expected);
        assert_eq!(f.as_slice().iter().filter(|v| **v != 0.0).count(), 9);
    }

    #[test]
    fn discrete_part_round_trips() {
        let mut rng = seed::rng(8);
        let mut seen = std::collections::HashSet::new();
        for ego in DiscreteAction::ALL {
            for _ in 0..100 {
                let env = EnvAction::random(&mut rng);
                let f = featurize(ego, &env, &EgoObservation::zeros());
                assert_eq!(f.decode_actions(), Some((ego, env)));
                let ones = f.as_slice()[..45].iter().filter(|v| **v == 1.0).count();
                assert_eq!(ones, 9);
                seen.insert((ego, env));
            }
        }
        // Distinct inputs give distinct vectors.
        let vectors: std::collections::HashSet<Vec<u64>> = seen
            .iter()
            .map(|(e, a)| {
                featurize(*e, a, &EgoObservation::zeros())
                    .as_slice()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        assert_eq!(vectors.len(), seen.len());
    }

    #[test]
    fn softmax_output_is_normalized() {
        let net = HcsNetwork::new(0.15, 3);
        let mut rng = seed::rng(4);
        for _ in 0..200 {
            let f = random_feature(&mut rng);
            for p in [net.forward(&f), net.forward_stochastic(&f, &mut rng)] {
                assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let mut net = HcsNetwork::new(0.15, 3);
        let last = net.net.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.biases.iter_mut().for_each(|w| *w = 0.0);
        let p = net.predict(&random_feature(&mut seed::rng(1)), 30, 5);
        assert_eq!(p.mu, 0.5);
        assert_eq!(p.sigma2, 0.0);
    }

    #[test]
    fn vanishing_dropout_matches_deterministic_pass() {
        let net = HcsNetwork::new(1e-9, 10);
        let f = random_feature(&mut seed::rng(2));
        let p = net.predict(&f, 30, 0);
        assert!(p.sigma2 < 1e-6);
        assert!((p.mu - net.forward(&f)[DANGER]).abs() < 1e-9);
    }

    #[test]
    fn predict_matches_traced_passes() {
        let net = HcsNetwork::new(0.3, 10);
        let f = random_feature(&mut seed::rng(2));
        let p = net.predict(&f, 4, 9);
        // Rebuild the same passes through the generic traced path.
        let mut rng = seed::rng(9);
        let samples: Vec<f64> = (0..4)
            .map(|_| net.forward_stochastic(&f, &mut rng)[DANGER])
            .collect();
        let mu = samples.iter().sum::<f64>() / 4.0;
        assert!((p.mu - mu).abs() < 1e-12);
    }

    #[test]
    fn predict_is_seeded() {
        let net = HcsNetwork::new(0.15, 10);
        let f = random_feature(&mut seed::rng(2));
        assert_eq!(net.predict(&f, 30, 4), net.predict(&f, 30, 4));
        assert_ne!(net.predict(&f, 30, 4), net.predict(&f, 30, 5));
    }

    #[test]
    fn variance_bounded_by_bernoulli() {
        let net = HcsNetwork::new(0.5, 11);
        let mut rng = seed::rng(3);
        for s in 0..300 {
            let p = net.predict(&random_feature(&mut rng), 10, s);
            assert!((0.0..=1.0).contains(&p.mu));
            assert!(p.sigma2 >= 0.0);
            assert!(p.sigma2 <= p.mu * (1.0 - p.mu) + 1e-12);
            assert!(p.sigma2 <= 0.25);
        }
    }

    #[test]
    fn mean_is_consistent_across_seeds() {
        let net = HcsNetwork::new(0.3, 12);
        let f = random_feature(&mut seed::rng(6));
        let reference = net.predict(&f, 20_000, 999).mu;
        let mus: Vec<f64> = (0..50).map(|s| net.predict(&f, 30, s).mu).collect();
        let mean = mus.iter().sum::<f64>() / 50.0;
        let sd = (mus.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
        let se = sd / 50f64.sqrt();
        assert!((mean - reference).abs() < 3.0 * se + 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = seed::rng(13);
        let net = Mlp::new(&[6, 4, 2], &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for label in [0u8, 1] {
            let trace = net.forward_trace(&x, None);
            let (_, d) = bce_with_logit_grad(trace.output(), label);
            let mut grads = Gradients::zeros_like(&net);
            net.backward(&trace, &d, &mut grads);
            let analytic: Vec<f64> = grads.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect();
            let h = 1e-6;
            for (i, a) in analytic.iter().enumerate() {
                let loss_at = |delta: f64| {
                    let mut n = net.clone();
                    *n.params_mut().nth(i).unwrap() += delta;
                    bce_with_logit_grad(&n.forward(&x), label).0
                };
                let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                assert!(relative_error(*a, numeric) < 1e-4, "param {i}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let data = separable(10, 0);
        let cfg = HcsTrainConfig {
            epochs: 0,
            ..HcsTrainConfig::default()
        };
        let net = train(&data, &cfg).unwrap();
        assert_eq!(net, HcsNetwork::new(cfg.dropout_p, seed::derive(cfg.seed, 0)));
    }

    #[test]
    fn learns_separable_rule() {
        let data = separable(2000, 1);
        let (train_set, held_out) = data.split_at(1600);
        let cfg = HcsTrainConfig {
            epochs: 20,
            ..HcsTrainConfig::default()
        };
        let net = train(train_set, &cfg).unwrap();
        let correct = held_out
            .iter()
            .filter(|(f, l)| u8::from(net.forward(f)[DANGER] > 0.5) == *l)
            .count();
        let acc = correct as f64 / held_out.len() as f64;
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn training_loss_non_increasing_at_small_rate() {
        let data = separable(2000, 2);
        let cfg = HcsTrainConfig {
            epochs: 15,
            learning_rate: 1e-3,
            ..HcsTrainConfig::default()
        };
        let (_, history) = train_with_history(&data, &cfg).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0], "loss rose: {history:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(train(&[], &HcsTrainConfig::default()).is_err());
        let bad = HcsTrainConfig {
            dropout_p: 0.7,
            ..HcsTrainConfig::default()
        };
        assert!(train(&separable(4, 0), &bad).is_err());
    }

    #[test]
    fn model_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hcs.model");
        let net = HcsNetwork::new(0.15, 21);
        net.save(&path).unwrap();
        let back = HcsNetwork::load(&path).unwrap();
        assert_eq!(back.dropout_p, 0.15);
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            let f = random_feature(&mut rng);
            assert_eq!(net.forward(&f), back.forward(&f));
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(HcsNetwork::load(&path), Err(Error::ModelFile { message, .. }) if message.contains("version")));
        std::fs::write(&path, b"").unwrap();
        assert!(HcsNetwork::load(&path).is_err());
    }
}
