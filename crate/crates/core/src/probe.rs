//! Linear probes measuring how much treatment information a representation carries.

use caetc_autodiff::{Adam, Bindings, Graph, ParamId, ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batch::Batch;
use crate::data::Trajectory;
use crate::loss::weighted_cross_entropy;
use crate::model::Model;
use crate::{CoreError, Result};

/// Features paired with class labels, one row per sample.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Frozen `Φ(H_t)` for every step that has a following treatment, labelled
/// with that treatment.
pub fn representation_samples(model: &Model, units: &[Trajectory], scale: f64, batch_size: usize) -> Result<Samples> {
    let mut out = Samples::default();
    for chunk in units.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = Batch::new(&refs, &model.schema, scale)?;
        let g = Graph::new();
        let p = Bindings::all_constant(&g, &model.params);
        let phi = g.value(model.representation::<ChaCha8Rng>(&g, &p, &batch, None, None)?);
        for r in 0..batch.rows() {
            if batch.transition_weight[r] > 0.0 {
                out.features.push(phi.row(r).to_vec());
                out.labels.push(batch.a_next[r]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
        }
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone)]
pub struct Probe {
    mean: Vec<f64>,
    sd: Vec<f64>,
    params: ParamSet,
    w: ParamId,
    b: ParamId,
    classes: usize,
}

impl Probe {
    pub fn fit(train: &Samples, classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if train.is_empty() || classes < 2 {
            return Err(CoreError::Input("probe needs samples and at least two classes".into()));
        }
        if let Some(&c) = train.labels.iter().find(|&&c| c >= classes) {
            return Err(CoreError::Input(format!("label {c} out of range for {classes} classes")));
        }
        let d = train.features[0].len();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for f in &train.features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / n;
            }
        }
        let mut sd = vec![0.0; d];
        for f in &train.features {
            for ((s, x), m) in sd.iter_mut().zip(f).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        let sd = sd.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let mut params = ParamSet::new();
        let w = params.insert("probe.w", Tensor::zeros(&[d, classes]));
        let b = params.insert("probe.b", Tensor::zeros(&[classes]));
        let mut probe = Self { mean, sd, params, w, b, classes };
        let x = probe.design(&train.features)?;
        let mut targets = vec![0.0; train.len() * classes];
        for (r, &c) in train.labels.iter().enumerate() {
            targets[r * classes + c] = 1.0;
        }
        let weights = vec![1.0 / n; train.len()];
        let mut adam = Adam::new(&probe.params, vec![w, b], cfg.learning_rate);
        for _ in 0..cfg.steps {
            let g = Graph::new();
            let p = Bindings::all_trainable(&g, &probe.params);
            let logits = g.add_row(g.matmul(g.constant(x.clone()), p.var(w))?, p.var(b))?;
            let loss = weighted_cross_entropy(&g, logits, &targets, &weights)?;
            let grads = g.backward(loss)?;
            let flat = p.collect(&grads, &probe.params);
            adam.step(&mut probe.params, &flat)?;
        }
        Ok(probe)
    }

    fn design(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.iter().zip(&self.mean).zip(&self.sd).map(|((x, m), s)| (x - m) / s).collect())
            .collect();
        Ok(Tensor::from_rows(&rows)?)
    }

    /// Class probabilities per sample.
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::new();
        let p = Bindings::all_constant(&g, &self.params);
        let logits = g.add_row(g.matmul(g.constant(self.design(features)?), p.var(self.w))?, p.var(self.b))?;
        let probs = g.value(g.softmax(logits)?);
        Ok((0..features.len()).map(|r| probs.row(r).to_vec()).collect())
    }

    pub fn accuracy(&self, test: &Samples) -> Result<f64> {
        let probs = self.predict_proba(&test.features)?;
        if probs.is_empty() {
            return Err(CoreError::Input("no held-out samples".into()));
        }
        let hits = probs
            .iter()
            .zip(&test.labels)
            .filter(|(p, &c)| argmax(p) == c)
            .count();
        Ok(hits as f64 / probs.len() as f64)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Rank-based area under the ROC curve with ties counted half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(CoreError::Input("scores and labels differ in length".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(CoreError::Input("AUC needs both classes".into()));
    }
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_samples: usize,
    pub test_samples: usize,
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent training class.
    pub majority_baseline: f64,
}

/// Fits a probe on the representation of the first `train_fraction` units
/// and scores it on the rest.
pub fn probe_representation(
    model: &Model,
    units: &[Trajectory],
    scale: f64,
    train_fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let cut = ((units.len() as f64) * train_fraction).round() as usize;
    if cut == 0 || cut >= units.len() {
        return Err(CoreError::Input(format!("split {train_fraction} leaves an empty side")));
    }
    let train = representation_samples(model, &units[..cut], scale, 256)?;
    let test = representation_samples(model, &units[cut..], scale, 256)?;
    let k = model.num_treatments();
    let probe = Probe::fit(&train, k, cfg)?;
    let mut counts = vec![0usize; k];
    for &c in &train.labels {
        counts[c] += 1;
    }
    let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let baseline = test.labels.iter().filter(|&&c| c == majority).count() as f64 / test.len().max(1) as f64;
    Ok(ProbeReport {
        train_samples: train.len(),
        test_samples: test.len(),
        accuracy: probe.accuracy(&test)?,
        majority_baseline: baseline,
    })
}
