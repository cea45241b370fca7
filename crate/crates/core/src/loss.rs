//! Loss terms of the training objective, as scalar reference functions and as
//! recorded graph expressions over a [`Batch`].

use caetc_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::{CoreError, Result};

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= -SIMPLEX_TOL && x <= 1.0 + SIMPLEX_TOL)) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(CoreError::Numeric(format!("probabilities {p:?} leave the simplex")));
    }
    Ok(())
}

/// `-sum_j target_j log p_j`, skipping zero-weight classes.
pub fn soft_cross_entropy(p: &[f64], target: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    if p.len() != target.len() {
        return Err(CoreError::Input("target and prediction sizes differ".into()));
    }
    Ok(-p
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| t * p.ln())
        .sum::<f64>())
}

pub fn cross_entropy(p: &[f64], class: usize) -> Result<f64> {
    let mut target = vec![0.0; p.len()];
    *target
        .get_mut(class)
        .ok_or_else(|| CoreError::Input(format!("class {class} out of range")))? = 1.0;
    soft_cross_entropy(p, &target)
}

/// `sum_j p_j log p_j` with `0 log 0 = 0`; lies in `[-ln K, 0]`.
pub fn negative_entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum())
}

/// Label-smoothed one-hot target: `1 - alpha + alpha / K` on `class`, `alpha / K` elsewhere.
pub fn smoothed_target(class: usize, k: usize, alpha: f64) -> Vec<f64> {
    let mut t = vec![alpha / k as f64; k];
    t[class] += 1.0 - alpha;
    t
}

/// Ramp `delta * (2 / (1 + exp(-10 e / e_max)) - 1)` for the adversarial weight.
pub fn adversarial_weight_schedule(epoch: usize, epoch_max: usize, delta: f64) -> Result<f64> {
    if epoch_max == 0 {
        return Err(CoreError::Config("schedule needs a positive epoch count".into()));
    }
    if epoch > epoch_max {
        return Err(CoreError::Config(format!("epoch {epoch} beyond {epoch_max}")));
    }
    let s = epoch as f64 / epoch_max as f64;
    Ok(delta * (2.0 / (1.0 + (-10.0 * s).exp()) - 1.0))
}

fn row_weights(g: &Graph, weights: &[f64], cols: usize, scale: f64) -> Result<Var> {
    let data = weights
        .iter()
        .flat_map(|&w| std::iter::repeat_n(w * scale, cols))
        .collect();
    Ok(g.constant(Tensor::new(vec![weights.len(), cols], data)?))
}

fn ensure_mass(weights: &[f64], what: &str) -> Result<()> {
    if weights.iter().all(|&w| w == 0.0) {
        return Err(CoreError::Input(format!("no valid steps for {what}")));
    }
    Ok(())
}

/// `sum_r w_r * mean_j (pred - target)^2`.
pub fn weighted_squared_error(g: &Graph, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
    let cols = target.cols();
    let diff = g.sub(pred, g.constant(target.clone()))?;
    let w = row_weights(g, weights, cols, 1.0 / cols as f64)?;
    Ok(g.sum(g.mul(g.square(diff)?, w)?)?)
}

/// `sum_r w_r * (-sum_j target_rj log softmax(logits)_rj)` with `targets` `[rows, K]`.
pub fn weighted_cross_entropy(g: &Graph, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    let shape = g.shape(logits);
    let k = shape[1];
    if targets.len() != shape[0] * k {
        return Err(CoreError::Input("target table does not match logits".into()));
    }
    let coef = targets
        .chunks(k)
        .zip(weights)
        .flat_map(|(row, &w)| row.iter().map(move |&t| -w * t))
        .collect();
    let coef = g.constant(Tensor::new(shape, coef)?);
    Ok(g.sum(g.mul(g.log_softmax(logits)?, coef)?)?)
}

/// `sum_r w_r * sum_j p_rj log p_rj` with `p = softmax(logits)`.
pub fn weighted_negative_entropy(g: &Graph, logits: Var, weights: &[f64]) -> Result<Var> {
    let k = g.shape(logits)[1];
    let logp = g.log_softmax(logits)?;
    let p = g.exp(logp)?;
    let bad = g.with_value(p, |t| {
        (0..t.rows()).any(|r| check_simplex(t.row(r)).is_err())
    });
    if bad {
        return Err(CoreError::Numeric("balancer probabilities leave the simplex".into()));
    }
    let w = row_weights(g, weights, k, 1.0)?;
    Ok(g.sum(g.mul(g.mul(p, logp)?, w)?)?)
}

fn one_hot_rows(classes: &[usize], k: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes.len() * k];
    for (r, &c) in classes.iter().enumerate() {
        t[r * k + c] = 1.0;
    }
    t
}

/// Weights of the objective. `delta_c` falls back to `delta_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub delta_a: f64,
    pub delta_x: f64,
    pub delta_e: f64,
    pub delta_c: Option<f64>,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta_a: 0.1,
            delta_x: 0.1,
            delta_e: 1e-4,
            delta_c: None,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            delta_a: 0.0,
            delta_x: 0.0,
            delta_e: 0.0,
            delta_c: None,
            label_smoothing: 0.0,
        }
    }

    pub fn conditioning_weight(&self) -> f64 {
        self.delta_c.unwrap_or(self.delta_a)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.delta_a, self.delta_x, self.delta_e, self.conditioning_weight()];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CoreError::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(CoreError::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Graph handles of every loss term on one batch. Terms absent from the
/// objective are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Terms {
    pub recon_y: Option<Var>,
    pub next_y: Option<Var>,
    pub recon_a: Option<Var>,
    pub conditioning: Option<Var>,
    pub recon_x: Option<Var>,
    pub entropy: Option<Var>,
    pub balancer: Option<Var>,
}

/// Scalar values of [`Terms`] for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub recon_y: Option<f64>,
    pub next_y: Option<f64>,
    pub recon_a: Option<f64>,
    pub conditioning: Option<f64>,
    pub recon_x: Option<f64>,
    pub entropy: Option<f64>,
    pub balancer: Option<f64>,
}

impl TermValues {
    pub const NAMES: [&'static str; 7] = ["L_RY", "L_Y", "L_RA", "L_C", "L_RX", "L_E", "L_B"];

    pub fn as_array(&self) -> [Option<f64>; 7] {
        [
            self.recon_y,
            self.next_y,
            self.recon_a,
            self.conditioning,
            self.recon_x,
            self.entropy,
            self.balancer,
        ]
    }

    pub fn from_array(v: [Option<f64>; 7]) -> Self {
        Self {
            recon_y: v[0],
            next_y: v[1],
            recon_a: v[2],
            conditioning: v[3],
            recon_x: v[4],
            entropy: v[5],
            balancer: v[6],
        }
    }
}

impl Terms {
    pub fn values(&self, g: &Graph) -> Result<TermValues> {
        let get = |v: Option<Var>| v.map(|v| g.scalar(v)).transpose();
        Ok(TermValues {
            recon_y: get(self.recon_y)?,
            next_y: get(self.next_y)?,
            recon_a: get(self.recon_a)?,
            conditioning: get(self.conditioning)?,
            recon_x: get(self.recon_x)?,
            entropy: get(self.entropy)?,
            balancer: get(self.balancer)?,
        })
    }
}

/// Outcome reconstruction from the unconditioned representation.
pub fn reconstruction_outcome(g: &Graph, pred: Var, batch: &Batch) -> Result<Var> {
    ensure_mass(&batch.recon_weight, "reconstruction")?;
    weighted_squared_error(g, pred, &batch.y, &batch.recon_weight)
}

/// Next-outcome error; `None` when the batch has no transitions.
pub fn next_outcome(g: &Graph, pred: Var, batch: &Batch) -> Result<Option<Var>> {
    if batch.transition_units == 0 {
        log::warn!("batch without transitions contributes nothing to the next-outcome loss");
        return Ok(None);
    }
    weighted_squared_error(g, pred, &batch.y_next, &batch.transition_weight).map(Some)
}

pub fn reconstruction_treatment(g: &Graph, logits: Var, batch: &Batch, k: usize) -> Result<Var> {
    ensure_mass(&batch.recon_weight, "reconstruction")?;
    weighted_cross_entropy(g, logits, &one_hot_rows(&batch.a, k), &batch.recon_weight)
}

pub fn reconstruction_covariates(g: &Graph, pred: Var, batch: &Batch) -> Result<Var> {
    ensure_mass(&batch.recon_weight, "reconstruction")?;
    let x = batch
        .x
        .as_ref()
        .ok_or_else(|| CoreError::Input("covariate loss on a batch without covariates".into()))?;
    weighted_squared_error(g, pred, x, &batch.recon_weight)
}

/// Cross-entropy of the balancer against the next treatment.
pub fn balancer_loss(g: &Graph, logits: Var, batch: &Batch, k: usize) -> Result<Var> {
    ensure_mass(&batch.transition_weight, "balancer")?;
    weighted_cross_entropy(g, logits, &one_hot_rows(&batch.a_next, k), &batch.transition_weight)
}

pub fn entropy_loss(g: &Graph, logits: Var, batch: &Batch) -> Result<Var> {
    ensure_mass(&batch.transition_weight, "entropy")?;
    weighted_negative_entropy(g, logits, &batch.transition_weight)
}

/// Treatments `(a_next + s) mod K` for shift `s`.
pub fn shifted_treatments(a_next: &[usize], shift: usize, k: usize) -> Vec<usize> {
    a_next.iter().map(|&a| (a + shift) % k).collect()
}

/// Smoothed cross-entropy of the treatment classifier against each counterfactual
/// treatment it was conditioned on, averaged over the `K - 1` alternatives.
/// `logits[s - 1]` are the logits conditioned on shift `s`.
pub fn conditioning_loss(g: &Graph, logits: &[Var], batch: &Batch, k: usize, alpha: f64) -> Result<Option<Var>> {
    if k < 2 {
        return Ok(None);
    }
    if logits.len() != k - 1 {
        return Err(CoreError::Input(format!("need {} conditioned predictions", k - 1)));
    }
    ensure_mass(&batch.transition_weight, "conditioning")?;
    let w: Vec<f64> = batch.transition_weight.iter().map(|w| w / (k - 1) as f64).collect();
    let mut total: Option<Var> = None;
    for (s, &l) in logits.iter().enumerate() {
        let classes = shifted_treatments(&batch.a_next, s + 1, k);
        let targets: Vec<f64> = classes.iter().flat_map(|&c| smoothed_target(c, k, alpha)).collect();
        let term = weighted_cross_entropy(g, l, &targets, &w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}
