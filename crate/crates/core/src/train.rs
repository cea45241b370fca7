//! Two-player training: a main update of the encoder and heads, then a
//! balancer update on the detached representation, each with its own Adam.

use caetc_autodiff::{Adam, Bindings, Graph, ParamSet};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Dropout;
use crate::batch::Batch;
use crate::data::Trajectory;
use crate::loss::{self, LossWeights, TermValues, Terms};
use crate::model::Model;
use crate::sim::rng::stream;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// All loss terms with the configured weights.
    Caetc,
    /// Outcome reconstruction and next-outcome terms only.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub objective: Objective,
    pub temporal_cutoff: bool,
    pub seed: u64,
    /// Keep the parameters of the epoch with the lowest validation next-outcome loss.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 64,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            objective: Objective::Caetc,
            temporal_cutoff: true,
            seed: 0,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Graph outputs of one training step.
pub struct StepGraph {
    pub main: caetc_autodiff::Var,
    pub balancer: Option<caetc_autodiff::Var>,
    pub terms: Terms,
}

/// Everything needed to record one batch's objective.
pub struct StepInputs<'a, R: Rng> {
    pub batch: &'a Batch,
    pub cutoffs: Option<&'a [usize]>,
    pub dropout: Option<Dropout<'a, R>>,
    pub weights: &'a LossWeights,
    /// Current value of the adversarial weight.
    pub delta_e: f64,
    pub objective: Objective,
}

fn add_weighted(g: &Graph, total: caetc_autodiff::Var, term: Option<caetc_autodiff::Var>, w: f64) -> Result<caetc_autodiff::Var> {
    match term {
        Some(t) if w > 0.0 => Ok(g.add(total, g.scale(t, w)?)?),
        _ => Ok(total),
    }
}

/// Records the main objective with `main` bindings and the balancer loss
/// with `balancer` bindings on the same graph. Terms whose weight is zero are
/// computed for logging but left out of the objective.
pub fn build_objective<R: Rng>(
    model: &Model,
    g: &Graph,
    main: &Bindings,
    balancer: &Bindings,
    inputs: StepInputs<'_, R>,
) -> Result<StepGraph> {
    let batch = inputs.batch;
    let k = model.num_treatments();
    let phi = model.representation(g, main, batch, inputs.cutoffs, inputs.dropout)?;
    let mut terms = Terms {
        recon_y: Some(loss::reconstruction_outcome(g, model.outcome(g, main, phi, None)?, batch)?),
        ..Terms::default()
    };
    let has_transitions = batch.transition_units > 0;
    if has_transitions {
        let pred = model.outcome(g, main, phi, Some(&batch.a_next))?;
        terms.next_y = loss::next_outcome(g, pred, batch)?;
    }
    let mut total = terms.recon_y.expect("always recorded");
    if let Some(y) = terms.next_y {
        total = g.add(total, y)?;
    }
    if inputs.objective == Objective::Baseline {
        return Ok(StepGraph {
            main: total,
            balancer: None,
            terms,
        });
    }

    let w = inputs.weights;
    terms.recon_a = Some(loss::reconstruction_treatment(g, model.treatment_logits(g, main, phi, None)?, batch, k)?);
    if let Some(xhat) = model.covariates(g, main, phi)? {
        terms.recon_x = Some(loss::reconstruction_covariates(g, xhat, batch)?);
    }
    if has_transitions {
        let conditioned = (1..k)
            .map(|s| {
                let a = loss::shifted_treatments(&batch.a_next, s, k);
                model.treatment_logits(g, main, phi, Some(&a))
            })
            .collect::<Result<Vec<_>>>()?;
        terms.conditioning = loss::conditioning_loss(g, &conditioned, batch, k, w.label_smoothing)?;
        terms.entropy = Some(loss::entropy_loss(g, model.balancer_logits(g, main, phi)?, batch)?);
        let detached = g.detach(phi);
        terms.balancer = Some(loss::balancer_loss(g, model.balancer_logits(g, balancer, detached)?, batch, k)?);
    }
    let delta_x = if model.schema.has_x() { w.delta_x } else { 0.0 };
    total = add_weighted(g, total, terms.recon_a, w.delta_a)?;
    total = add_weighted(g, total, terms.conditioning, w.conditioning_weight())?;
    total = add_weighted(g, total, terms.recon_x, delta_x)?;
    total = add_weighted(g, total, terms.entropy, inputs.delta_e)?;
    let balancer = terms.balancer.map(|b| g.scale(b, inputs.delta_e)).transpose()?;
    Ok(StepGraph {
        main: total,
        balancer,
        terms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub delta_e: f64,
    /// Batch means of each recorded term.
    pub terms: TermValues,
    pub validation_next_y: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    /// Per-epoch losses as CSV with one column per recorded term.
    pub fn to_csv(&self) -> String {
        let present: Vec<usize> = (0..TermValues::NAMES.len())
            .filter(|&i| self.epochs.iter().any(|e| e.terms.as_array()[i].is_some()))
            .collect();
        let mut out = String::from("epoch");
        for &i in &present {
            out.push(',');
            out.push_str(TermValues::NAMES[i]);
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.epoch.to_string());
            let vals = e.terms.as_array();
            for &i in &present {
                out.push(',');
                if let Some(v) = vals[i] {
                    out.push_str(&format!("{v:e}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn next_y(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.terms.next_y).collect()
    }
}

fn mean_terms(acc: &[TermValues]) -> TermValues {
    let n = TermValues::NAMES.len();
    let mut out = [None; 7];
    for (i, slot) in out.iter_mut().enumerate().take(n) {
        let vals: Vec<f64> = acc.iter().filter_map(|t| t.as_array()[i]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    TermValues::from_array(out)
}

/// Mean teacher-forced next-outcome loss over `data`, weighting batches by units.
pub fn evaluate_next_outcome(model: &Model, data: &[Trajectory], batch_size: usize, scale: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut units = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = Batch::new(&refs, &model.schema, scale)?;
        if batch.transition_units == 0 {
            continue;
        }
        let g = Graph::new();
        let p = Bindings::all_constant(&g, &model.params);
        let phi = model.representation::<ChaCha8Rng>(&g, &p, &batch, None, None)?;
        let pred = model.outcome(&g, &p, phi, Some(&batch.a_next))?;
        if let Some(l) = loss::next_outcome(&g, pred, &batch)? {
            total += g.scalar(l)? * batch.transition_units as f64;
            units += batch.transition_units;
        }
    }
    if units == 0 {
        return Err(CoreError::Input("validation set has no transitions".into()));
    }
    Ok(total / units as f64)
}

/// Trains `model` in place. Outcomes are divided by `scale` before entering
/// the network.
pub fn train(
    model: &mut Model,
    data: &[Trajectory],
    validation: Option<&[Trajectory]>,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Input("empty training set".into()));
    }
    let mut history = TrainHistory::default();
    let max_len = data.iter().map(|t| t.len).max().unwrap_or(0);
    if let Some(w) = model.config.backbone.receptive_field_warning(max_len) {
        log::warn!("{w}");
        history.warnings.push(w);
    }
    let mut rng = stream(cfg.seed, "train", 0);
    let main_ids = model.params.ids().filter(|&id| model.main_trainable(id)).collect();
    let mut adam_main = Adam::new(&model.params, main_ids, cfg.learning_rate);
    let mut adam_bal = Adam::new(&model.params, model.balancer_ids(), cfg.learning_rate);
    let use_cutoff = cfg.temporal_cutoff && model.schema.has_x();
    let rate = model.config.backbone.dropout_rate;
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        let delta_e = loss::adversarial_weight_schedule(epoch, cfg.epochs, cfg.weights.delta_e)?;
        order.shuffle(&mut rng);
        let cuts: Vec<usize> = if use_cutoff {
            order.iter().map(|&i| rng.random_range(1..=data[i].len)).collect()
        } else {
            Vec::new()
        };
        let mut logs = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&refs, &model.schema, scale)?;
            let start = bi * cfg.batch_size;
            let batch_cuts = use_cutoff.then(|| &cuts[start..start + chunk.len()]);
            let g = Graph::new();
            let main = Bindings::new(&g, &model.params, |id| model.main_trainable(id));
            let bal = Bindings::new(&g, &model.params, |id| model.is_balancer(id));
            let context = |e: CoreError| match e {
                e if e.is_numeric() => CoreError::Numeric(format!("epoch {epoch}, batch {bi}: {e}")),
                e => e,
            };
            let step = build_objective(
                model,
                &g,
                &main,
                &bal,
                StepInputs {
                    batch: &batch,
                    cutoffs: batch_cuts,
                    dropout: (rate > 0.0).then_some(Dropout { rate, rng: &mut rng }),
                    weights: &cfg.weights,
                    delta_e,
                    objective: cfg.objective,
                },
            )
            .map_err(context)?;
            let value = g.scalar(step.main)?;
            if !value.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = g.backward(step.main)?;
            let main_grads = main.collect(&grads, &model.params);
            let bal_grads = match step.balancer {
                Some(b) => Some(bal.collect(&g.backward(b)?, &model.params)),
                None => None,
            };
            logs.push(step.terms.values(&g)?);
            drop(g);
            adam_main.step(&mut model.params, &main_grads)?;
            if let Some(bg) = bal_grads {
                adam_bal.step(&mut model.params, &bg)?;
            }
        }
        let validation_next_y = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_next_outcome(model, v, cfg.batch_size, scale)?),
            _ => None,
        };
        if let (true, Some(v)) = (cfg.select_best, validation_next_y) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                history.best_epoch = Some(epoch);
            }
        }
        let terms = mean_terms(&logs);
        log::info!(
            "epoch {epoch}: L_Y {:?} val {:?}",
            terms.next_y,
            validation_next_y
        );
        history.epochs.push(EpochRecord {
            epoch,
            delta_e,
            terms,
            validation_next_y,
        });
    }
    if let Some((_, params)) = best {
        model.params.copy_from(&params)?;
    }
    Ok(history)
}
