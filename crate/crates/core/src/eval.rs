//! Multi-step counterfactual evaluation: test-set construction from simulators
//! with branchable ground truth, autoregressive decoding, and RMSE reports.

use std::collections::BTreeMap;

use caetc_autodiff::{Bindings, Graph};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::data::Trajectory;
use crate::model::Model;
use crate::sim::covariates::CovariatePanel;
use crate::sim::nsclc::{self, NsclcConfig, Simulated};
use crate::sim::rng::stream;
use crate::sim::semisynth::{self, SemiUnit, SynthSpec};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    RandomTrajectories,
    NoConfounding,
    Factual,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RandomTrajectories => "random_trajectories",
            Self::NoConfounding => "no_confounding",
            Self::Factual => "factual",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_trajectories" | "random-trajectories" => Ok(Self::RandomTrajectories),
            "no_confounding" | "no-confounding" => Ok(Self::NoConfounding),
            "factual" => Ok(Self::Factual),
            other => Err(CoreError::Config(format!("unknown setting '{other}'"))),
        }
    }
}

/// Units whose outcomes can be re-simulated under a new treatment plan.
pub trait CounterfactualOracle {
    fn num_units(&self) -> usize;
    fn trajectory(&self, unit: usize) -> &Trajectory;
    /// Largest `t0 + plan.len()` a branch of `unit` may reach.
    fn branch_limit(&self, unit: usize) -> usize;
    /// Raw-scale outcomes `y[t0..t0 + plan.len()]` when `plan` replaces the
    /// treatments from step `t0` on; `branch_seed` feeds any fresh noise.
    fn branch(&self, unit: usize, t0: usize, plan: &[usize], branch_seed: u64) -> Result<Vec<Vec<f64>>>;
    fn num_treatments(&self) -> usize;
}

pub struct NsclcOracle {
    pub config: NsclcConfig,
    pub patients: Vec<Simulated>,
}

impl CounterfactualOracle for NsclcOracle {
    fn num_units(&self) -> usize {
        self.patients.len()
    }

    fn trajectory(&self, unit: usize) -> &Trajectory {
        &self.patients[unit].trajectory
    }

    fn branch_limit(&self, _unit: usize) -> usize {
        self.config.t_max
    }

    fn branch(&self, unit: usize, t0: usize, plan: &[usize], branch_seed: u64) -> Result<Vec<Vec<f64>>> {
        let p = &self.patients[unit];
        let snap = p
            .snapshots
            .get(t0.wrapping_sub(1))
            .ok_or_else(|| CoreError::Input(format!("no snapshot before step {t0} of unit {unit}")))?;
        let noise = stream(branch_seed, "nsclc.branch", unit as u64 * 1_000 + t0 as u64);
        let y = nsclc::branch_counterfactual(snap, &p.params, &self.config, plan, noise)?;
        Ok(y.into_iter().map(|v| vec![v]).collect())
    }

    fn num_treatments(&self) -> usize {
        nsclc::NUM_TREATMENTS
    }
}

pub struct SemiSynthOracle {
    pub spec: SynthSpec,
    pub units: Vec<(CovariatePanel, SemiUnit)>,
}

impl CounterfactualOracle for SemiSynthOracle {
    fn num_units(&self) -> usize {
        self.units.len()
    }

    fn trajectory(&self, unit: usize) -> &Trajectory {
        &self.units[unit].1.trajectory
    }

    fn branch_limit(&self, unit: usize) -> usize {
        self.units[unit].1.trajectory.len
    }

    fn branch(&self, unit: usize, t0: usize, plan: &[usize], _branch_seed: u64) -> Result<Vec<Vec<f64>>> {
        let (panel, u) = &self.units[unit];
        semisynth::branch(&self.spec, panel, u, t0, plan)
    }

    fn num_treatments(&self) -> usize {
        self.spec.config.num_treatments()
    }
}

/// One prediction task: history `y[0..t0]` of `unit`, then `plan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub unit: usize,
    pub t0: usize,
    pub plan: Vec<usize>,
    pub truth: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub setting: Setting,
    pub tau: usize,
    pub units: Vec<Trajectory>,
    pub cases: Vec<TestCase>,
    pub skipped: usize,
}

/// `k` uniformly random plans of length `tau` for every unit and history
/// length `t0 >= 1`, with branch outcomes as ground truth. Cutoffs whose
/// branch would pass the oracle's limit are skipped and counted.
pub fn build_random_trajectory_testset<O: CounterfactualOracle>(oracle: &O, k: usize, tau: usize, seed: u64) -> Result<TestSet> {
    if tau == 0 || k == 0 {
        return Err(CoreError::Config("tau and k must be positive".into()));
    }
    let kk = oracle.num_treatments();
    let mut cases = Vec::new();
    let mut skipped = 0;
    for unit in 0..oracle.num_units() {
        let mut rng = stream(seed, "eval.plans", unit as u64);
        let len = oracle.trajectory(unit).len;
        for t0 in 1..=len {
            if t0 + tau > oracle.branch_limit(unit) {
                skipped += 1;
                continue;
            }
            for _ in 0..k {
                let plan: Vec<usize> = (0..tau).map(|_| rng.random_range(0..kk)).collect();
                let truth = oracle.branch(unit, t0, &plan, seed)?;
                cases.push(TestCase { unit, t0, plan, truth });
            }
        }
    }
    Ok(TestSet {
        setting: Setting::RandomTrajectories,
        tau,
        units: (0..oracle.num_units()).map(|u| oracle.trajectory(u).clone()).collect(),
        cases,
        skipped,
    })
}

/// Factual continuations of length `tau` at every cutoff that has them.
pub fn build_factual_testset(units: Vec<Trajectory>, tau: usize, setting: Setting) -> Result<TestSet> {
    if tau == 0 {
        return Err(CoreError::Config("tau must be positive".into()));
    }
    let mut cases = Vec::new();
    let mut skipped = 0;
    for (unit, tr) in units.iter().enumerate() {
        for t0 in 1..=tr.len {
            if t0 + tau > tr.len {
                skipped += 1;
                continue;
            }
            cases.push(TestCase {
                unit,
                t0,
                plan: tr.a[t0..t0 + tau].to_vec(),
                truth: tr.y[t0..t0 + tau].to_vec(),
            });
        }
    }
    Ok(TestSet {
        setting,
        tau,
        units,
        cases,
        skipped,
    })
}

/// Fresh NSCLC cohort simulated without confounding, evaluated on its factual paths.
pub fn build_no_confounding_testset(cfg: &NsclcConfig, n_units: usize, tau: usize, seed: u64) -> Result<TestSet> {
    let mut cfg = cfg.clone();
    cfg.gamma = 0.0;
    let units = nsclc::simulate_cohort(&cfg, n_units, seed)?
        .into_iter()
        .map(|s| s.trajectory)
        .collect();
    build_factual_testset(units, tau, Setting::NoConfounding)
}

/// Predicts `y[t0..t0 + tau]` for each case by feeding predictions back as
/// inputs; covariates after `t0` are replaced by the missingness vector.
/// With `teacher_forced`, ground-truth outcomes are fed back instead.
/// Outcomes are returned on the raw scale.
pub fn autoregressive_decode(
    model: &Model,
    units: &[Trajectory],
    cases: &[TestCase],
    scale: f64,
    teacher_forced: bool,
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::new(); cases.len()];
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in cases.iter().enumerate() {
        let tr = units
            .get(c.unit)
            .ok_or_else(|| CoreError::Input(format!("case refers to missing unit {}", c.unit)))?;
        if c.t0 == 0 || c.t0 > tr.len {
            return Err(CoreError::Input(format!("history length {} outside 1..={}", c.t0, tr.len)));
        }
        if teacher_forced && c.truth.len() != c.plan.len() {
            return Err(CoreError::Input("teacher forcing needs truth for every planned step".into()));
        }
        groups.entry(c.t0).or_default().push(i);
    }
    for (&t0, members) in &groups {
        for chunk in members.chunks(batch_size.max(1)) {
            let preds = decode_group(model, units, cases, chunk, t0, scale, teacher_forced)?;
            for (&i, p) in chunk.iter().zip(preds) {
                out[i] = p;
            }
        }
    }
    Ok(out)
}

fn decode_group(
    model: &Model,
    units: &[Trajectory],
    cases: &[TestCase],
    members: &[usize],
    t0: usize,
    scale: f64,
    teacher_forced: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let tau = members.iter().map(|&i| cases[i].plan.len()).max().unwrap_or(0);
    let mut work: Vec<Trajectory> = members
        .iter()
        .map(|&i| {
            let tr = &units[cases[i].unit];
            Trajectory {
                id: tr.id,
                v: tr.v.clone(),
                a: tr.a[..t0].to_vec(),
                y: tr.y[..t0].to_vec(),
                x: tr.x.as_ref().map(|x| x[..t0].to_vec()),
                len: t0,
                gamma: tr.gamma,
                seed: tr.seed,
            }
        })
        .collect();
    let mut preds = vec![Vec::new(); members.len()];
    let b = members.len();
    for h in 0..tau {
        // Units whose plan is shorter than the longest stop contributing.
        let active: Vec<usize> = (0..b).filter(|&j| cases[members[j]].plan.len() > h).collect();
        let refs: Vec<&Trajectory> = active.iter().map(|&j| &work[j]).collect();
        let batch = Batch::new(&refs, &model.schema, scale)?;
        let cutoffs: Vec<usize> = vec![t0 + 1; active.len()];
        let g = Graph::new();
        let p = Bindings::all_constant(&g, &model.params);
        let cut = model.schema.has_x().then_some(cutoffs.as_slice());
        let phi = model.representation::<ChaCha8Rng>(&g, &p, &batch, cut, None)?;
        let last = g.slice_rows(phi, (t0 + h - 1) * active.len(), active.len())?;
        let plan: Vec<usize> = active.iter().map(|&j| cases[members[j]].plan[h]).collect();
        let yhat = g.value(model.outcome(&g, &p, last, Some(&plan))?);
        for (r, &j) in active.iter().enumerate() {
            let y: Vec<f64> = yhat.row(r).iter().map(|v| v * scale).collect();
            if y.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Numeric(format!("non-finite prediction at horizon {}", h + 1)));
            }
            let case = &cases[members[j]];
            let fed = if teacher_forced { case.truth[h].clone() } else { y.clone() };
            preds[j].push(y);
            let w = &mut work[j];
            w.a.push(plan[r]);
            w.y.push(fed);
            if let Some(x) = w.x.as_mut() {
                x.push(vec![0.0; model.schema.dim_x]);
            }
            w.len += 1;
        }
    }
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRmse {
    pub tau: usize,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub horizons: Vec<HorizonRmse>,
    pub average: f64,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// RMSE per horizon over cases and outcome dimensions, multiplied by `factor`.
pub fn compute_rmse(predictions: &[Vec<Vec<f64>>], truths: &[Vec<Vec<f64>>], tau_max: usize, factor: f64, setting: Setting) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(CoreError::Input("prediction and target counts differ".into()));
    }
    let mut sums = vec![0.0; tau_max];
    let mut counts = vec![0usize; tau_max];
    let mut entries = vec![0usize; tau_max];
    for (p, t) in predictions.iter().zip(truths) {
        for (h, (ph, th)) in p.iter().zip(t).enumerate().take(tau_max) {
            if ph.len() != th.len() {
                return Err(CoreError::Input("outcome dimensions differ".into()));
            }
            sums[h] += ph.iter().zip(th).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            entries[h] += ph.len();
            counts[h] += 1;
        }
    }
    let mut horizons = Vec::with_capacity(tau_max);
    for h in 0..tau_max {
        if counts[h] == 0 {
            return Err(CoreError::Input(format!("no cases at horizon {}", h + 1)));
        }
        horizons.push(HorizonRmse {
            tau: h + 1,
            rmse: factor * (sums[h] / entries[h] as f64).sqrt(),
            n: counts[h],
        });
    }
    let average = horizons.iter().map(|h| h.rmse).sum::<f64>() / tau_max as f64;
    Ok(EvalReport {
        setting,
        horizons,
        average,
        metadata: BTreeMap::new(),
    })
}

/// Decodes every case of `set` and scores it.
pub fn evaluate(model: &Model, set: &TestSet, scale: f64, factor: f64) -> Result<EvalReport> {
    if let Some(c) = set.cases.iter().find(|c| c.plan.len() != set.tau) {
        return Err(CoreError::Input(format!(
            "plan of length {} in a test set with tau {}",
            c.plan.len(),
            set.tau
        )));
    }
    let preds = autoregressive_decode(model, &set.units, &set.cases, scale, false, 256)?;
    let truths: Vec<Vec<Vec<f64>>> = set.cases.iter().map(|c| c.truth.clone()).collect();
    let mut report = compute_rmse(&preds, &truths, set.tau, factor, set.setting)?;
    report.metadata.insert("skipped".into(), set.skipped.into());
    report.metadata.insert("cases".into(), set.cases.len().into());
    Ok(report)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,rmse,n\n");
        for h in &self.horizons {
            out.push_str(&format!("{},{},{}\n", h.tau, h.rmse, h.n));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("setting: {}\n{:>5}  {:>12}  {:>8}\n", self.setting, "tau", "rmse", "n");
        for h in &self.horizons {
            out.push_str(&format!("{:>5}  {:>12.6}  {:>8}\n", h.tau, h.rmse, h.n));
        }
        out.push_str(&format!("{:>5}  {:>12.6}\n", "avg", self.average));
        out
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per horizon across repeated runs of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub average: f64,
    pub runs: usize,
}

pub fn aggregate(method: &str, reports: &[EvalReport]) -> Result<AggregateRow> {
    let first = reports
        .first()
        .ok_or_else(|| CoreError::Input("no reports to aggregate".into()))?;
    let tau = first.horizons.len();
    if reports.iter().any(|r| r.horizons.len() != tau) {
        return Err(CoreError::Input("reports have different horizon counts".into()));
    }
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for h in 0..tau {
        let vals: Vec<f64> = reports.iter().map(|r| r.horizons[h].rmse).collect();
        let (m, s) = mean_std(&vals);
        mean.push(m);
        std.push(s);
    }
    let averages: Vec<f64> = reports.iter().map(|r| r.average).collect();
    Ok(AggregateRow {
        method: method.to_string(),
        average: mean_std(&averages).0,
        mean,
        std,
        runs: reports.len(),
    })
}

/// Method rows against `tau = 1..` columns with `mean ± std` cells and an average column.
pub fn format_aggregate_table(rows: &[AggregateRow]) -> String {
    let tau = rows.iter().map(|r| r.mean.len()).max().unwrap_or(0);
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "method");
    for t in 1..=tau {
        out.push_str(&format!(" | {:^15}", format!("tau={t}")));
    }
    out.push_str(" | avg\n");
    for r in rows {
        out.push_str(&format!("{:<width$}", r.method));
        for (m, s) in r.mean.iter().zip(&r.std) {
            out.push_str(&format!(" | {:^15}", format!("{m:.3} ± {s:.3}")));
        }
        out.push_str(&format!(" | {:.3}\n", r.average));
    }
    out
}
