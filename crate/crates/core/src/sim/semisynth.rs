//! Semi-synthetic outcomes over ICU-style covariates: untreated paths from a
//! spline trend, a Gaussian-process local trend and a random nonlinear
//! function of covariates; binary treatments confounded by recent treated
//! outcomes and covariates; additive effects that halve every two steps.
//!
//! The three binary treatments are folded into one class `sum_l 2^l A^(l)` (K = 8).

use rand::Rng;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::basis::{GpSampler, RandomFourierFeatures, Trend, TrendCurves};
use super::covariates::{CovariatePanel, CovariateStandIn, DIM_V, DIM_X};
use super::rng::{derive_seed, normal, sigmoid, stream};
use crate::data::{Schema, Trajectory};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSynthConfig {
    pub t_max: usize,
    pub alpha_b: f64,
    pub alpha_g: f64,
    pub alpha_f: f64,
    pub noise_sd: f64,
    /// Steps averaged by the treatment policy.
    pub window: usize,
    /// Steps over which a treatment acts.
    pub effect_window: usize,
    pub effect_scale: f64,
    pub gamma_y: f64,
    pub gamma_x: f64,
    pub sigma_w: f64,
    pub rff_features: usize,
    pub rff_lengthscale: f64,
    pub outcome_gp_lengthscale: f64,
    pub covariate_gp_lengthscale: f64,
    pub subset_size: usize,
    /// Treatments acting on each outcome.
    pub affects: Vec<Vec<usize>>,
    /// Outcomes whose recent values drive each treatment.
    pub confounders: Vec<Vec<usize>>,
}

impl Default for SemiSynthConfig {
    fn default() -> Self {
        Self {
            t_max: 100,
            alpha_b: 1.0 / 3.0,
            alpha_g: 1.0 / 3.0,
            alpha_f: 1.0 / 3.0,
            noise_sd: 0.05,
            window: 15,
            effect_window: 5,
            effect_scale: 0.5,
            gamma_y: 1.0,
            gamma_x: 1.0,
            sigma_w: 1.0,
            rff_features: 128,
            rff_lengthscale: 10f64.sqrt(),
            outcome_gp_lengthscale: 10.0,
            covariate_gp_lengthscale: 15.0,
            subset_size: 10,
            affects: vec![vec![0, 1], vec![1, 2]],
            confounders: vec![vec![0], vec![0, 1], vec![1]],
        }
    }
}

impl SemiSynthConfig {
    pub fn num_outcomes(&self) -> usize {
        self.affects.len()
    }

    pub fn num_binary_treatments(&self) -> usize {
        self.confounders.len()
    }

    pub fn num_treatments(&self) -> usize {
        1 << self.num_binary_treatments()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        let (ny, na) = (self.num_outcomes(), self.num_binary_treatments());
        if ny == 0 || na == 0 || na > 6 {
            return bad(format!("need 1..=6 treatments and at least one outcome, got {na} and {ny}"));
        }
        if self.t_max == 0 || self.window == 0 {
            return bad("t_max and window must be positive".into());
        }
        if self.effect_window < 1 {
            return bad("effect window must be at least 1".into());
        }
        if self.subset_size == 0 || self.subset_size > DIM_X {
            return bad(format!("covariate subset size must be in 1..={DIM_X}"));
        }
        if self.affects.iter().flatten().any(|&l| l >= na) {
            return bad("outcome depends on an unknown treatment".into());
        }
        if self.confounders.iter().any(Vec::is_empty) || self.confounders.iter().flatten().any(|&m| m >= ny) {
            return bad("each treatment needs a nonempty set of known confounding outcomes".into());
        }
        if ![self.gamma_y, self.gamma_x, self.noise_sd, self.effect_scale].iter().all(|v| v.is_finite()) {
            return bad("non-finite generator weight".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            dim_v: DIM_V,
            dim_y: self.num_outcomes(),
            dim_x: DIM_X,
            num_treatments: self.num_treatments(),
            max_len: self.t_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub covariates: Vec<usize>,
    pub f: RandomFourierFeatures,
    pub treatments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub covariates: Vec<usize>,
    pub f: RandomFourierFeatures,
    pub outcomes: Vec<usize>,
}

/// Data-generating process shared by all units of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub config: SemiSynthConfig,
    pub outcomes: Vec<OutcomeSpec>,
    pub treatments: Vec<TreatmentSpec>,
}

fn subset<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Vec<usize> {
    let mut s = sample(rng, DIM_X, size).into_vec();
    s.sort_unstable();
    s
}

impl SynthSpec {
    pub fn sample<R: Rng + ?Sized>(cfg: &SemiSynthConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let rff = |rng: &mut R| {
            RandomFourierFeatures::sample(rng, cfg.subset_size, cfg.rff_features, cfg.rff_lengthscale, cfg.sigma_w)
        };
        let mut outcomes = Vec::new();
        for m in 0..cfg.num_outcomes() {
            let covariates = subset(rng, cfg.subset_size);
            outcomes.push(OutcomeSpec {
                covariates,
                f: rff(rng)?,
                treatments: cfg.affects[m].clone(),
            });
        }
        let mut treatments = Vec::new();
        for l in 0..cfg.num_binary_treatments() {
            let covariates = subset(rng, cfg.subset_size);
            treatments.push(TreatmentSpec {
                covariates,
                f: rff(rng)?,
                outcomes: cfg.confounders[l].clone(),
            });
        }
        Ok(Self {
            config: cfg.clone(),
            outcomes,
            treatments,
        })
    }

    /// Edges `(treatment, outcome)` for effects and `(outcome, treatment)` for confounding.
    pub fn dependency_graph(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let effects = self
            .outcomes
            .iter()
            .enumerate()
            .flat_map(|(m, o)| o.treatments.iter().map(move |&l| (l, m)))
            .collect();
        let confounding = self
            .treatments
            .iter()
            .enumerate()
            .flat_map(|(l, t)| t.outcomes.iter().map(move |&m| (m, l)))
            .collect();
        (effects, confounding)
    }
}

fn pick(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

/// Untreated outcomes `[T, N^Y]` for one unit.
pub fn untreated_outcome<R: Rng + ?Sized>(
    spec: &SynthSpec,
    panel: &CovariatePanel,
    gp: &GpSampler,
    curves: &TrendCurves,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &spec.config;
    let t = panel.len();
    let mut out = vec![vec![0.0; spec.outcomes.len()]; t];
    for (m, o) in spec.outcomes.iter().enumerate() {
        let u = rng.random::<f64>() - 0.5;
        let trend = Trend::ALL[rng.random_range(0..Trend::ALL.len())];
        let g = gp.sample(rng, t)?;
        for (i, row) in out.iter_mut().enumerate() {
            let f = o.f.eval(&pick(&panel.x[i], &o.covariates))?;
            let eps = cfg.noise_sd * normal(rng);
            row[m] = u + cfg.alpha_b * curves.value(trend, i as f64) + cfg.alpha_g * g[i] + cfg.alpha_f * f + eps;
        }
    }
    Ok(out)
}

/// Assignment probability from the recent average of confounding outcomes
/// and the covariate function.
pub fn treatment_probability(spec: &SynthSpec, l: usize, window_avg: f64, x: &[f64]) -> Result<f64> {
    let t = &spec.treatments[l];
    let fx = t.f.eval(&pick(x, &t.covariates))?;
    Ok(sigmoid(spec.config.gamma_y * window_avg + spec.config.gamma_x * fx))
}

/// Draws treatment `l`; returns the draw and its probability.
pub fn assign_treatment<R: Rng + ?Sized>(
    spec: &SynthSpec,
    l: usize,
    window_avg: f64,
    x: &[f64],
    rng: &mut R,
) -> Result<(bool, f64)> {
    let p = treatment_probability(spec, l, window_avg, x)?;
    Ok((rng.random::<f64>() < p, p))
}

/// Direct effect sum over `history` of `P * A` values, most recent last.
pub fn treatment_effect(history: &[f64], scale: f64, effect_window: usize) -> Result<f64> {
    if effect_window < 1 {
        return Err(CoreError::Config("effect window must be at least 1".into()));
    }
    Ok(history
        .iter()
        .rev()
        .take(effect_window)
        .enumerate()
        .map(|(v, pa)| pa * scale * 2f64.powf(-(v as f64) / 2.0))
        .sum())
}

/// Incremental form of [`treatment_effect`]: one push per step.
#[derive(Debug, Clone)]
pub struct EffectTracker {
    scale: f64,
    window: usize,
    values: Vec<f64>,
    current: f64,
}

impl EffectTracker {
    pub fn new(scale: f64, window: usize) -> Result<Self> {
        if window < 1 {
            return Err(CoreError::Config("effect window must be at least 1".into()));
        }
        Ok(Self {
            scale,
            window,
            values: Vec::new(),
            current: 0.0,
        })
    }

    /// Adds this step's `P * A` and returns the updated effect.
    pub fn push(&mut self, pa: f64) -> f64 {
        let decay = std::f64::consts::FRAC_1_SQRT_2;
        let mut e = pa * self.scale + decay * self.current;
        let n = self.values.len();
        if n >= self.window {
            let leaving = self.values[n - self.window];
            e -= leaving * self.scale * 2f64.powf(-(self.window as f64) / 2.0);
        }
        self.values.push(pa);
        self.current = e;
        e
    }

    pub fn value(&self) -> f64 {
        self.current
    }
}

/// One generated unit with everything needed to branch it.
#[derive(Debug, Clone)]
pub struct SemiUnit {
    pub trajectory: Trajectory,
    pub untreated: Vec<Vec<f64>>,
    /// Per step and binary treatment: probability and draw.
    pub propensity: Vec<Vec<f64>>,
    pub draws: Vec<Vec<bool>>,
}

fn window_average(y: &[Vec<f64>], outcomes: &[usize], t: usize, window: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let start = t.saturating_sub(window);
    let mut total = 0.0;
    for row in &y[start..t] {
        for &m in outcomes {
            total += row[m];
        }
    }
    total / ((t - start) * outcomes.len()) as f64
}

/// Rolls the treated dynamics forward from step `from`, reusing the factual
/// draws before it. `forced` supplies joint classes for steps `from..` when given.
fn roll(
    spec: &SynthSpec,
    panel: &CovariatePanel,
    untreated: &[Vec<f64>],
    prefix: (&[Vec<f64>], &[Vec<f64>], &[Vec<bool>]),
    end: usize,
    forced: Option<&[usize]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let cfg = &spec.config;
    let na = spec.treatments.len();
    let (mut y, mut prop, mut draws) = (prefix.0.to_vec(), prefix.1.to_vec(), prefix.2.to_vec());
    let from = y.len();
    let mut trackers = (0..na)
        .map(|_| EffectTracker::new(cfg.effect_scale, cfg.effect_window))
        .collect::<Result<Vec<_>>>()?;
    for t in 0..from {
        for l in 0..na {
            trackers[l].push(prop[t][l] * f64::from(u8::from(draws[t][l])));
        }
    }
    for t in from..end {
        let mut p_row = Vec::with_capacity(na);
        let mut d_row = Vec::with_capacity(na);
        for (l, tspec) in spec.treatments.iter().enumerate() {
            let avg = window_average(&y, &tspec.outcomes, t, cfg.window);
            let p = treatment_probability(spec, l, avg, &panel.x[t])?;
            let d = match (forced, rng.as_deref_mut()) {
                (Some(plan), _) => (plan[t - from] >> l) & 1 == 1,
                (None, Some(r)) => r.random::<f64>() < p,
                (None, None) => unreachable!("factual roll needs a generator"),
            };
            trackers[l].push(p * f64::from(u8::from(d)));
            p_row.push(p);
            d_row.push(d);
        }
        let row = spec
            .outcomes
            .iter()
            .enumerate()
            .map(|(m, o)| untreated[t][m] + o.treatments.iter().map(|&l| trackers[l].value()).sum::<f64>())
            .collect();
        y.push(row);
        prop.push(p_row);
        draws.push(d_row);
    }
    Ok((y, prop, draws))
}

fn joint_class(draws: &[bool]) -> usize {
    draws
        .iter()
        .enumerate()
        .map(|(l, &d)| usize::from(d) << l)
        .sum()
}

/// Simulates the factual path of one unit.
pub fn simulate_unit(
    spec: &SynthSpec,
    panel: &CovariatePanel,
    gp: &GpSampler,
    curves: &TrendCurves,
    outcome_rng: &mut ChaCha8Rng,
    assign_rng: &mut ChaCha8Rng,
) -> Result<SemiUnit> {
    if panel.is_empty() {
        return Err(CoreError::Input(format!("panel {} is empty", panel.id)));
    }
    let untreated = untreated_outcome(spec, panel, gp, curves, outcome_rng)?;
    let len = panel.len();
    let (y, propensity, draws) =
        roll(spec, panel, &untreated, (&[], &[], &[]), len, None, Some(assign_rng))?;
    let a = draws.iter().map(|d| joint_class(d)).collect();
    Ok(SemiUnit {
        trajectory: Trajectory {
            id: panel.id,
            v: panel.v.clone(),
            a,
            y,
            x: Some(panel.x.clone()),
            len,
            gamma: spec.config.gamma_y,
            seed: 0,
        },
        untreated,
        propensity,
        draws,
    })
}

/// Outcomes for steps `t0..t0 + plan.len()` when the joint classes in `plan`
/// replace the factual treatments from step `t0` on. Deterministic given the
/// stored untreated path.
pub fn branch(spec: &SynthSpec, panel: &CovariatePanel, unit: &SemiUnit, t0: usize, plan: &[usize]) -> Result<Vec<Vec<f64>>> {
    let end = t0 + plan.len();
    if t0 == 0 || end > unit.trajectory.len {
        return Err(CoreError::Input(format!(
            "branch {t0}..{end} outside the observed span 1..={}",
            unit.trajectory.len
        )));
    }
    if plan.iter().any(|&a| a >= spec.config.num_treatments()) {
        return Err(CoreError::Input("plan treatment out of range".into()));
    }
    let (y, _, _) = roll(
        spec,
        panel,
        &unit.untreated,
        (&unit.trajectory.y[..t0], &unit.propensity[..t0], &unit.draws[..t0]),
        end,
        Some(plan),
        None,
    )?;
    Ok(y[t0..].to_vec())
}

/// Generator bound to one process seed; panels come from the stand-in or an ingested file.
pub struct SemiSynthGenerator {
    pub spec: SynthSpec,
    gp: GpSampler,
    curves: TrendCurves,
    standin: CovariateStandIn,
}

impl SemiSynthGenerator {
    pub fn new(cfg: &SemiSynthConfig, process_seed: u64) -> Result<Self> {
        let spec = SynthSpec::sample(cfg, &mut stream(process_seed, "semisynth.spec", 0))?;
        Ok(Self {
            spec,
            gp: GpSampler::new(cfg.t_max, cfg.outcome_gp_lengthscale)?,
            curves: TrendCurves::new(),
            standin: CovariateStandIn::new(cfg.t_max, DIM_X, cfg.covariate_gp_lengthscale)?,
        })
    }

    pub fn standin_panel(&self, split_seed: u64, index: u64, t: usize) -> Result<CovariatePanel> {
        self.standin.sample(&mut stream(split_seed, "semisynth.covariates", index), index, t)
    }

    pub fn unit(&self, panel: &CovariatePanel, split_seed: u64, index: u64) -> Result<SemiUnit> {
        if panel.len() > self.spec.config.t_max {
            return Err(CoreError::Input(format!(
                "panel {} has {} steps, generator supports {}",
                panel.id,
                panel.len(),
                self.spec.config.t_max
            )));
        }
        let mut outcome_rng = stream(split_seed, "semisynth.outcome", index);
        let mut assign_rng = stream(split_seed, "semisynth.assign", index);
        let mut unit = simulate_unit(&self.spec, panel, &self.gp, &self.curves, &mut outcome_rng, &mut assign_rng)?;
        unit.trajectory.seed = derive_seed(split_seed, "semisynth", index);
        Ok(unit)
    }

    /// `n` stand-in units of length `t` each.
    pub fn standin_cohort(&self, n: usize, t: usize, split_seed: u64) -> Result<Vec<(CovariatePanel, SemiUnit)>> {
        (0..n as u64)
            .map(|i| {
                let panel = self.standin_panel(split_seed, i, t)?;
                let unit = self.unit(&panel, split_seed, i)?;
                Ok((panel, unit))
            })
            .collect()
    }
}
