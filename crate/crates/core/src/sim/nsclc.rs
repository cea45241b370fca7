//! Discrete-time PK-PD model of non-small-cell lung tumour volume under
//! chemotherapy and radiotherapy, with diameter-driven treatment confounding.
//!
//! Treatments are two binary decisions folded into one categorical class
//! `chemo + 2 * radio` (K = 4). Days are indexed from 0; `a[t]` is the
//! treatment that produced `y[t]`, and `a[0]` is always class 0.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rng::{derive_seed, normal, sigmoid, stream, truncated_normal};
use crate::data::{Schema, Trajectory};
use crate::{CoreError, Result};

pub const NUM_TREATMENTS: usize = 4;
pub const NUM_GROUPS: usize = 3;
/// Diameter (cm) at which a trajectory terminates.
pub const D_MAX: f64 = 13.0;

pub fn volume_of_diameter(d: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(CoreError::Input(format!("diameter must be positive, got {d}")));
    }
    Ok(PI / 6.0 * d * d * d)
}

pub fn diameter_of_volume(v: f64) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(CoreError::Input(format!("volume must be positive, got {v}")));
    }
    Ok((6.0 * v / PI).cbrt())
}

/// Volume of the largest tumour, used to normalise outcomes for the network.
pub fn max_volume() -> f64 {
    PI / 6.0 * D_MAX.powi(3)
}

/// Drug concentration after one day of half-life decay plus a new dose.
pub fn chemo_concentration(prev: f64, dose: f64) -> Result<f64> {
    if !(prev >= 0.0) || !(dose >= 0.0) {
        return Err(CoreError::Input(format!(
            "concentrations must be nonnegative, got prev={prev} dose={dose}"
        )));
    }
    Ok(dose + prev / 2.0)
}

pub fn encode_treatment(chemo: bool, radio: bool) -> usize {
    usize::from(chemo) + 2 * usize::from(radio)
}

pub fn decode_treatment(a: usize) -> (bool, bool) {
    (a & 1 == 1, a & 2 == 2)
}

/// Mean and standard deviation of a prior truncated below at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mean: f64,
    pub sd: f64,
}

/// Initial tumour-size distribution of one cancer stage: log-diameter is
/// Normal(`mu`, `sigma`) truncated to `[ln lo, ln hi]` (diameters in cm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub weight: f64,
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Simulator parameters. Defaults follow the widely used public
/// implementation of this tumour model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsclcConfig {
    pub gamma: f64,
    pub t_max: usize,
    pub noise_sd: f64,
    pub chemo_dose: f64,
    pub radio_dose: f64,
    /// Days averaged by the treatment policy.
    pub window: usize,
    pub rho: Prior,
    pub alpha: Prior,
    pub beta_c: Prior,
    /// `beta = alpha / alpha_beta_ratio`.
    pub alpha_beta_ratio: f64,
    pub carrying_capacity_diameter: f64,
    pub cell_density: f64,
    /// Prior-mean multiplier for chemo sensitivity in group 3 and radio
    /// sensitivity in group 1.
    pub augmentation: f64,
    /// Smallest simulated diameter (cm); keeps the growth logarithm finite.
    pub floor_diameter: f64,
    pub stages: Vec<Stage>,
}

impl Default for NsclcConfig {
    fn default() -> Self {
        let stage = |name: &str, weight: f64, mu: f64, sigma: f64, hi: f64| Stage {
            name: name.into(),
            weight,
            mu,
            sigma,
            lo: 0.3,
            hi,
        };
        Self {
            gamma: 0.0,
            t_max: 60,
            noise_sd: 0.01,
            chemo_dose: 5.0,
            radio_dose: 2.0,
            window: 15,
            rho: Prior {
                mean: 7.00e-5,
                sd: 7.23e-3,
            },
            alpha: Prior {
                mean: 0.0398,
                sd: 0.168,
            },
            beta_c: Prior {
                mean: 0.028,
                sd: 0.0007,
            },
            alpha_beta_ratio: 10.0,
            carrying_capacity_diameter: 30.0,
            cell_density: 5.8e8,
            augmentation: 1.1,
            floor_diameter: 0.1,
            stages: vec![
                stage("I", 1432.0, 1.72, 4.70, 5.0),
                stage("II", 128.0, 1.96, 1.63, 13.0),
                stage("IIIA", 1306.0, 1.91, 9.40, 13.0),
                stage("IIIB", 7248.0, 2.76, 6.87, 13.0),
                stage("IV", 12840.0, 3.86, 8.82, 13.0),
            ],
        }
    }
}

impl NsclcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return bad("gamma must be finite and nonnegative");
        }
        if self.t_max == 0 || self.window == 0 {
            return bad("t_max and window must be positive");
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| !(s.weight >= 0.0)) {
            return bad("stage table missing or has negative weights");
        }
        if self.stages.iter().map(|s| s.weight).sum::<f64>() <= 0.0 {
            return bad("stage weights sum to zero");
        }
        if !(self.noise_sd >= 0.0) || !(self.cell_density >= 0.0) {
            return bad("noise sd and cell density must be nonnegative");
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            dim_v: NUM_GROUPS,
            dim_y: 1,
            dim_x: 0,
            num_treatments: NUM_TREATMENTS,
            max_len: self.t_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Group in `1..=3`.
    pub group: usize,
    pub rho: f64,
    pub carrying_capacity: f64,
    pub beta_c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub initial_volume: f64,
    pub stage: usize,
}

pub fn sample_patient<R: Rng + ?Sized>(rng: &mut R, cfg: &NsclcConfig) -> Result<PatientParams> {
    cfg.validate()?;
    let group = rng.random_range(1..=NUM_GROUPS);
    let total: f64 = cfg.stages.iter().map(|s| s.weight).sum();
    let mut u = rng.random::<f64>() * total;
    let mut stage = cfg.stages.len() - 1;
    for (i, s) in cfg.stages.iter().enumerate() {
        if u < s.weight {
            stage = i;
            break;
        }
        u -= s.weight;
    }
    let s = &cfg.stages[stage];
    let log_d = truncated_normal(rng, s.mu, s.sigma, s.lo.ln(), s.hi.ln())?;
    let initial_volume = volume_of_diameter(log_d.exp())?;

    let positive = |rng: &mut R, mean: f64, sd: f64| truncated_normal(rng, mean, sd, 0.0, f64::INFINITY);
    let rho = positive(rng, cfg.rho.mean, cfg.rho.sd)?;
    let alpha_mean = cfg.alpha.mean * if group == 1 { cfg.augmentation } else { 1.0 };
    let alpha = positive(rng, alpha_mean, cfg.alpha.sd)?;
    let beta_c_mean = cfg.beta_c.mean * if group == 3 { cfg.augmentation } else { 1.0 };
    let beta_c = positive(rng, beta_c_mean, cfg.beta_c.sd)?;
    Ok(PatientParams {
        group,
        rho,
        carrying_capacity: volume_of_diameter(cfg.carrying_capacity_diameter)?,
        beta_c,
        alpha,
        beta: alpha / cfg.alpha_beta_ratio,
        eta: cfg.cell_density,
        initial_volume,
        stage,
    })
}

/// Raw (unfloored) next volume of the discrete-time growth model.
pub fn step_tumor(
    y: f64,
    c_next: f64,
    d_next: f64,
    eps: f64,
    p: &PatientParams,
) -> Result<f64> {
    if !(y > 0.0) {
        return Err(CoreError::Input(format!("volume must be positive, got {y}")));
    }
    let growth = p.rho * (p.carrying_capacity / y).ln();
    let multiplier =
        1.0 + growth + eps - p.beta_c * c_next - (p.alpha * d_next + p.beta * d_next * d_next);
    let next = multiplier * y;
    if !next.is_finite() {
        return Err(CoreError::Numeric(format!("tumour volume became {next}")));
    }
    Ok(next)
}

/// Per-treatment assignment probability from the recent mean diameter.
pub fn treatment_probability(mean_diameter: f64, gamma: f64) -> f64 {
    sigmoid(gamma / D_MAX * (mean_diameter - D_MAX / 2.0))
}

/// Draws chemo and radio independently with the confounded probability.
pub fn assign_treatments<R: Rng + ?Sized>(diameters: &[f64], gamma: f64, rng: &mut R) -> Result<(bool, bool)> {
    if diameters.is_empty() {
        return Err(CoreError::Input("empty diameter history".into()));
    }
    let mean = diameters.iter().sum::<f64>() / diameters.len() as f64;
    let p = treatment_probability(mean, gamma);
    let chemo = rng.random::<f64>() < p;
    let radio = rng.random::<f64>() < p;
    Ok((chemo, radio))
}

/// State after observing day `t`, sufficient to continue the dynamics.
#[derive(Debug, Clone)]
pub struct SimState {
    pub t: usize,
    pub y: f64,
    pub c: f64,
    /// Diameters of the most recent days, oldest first, at most `window` long.
    pub diameters: Vec<f64>,
    pub noise: ChaCha8Rng,
}

impl SimState {
    fn check(&self) -> Result<()> {
        if !(self.c >= 0.0) || !(self.y > 0.0) {
            return Err(CoreError::Input(format!(
                "inconsistent snapshot: C={} Y={}",
                self.c, self.y
            )));
        }
        Ok(())
    }
}

/// Advances `state` by one day under treatment class `a`.
fn advance(state: &mut SimState, a: usize, p: &PatientParams, cfg: &NsclcConfig, floor: f64) -> Result<f64> {
    let (chemo, radio) = decode_treatment(a);
    let c_next = chemo_concentration(state.c, if chemo { cfg.chemo_dose } else { 0.0 })?;
    let d_next = if radio { cfg.radio_dose } else { 0.0 };
    let eps = cfg.noise_sd * normal(&mut state.noise);
    let raw = step_tumor(state.y, c_next, d_next, eps, p)?;
    state.t += 1;
    state.c = c_next;
    state.y = raw.max(floor);
    state.diameters.push(diameter_of_volume(state.y)?);
    if state.diameters.len() > cfg.window {
        state.diameters.remove(0);
    }
    Ok(raw)
}

/// Full factual path plus the snapshot after every observed day.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub trajectory: Trajectory,
    pub snapshots: Vec<SimState>,
    pub params: PatientParams,
}

/// Simulates one patient until the tumour reaches `D_MAX`, the patient
/// recovers, or `t_max` days were observed. `policy`, when given, supplies
/// the treatments for days `1..t_max` and replaces the confounded policy.
pub fn simulate_trajectory(
    params: &PatientParams,
    cfg: &NsclcConfig,
    policy: Option<&[usize]>,
    assign_rng: &mut ChaCha8Rng,
    noise_rng: ChaCha8Rng,
) -> Result<Simulated> {
    cfg.validate()?;
    if let Some(plan) = policy {
        if plan.len() + 1 < cfg.t_max {
            return Err(CoreError::Input(format!(
                "policy covers {} days, need {}",
                plan.len(),
                cfg.t_max - 1
            )));
        }
        if plan.iter().any(|&a| a >= NUM_TREATMENTS) {
            return Err(CoreError::Input("policy treatment out of range".into()));
        }
    }
    let floor = volume_of_diameter(cfg.floor_diameter)?;
    let mut state = SimState {
        t: 0,
        y: params.initial_volume.max(floor),
        c: 0.0,
        diameters: vec![diameter_of_volume(params.initial_volume.max(floor))?],
        noise: noise_rng,
    };
    let mut raw = params.initial_volume;
    let mut a = vec![0usize];
    let mut y = vec![vec![state.y]];
    let mut snapshots = Vec::with_capacity(cfg.t_max);
    loop {
        snapshots.push(state.clone());
        let died = *state.diameters.last().unwrap() >= D_MAX;
        let p_recover = (-raw.max(0.0) * params.eta).exp();
        let recovered = assign_rng.random::<f64>() < p_recover;
        if died || recovered || state.t + 1 >= cfg.t_max {
            break;
        }
        let next = match policy {
            Some(plan) => plan[state.t],
            None => {
                let (chemo, radio) = assign_treatments(&state.diameters, cfg.gamma, assign_rng)?;
                encode_treatment(chemo, radio)
            }
        };
        raw = advance(&mut state, next, params, cfg, floor)?;
        a.push(next);
        y.push(vec![state.y]);
    }
    let mut v = vec![0.0; NUM_GROUPS];
    v[params.group - 1] = 1.0;
    let len = a.len();
    Ok(Simulated {
        trajectory: Trajectory {
            id: 0,
            v,
            a,
            y,
            x: None,
            len,
            gamma: cfg.gamma,
            seed: 0,
        },
        snapshots,
        params: params.clone(),
    })
}

/// Continues the dynamics from `snapshot` under `forced` treatments without
/// termination, drawing growth noise from `noise`.
pub fn branch_counterfactual(
    snapshot: &SimState,
    params: &PatientParams,
    cfg: &NsclcConfig,
    forced: &[usize],
    noise: ChaCha8Rng,
) -> Result<Vec<f64>> {
    snapshot.check()?;
    let floor = volume_of_diameter(cfg.floor_diameter)?;
    let mut state = snapshot.clone();
    state.noise = noise;
    let mut out = Vec::with_capacity(forced.len());
    for &a in forced {
        if a >= NUM_TREATMENTS {
            return Err(CoreError::Input(format!("treatment {a} out of range")));
        }
        advance(&mut state, a, params, cfg, floor)?;
        out.push(state.y);
    }
    Ok(out)
}

/// Independent random streams of one simulated patient.
pub struct PatientStreams {
    pub params: ChaCha8Rng,
    pub assign: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl PatientStreams {
    pub fn new(seed: u64, index: u64) -> Self {
        Self {
            params: stream(seed, "nsclc.params", index),
            assign: stream(seed, "nsclc.assign", index),
            noise: stream(seed, "nsclc.noise", index),
        }
    }
}

/// Simulates patient `index` of the cohort identified by `seed`.
pub fn simulate_patient(cfg: &NsclcConfig, seed: u64, index: u64) -> Result<Simulated> {
    let mut s = PatientStreams::new(seed, index);
    let params = sample_patient(&mut s.params, cfg)?;
    let mut sim = simulate_trajectory(&params, cfg, None, &mut s.assign, s.noise)?;
    sim.trajectory.id = index;
    sim.trajectory.seed = derive_seed(seed, "nsclc", index);
    Ok(sim)
}

pub fn simulate_cohort(cfg: &NsclcConfig, n: usize, seed: u64) -> Result<Vec<Simulated>> {
    (0..n as u64).map(|i| simulate_patient(cfg, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn flat_params() -> PatientParams {
        PatientParams {
            group: 2,
            rho: 0.0,
            carrying_capacity: volume_of_diameter(30.0).unwrap(),
            beta_c: 0.0,
            alpha: 0.0,
            beta: 0.0,
            eta: f64::INFINITY,
            initial_volume: 20.0,
            stage: 0,
        }
    }

    #[test]
    fn volume_of_thirteen_cm() {
        let v = volume_of_diameter(13.0).unwrap();
        assert!((v - 1150.346_509_8).abs() < 1e-6, "{v}");
        assert!(volume_of_diameter(0.0).is_err());
        assert!(diameter_of_volume(-1.0).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        for d in [0.1, 0.3, 1.0, 2.5, 7.77, 13.0, 30.0] {
            let back = diameter_of_volume(volume_of_diameter(d).unwrap()).unwrap();
            assert!((back - d).abs() <= 1e-12 * d.max(1.0), "{d} -> {back}");
        }
    }

    #[test]
    fn concentration_halves() {
        assert_eq!(chemo_concentration(0.0, 5.0).unwrap(), 5.0);
        let c = chemo_concentration(5.0, 0.0).unwrap();
        assert_eq!(c, 2.5);
        assert_eq!(chemo_concentration(c, 0.0).unwrap(), 1.25);
        assert_eq!(chemo_concentration(0.0, 0.0).unwrap(), 0.0);
        assert!(chemo_concentration(-1.0, 0.0).is_err());
    }

    #[test]
    fn growth_step_examples() {
        let mut p = flat_params();
        p.rho = 0.01;
        let k = p.carrying_capacity;
        assert_eq!(step_tumor(k, 0.0, 0.0, 0.0, &p).unwrap(), k);
        assert!(step_tumor(k / 2.0, 0.0, 0.0, 0.0, &p).unwrap() > k / 2.0);
        let mut p = flat_params();
        p.alpha = 0.1;
        p.beta = 0.01;
        let next = step_tumor(10.0, 0.0, 2.0, 0.0, &p).unwrap();
        assert!((next / 10.0 - 0.76).abs() < 1e-12);
    }

    #[test]
    fn assignment_probability_examples() {
        assert_eq!(treatment_probability(3.0, 0.0), 0.5);
        assert_eq!(treatment_probability(D_MAX / 2.0, 12.0), 0.5);
        assert!((treatment_probability(13.0, 8.0) - 0.982_013_790_037_908_5).abs() < 1e-12);
    }

    #[test]
    fn flat_patient_stays_constant() {
        let mut cfg = NsclcConfig::default();
        cfg.noise_sd = 0.0;
        let p = flat_params();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sim = simulate_trajectory(&p, &cfg, None, &mut rng, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sim.trajectory.len, 60);
        assert!(sim.trajectory.y.iter().all(|y| y[0] == 20.0));
    }

    #[test]
    fn zero_density_recovers_immediately() {
        let cfg = NsclcConfig::default();
        let mut p = flat_params();
        p.eta = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sim = simulate_trajectory(&p, &cfg, None, &mut rng, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sim.trajectory.len, 1);
    }

    #[test]
    fn short_policy_rejected() {
        let cfg = NsclcConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = vec![0; 10];
        let r = simulate_trajectory(&flat_params(), &cfg, Some(&plan), &mut rng, ChaCha8Rng::seed_from_u64(1));
        assert!(r.is_err());
    }

    #[test]
    fn empty_branch_is_empty() {
        let sim = simulate_patient(&NsclcConfig::default(), 3, 0).unwrap();
        let s = &sim.snapshots[0];
        let out = branch_counterfactual(s, &sim.params, &NsclcConfig::default(), &[], s.noise.clone()).unwrap();
        assert!(out.is_empty());
        let mut broken = s.clone();
        broken.c = -1.0;
        assert!(branch_counterfactual(&broken, &sim.params, &NsclcConfig::default(), &[1], s.noise.clone()).is_err());
    }
}
