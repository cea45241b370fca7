//! Time-varying covariate panels: a synthetic stand-in generator and an
//! ingester for hourly ICU extracts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::basis::{CubicBasis, GpSampler};
use super::rng::normal;
use crate::{CoreError, Result};

/// Hourly vital-sign and laboratory channels, in column order.
pub const CHANNELS: [&str; 25] = [
    "heart rate",
    "red blood cell count",
    "sodium",
    "mean blood pressure",
    "systemic vascular resistance",
    "glucose",
    "chloride urine",
    "glascow coma scale total",
    "hematocrit",
    "positive end-expiratory pressure set",
    "respiratory rate",
    "prothrombin time pt",
    "cholesterol",
    "hemoglobin",
    "creatinine",
    "blood urea nitrogen",
    "bicarbonate",
    "calcium ionized",
    "partial pressure of carbon dioxide",
    "magnesium",
    "anion gap",
    "phosphorous",
    "venous pvo2",
    "platelets",
    "calcium urine",
];

pub const DIM_X: usize = CHANNELS.len();
/// One-hot static block: 2 gender slots, 32 ethnicity slots, 10 age decades.
pub const GENDER_SLOTS: usize = 2;
pub const ETHNICITY_SLOTS: usize = 32;
pub const AGE_SLOTS: usize = 10;
pub const DIM_V: usize = GENDER_SLOTS + ETHNICITY_SLOTS + AGE_SLOTS;
pub const MAX_HOURS: usize = 100;
pub const MIN_HOURS: usize = 20;

/// Per-unit covariates: `x` is `[T, 25]`, `v` is the 44-dim one-hot block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePanel {
    pub id: u64,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

impl CovariatePanel {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

fn static_one_hot(gender: usize, ethnicity: usize, age_decade: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM_V];
    v[gender.min(GENDER_SLOTS - 1)] = 1.0;
    v[GENDER_SLOTS + ethnicity.min(ETHNICITY_SLOTS - 1)] = 1.0;
    v[GENDER_SLOTS + ETHNICITY_SLOTS + age_decade.min(AGE_SLOTS - 1)] = 1.0;
    v
}

/// Generates synthetic panels in place of restricted ICU data. Each channel is
/// `(g + s) / sqrt(2)` with `g` a unit-variance Matérn-5/2 path and `s` a cubic
/// spline with standard-normal coefficients divided pointwise by the basis
/// norm, so every entry is marginally standard normal.
#[derive(Debug, Clone)]
pub struct CovariateStandIn {
    gp: GpSampler,
    basis: CubicBasis,
    dims: usize,
}

impl CovariateStandIn {
    pub fn new(t_max: usize, dims: usize, gp_lengthscale: f64) -> Result<Self> {
        if dims == 0 {
            return Err(CoreError::Config("covariate dimension must be positive".into()));
        }
        Ok(Self {
            gp: GpSampler::new(t_max, gp_lengthscale)?,
            basis: CubicBasis::new(8, 0.0, MAX_HOURS as f64)?,
            dims,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, id: u64, t: usize) -> Result<CovariatePanel> {
        let mut x = vec![vec![0.0; self.dims]; t];
        for c in 0..self.dims {
            let g = self.gp.sample(rng, t)?;
            let coef: Vec<f64> = (0..self.basis.len()).map(|_| normal(rng)).collect();
            for (i, row) in x.iter_mut().enumerate() {
                let b = self.basis.eval(i as f64);
                let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s: f64 = b.iter().zip(&coef).map(|(b, c)| b * c).sum::<f64>() / norm;
                row[c] = (g[i] + s) / std::f64::consts::SQRT_2;
            }
        }
        let v = static_one_hot(
            rng.random_range(0..GENDER_SLOTS),
            rng.random_range(0..ETHNICITY_SLOTS),
            rng.random_range(0..AGE_SLOTS),
        );
        Ok(CovariatePanel { id, x, v })
    }
}

/// Outcome of reading an hourly extract.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub panels: Vec<CovariatePanel>,
    pub dropped: usize,
    pub warnings: Vec<String>,
}

struct RawPatient {
    rows: Vec<(f64, Vec<Option<f64>>)>,
    gender: String,
    ethnicity: String,
    age: f64,
}

fn fill(values: &mut [Option<f64>]) {
    let mut last = None;
    for v in values.iter_mut() {
        match v {
            Some(x) => last = Some(*x),
            None => *v = last,
        }
    }
    let mut next = None;
    for v in values.iter_mut().rev() {
        match v {
            Some(x) => next = Some(*x),
            None => *v = next,
        }
    }
}

/// Reads a comma-separated hourly table with columns `subject_id`, `hours_in`,
/// the 25 channel names, `gender`, `ethnicity` and `age`. Patients with fewer
/// than 20 hourly rows are dropped; the rest are cut at 100 hours, forward
/// then backward filled and z-normalised per channel. Channels with zero
/// variance, or never observed for a patient, become zeros.
pub fn ingest_hourly_csv(path: &Path) -> Result<Ingested> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CoreError::Format(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::Format(format!("missing required column '{name}'")))
    };
    let id_col = col("subject_id")?;
    let hour_col = col("hours_in")?;
    let channel_cols = CHANNELS.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let (g_col, e_col, a_col) = (col("gender")?, col("ethnicity")?, col("age")?);
    let mut known: Vec<usize> = vec![id_col, hour_col, g_col, e_col, a_col];
    known.extend(&channel_cols);
    let mut warnings = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if !known.contains(&i) {
            let msg = format!("ignoring unknown column '{h}'");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let mut patients: BTreeMap<String, RawPatient> = BTreeMap::new();
    let mut order = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CoreError::Format(format!("row {}: {e}", line + 2)))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |i: usize| -> Result<Option<f64>> {
            let s = field(i);
            if s.is_empty() || s.eq_ignore_ascii_case("nan") {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| CoreError::Format(format!("row {}: bad number '{s}'", line + 2)))
        };
        let id = field(id_col).to_string();
        let hour = parse(hour_col)?.ok_or_else(|| {
            CoreError::Format(format!("row {}: missing hours_in", line + 2))
        })?;
        let values = channel_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?;
        let entry = patients.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawPatient {
                rows: Vec::new(),
                gender: String::new(),
                ethnicity: String::new(),
                age: f64::NAN,
            }
        });
        if entry.gender.is_empty() {
            entry.gender = field(g_col).to_uppercase();
        }
        if entry.ethnicity.is_empty() {
            entry.ethnicity = field(e_col).to_uppercase();
        }
        if entry.age.is_nan() {
            entry.age = parse(a_col)?.unwrap_or(f64::NAN);
        }
        entry.rows.push((hour, values));
    }

    let mut ethnicities: Vec<&str> = patients.values().map(|p| p.ethnicity.as_str()).collect();
    ethnicities.sort_unstable();
    ethnicities.dedup();
    if ethnicities.len() > ETHNICITY_SLOTS {
        warnings.push(format!(
            "{} ethnicity values; values past slot {} share the last slot",
            ethnicities.len(),
            ETHNICITY_SLOTS
        ));
    }

    let mut dropped = 0;
    let mut kept: Vec<(u64, Vec<Vec<Option<f64>>>, Vec<f64>)> = Vec::new();
    for (idx, id) in order.iter().enumerate() {
        let p = &patients[id];
        if p.rows.len() < MIN_HOURS {
            dropped += 1;
            continue;
        }
        let mut rows = p.rows.clone();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.truncate(MAX_HOURS);
        let mut columns: Vec<Vec<Option<f64>>> =
            (0..DIM_X).map(|c| rows.iter().map(|r| r.1[c]).collect()).collect();
        columns.iter_mut().for_each(|c| fill(c));
        let gender = usize::from(p.gender.starts_with('M'));
        let eth = ethnicities.binary_search(&p.ethnicity.as_str()).unwrap_or(0);
        let age = if p.age.is_finite() { (p.age.max(0.0) / 10.0) as usize } else { 0 };
        let numeric_id = id.parse::<u64>().unwrap_or(idx as u64);
        kept.push((numeric_id, columns, static_one_hot(gender, eth, age)));
    }

    let mut stats = vec![(0.0f64, 0.0f64, 0usize); DIM_X];
    for (_, columns, _) in &kept {
        for (c, col) in columns.iter().enumerate() {
            for v in col.iter().flatten() {
                stats[c].0 += v;
                stats[c].1 += v * v;
                stats[c].2 += 1;
            }
        }
    }
    let moments: Vec<(f64, f64)> = stats
        .iter()
        .map(|&(s, ss, n)| {
            if n == 0 {
                return (0.0, 0.0);
            }
            let mean = s / n as f64;
            let var = (ss / n as f64 - mean * mean).max(0.0);
            (mean, var.sqrt())
        })
        .collect();
    let panels = kept
        .into_iter()
        .map(|(id, columns, v)| {
            let t = columns[0].len();
            let x = (0..t)
                .map(|i| {
                    (0..DIM_X)
                        .map(|c| {
                            let (mean, sd) = moments[c];
                            match columns[c][i] {
                                Some(val) if sd > 1e-12 => (val - mean) / sd,
                                _ => 0.0,
                            }
                        })
                        .collect()
                })
                .collect();
            CovariatePanel { id, x, v }
        })
        .collect();
    Ok(Ingested {
        panels,
        dropped,
        warnings,
    })
}
