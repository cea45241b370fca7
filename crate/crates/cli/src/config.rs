//! Resolved run settings. Each is read from an optional TOML file, then
//! overridden by any flags given on the command line.

use std::path::Path;

use caetc_core::model::{Conditioning, ModelConfig};
use caetc_core::sim::nsclc::NsclcConfig;
use caetc_core::sim::rng::derive_seed;
use caetc_core::sim::semisynth::SemiSynthConfig;
use caetc_core::train::{Objective, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{SimulateNsclcArgs, SimulateSemisynthArgs, TrainArgs};
use crate::CliError;

pub const CONFIG_ECHO: &str = "config.toml";

pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_echo<T: Serialize>(dir: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Usage(format!("cannot echo config: {e}")))?;
    let path = dir.join(CONFIG_ECHO);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

/// Seed of one named split.
pub fn split_seed(master: u64, split: &str) -> u64 {
    derive_seed(master, &format!("split.{split}"), 0)
}

fn tenth(n: usize) -> usize {
    (n / 10).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsclcRun {
    pub n_train: usize,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub seed: u64,
    pub simulator: NsclcConfig,
}

impl Default for NsclcRun {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_val: None,
            n_test: None,
            seed: 0,
            simulator: NsclcConfig::default(),
        }
    }
}

impl NsclcRun {
    pub fn resolve(args: &SimulateNsclcArgs) -> Result<Self, CliError> {
        let mut run: Self = load_file(args.config.as_deref())?;
        if let Some(n) = args.n {
            run.n_train = n;
        }
        run.n_val = args.n_val.or(run.n_val).or(Some(tenth(run.n_train)));
        run.n_test = args.n_test.or(run.n_test).or(Some(tenth(run.n_train)));
        if let Some(g) = args.gamma {
            run.simulator.gamma = g;
        }
        if let Some(t) = args.t_max {
            run.simulator.t_max = t;
        }
        if let Some(s) = args.seed {
            run.seed = s;
        }
        run.simulator.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if run.n_train == 0 || run.n_val == Some(0) || run.n_test == Some(0) {
            return Err(CliError::Usage("split sizes must be positive".into()));
        }
        Ok(run)
    }

    pub fn splits(&self) -> [(&'static str, usize); 3] {
        [
            ("train", self.n_train),
            ("val", self.n_val.unwrap_or(tenth(self.n_train))),
            ("test", self.n_test.unwrap_or(tenth(self.n_train))),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSynthRun {
    pub n_train: usize,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub seed: u64,
    pub generator: SemiSynthConfig,
}

impl Default for SemiSynthRun {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: None,
            n_test: None,
            seed: 0,
            generator: SemiSynthConfig::default(),
        }
    }
}

impl SemiSynthRun {
    pub fn resolve(args: &SimulateSemisynthArgs) -> Result<Self, CliError> {
        let mut run: Self = load_file(args.config.as_deref())?;
        if let Some(n) = args.n {
            run.n_train = n;
        }
        run.n_val = args.n_val.or(run.n_val).or(Some(tenth(run.n_train)));
        run.n_test = args.n_test.or(run.n_test).or(Some(tenth(run.n_train)));
        if let Some(t) = args.t_max {
            run.generator.t_max = t;
        }
        if let Some(g) = args.gamma_y {
            run.generator.gamma_y = g;
        }
        if let Some(g) = args.gamma_x {
            run.generator.gamma_x = g;
        }
        if let Some(s) = args.seed {
            run.seed = s;
        }
        run.generator.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if run.n_train == 0 || run.n_val == Some(0) || run.n_test == Some(0) {
            return Err(CliError::Usage("split sizes must be positive".into()));
        }
        Ok(run)
    }

    pub fn splits(&self) -> [(&'static str, usize); 3] {
        [
            ("train", self.n_train),
            ("val", self.n_val.unwrap_or(tenth(self.n_train))),
            ("test", self.n_test.unwrap_or(tenth(self.n_train))),
        ]
    }

    pub fn process_seed(&self) -> u64 {
        derive_seed(self.seed, "process", 0)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub baseline: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainRun {
    /// Switches to plain outcome regression: concatenated treatment input,
    /// outcome losses only and no covariate cutoff.
    pub fn apply_baseline(&mut self) {
        self.baseline = true;
        self.model.conditioning = Conditioning::Concat;
        self.train.objective = Objective::Baseline;
        self.train.temporal_cutoff = false;
    }

    pub fn resolve(args: &TrainArgs) -> Result<Self, CliError> {
        let mut run: Self = load_file(args.config.as_deref())?;
        let b = &mut run.model.backbone;
        if let Some(k) = args.backbone {
            b.kind = k.into();
        }
        if let Some(h) = args.hidden {
            b.hidden_units = h;
        }
        if let Some(l) = args.layers {
            b.num_layers = l;
        }
        if let Some(k) = args.kernel_size {
            b.kernel_size = k;
        }
        if let Some(d) = args.dropout {
            b.dropout_rate = d;
        }
        if args.projection_dim.is_some() {
            run.model.projection_dim = args.projection_dim;
        }
        let t = &mut run.train;
        if let Some(e) = args.epochs {
            t.epochs = e;
        }
        if let Some(n) = args.batch_size {
            t.batch_size = n;
        }
        if let Some(lr) = args.lr {
            t.learning_rate = lr;
        }
        if let Some(d) = args.delta_a {
            t.weights.delta_a = d;
        }
        if let Some(d) = args.delta_x {
            t.weights.delta_x = d;
        }
        if let Some(d) = args.delta_e {
            t.weights.delta_e = d;
        }
        if let Some(s) = args.label_smoothing {
            t.weights.label_smoothing = s;
        }
        if args.no_cutoff {
            t.temporal_cutoff = false;
        }
        if let Some(s) = args.seed {
            t.seed = s;
        }
        if args.baseline || run.baseline {
            run.apply_baseline();
        }
        run.model.backbone.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        run.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(run)
    }
}
