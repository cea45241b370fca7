//! Prediction heads on top of the representation and treatment conditioning.

use caetc_autodiff::{Bindings, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform, Backbone, BackboneConfig, Dropout, Linear};
use crate::batch::Batch;
use crate::data::Schema;
use crate::sim::rng::stream;
use crate::{CoreError, Result};

/// How the planned treatment enters the outcome and treatment heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `Φ ⊙ ξ(a) + β(a)` with learned per-treatment tables.
    Film,
    /// FiLM held at `ξ = 1, β = 0` plus a learned per-treatment bias after the
    /// head's first linear map.
    IdentityWithBias,
    /// One-hot treatment concatenated to `Φ` before the head's first linear map.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Width of each input projection; the hidden size when unset.
    pub projection_dim: Option<usize>,
    pub conditioning: Conditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            projection_dim: None,
            conditioning: Conditioning::Film,
        }
    }
}

/// Linear-ELU-Linear with an optional per-treatment bias table after the first map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub first: Linear,
    pub treatment_bias: ParamId,
    pub second: Linear,
}

impl Head {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, hidden: usize, k: usize, outputs: usize, rng: &mut R) -> Self {
        let first = Linear::new(params, &format!("{name}.first"), hidden, hidden, rng);
        let treatment_bias = params.insert(
            format!("{name}.treatment_bias"),
            uniform(rng, &[k, hidden], 1.0 / (hidden as f64).sqrt()),
        );
        let second = Linear::new(params, &format!("{name}.second"), hidden, outputs, rng);
        Self {
            first,
            treatment_bias,
            second,
        }
    }

    fn ids(&self) -> [ParamId; 5] {
        [self.first.w, self.first.b, self.treatment_bias, self.second.w, self.second.b]
    }

    fn finish(&self, g: &Graph, p: &Bindings, pre: Var) -> Result<Var> {
        let h = g.elu(g.add_row(pre, p.var(self.first.b))?)?;
        self.second.forward(g, p, h)
    }

    fn plain(&self, g: &Graph, p: &Bindings, x: Var) -> Result<Var> {
        let pre = g.matmul(x, p.var(self.first.w))?;
        self.finish(g, p, pre)
    }

    fn with_bias(&self, g: &Graph, p: &Bindings, x: Var, a: &[usize]) -> Result<Var> {
        let pre = g.matmul(x, p.var(self.first.w))?;
        let pre = g.add(pre, g.gather_rows(p.var(self.treatment_bias), a)?)?;
        self.finish(g, p, pre)
    }

    fn concatenated(&self, g: &Graph, p: &Bindings, x: Var, a: Option<&[usize]>, k: usize) -> Result<Var> {
        let rows = g.shape(x)[0];
        let mut onehot = vec![0.0; rows * k];
        if let Some(a) = a {
            for (r, &c) in a.iter().enumerate() {
                if c >= k {
                    return Err(CoreError::Input(format!("treatment {c} out of range for K = {k}")));
                }
                onehot[r * k + c] = 1.0;
            }
        }
        let input = g.concat_cols(&[x, g.constant(Tensor::new(vec![rows, k], onehot)?)])?;
        let weight = g.concat_rows(&[p.var(self.first.w), p.var(self.treatment_bias)])?;
        let pre = g.matmul(input, weight)?;
        self.finish(g, p, pre)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: Schema,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub film_scale: ParamId,
    pub film_shift: ParamId,
    pub treatment_head: Head,
    pub outcome_head: Head,
    pub covariate_head: Option<Head>,
    pub balancer: Head,
}

impl Model {
    /// Registers parameters in a fixed order so every conditioning mode draws
    /// the same initial values from `seed`.
    pub fn new(config: &ModelConfig, schema: &Schema, seed: u64) -> Result<Self> {
        Self::with_params(config, schema, seed, None)
    }

    /// Rebuilds a model around saved parameters.
    pub fn from_params(config: &ModelConfig, schema: &Schema, params: &ParamSet) -> Result<Self> {
        Self::with_params(config, schema, 0, Some(params))
    }

    fn with_params(config: &ModelConfig, schema: &Schema, seed: u64, saved: Option<&ParamSet>) -> Result<Self> {
        if schema.num_treatments == 0 || schema.dim_y == 0 {
            return Err(CoreError::Config("schema needs treatments and outcomes".into()));
        }
        let mut rng = stream(seed, "model.init", 0);
        let mut params = ParamSet::new();
        let h = config.backbone.hidden_units;
        let k = schema.num_treatments;
        let v = config.projection_dim.unwrap_or(h);
        let backbone = Backbone::new(
            &config.backbone,
            &mut params,
            schema.dim_v + k + schema.dim_y,
            schema.dim_x,
            v,
            &mut rng,
        )?;
        let film_scale = params.insert("film.scale", Tensor::ones(&[k, h]));
        let film_shift = params.insert("film.shift", Tensor::zeros(&[k, h]));
        let treatment_head = Head::new(&mut params, "treatment_head", h, k, k, &mut rng);
        let outcome_head = Head::new(&mut params, "outcome_head", h, k, schema.dim_y, &mut rng);
        let covariate_head = schema
            .has_x()
            .then(|| Head::new(&mut params, "covariate_head", h, k, schema.dim_x, &mut rng));
        let balancer = Head::new(&mut params, "balancer", h, k, k, &mut rng);
        if let Some(saved) = saved {
            params.copy_from(saved)?;
        }
        Ok(Self {
            config: config.clone(),
            schema: *schema,
            params,
            backbone,
            film_scale,
            film_shift,
            treatment_head,
            outcome_head,
            covariate_head,
            balancer,
        })
    }

    pub fn hidden_units(&self) -> usize {
        self.config.backbone.hidden_units
    }

    pub fn num_treatments(&self) -> usize {
        self.schema.num_treatments
    }

    /// Balancer parameters that its loss actually reaches.
    pub fn balancer_ids(&self) -> Vec<ParamId> {
        self.balancer.ids().into_iter().filter(|&id| self.is_live(id)).collect()
    }

    pub fn is_balancer(&self, id: ParamId) -> bool {
        self.balancer.ids().contains(&id)
    }

    /// False for tables registered in every mode but unused by the current
    /// one: FiLM tables outside FiLM mode, the conditioned heads' bias
    /// tables inside it, and the bias tables of the unconditioned heads.
    pub fn is_live(&self, id: ParamId) -> bool {
        let film_mode = self.config.conditioning == Conditioning::Film;
        if id == self.film_scale || id == self.film_shift {
            return film_mode;
        }
        if id == self.balancer.treatment_bias || self.covariate_head.is_some_and(|h| h.treatment_bias == id) {
            return false;
        }
        let conditioned_bias = id == self.treatment_head.treatment_bias || id == self.outcome_head.treatment_bias;
        !(conditioned_bias && film_mode)
    }

    /// Parameters updated by the main objective.
    pub fn main_trainable(&self, id: ParamId) -> bool {
        !self.is_balancer(id) && self.is_live(id)
    }

    pub fn representation<R: Rng>(
        &self,
        g: &Graph,
        p: &Bindings,
        batch: &Batch,
        cutoff: Option<&[usize]>,
        drop: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        self.backbone.forward(g, p, batch, cutoff, drop)
    }

    /// `repr ⊙ ξ(a) + β(a)`, one treatment per row.
    pub fn film(&self, g: &Graph, p: &Bindings, repr: Var, a: &[usize]) -> Result<Var> {
        let xi = g.gather_rows(p.var(self.film_scale), a)?;
        let beta = g.gather_rows(p.var(self.film_shift), a)?;
        Ok(g.add(g.mul(repr, xi)?, beta)?)
    }

    fn conditioned(&self, head: &Head, g: &Graph, p: &Bindings, phi: Var, a: Option<&[usize]>) -> Result<Var> {
        match (self.config.conditioning, a) {
            (Conditioning::Concat, _) => head.concatenated(g, p, phi, a, self.num_treatments()),
            (_, None) => head.plain(g, p, phi),
            (Conditioning::Film, Some(a)) => head.plain(g, p, self.film(g, p, phi, a)?),
            (Conditioning::IdentityWithBias, Some(a)) => {
                let c = self.film(g, p, phi, a)?;
                head.with_bias(g, p, c, a)
            }
        }
    }

    /// Outcome head on `phi` (reconstruction) or on `phi` conditioned on `a`.
    pub fn outcome(&self, g: &Graph, p: &Bindings, phi: Var, a: Option<&[usize]>) -> Result<Var> {
        self.conditioned(&self.outcome_head, g, p, phi, a)
    }

    /// Treatment-classifier logits, unconditioned or conditioned on `a`.
    pub fn treatment_logits(&self, g: &Graph, p: &Bindings, phi: Var, a: Option<&[usize]>) -> Result<Var> {
        self.conditioned(&self.treatment_head, g, p, phi, a)
    }

    pub fn covariates(&self, g: &Graph, p: &Bindings, phi: Var) -> Result<Option<Var>> {
        self.covariate_head.as_ref().map(|h| h.plain(g, p, phi)).transpose()
    }

    pub fn balancer_logits(&self, g: &Graph, p: &Bindings, phi: Var) -> Result<Var> {
        self.balancer.plain(g, p, phi)
    }
}
