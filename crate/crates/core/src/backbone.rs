//! Causal sequence encoders: input projections, the temporal cutoff, and the
//! LSTM and TCN stacks that produce the per-step representation.

use caetc_autodiff::{Bindings, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Lstm,
    Tcn,
}

impl std::str::FromStr for BackboneKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(Self::Lstm),
            "tcn" => Ok(Self::Tcn),
            other => Err(CoreError::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub num_layers: usize,
    pub hidden_units: usize,
    pub kernel_size: usize,
    pub dilation_factor: usize,
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Lstm,
            num_layers: 1,
            hidden_units: 16,
            kernel_size: 3,
            dilation_factor: 2,
            dropout_rate: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_units == 0 {
            return Err(CoreError::Config("backbone needs at least one layer and one unit".into()));
        }
        if self.kind == BackboneKind::Tcn && (self.kernel_size == 0 || self.dilation_factor == 0) {
            return Err(CoreError::Config("kernel size and dilation factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Steps visible to one TCN output, `None` for the LSTM.
    pub fn receptive_field(&self) -> Option<usize> {
        if self.kind != BackboneKind::Tcn {
            return None;
        }
        let span: usize = (0..self.num_layers)
            .map(|l| self.dilation_factor.saturating_pow(l as u32))
            .fold(0usize, usize::saturating_add);
        Some(1 + 2 * (self.kernel_size - 1) * span)
    }

    /// Warning text when a TCN cannot see a whole trajectory of `max_len` steps.
    pub fn receptive_field_warning(&self, max_len: usize) -> Option<String> {
        let rf = self.receptive_field()?;
        (rf < max_len).then(|| format!("TCN receptive field {rf} is shorter than trajectories of {max_len} steps"))
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Linear layer `x W + b` stored as `[in, out]` and `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            w: params.insert(format!("{name}.w"), uniform(rng, &[inputs, outputs], bound)),
            b: params.insert(format!("{name}.b"), uniform(rng, &[outputs], bound)),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.w))?;
        Ok(g.add_row(h, p.var(self.b))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputProjection {
    pub vay: Linear,
    pub x: Option<Linear>,
    pub missing: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LstmLayer {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TcnBlock {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
    residual: Option<ParamId>,
    dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Layers {
    Lstm(Vec<LstmLayer>),
    Tcn(Vec<TcnBlock>),
}

/// Parameter handles of the representation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub input: InputProjection,
    layers: Layers,
    pub output: Linear,
}

/// Dropout masks drawn from `rng`; `None` runs deterministically.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout<R: Rng>(g: &Graph, x: Var, drop: &mut Option<Dropout<'_, R>>) -> Result<Var> {
    let Some(d) = drop.as_mut() else {
        return Ok(x);
    };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x);
    let keep = 1.0 / (1.0 - d.rate);
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    Ok(g.mul(x, mask)?)
}

impl Backbone {
    /// Registers all parameters. `dim_vay` is `dim(V) + K + dim(Y)`; `dim_x` is
    /// zero for datasets without time-varying covariates.
    pub fn new<R: Rng + ?Sized>(
        config: &BackboneConfig,
        params: &mut ParamSet,
        dim_vay: usize,
        dim_x: usize,
        projection_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if projection_dim == 0 {
            return Err(CoreError::Config("projection dimension must be positive".into()));
        }
        if dim_x > 0 && projection_dim <= dim_x {
            return Err(CoreError::Config(format!(
                "projection dimension {projection_dim} must exceed covariate dimension {dim_x}"
            )));
        }
        let v = projection_dim;
        let input = InputProjection {
            vay: Linear::new(params, "input.vay", dim_vay, v, rng),
            x: (dim_x > 0).then(|| Linear::new(params, "input.x", dim_x, v, rng)),
            missing: params.insert("input.missing", uniform(rng, &[1, v], 1.0 / (v as f64).sqrt())),
            dim: v,
        };
        let h = config.hidden_units;
        let bound = 1.0 / (h as f64).sqrt();
        let layers = match config.kind {
            BackboneKind::Lstm => Layers::Lstm(
                (0..config.num_layers)
                    .map(|l| {
                        let inputs = if l == 0 { 2 * v } else { h };
                        LstmLayer {
                            w: params.insert(format!("lstm{l}.w"), uniform(rng, &[inputs, 4 * h], bound)),
                            u: params.insert(format!("lstm{l}.u"), uniform(rng, &[h, 4 * h], bound)),
                            b: params.insert(format!("lstm{l}.b"), uniform(rng, &[4 * h], bound)),
                        }
                    })
                    .collect(),
            ),
            BackboneKind::Tcn => {
                let k = config.kernel_size;
                Layers::Tcn(
                    (0..config.num_layers)
                        .map(|l| {
                            let inputs = if l == 0 { 2 * v } else { h };
                            let b1 = 1.0 / ((k * inputs) as f64).sqrt();
                            let b2 = 1.0 / ((k * h) as f64).sqrt();
                            TcnBlock {
                                conv1: params.insert(format!("tcn{l}.conv1"), uniform(rng, &[k, inputs, h], b1)),
                                bias1: params.insert(format!("tcn{l}.bias1"), uniform(rng, &[h], b1)),
                                conv2: params.insert(format!("tcn{l}.conv2"), uniform(rng, &[k, h, h], b2)),
                                bias2: params.insert(format!("tcn{l}.bias2"), uniform(rng, &[h], b2)),
                                residual: (inputs != h).then(|| {
                                    let b = 1.0 / (inputs as f64).sqrt();
                                    params.insert(format!("tcn{l}.residual"), uniform(rng, &[inputs, h], b))
                                }),
                                dilation: config.dilation_factor.pow(l as u32),
                            }
                        })
                        .collect(),
                )
            }
        };
        let output = Linear::new(params, "backbone.out", h, h, rng);
        Ok(Self {
            config: config.clone(),
            input,
            layers,
            output,
        })
    }

    pub fn hidden_units(&self) -> usize {
        self.config.hidden_units
    }

    /// Concatenation of the projected `[V, A_t, Y_t]` and the projected `X_t`
    /// (or the missingness vector without covariates), `[rows, 2v]`.
    pub fn project_inputs(&self, g: &Graph, p: &Bindings, batch: &Batch, cutoff: Option<&[usize]>) -> Result<Var> {
        let rows = batch.rows();
        let want = g.shape(p.var(self.input.vay.w))[0];
        if batch.vay.cols() != want {
            return Err(CoreError::Input(format!(
                "input width {} does not match projection width {want}",
                batch.vay.cols()
            )));
        }
        let vay = self.input.vay.forward(g, p, g.constant(batch.vay.clone()))?;
        let ones = g.constant(Tensor::ones(&[rows, 1]));
        let missing = g.matmul(ones, p.var(self.input.missing))?;
        let x_slot = match (&self.input.x, &batch.x) {
            (Some(lin), Some(x)) => {
                let projected = lin.forward(g, p, g.constant(x.clone()))?;
                match cutoff {
                    Some(cuts) => apply_temporal_cutoff(g, projected, missing, batch, cuts)?,
                    None => projected,
                }
            }
            (None, None) => missing,
            _ => {
                return Err(CoreError::Input(
                    "covariates present in only one of model and batch".into(),
                ))
            }
        };
        Ok(g.concat_cols(&[vay, x_slot])?)
    }

    /// Representation `[rows, hidden]` for every step of `batch`.
    pub fn forward<R: Rng>(
        &self,
        g: &Graph,
        p: &Bindings,
        batch: &Batch,
        cutoff: Option<&[usize]>,
        drop: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let inputs = self.project_inputs(g, p, batch, cutoff)?;
        let hidden = self.encode(g, p, inputs, batch.units, drop)?;
        let out = self.output.forward(g, p, hidden)?;
        Ok(g.elu(out)?)
    }

    /// Runs the recurrent or convolutional layers over time-major projected
    /// inputs `[steps * units, 2v]`, before the output map.
    pub fn encode<R: Rng>(
        &self,
        g: &Graph,
        p: &Bindings,
        inputs: Var,
        units: usize,
        mut drop: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let rows = g.shape(inputs)[0];
        if units == 0 || rows % units != 0 {
            return Err(CoreError::Input(format!("{rows} rows do not split into {units} units")));
        }
        let steps = rows / units;
        match &self.layers {
            Layers::Lstm(layers) => {
                let mut x = inputs;
                for (l, layer) in layers.iter().enumerate() {
                    x = lstm_layer(g, p, layer, x, units, steps, self.config.hidden_units)?;
                    if l + 1 < layers.len() {
                        x = dropout(g, x, &mut drop)?;
                    }
                }
                Ok(x)
            }
            Layers::Tcn(blocks) => {
                let mut x = inputs;
                for block in blocks {
                    x = tcn_block(g, p, block, x, units, &mut drop)?;
                }
                Ok(x)
            }
        }
    }
}

/// Replaces the covariate slot by `missing` for every step `t >= t_cut` (1-based
/// steps, per unit). `t_cut = len + 1` leaves a unit untouched.
pub fn apply_temporal_cutoff(g: &Graph, projected: Var, missing: Var, batch: &Batch, cuts: &[usize]) -> Result<Var> {
    if cuts.len() != batch.units {
        return Err(CoreError::Input(format!(
            "{} cutoffs for {} units",
            cuts.len(),
            batch.units
        )));
    }
    for (b, (&c, &len)) in cuts.iter().zip(&batch.lens).enumerate() {
        if c < 1 || c > len + 1 {
            return Err(CoreError::Input(format!(
                "cutoff {c} for unit {b} outside 1..={}",
                len + 1
            )));
        }
    }
    if cuts.iter().zip(&batch.lens).all(|(&c, &len)| c == len + 1) {
        return Ok(projected);
    }
    let shape = g.shape(projected);
    let (rows, dim) = (shape[0], shape[1]);
    let mut keep = vec![0.0; rows * dim];
    for t in 0..batch.steps {
        for (b, &cut) in cuts.iter().enumerate() {
            if t + 1 < cut {
                let r = t * batch.units + b;
                keep[r * dim..(r + 1) * dim].fill(1.0);
            }
        }
    }
    let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let keep = g.constant(Tensor::new(vec![rows, dim], keep)?);
    let drop = g.constant(Tensor::new(vec![rows, dim], drop)?);
    let a = g.mul(projected, keep)?;
    let b = g.mul(missing, drop)?;
    Ok(g.add(a, b)?)
}

/// Errors with the first step whose row of `v` is not finite; rows are time-major.
fn check_finite(g: &Graph, v: Var, what: &str, first_step: usize, units: usize) -> Result<()> {
    let bad = g.with_value(v, |t| {
        (0..t.rows()).find(|&r| t.row(r).iter().any(|x| !x.is_finite()))
    });
    match bad {
        None => Ok(()),
        Some(r) => Err(CoreError::Numeric(format!(
            "non-finite {what} at step {}",
            first_step + r / units
        ))),
    }
}

fn lstm_layer(g: &Graph, p: &Bindings, layer: &LstmLayer, x: Var, units: usize, steps: usize, h: usize) -> Result<Var> {
    let xw = g.add_row(g.matmul(x, p.var(layer.w))?, p.var(layer.b))?;
    let u = p.var(layer.u);
    let mut state: Option<(Var, Var)> = None;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut gates = g.slice_rows(xw, t * units, units)?;
        if let Some((h_prev, _)) = state {
            gates = g.add(gates, g.matmul(h_prev, u)?)?;
        }
        let i = g.sigmoid(g.slice_cols(gates, 0, h)?)?;
        let f = g.sigmoid(g.slice_cols(gates, h, h)?)?;
        let cand = g.tanh(g.slice_cols(gates, 2 * h, h)?)?;
        let o = g.sigmoid(g.slice_cols(gates, 3 * h, h)?)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            c = g.add(g.mul(f, c_prev)?, c)?;
        }
        let h_t = g.mul(o, g.tanh(c)?)?;
        check_finite(g, h_t, "LSTM hidden state", t, units)?;
        state = Some((h_t, c));
        outputs.push(h_t);
    }
    Ok(g.concat_rows(&outputs)?)
}

fn tcn_block<R: Rng>(
    g: &Graph,
    p: &Bindings,
    block: &TcnBlock,
    x: Var,
    units: usize,
    drop: &mut Option<Dropout<'_, R>>,
) -> Result<Var> {
    let h1 = g.causal_conv(x, p.var(block.conv1), block.dilation, units)?;
    let h1 = dropout(g, g.elu(g.add_row(h1, p.var(block.bias1))?)?, drop)?;
    let h2 = g.causal_conv(h1, p.var(block.conv2), block.dilation, units)?;
    let h2 = dropout(g, g.elu(g.add_row(h2, p.var(block.bias2))?)?, drop)?;
    let residual = match block.residual {
        Some(w) => g.matmul(x, p.var(w))?,
        None => x,
    };
    let out = g.add(residual, h2)?;
    check_finite(g, out, "TCN activation", 0, units)?;
    Ok(out)
}
