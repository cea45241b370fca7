//! Finite-difference checks of every tape primitive and of the full training
//! objective on small random instances.

use caetc_autodiff::{check_gradients, Bindings, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::batch::Batch;
use crate::data::{Schema, Trajectory};
use crate::loss::LossWeights;
use crate::model::{Conditioning, Model, ModelConfig};
use crate::sim::rng::stream;
use crate::train::{build_objective, Objective, StepInputs};
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    /// Worst relative gap between analytic and central-difference gradients.
    pub discrepancy: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.discrepancy < TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches data")
}

type Op = Box<dyn Fn(&Graph, &[Var]) -> caetc_autodiff::Result<Var>>;

/// Reduces `out` with fixed random weights so each output entry matters differently.
fn weighted(g: &Graph, out: Var, seed: u64) -> caetc_autodiff::Result<Var> {
    let shape = g.shape(out);
    let w = g.constant(random(&mut stream(seed, "gradsuite.weights", 0), &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum(p)
}

pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, "gradsuite.primitives", 0);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 4], -2.0, 2.0);
    let m = random(&mut rng, &[4, 2], -1.0, 1.0);
    let row = random(&mut rng, &[4], -1.0, 1.0);
    let pos = random(&mut rng, &[3, 4], 0.2, 3.0);
    let table = random(&mut rng, &[5, 3], -1.0, 1.0);
    let x = random(&mut rng, &[14, 3], -1.0, 1.0);
    let kernel = random(&mut rng, &[3, 3, 2], -1.0, 1.0);

    let unary = |f: fn(&Graph, Var) -> caetc_autodiff::Result<Var>| -> Op {
        Box::new(move |g, v| weighted(g, f(g, v[0])?, seed))
    };
    let mut cases: Vec<(String, Op, Vec<Tensor>)> = vec![
        ("add".into(), Box::new(move |g, v| weighted(g, g.add(v[0], v[1])?, seed)), vec![a.clone(), b.clone()]),
        ("sub".into(), Box::new(move |g, v| weighted(g, g.sub(v[0], v[1])?, seed)), vec![a.clone(), b.clone()]),
        ("mul".into(), Box::new(move |g, v| weighted(g, g.mul(v[0], v[1])?, seed)), vec![a.clone(), b.clone()]),
        ("add_row".into(), Box::new(move |g, v| weighted(g, g.add_row(v[0], v[1])?, seed)), vec![a.clone(), row]),
        ("affine".into(), Box::new(move |g, v| weighted(g, g.affine(v[0], -1.3, 0.4)?, seed)), vec![a.clone()]),
        ("scale".into(), Box::new(move |g, v| weighted(g, g.scale(v[0], 2.5)?, seed)), vec![a.clone()]),
        ("neg".into(), unary(|g, v| g.neg(v)), vec![a.clone()]),
        ("matmul".into(), Box::new(move |g, v| weighted(g, g.matmul(v[0], v[1])?, seed)), vec![a.clone(), m]),
        (
            "concat_cols/slice_cols".into(),
            Box::new(move |g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                weighted(g, g.slice_cols(c, 2, 5)?, seed)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "concat_rows/slice_rows".into(),
            Box::new(move |g, v| {
                let c = g.concat_rows(&[v[0], v[1]])?;
                weighted(g, g.slice_rows(c, 1, 4)?, seed)
            }),
            vec![a.clone(), b.clone()],
        ),
        ("sum".into(), Box::new(|g, v| { let s = g.square(v[0])?; g.sum(s) }), vec![a.clone()]),
        ("mean".into(), Box::new(|g, v| { let s = g.square(v[0])?; g.mean(s) }), vec![a.clone()]),
        ("row_sum".into(), unary(|g, v| g.row_sum(v)), vec![a.clone()]),
        ("sigmoid".into(), unary(|g, v| g.sigmoid(v)), vec![a.clone()]),
        ("tanh".into(), unary(|g, v| g.tanh(v)), vec![a.clone()]),
        ("elu".into(), unary(|g, v| g.elu(v)), vec![a.clone()]),
        ("exp".into(), unary(|g, v| g.exp(v)), vec![a.clone()]),
        ("square".into(), unary(|g, v| g.square(v)), vec![a.clone()]),
        ("log".into(), unary(|g, v| g.log(v)), vec![pos]),
        ("softmax".into(), unary(|g, v| g.softmax(v)), vec![a.clone()]),
        ("log_softmax".into(), unary(|g, v| g.log_softmax(v)), vec![a]),
        (
            "gather_rows".into(),
            Box::new(move |g, v| weighted(g, g.gather_rows(v[0], &[4, 0, 4, 2])?, seed)),
            vec![table],
        ),
    ];
    for dilation in [1, 2, 4] {
        cases.push((
            format!("causal_conv(d={dilation})"),
            Box::new(move |g, v| weighted(g, g.causal_conv(v[0], v[1], dilation, 2)?, seed)),
            vec![x.clone(), kernel.clone()],
        ));
    }
    cases
        .into_iter()
        .map(|(name, f, params)| {
            let discrepancy = check_gradients(f, &params, STEP)?;
            Ok(GradCheck { name, discrepancy })
        })
        .collect()
}

fn fixture(schema: &Schema, n: usize, rng: &mut ChaCha8Rng) -> Vec<Trajectory> {
    (0..n as u64)
        .map(|id| {
            let len = rng.random_range(3..=schema.max_len);
            let a: Vec<usize> = (0..len).map(|_| rng.random_range(0..schema.num_treatments)).collect();
            let y = (0..len).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
            let x = (0..len)
                .map(|_| (0..schema.dim_x).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            Trajectory {
                id,
                v: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                a,
                y,
                x: Some(x),
                len,
                gamma: 0.0,
                seed: 0,
            }
        })
        .collect()
}

/// Main objective against all parameters and balancer loss against the
/// balancer's own parameters, for each backbone and conditioning mode.
pub fn objective_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let schema = Schema { dim_v: 2, dim_y: 1, dim_x: 3, num_treatments: 3, max_len: 6 };
    let mut rng = stream(seed, "gradsuite.objective", 0);
    let data = fixture(&schema, 2, &mut rng);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &schema, 1.0)?;
    let cuts: Vec<usize> = data.iter().map(|t| t.len / 2 + 1).collect();
    let weights = LossWeights { delta_e: 0.3, ..LossWeights::default() };
    let mut out = Vec::new();
    for kind in [BackboneKind::Lstm, BackboneKind::Tcn] {
        for conditioning in [Conditioning::Film, Conditioning::IdentityWithBias, Conditioning::Concat] {
            let cfg = ModelConfig {
                backbone: BackboneConfig { kind, hidden_units: 4, num_layers: 2, ..BackboneConfig::default() },
                projection_dim: None,
                conditioning,
            };
            let model = Model::new(&cfg, &schema, seed)?;
            let ids: Vec<_> = model.params.ids().collect();
            let values: Vec<Tensor> = ids.iter().map(|&id| model.params.get(id).clone()).collect();
            let inputs = || StepInputs::<ChaCha8Rng> {
                batch: &batch,
                cutoffs: Some(&cuts),
                dropout: None,
                weights: &weights,
                delta_e: weights.delta_e,
                objective: Objective::Caetc,
            };
            let main = |g: &Graph, vars: &[Var]| {
                let p = Bindings::from_vars(vars.to_vec());
                let step = build_objective(&model, g, &p, &p, inputs())
                    .map_err(|e| caetc_autodiff::AutodiffError::InvalidArgument(e.to_string()))?;
                Ok(step.main)
            };
            out.push(GradCheck {
                name: format!("{kind:?}/{conditioning:?} main objective"),
                discrepancy: check_gradients(main, &values, STEP)?,
            });

            let bal: Vec<_> = model.balancer_ids();
            let bal_values: Vec<Tensor> = bal.iter().map(|&id| model.params.get(id).clone()).collect();
            let balancer = |g: &Graph, vars: &[Var]| {
                let mut all: Vec<Var> = ids.iter().map(|&id| g.constant(model.params.get(id).clone())).collect();
                for (&id, &v) in bal.iter().zip(vars) {
                    all[id.0] = v;
                }
                let p = Bindings::from_vars(all);
                let step = build_objective(&model, g, &p, &p, inputs())
                    .map_err(|e| caetc_autodiff::AutodiffError::InvalidArgument(e.to_string()))?;
                Ok(step.balancer.expect("balancer loss recorded"))
            };
            out.push(GradCheck {
                name: format!("{kind:?}/{conditioning:?} balancer loss"),
                discrepancy: check_gradients(balancer, &bal_values, STEP)?,
            });
        }
    }
    Ok(out)
}

pub fn suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = primitive_checks(seed)?;
    all.extend(objective_checks(seed)?);
    Ok(all)
}
