mod common;

use caetc_core::autodiff::{check_gradients, Bindings, Graph, Tensor, Var};
use caetc_core::backbone::{BackboneConfig, BackboneKind};
use caetc_core::batch::Batch;
use caetc_core::data::{Schema, Trajectory};
use caetc_core::loss::{self, LossWeights};
use caetc_core::model::{Conditioning, Model, ModelConfig};
use caetc_core::train::{build_objective, Objective, StepInputs};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn model(kind: BackboneKind, dim_x: usize, k: usize, conditioning: Conditioning) -> Model {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            kind,
            hidden_units: 5,
            num_layers: 2,
            ..BackboneConfig::default()
        },
        projection_dim: None,
        conditioning,
    };
    Model::new(&cfg, &common::schema(dim_x, k), 13).unwrap()
}

fn batch_of(data: &[Trajectory], schema: &Schema) -> Batch {
    let refs: Vec<&Trajectory> = data.iter().collect();
    Batch::new(&refs, schema, 1.0).unwrap()
}

#[test]
fn film_examples() {
    let mut m = model(BackboneKind::Lstm, 0, 3, Conditioning::Film);
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    let repr = g.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.0, 3.0], vec![1.0; 5]]).unwrap());
    let same = g.value(m.film(&g, &p, repr, &[0, 2]).unwrap());
    assert_eq!(same, g.value(repr));
    assert!(m.film(&g, &p, repr, &[0, 3]).is_err());

    m.params.get_mut(m.film_scale).data_mut().fill(0.0);
    let shift: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
    m.params.get_mut(m.film_shift).data_mut().copy_from_slice(&shift);
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    let repr = g.constant(Tensor::from_rows(&[vec![9.0; 5]]).unwrap());
    let out = g.value(m.film(&g, &p, repr, &[2]).unwrap());
    assert_eq!(out.data(), &shift[10..15]);
}

#[test]
fn heads_output_probabilities_and_widths() {
    let m = model(BackboneKind::Tcn, 3, 4, Conditioning::Film);
    let data = common::units(&m.schema, 3, 1);
    let batch = batch_of(&data, &m.schema);
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    let phi = m.representation::<ChaCha8Rng>(&g, &p, &batch, None, None).unwrap();
    for logits in [m.treatment_logits(&g, &p, phi, None).unwrap(), m.balancer_logits(&g, &p, phi).unwrap()] {
        let probs = g.value(g.softmax(logits).unwrap());
        assert_eq!(probs.cols(), 4);
        for r in 0..probs.rows() {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(g.shape(m.outcome(&g, &p, phi, Some(&batch.a_next)).unwrap())[1], 1);
    assert_eq!(g.shape(m.covariates(&g, &p, phi).unwrap().unwrap())[1], 3);
}

/// Batch of one unit whose transitions have targets 0 and 2.
fn two_target_batch() -> (Batch, Schema) {
    let schema = Schema { dim_v: 1, dim_y: 1, dim_x: 0, num_treatments: 2, max_len: 3 };
    let tr = Trajectory { id: 0, v: vec![0.0], a: vec![0, 1, 0], y: vec![vec![5.0], vec![0.0], vec![2.0]], x: None, len: 3, gamma: 0.0, seed: 0 };
    (batch_of(&[tr], &schema), schema)
}

#[test]
fn constant_next_outcome_predictor() {
    let (batch, _) = two_target_batch();
    for (yhat, want) in [(1.0, 1.0), (0.0, 2.0), (2.0, 2.0)] {
        let g = Graph::new();
        let pred = g.constant(Tensor::full(&[batch.rows(), 1], yhat));
        let l = loss::next_outcome(&g, pred, &batch).unwrap().unwrap();
        assert!((g.scalar(l).unwrap() - want).abs() < 1e-15);
    }
    let g = Graph::new();
    let pred = g.constant(batch.y_next.clone());
    assert_eq!(g.scalar(loss::next_outcome(&g, pred, &batch).unwrap().unwrap()).unwrap(), 0.0);
}

#[test]
fn single_step_units_have_no_transitions() {
    let schema = Schema { dim_v: 1, dim_y: 1, dim_x: 0, num_treatments: 2, max_len: 1 };
    let tr = Trajectory { id: 0, v: vec![0.0], a: vec![0], y: vec![vec![1.0]], x: None, len: 1, gamma: 0.0, seed: 0 };
    let batch = batch_of(&[tr], &schema);
    let g = Graph::new();
    let pred = g.constant(Tensor::zeros(&[1, 1]));
    assert!(loss::next_outcome(&g, pred, &batch).unwrap().is_none());
    assert!(loss::balancer_loss(&g, g.constant(Tensor::zeros(&[1, 2])), &batch, 2).is_err());
}

#[test]
fn classification_loss_examples() {
    let (batch, _) = two_target_batch();
    let g = Graph::new();
    let uniform2 = g.constant(Tensor::zeros(&[batch.rows(), 2]));
    let ra = loss::reconstruction_treatment(&g, uniform2, &batch, 2).unwrap();
    assert!((g.scalar(ra).unwrap() - LN2).abs() < 1e-15);
    let e = loss::entropy_loss(&g, uniform2, &batch).unwrap();
    assert!((g.scalar(e).unwrap() + LN2).abs() < 1e-15);
    let skew = g.constant(Tensor::from_rows(&vec![vec![0.9f64.ln(), 0.1f64.ln()]; 3]).unwrap());
    let e = g.scalar(loss::entropy_loss(&g, skew, &batch).unwrap()).unwrap();
    assert!((e - (0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln())).abs() < 1e-12);
    assert!((e + 0.3251).abs() < 1e-4);

    let schema4 = Schema { dim_v: 1, dim_y: 1, dim_x: 0, num_treatments: 4, max_len: 3 };
    let tr = Trajectory { id: 0, v: vec![0.0], a: vec![0, 3, 2], y: vec![vec![0.0]; 3], x: None, len: 3, gamma: 0.0, seed: 0 };
    let b4 = batch_of(&[tr], &schema4);
    let l = loss::balancer_loss(&g, g.constant(Tensor::zeros(&[3, 4])), &b4, 4).unwrap();
    assert!((g.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn conditioning_loss_examples() {
    let (batch, _) = two_target_batch();
    let g = Graph::new();
    // Counterfactual class of every row is 1 - a_next; put 0.9 on it.
    let rows: Vec<Vec<f64>> = batch
        .a_next
        .iter()
        .map(|&a| if a == 0 { vec![0.1f64.ln(), 0.9f64.ln()] } else { vec![0.9f64.ln(), 0.1f64.ln()] })
        .collect();
    let logits = g.constant(Tensor::from_rows(&rows).unwrap());
    let l = loss::conditioning_loss(&g, &[logits], &batch, 2, 0.0).unwrap().unwrap();
    assert!((g.scalar(l).unwrap() + 0.9f64.ln()).abs() < 1e-12);
    assert!(loss::conditioning_loss(&g, &[], &batch, 1, 0.0).unwrap().is_none());

    // Full smoothing makes the target uniform whatever the true class.
    let a = loss::conditioning_loss(&g, &[logits], &batch, 2, 0.999_999_999).unwrap().unwrap();
    let flipped = g.constant(Tensor::from_rows(&rows.iter().map(|r| vec![r[1], r[0]]).collect::<Vec<_>>()).unwrap());
    let b = loss::conditioning_loss(&g, &[flipped], &batch, 2, 0.999_999_999).unwrap().unwrap();
    assert!((g.scalar(a).unwrap() - g.scalar(b).unwrap()).abs() < 1e-8);
}

#[test]
fn identity_with_bias_reduces_to_concatenation() {
    let bias = model(BackboneKind::Lstm, 0, 3, Conditioning::IdentityWithBias);
    let concat = model(BackboneKind::Lstm, 0, 3, Conditioning::Concat);
    assert_eq!(bias.params, concat.params);
    let data = common::units(&bias.schema, 4, 2);
    let batch = batch_of(&data, &bias.schema);
    let run = |m: &Model| {
        let g = Graph::new();
        let p = Bindings::all_constant(&g, &m.params);
        let phi = m.representation::<ChaCha8Rng>(&g, &p, &batch, None, None).unwrap();
        g.value(m.outcome(&g, &p, phi, Some(&batch.a_next)).unwrap())
    };
    assert_eq!(run(&bias), run(&concat));
}

fn inputs<'a>(batch: &'a Batch, cuts: Option<&'a [usize]>, w: &'a LossWeights, delta_e: f64) -> StepInputs<'a, ChaCha8Rng> {
    StepInputs {
        batch,
        cutoffs: cuts,
        dropout: None,
        weights: w,
        delta_e,
        objective: Objective::Caetc,
    }
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().any(|&x| x != 0.0)
}

#[test]
fn parameter_partition_and_gradient_flow() {
    for c in [Conditioning::Film, Conditioning::IdentityWithBias, Conditioning::Concat] {
        partition(c);
    }
}

fn partition(conditioning: Conditioning) {
    let m = model(BackboneKind::Lstm, 3, 3, conditioning);
    let data = common::units(&m.schema, 3, 3);
    let batch = batch_of(&data, &m.schema);
    let cuts: Vec<usize> = data.iter().map(|t| t.len).collect();
    let w = LossWeights::default();
    let g = Graph::new();
    let main = Bindings::new(&g, &m.params, |id| m.main_trainable(id));
    let bal = Bindings::new(&g, &m.params, |id| m.is_balancer(id));
    let step = build_objective(&m, &g, &main, &bal, inputs(&batch, Some(&cuts), &w, 0.5)).unwrap();

    let ga = g.backward(step.main).unwrap();
    let main_grads = main.collect(&ga, &m.params);
    let gb = g.backward(step.balancer.unwrap()).unwrap();
    let bal_grads = bal.collect(&gb, &m.params);
    for (id, name, _) in m.params.iter() {
        let a = &main_grads[id.0];
        let b = &bal_grads[id.0];
        if !m.is_live(id) {
            assert!(!nonzero(a) && !nonzero(b), "unused {name} got a gradient");
        } else if m.is_balancer(id) {
            assert!(!nonzero(a), "main objective reached {name}");
            assert!(nonzero(b), "balancer objective missed {name}");
        } else {
            assert!(!nonzero(b), "balancer objective reached {name}");
            assert!(nonzero(a), "main objective missed {name}");
        }
    }

    // The next-outcome term alone reaches FiLM, the outcome head and the encoder.
    let g = Graph::new();
    let main = Bindings::new(&g, &m.params, |id| m.main_trainable(id));
    let phi = m.representation::<ChaCha8Rng>(&g, &main, &batch, None, None).unwrap();
    let pred = m.outcome(&g, &main, phi, Some(&batch.a_next)).unwrap();
    let l = loss::next_outcome(&g, pred, &batch).unwrap().unwrap();
    let grads = main.collect(&g.backward(l).unwrap(), &m.params);
    for id in [m.film_scale, m.film_shift, m.outcome_head.first.w, m.outcome_head.second.w, m.backbone.input.vay.w, m.backbone.output.w] {
        if !m.is_live(id) {
            continue;
        }
        assert!(nonzero(&grads[id.0]), "{} got no gradient", m.params.name(id));
    }
}

fn gradcheck_objective(kind: BackboneKind, conditioning: Conditioning) {
    let m = model(kind, 3, 3, conditioning);
    let data = common::units(&m.schema, 2, 4);
    let batch = batch_of(&data, &m.schema);
    let cuts: Vec<usize> = data.iter().map(|t| t.len / 2 + 1).collect();
    let w = LossWeights { delta_e: 0.3, ..LossWeights::default() };
    let ids: Vec<_> = m.params.ids().collect();
    let values: Vec<Tensor> = ids.iter().map(|&id| m.params.get(id).clone()).collect();

    let main = |g: &Graph, vars: &[Var]| {
        let p = Bindings::from_vars(vars.to_vec());
        let step = build_objective(&m, g, &p, &p, inputs(&batch, Some(&cuts), &w, 0.3)).unwrap();
        Ok(step.main)
    };
    let worst = check_gradients(main, &values, 1e-5).unwrap();
    assert!(worst < 1e-4, "{kind:?}/{conditioning:?} main objective discrepancy {worst}");

    let bal_ids: Vec<_> = ids.iter().copied().filter(|&id| m.is_balancer(id)).collect();
    let bal_values: Vec<Tensor> = bal_ids.iter().map(|&id| m.params.get(id).clone()).collect();
    let balancer = |g: &Graph, vars: &[Var]| {
        let mut all: Vec<Var> = ids.iter().map(|&id| g.constant(m.params.get(id).clone())).collect();
        for (&id, &v) in bal_ids.iter().zip(vars) {
            all[id.0] = v;
        }
        let p = Bindings::from_vars(all);
        let step = build_objective(&m, g, &p, &p, inputs(&batch, Some(&cuts), &w, 0.3)).unwrap();
        Ok(step.balancer.unwrap())
    };
    let worst = check_gradients(balancer, &bal_values, 1e-5).unwrap();
    assert!(worst < 1e-4, "{kind:?} balancer objective discrepancy {worst}");
}

#[test]
fn full_objective_matches_finite_differences_lstm() {
    gradcheck_objective(BackboneKind::Lstm, Conditioning::Film);
}

#[test]
fn full_objective_matches_finite_differences_tcn() {
    gradcheck_objective(BackboneKind::Tcn, Conditioning::Film);
}

#[test]
fn full_objective_matches_finite_differences_bias_conditioning() {
    gradcheck_objective(BackboneKind::Lstm, Conditioning::IdentityWithBias);
}

#[test]
fn zero_weights_leave_only_outcome_terms() {
    let m = model(BackboneKind::Lstm, 3, 3, Conditioning::Concat);
    let data = common::units(&m.schema, 3, 5);
    let batch = batch_of(&data, &m.schema);
    let zero = LossWeights::zero();
    let g = Graph::new();
    let p = Bindings::all_trainable(&g, &m.params);
    let step = build_objective(&m, &g, &p, &p, inputs(&batch, None, &zero, 0.0)).unwrap();
    let t = step.terms.values(&g).unwrap();
    let expected = t.recon_y.unwrap() + t.next_y.unwrap();
    assert_eq!(g.scalar(step.main).unwrap(), expected);
}
