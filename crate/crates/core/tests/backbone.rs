mod common;

use caetc_core::autodiff::{Bindings, Graph, ParamSet, Tensor};
use caetc_core::backbone::{apply_temporal_cutoff, Backbone, BackboneConfig, BackboneKind, Dropout};
use caetc_core::batch::Batch;
use caetc_core::data::Trajectory;
use caetc_core::model::{Model, ModelConfig};
use caetc_core::sim::rng::stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn config(kind: BackboneKind, layers: usize) -> BackboneConfig {
    BackboneConfig {
        kind,
        num_layers: layers,
        hidden_units: 6,
        ..BackboneConfig::default()
    }
}

fn model(kind: BackboneKind, layers: usize, dim_x: usize) -> Model {
    let cfg = ModelConfig {
        backbone: config(kind, layers),
        ..ModelConfig::default()
    };
    Model::new(&cfg, &common::schema(dim_x, 3), 5).unwrap()
}

fn phi(m: &Model, batch: &Batch, cut: Option<&[usize]>) -> Tensor {
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    g.value(m.representation::<ChaCha8Rng>(&g, &p, batch, cut, None).unwrap())
}

fn random_inputs(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "inputs", 0);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Gradient rows of output row `out_row` with respect to every input row.
fn input_gradient(bb: &Backbone, params: &ParamSet, inputs: &Tensor, units: usize, out_row: usize) -> Tensor {
    let g = Graph::new();
    let p = Bindings::all_constant(&g, params);
    let x = g.leaf(inputs.clone(), true);
    let h = bb.encode::<ChaCha8Rng>(&g, &p, x, units, None).unwrap();
    let out = g.elu(bb.output.forward(&g, &p, h).unwrap()).unwrap();
    let loss = g.sum(g.slice_rows(out, out_row, 1).unwrap()).unwrap();
    let grads = g.backward(loss).unwrap();
    Tensor::new(inputs.shape().to_vec(), grads.get_or_zeros(x, inputs.len())).unwrap()
}

fn causality(kind: BackboneKind) {
    let m = model(kind, 2, 0);
    let (units, steps) = (2, 7);
    let width = 2 * m.hidden_units();
    let inputs = random_inputs(units * steps, width, 1);
    for t in 0..steps {
        for b in 0..units {
            let grad = input_gradient(&m.backbone, &m.params, &inputs, units, t * units + b);
            for s in 0..steps {
                for b2 in 0..units {
                    let row = grad.row(s * units + b2);
                    let touches = row.iter().any(|&v| v != 0.0);
                    if s > t || b2 != b {
                        assert!(!touches, "{kind:?}: output ({t},{b}) depends on input ({s},{b2})");
                    } else if s == t {
                        assert!(touches, "{kind:?}: output ({t},{b}) ignores its own step");
                    }
                }
            }
        }
    }
}

#[test]
fn lstm_is_causal() {
    causality(BackboneKind::Lstm);
}

#[test]
fn tcn_is_causal() {
    causality(BackboneKind::Tcn);
}

fn prefix_invariance(kind: BackboneKind) {
    let m = model(kind, 2, 3);
    let data = common::units(&m.schema, 5, 2);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &m.schema, 1.0).unwrap();
    let cuts: Vec<usize> = data.iter().map(|t| (t.len / 2).max(1)).collect();
    let plain = phi(&m, &batch, None);
    let cut = phi(&m, &batch, Some(&cuts));

    // Covariates at or after the cutoff must not matter at all.
    let mut scrambled = data.clone();
    for (t, &c) in scrambled.iter_mut().zip(&cuts) {
        for row in &mut t.x.as_mut().unwrap()[c - 1..] {
            row.iter_mut().for_each(|v| *v = 100.0 - *v);
        }
    }
    let refs2: Vec<&Trajectory> = scrambled.iter().collect();
    let batch2 = Batch::new(&refs2, &m.schema, 1.0).unwrap();
    let cut2 = phi(&m, &batch2, Some(&cuts));
    assert_eq!(cut, cut2, "{kind:?}: cut covariates leaked");

    let mut differs = false;
    for (b, (&c, tr)) in cuts.iter().zip(&data).enumerate() {
        for t in 0..tr.len {
            let r = t * batch.units + b;
            if t + 1 < c {
                assert_eq!(plain.row(r), cut.row(r), "{kind:?}: prefix step {t} of unit {b} changed");
            } else {
                differs |= plain.row(r) != cut.row(r);
            }
        }
    }
    assert!(differs, "{kind:?}: cutoff had no effect");
}

#[test]
fn lstm_cutoff_prefix_invariance() {
    prefix_invariance(BackboneKind::Lstm);
}

#[test]
fn tcn_cutoff_prefix_invariance() {
    prefix_invariance(BackboneKind::Tcn);
}

#[test]
fn cutoff_bounds_and_extremes() {
    let m = model(BackboneKind::Lstm, 1, 3);
    let data = common::units(&m.schema, 3, 3);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &m.schema, 1.0).unwrap();
    let v = m.backbone.input.dim;
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    let proj = g.constant(random_inputs(batch.rows(), v, 4));
    let missing = g.matmul(g.constant(Tensor::ones(&[batch.rows(), 1])), p.var(m.backbone.input.missing)).unwrap();

    let none: Vec<usize> = data.iter().map(|t| t.len + 1).collect();
    let out = apply_temporal_cutoff(&g, proj, missing, &batch, &none).unwrap();
    assert_eq!(g.value(out), g.value(proj));

    let all = vec![1; data.len()];
    let out = g.value(apply_temporal_cutoff(&g, proj, missing, &batch, &all).unwrap());
    let m_row = m.params.get(m.backbone.input.missing).data().to_vec();
    for r in 0..batch.rows() {
        assert_eq!(out.row(r), m_row.as_slice());
    }

    let bad: Vec<usize> = data.iter().map(|t| t.len + 2).collect();
    assert!(apply_temporal_cutoff(&g, proj, missing, &batch, &bad).is_err());
    assert!(apply_temporal_cutoff(&g, proj, missing, &batch, &vec![0; data.len()]).is_err());
}

#[test]
fn zero_projection_gives_zero_inputs() {
    let mut m = model(BackboneKind::Lstm, 1, 3);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        m.params.get_mut(id).data_mut().fill(0.0);
    }
    let data = common::units(&m.schema, 2, 5);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &m.schema, 1.0).unwrap();
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    let x = g.value(m.backbone.project_inputs(&g, &p, &batch, None).unwrap());
    assert!(x.data().iter().all(|&v| v == 0.0));
    // Zero weights also zero the LSTM state, hence the representation.
    let out = phi(&m, &batch, None);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn missing_vector_fills_slot_without_covariates() {
    let m = model(BackboneKind::Tcn, 1, 0);
    let data = common::units(&m.schema, 2, 6);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &m.schema, 1.0).unwrap();
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    let x = g.value(m.backbone.project_inputs(&g, &p, &batch, None).unwrap());
    let v = m.backbone.input.dim;
    let m_row = m.params.get(m.backbone.input.missing).data().to_vec();
    for r in 0..batch.rows() {
        assert_eq!(&x.row(r)[v..], m_row.as_slice());
    }
}

#[test]
fn identity_projection_reproduces_input() {
    let mut params = ParamSet::new();
    let cfg = config(BackboneKind::Lstm, 1);
    let mut rng = stream(0, "t", 0);
    let bb = Backbone::new(&cfg, &mut params, 4, 0, 4, &mut rng).unwrap();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    params.get_mut(bb.input.vay.w).data_mut().copy_from_slice(&eye);
    params.get_mut(bb.input.vay.b).data_mut().fill(0.0);
    let schema = caetc_core::data::Schema { dim_v: 1, dim_y: 1, dim_x: 0, num_treatments: 2, max_len: 3 };
    let tr = Trajectory { id: 0, v: vec![0.7], a: vec![0, 1, 1], y: vec![vec![0.1], vec![-0.4], vec![2.0]], x: None, len: 3, gamma: 0.0, seed: 0 };
    let batch = Batch::new(&[&tr], &schema, 1.0).unwrap();
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &params);
    let x = g.value(bb.project_inputs(&g, &p, &batch, None).unwrap());
    for r in 0..3 {
        assert_eq!(&x.row(r)[..4], batch.vay.row(r));
    }
}

#[test]
fn projection_must_exceed_covariate_dimension() {
    let cfg = ModelConfig {
        backbone: config(BackboneKind::Lstm, 1),
        projection_dim: Some(3),
        ..ModelConfig::default()
    };
    assert!(Model::new(&cfg, &common::schema(3, 2), 0).is_err());
    let cfg = ModelConfig { projection_dim: Some(4), ..cfg };
    assert!(Model::new(&cfg, &common::schema(3, 2), 0).is_ok());
}

#[test]
fn zero_kernels_pass_residual_identity() {
    let mut params = ParamSet::new();
    let cfg = BackboneConfig { hidden_units: 6, ..config(BackboneKind::Tcn, 2) };
    let mut rng = stream(0, "t", 1);
    // 2v == hidden, so every block has an identity residual path.
    let bb = Backbone::new(&cfg, &mut params, 4, 0, 3, &mut rng).unwrap();
    let ids: Vec<_> = params.iter().filter(|(_, n, _)| n.starts_with("tcn")).map(|(id, _, _)| id).collect();
    for id in ids {
        params.get_mut(id).data_mut().fill(0.0);
    }
    let inputs = random_inputs(10, 6, 7);
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &params);
    let out = bb.encode::<ChaCha8Rng>(&g, &p, g.constant(inputs.clone()), 2, None).unwrap();
    assert_eq!(g.value(out), inputs);
}

#[test]
fn receptive_field_matches_impulse_response() {
    let cfg = BackboneConfig {
        kind: BackboneKind::Tcn,
        num_layers: 5,
        hidden_units: 4,
        kernel_size: 3,
        dilation_factor: 2,
        dropout_rate: 0.0,
    };
    assert_eq!(cfg.receptive_field(), Some(125));
    assert!(cfg.receptive_field_warning(125).is_none());
    assert!(cfg.receptive_field_warning(126).is_some());
    let mut params = ParamSet::new();
    let mut rng = stream(0, "t", 2);
    let bb = Backbone::new(&cfg, &mut params, 3, 0, 2, &mut rng).unwrap();
    let steps = 130;
    let inputs = random_inputs(steps, 4, 8);
    for &t in &[124usize, 129] {
        let grad = input_gradient(&bb, &params, &inputs, 1, t);
        for s in 0..steps {
            let reach = s <= t && t - s < 125;
            let touches = grad.row(s).iter().any(|&v| v != 0.0);
            assert_eq!(touches, reach, "output {t}, input {s}");
        }
    }
}

#[test]
fn dropout_only_acts_when_enabled() {
    let cfg = ModelConfig {
        backbone: BackboneConfig { dropout_rate: 0.5, ..config(BackboneKind::Lstm, 2) },
        ..ModelConfig::default()
    };
    let m = Model::new(&cfg, &common::schema(0, 3), 1).unwrap();
    let data = common::units(&m.schema, 3, 9);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &m.schema, 1.0).unwrap();
    let run = |rate: f64, seed: u64| {
        let g = Graph::new();
        let p = Bindings::all_constant(&g, &m.params);
        let mut rng = stream(seed, "drop", 0);
        let d = Dropout { rate, rng: &mut rng };
        g.value(m.representation(&g, &p, &batch, None, Some(d)).unwrap())
    };
    assert_eq!(run(0.0, 1), run(0.0, 2));
    assert_eq!(run(0.0, 1), phi(&m, &batch, None));
    assert_ne!(run(0.5, 1), run(0.5, 2));
    assert_eq!(run(0.5, 3), run(0.5, 3));
}
