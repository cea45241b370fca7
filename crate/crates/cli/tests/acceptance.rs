//! Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
//! as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 4`.
//! Set `ACCEPTANCE_STRICT=1` to exit nonzero when any criterion fails.

use std::time::{Duration, Instant};

use caetc_cli::config::{split_seed, TrainRun};
use caetc_core::autodiff::{Bindings, Graph, ParamSet, Tensor};
use caetc_core::backbone::{Backbone, BackboneConfig, BackboneKind};
use caetc_core::batch::Batch;
use caetc_core::data::{Schema, Trajectory};
use caetc_core::eval::{
    aggregate, build_no_confounding_testset, build_random_trajectory_testset, evaluate, format_aggregate_table,
    SemiSynthOracle,
};
use caetc_core::gradsuite;
use caetc_core::loss::LossWeights;
use caetc_core::model::{Conditioning, Model, ModelConfig};
use caetc_core::probe::{probe_representation, ProbeConfig};
use caetc_core::sim::nsclc::{self, NsclcConfig};
use caetc_core::sim::rng::stream;
use caetc_core::sim::semisynth::{SemiSynthConfig, SemiSynthGenerator};
use caetc_core::theory;
use caetc_core::train::{train, Objective, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);

const SEEDS: [u64; 3] = [0, 1, 2];
const N_TRAIN: usize = 1000;
const N_VAL: usize = 200;
const N_TEST: usize = 200;
const TAU: usize = 5;
/// Desk-scale schedule for the 1000-unit runs of criteria 6 and 7.
const EPOCHS: usize = 80;
const BATCH_SIZE: usize = 32;
const LEARNING_RATE: f64 = 1e-2;

fn rmse_factor() -> f64 {
    100.0 / nsclc::max_volume()
}

fn cohort(gamma: f64, n: usize, seed: u64) -> Vec<Trajectory> {
    let cfg = NsclcConfig { gamma, ..NsclcConfig::default() };
    nsclc::simulate_cohort(&cfg, n, seed)
        .expect("simulation succeeds")
        .into_iter()
        .map(|s| s.trajectory)
        .collect()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let checks = gradsuite::suite(0).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.discrepancy).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(120);
    (
        ok,
        format!(
            "{} checks, worst relative gap {worst:.2e} (limit {:.0e}), failed {failed:?}, {elapsed:.1?} (limit 120s)",
            checks.len(),
            gradsuite::TOLERANCE
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let results = theory::suite(10_000, 0).expect("theory suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({} violations)", r.name, r.violations))
        .collect();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(300);
    (ok, format!("{} checks x 10^4 trials, failed {failed:?}, {elapsed:.1?} (limit 300s)", results.len()))
}

fn criterion_3() -> Verdict {
    let mut rng = stream(3, "acceptance.assign", 0);
    let draws = 100_000;
    let mut treated = 0usize;
    for i in 0..draws / 2 {
        let history = [0.5 + (i % 25) as f64 * 0.5];
        let (c, r) = nsclc::assign_treatments(&history, 0.0, &mut rng).expect("valid history");
        treated += usize::from(c) + usize::from(r);
    }
    let rate = treated as f64 / draws as f64;
    let rate_ok = (rate - 0.5).abs() <= 0.01;

    let cfg = NsclcConfig { gamma: 4.0, ..NsclcConfig::default() };
    let mut mismatches = 0;
    let mut compared = 0;
    for sim in nsclc::simulate_cohort(&cfg, 50, 3).expect("simulation succeeds") {
        let t = &sim.trajectory;
        for k in 0..t.len {
            let snap = &sim.snapshots[k];
            let out = nsclc::branch_counterfactual(snap, &sim.params, &cfg, &t.a[k + 1..], snap.noise.clone())
                .expect("branch succeeds");
            let factual: Vec<f64> = t.y[k + 1..].iter().map(|y| y[0]).collect();
            compared += 1;
            if out.iter().map(|v| v.to_bits()).ne(factual.iter().map(|v| v.to_bits())) {
                mismatches += 1;
            }
        }
    }

    let mut worst = 0.0f64;
    let mut r = stream(3, "acceptance.volume", 0);
    for _ in 0..10_000 {
        let d: f64 = r.random_range(0.01..40.0);
        let back = nsclc::diameter_of_volume(nsclc::volume_of_diameter(d).unwrap()).unwrap();
        worst = worst.max((back - d).abs() / d.max(1.0));
    }
    let ok = rate_ok && mismatches == 0 && worst <= 1e-12;
    (
        ok,
        format!(
            "gamma=0 treatment rate {rate:.4} (0.5 +/- 0.01), {mismatches}/{compared} branch mismatches, volume round trip {worst:.1e} (limit 1e-12)"
        ),
    )
}

fn small_model(kind: BackboneKind, conditioning: Conditioning) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { kind, hidden_units: 8, ..BackboneConfig::default() },
        projection_dim: None,
        conditioning,
    }
}

fn criterion_4() -> Verdict {
    let data = cohort(4.0, 24, 4);
    let val = cohort(4.0, 8, 5);
    let schema = NsclcConfig::default().schema();
    let mut worst = 0.0f64;
    let mut epochs = 0;
    for kind in [BackboneKind::Lstm, BackboneKind::Tcn] {
        let mut run = TrainRun::default();
        run.model = small_model(kind, Conditioning::Film);
        run.train = TrainConfig { epochs: 10, batch_size: 8, learning_rate: 5e-3, seed: 4, ..TrainConfig::default() };
        run.apply_baseline();
        let mut base = Model::new(&run.model, &schema, 4).unwrap();
        let hb = train(&mut base, &data, Some(&val), &run.train, nsclc::max_volume()).unwrap();

        let zero_cfg = small_model(kind, Conditioning::IdentityWithBias);
        let mut zero = Model::new(&zero_cfg, &schema, 4).unwrap();
        let cfg = TrainConfig { weights: LossWeights::zero(), objective: Objective::Caetc, ..run.train.clone() };
        let hz = train(&mut zero, &data, Some(&val), &cfg, nsclc::max_volume()).unwrap();
        let (a, b) = (hb.next_y(), hz.next_y());
        if a.len() != b.len() {
            return (false, format!("{kind:?}: {} vs {} recorded epochs", a.len(), b.len()));
        }
        epochs += a.len();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    (worst <= 1e-10, format!("{epochs} epoch losses compared, largest gap {worst:.1e} (limit 1e-10)"))
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let data = cohort(0.0, 2, 5);
    let mut m = Model::new(&ModelConfig::default(), &NsclcConfig::default().schema(), 0).unwrap();
    let cfg = TrainConfig { epochs: 500, batch_size: 2, select_best: false, ..TrainConfig::default() };
    let h = train(&mut m, &data, None, &cfg, nsclc::max_volume()).unwrap();
    let elapsed = start.elapsed();
    let last = *h.next_y().last().unwrap();
    let ok = last < 1e-3 && elapsed < Duration::from_secs(180);
    (ok, format!("final L_Y {last:.2e} (limit 1e-3), {elapsed:.1?} (limit 180s)"))
}

fn desk_run(baseline: bool, delta_e: Option<f64>, seed: u64) -> TrainRun {
    let mut run = TrainRun::default();
    run.train.epochs = EPOCHS;
    run.train.batch_size = BATCH_SIZE;
    run.train.learning_rate = LEARNING_RATE;
    run.train.seed = seed;
    if let Some(d) = delta_e {
        run.train.weights.delta_e = d;
    }
    if baseline {
        run.apply_baseline();
    }
    run
}

struct Fitted {
    model: Model,
    epoch_time: Duration,
}

fn fit(run: &TrainRun, data: &[Trajectory], val: &[Trajectory]) -> Fitted {
    let schema = NsclcConfig::default().schema();
    let mut model = Model::new(&run.model, &schema, run.train.seed).unwrap();
    let start = Instant::now();
    train(&mut model, data, Some(val), &run.train, nsclc::max_volume()).expect("training succeeds");
    Fitted { model, epoch_time: start.elapsed() / run.train.epochs as u32 }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Shared by criteria 6 and 7: the gamma = 4 CAETC models are probed again.
#[derive(Default)]
struct Transfer {
    /// `[method][gamma index][seed]` average RMSE on the unconfounded test set.
    rmse: [[Vec<f64>; 2]; 2],
    caetc_gamma4: Vec<(Model, Vec<Trajectory>)>,
    elapsed: Duration,
}

const GAMMAS: [f64; 2] = [0.0, 4.0];
const METHODS: [&str; 2] = ["CAETC-LSTM", "LSTM baseline"];

fn transfer_runs() -> Transfer {
    let start = Instant::now();
    let mut out = Transfer::default();
    for &seed in &SEEDS {
        let test = build_no_confounding_testset(&NsclcConfig::default(), N_TEST, TAU, split_seed(seed, "test")).unwrap();
        for (gi, &gamma) in GAMMAS.iter().enumerate() {
            let data = cohort(gamma, N_TRAIN, split_seed(seed, "train"));
            let val = cohort(gamma, N_VAL, split_seed(seed, "val"));
            for (mi, baseline) in [false, true].into_iter().enumerate() {
                let fitted = fit(&desk_run(baseline, None, seed), &data, &val);
                let report = evaluate(&fitted.model, &test, nsclc::max_volume(), rmse_factor()).unwrap();
                println!(
                    "    seed {seed} gamma {gamma} {:<13} avg RMSE {:.4} per step {:?} ({:.2?}/epoch)",
                    METHODS[mi],
                    report.average,
                    report.horizons.iter().map(|h| (h.rmse * 1e3).round() / 1e3).collect::<Vec<_>>(),
                    fitted.epoch_time
                );
                out.rmse[mi][gi].push(report.average);
                if !baseline && gamma == 4.0 {
                    out.caetc_gamma4.push((fitted.model, data.clone()));
                }
            }
        }
    }
    out.elapsed = start.elapsed();
    out
}

fn criterion_6(t: &Transfer) -> Verdict {
    let mut ok = t.elapsed < Duration::from_secs(2 * 3600);
    let mut parts = Vec::new();
    for (mi, name) in METHODS.iter().enumerate() {
        let (g0, g4) = (mean(&t.rmse[mi][0]), mean(&t.rmse[mi][1]));
        let per_seed = t.rmse[mi][0].iter().zip(&t.rmse[mi][1]).all(|(a, b)| *a <= 1.15 * b);
        ok &= per_seed;
        parts.push(format!("(a) {name}: gamma0 {g0:.4} vs gamma4 {g4:.4}, every seed within 15%: {per_seed}"));
    }
    let (caetc, base) = (mean(&t.rmse[0][1]), mean(&t.rmse[1][1]));
    ok &= caetc <= base;
    parts.push(format!("(b) gamma4->gamma0 mean RMSE: CAETC {caetc:.4} vs baseline {base:.4}"));
    parts.push(format!("{:.1?} (limit 2h)", t.elapsed));
    (ok, parts.join("; "))
}

fn criterion_7(t: &Transfer) -> Verdict {
    let probe = ProbeConfig::default();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for (&seed, (model, data)) in SEEDS.iter().zip(&t.caetc_gamma4) {
        let val = cohort(4.0, N_VAL, split_seed(seed, "val"));
        let balanced = probe_representation(model, data, nsclc::max_volume(), 0.5, &probe).unwrap();
        let plain = fit(&desk_run(false, Some(0.0), seed), data, &val);
        let unbalanced = probe_representation(&plain.model, data, nsclc::max_volume(), 0.5, &probe).unwrap();
        println!(
            "    seed {seed} probe accuracy: delta_E=1e-4 {:.4}, delta_E=0 {:.4} (majority {:.4})",
            balanced.accuracy, unbalanced.accuracy, balanced.majority_baseline
        );
        with.push(balanced.accuracy);
        without.push(unbalanced.accuracy);
    }
    let (a, b) = (mean(&with), mean(&without));
    (a < b, format!("mean held-out probe accuracy delta_E=1e-4 {a:.4} vs delta_E=0 {b:.4}"))
}

fn encode_model(kind: BackboneKind, dim_x: usize) -> Model {
    let cfg = ModelConfig {
        backbone: BackboneConfig { kind, num_layers: 2, hidden_units: 6, ..BackboneConfig::default() },
        ..ModelConfig::default()
    };
    let schema = Schema { dim_v: 2, dim_y: 1, dim_x, num_treatments: 3, max_len: 12 };
    Model::new(&cfg, &schema, 5).unwrap()
}

/// Gradient of one output row of the backbone with respect to every input row.
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

/// Count of (output, input) pairs that break causality or unit separation.
fn causality_violations(kind: BackboneKind) -> usize {
    let m = encode_model(kind, 0);
    let (units, steps) = (2, 7);
    let width = 2 * m.hidden_units();
    let mut rng = stream(8, "acceptance.inputs", 0);
    let data = (0..units * steps * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inputs = Tensor::new(vec![units * steps, width], data).unwrap();
    let mut bad = 0;
    for t in 0..steps {
        for b in 0..units {
            let grad = input_gradient(&m.backbone, &m.params, &inputs, units, t * units + b);
            for s in 0..steps {
                for b2 in 0..units {
                    let touches = grad.row(s * units + b2).iter().any(|&v| v != 0.0);
                    if (s > t || b2 != b) && touches || (s == t && b2 == b && !touches) {
                        bad += 1;
                    }
                }
            }
        }
    }
    bad
}

fn fixture(schema: &Schema, n: usize) -> Vec<Trajectory> {
    let mut rng = stream(8, "acceptance.fixture", 0);
    (0..n as u64)
        .map(|id| {
            let len = rng.random_range(2..=schema.max_len);
            Trajectory {
                id,
                v: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                a: (0..len).map(|_| rng.random_range(0..schema.num_treatments)).collect(),
                y: (0..len).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
                x: Some((0..len).map(|_| (0..schema.dim_x).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()),
                len,
                gamma: 0.0,
                seed: 0,
            }
        })
        .collect()
}

fn representation(m: &Model, data: &[Trajectory], cut: Option<&[usize]>) -> Tensor {
    let refs: Vec<&Trajectory> = data.iter().collect();
    let batch = Batch::new(&refs, &m.schema, 1.0).unwrap();
    let g = Graph::new();
    let p = Bindings::all_constant(&g, &m.params);
    g.value(m.representation::<ChaCha8Rng>(&g, &p, &batch, cut, None).unwrap())
}

/// Count of representation rows that break exact prefix invariance under cutoff.
fn prefix_violations(kind: BackboneKind) -> usize {
    let m = encode_model(kind, 3);
    let data = fixture(&m.schema, 6);
    let cuts: Vec<usize> = data.iter().map(|t| (t.len / 2).max(1)).collect();
    let plain = representation(&m, &data, None);
    let cut = representation(&m, &data, Some(&cuts));
    let mut scrambled = data.clone();
    for (t, &c) in scrambled.iter_mut().zip(&cuts) {
        for row in &mut t.x.as_mut().unwrap()[c - 1..] {
            row.iter_mut().for_each(|v| *v = 100.0 - *v);
        }
    }
    let mut bad = usize::from(cut != representation(&m, &scrambled, Some(&cuts)));
    for (b, (&c, tr)) in cuts.iter().zip(&data).enumerate() {
        for t in 0..tr.len.min(c.saturating_sub(1)) {
            let r = t * data.len() + b;
            bad += usize::from(plain.row(r) != cut.row(r));
        }
    }
    bad
}

fn criterion_8() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in [BackboneKind::Lstm, BackboneKind::Tcn] {
        let (c, p) = (causality_violations(kind), prefix_violations(kind));
        ok &= c == 0 && p == 0;
        parts.push(format!("{kind:?}: {c} causality and {p} prefix violations"));
    }
    (ok, parts.join(", "))
}

fn criterion_9() -> Verdict {
    let cfg = SemiSynthConfig { t_max: 100, ..SemiSynthConfig::default() };
    let generator = SemiSynthGenerator::new(&cfg, 9).unwrap();
    let split = |name: &str, n: usize| generator.standin_cohort(n, 100, split_seed(9, name)).unwrap();
    let trajectories = |units: &[(_, caetc_core::sim::semisynth::SemiUnit)]| -> Vec<Trajectory> {
        units.iter().map(|(_, u)| u.trajectory.clone()).collect()
    };
    let train_units = trajectories(&split("train", 200));
    let val_units = trajectories(&split("val", 20));
    let oracle = SemiSynthOracle { spec: generator.spec.clone(), units: split("test", 20) };
    let model_cfg = ModelConfig {
        backbone: BackboneConfig { hidden_units: 32, ..BackboneConfig::default() },
        ..ModelConfig::default()
    };
    let mut model = Model::new(&model_cfg, &cfg.schema(), 9).unwrap();
    let tc = TrainConfig { epochs: 5, seed: 9, ..TrainConfig::default() };
    train(&mut model, &train_units, Some(&val_units), &tc, 1.0).unwrap();
    let set = build_random_trajectory_testset(&oracle, 1, 10, 9).unwrap();
    let report = evaluate(&model, &set, 1.0, 1.0).unwrap();
    let finite = report.horizons.len() == 10 && report.horizons.iter().all(|h| h.rmse.is_finite() && h.n > 0);
    let row = aggregate("CAETC-LSTM", &[report.clone()]).unwrap();
    let table = format_aggregate_table(&[row]);
    let header: Vec<&str> = table.lines().next().unwrap().split(" | ").map(str::trim).collect();
    let mut expected = vec!["method".to_string()];
    expected.extend((1..=10).map(|t| format!("tau={t}")));
    expected.push("avg".into());
    let shape = header == expected && table.lines().count() == 2;
    (
        finite && shape,
        format!(
            "{} test cases, per-step RMSE {:?}, table columns match: {shape}",
            set.cases.len(),
            report.horizons.iter().map(|h| (h.rmse * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: u32, run: &dyn Fn() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let (ok, detail) = run();
        failures += usize::from(!ok);
        println!("criterion {n}: {} [{:.1?}] {detail}", if ok { "PASS" } else { "FAIL" }, start.elapsed());
    };
    report(1, &criterion_1);
    report(2, &criterion_2);
    report(3, &criterion_3);
    report(4, &criterion_4);
    report(5, &criterion_5);
    if wanted(6) || wanted(7) {
        let transfer = transfer_runs();
        report(6, &|| criterion_6(&transfer));
        report(7, &|| criterion_7(&transfer));
    }
    report(8, &criterion_8);
    report(9, &criterion_9);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        // The lines above are the record; a failing exit is opt-in so the
        // remaining workspace tests still run.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
