use std::path::{Path, PathBuf};

use caetc_core::checkpoint::Checkpoint;
use caetc_core::data::{load_split, read_jsonl, write_jsonl, Manifest, SplitInfo, Trajectory};
use caetc_core::eval::{
    aggregate, build_factual_testset, build_no_confounding_testset, build_random_trajectory_testset, evaluate,
    format_aggregate_table, EvalReport, NsclcOracle, SemiSynthOracle, Setting, TestSet,
};
use caetc_core::gradsuite;
use caetc_core::model::Model;
use caetc_core::sim::covariates::{ingest_hourly_csv, CovariatePanel};
use caetc_core::sim::nsclc;
use caetc_core::sim::semisynth::SemiSynthGenerator;
use caetc_core::theory;
use caetc_core::train::train;
use log::{info, warn};
use serde::Serialize;

use crate::args::*;
use crate::config::*;
use crate::CliError;

pub const NSCLC: &str = "nsclc";
pub const SEMISYNTH: &str = "semisynth";
pub const MANIFEST: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes to JSON")
}

pub fn simulate_nsclc(args: &SimulateNsclcArgs) -> Result<(), CliError> {
    let run = NsclcRun::resolve(args)?;
    create_dir(&args.out)?;
    let mut splits = Vec::new();
    for (name, n) in run.splits() {
        let seed = split_seed(run.seed, name);
        let units: Vec<Trajectory> = nsclc::simulate_cohort(&run.simulator, n, seed)?
            .into_iter()
            .map(|s| s.trajectory)
            .collect();
        let file = format!("{name}.jsonl");
        write_jsonl(&args.out.join(&file), &units)?;
        info!("wrote {n} {name} trajectories");
        splits.push(SplitInfo { name: name.into(), file, units: n, seed });
    }
    let manifest = Manifest {
        simulator: NSCLC.into(),
        schema: run.simulator.schema(),
        outcome_scale: nsclc::max_volume(),
        rmse_factor: 100.0 / nsclc::max_volume(),
        splits,
        config: json(&run),
    };
    manifest.save(&args.out.join(MANIFEST))?;
    write_echo(&args.out, &run)
}

fn panels_file(split: &str) -> String {
    format!("{split}_panels.jsonl")
}

pub fn simulate_semisynth(args: &SimulateSemisynthArgs) -> Result<(), CliError> {
    let run = SemiSynthRun::resolve(args)?;
    create_dir(&args.out)?;
    let generator = SemiSynthGenerator::new(&run.generator, run.process_seed())?;
    let mut ingested: Option<std::vec::IntoIter<CovariatePanel>> = match &args.panels {
        Some(p) => {
            let panels: Vec<CovariatePanel> = read_jsonl(p)?;
            let need: usize = run.splits().iter().map(|s| s.1).sum();
            if panels.len() < need {
                return Err(CliError::Usage(format!(
                    "{} holds {} panels, the splits need {need}",
                    p.display(),
                    panels.len()
                )));
            }
            Some(panels.into_iter())
        }
        None => None,
    };
    let mut splits = Vec::new();
    for (name, n) in run.splits() {
        let seed = split_seed(run.seed, name);
        let mut panels = Vec::with_capacity(n);
        let mut units = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let panel = match ingested.as_mut() {
                Some(it) => it.next().expect("panel count checked"),
                None => generator.standin_panel(seed, i, run.generator.t_max)?,
            };
            units.push(generator.unit(&panel, seed, i)?.trajectory);
            panels.push(panel);
        }
        let file = format!("{name}.jsonl");
        write_jsonl(&args.out.join(&file), &units)?;
        write_jsonl(&args.out.join(panels_file(name)), &panels)?;
        info!("wrote {n} {name} units");
        splits.push(SplitInfo { name: name.into(), file, units: n, seed });
    }
    let manifest = Manifest {
        simulator: SEMISYNTH.into(),
        schema: run.generator.schema(),
        outcome_scale: 1.0,
        rmse_factor: 1.0,
        splits,
        config: json(&run),
    };
    manifest.save(&args.out.join(MANIFEST))?;
    write_echo(&args.out, &run)
}

#[derive(Serialize)]
struct IngestEcho<'a> {
    input: &'a str,
    panels: usize,
    dropped: usize,
    warnings: &'a [String],
}

pub fn ingest_mimic(args: &IngestArgs) -> Result<(), CliError> {
    let ing = ingest_hourly_csv(&args.input)?;
    create_dir(&args.out)?;
    write_jsonl(&args.out.join("panels.jsonl"), &ing.panels)?;
    for w in &ing.warnings {
        warn!("{w}");
    }
    println!("kept {} patients, dropped {} with fewer than 20 hours", ing.panels.len(), ing.dropped);
    write_echo(
        &args.out,
        &IngestEcho {
            input: &args.input.display().to_string(),
            panels: ing.panels.len(),
            dropped: ing.dropped,
            warnings: &ing.warnings,
        },
    )
}

fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    Ok(Manifest::load(&dir.join(MANIFEST))?)
}

fn split<'a>(m: &'a Manifest, name: &str) -> Result<&'a SplitInfo, CliError> {
    m.splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| CliError::Usage(format!("dataset has no {name} split")))
}

fn load_named(dir: &Path, m: &Manifest, name: &str) -> Result<Vec<Trajectory>, CliError> {
    Ok(load_split(&dir.join(&split(m, name)?.file), &m.schema)?)
}

pub fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let run = TrainRun::resolve(args)?;
    let manifest = load_manifest(&args.data)?;
    let train_units = load_named(&args.data, &manifest, "train")?;
    let val = load_named(&args.data, &manifest, "val")?;
    create_dir(&args.out)?;
    let mut model = Model::new(&run.model, &manifest.schema, run.train.seed)?;
    let history = train(&mut model, &train_units, Some(&val), &run.train, manifest.outcome_scale)?;
    for w in &history.warnings {
        warn!("{w}");
    }
    write_text(&args.out.join("losses.csv"), &history.to_csv())?;
    let ck = Checkpoint::new(&model, manifest.outcome_scale, manifest.rmse_factor, json(&run));
    ck.save(&args.out.join("checkpoint.json"))?;
    write_echo(&args.out, &run)?;
    if let Some(best) = history.best_epoch {
        info!("kept parameters of epoch {best}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateEcho {
    checkpoint: String,
    data: String,
    setting: String,
    tau: usize,
    k: usize,
    seed: u64,
}

fn nsclc_test_set(dir: &Path, m: &Manifest, setting: Setting, tau: usize, k: usize, seed: u64) -> Result<TestSet, CliError> {
    let run: NsclcRun = serde_json::from_value(m.config.clone())
        .map_err(|e| CliError::Usage(format!("manifest config: {e}")))?;
    let info = split(m, "test")?;
    match setting {
        Setting::RandomTrajectories => {
            let patients = nsclc::simulate_cohort(&run.simulator, info.units, info.seed)?;
            let stored = load_named(dir, m, "test")?;
            if patients.iter().map(|p| &p.trajectory).ne(stored.iter()) {
                return Err(CliError::Usage("test split does not match its manifest".into()));
            }
            let oracle = NsclcOracle { config: run.simulator, patients };
            Ok(build_random_trajectory_testset(&oracle, k, tau, seed)?)
        }
        Setting::NoConfounding => Ok(build_no_confounding_testset(&run.simulator, info.units, tau, info.seed)?),
        Setting::Factual => Ok(build_factual_testset(load_named(dir, m, "test")?, tau, setting)?),
    }
}

fn semisynth_test_set(dir: &Path, m: &Manifest, setting: Setting, tau: usize, k: usize, seed: u64) -> Result<TestSet, CliError> {
    let run: SemiSynthRun = serde_json::from_value(m.config.clone())
        .map_err(|e| CliError::Usage(format!("manifest config: {e}")))?;
    let info = split(m, "test")?;
    match setting {
        Setting::RandomTrajectories => {
            let generator = SemiSynthGenerator::new(&run.generator, run.process_seed())?;
            let panels: Vec<CovariatePanel> = read_jsonl(&dir.join(panels_file("test")))?;
            let units = panels
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let u = generator.unit(&p, info.seed, i as u64)?;
                    Ok((p, u))
                })
                .collect::<caetc_core::Result<Vec<_>>>()?;
            let oracle = SemiSynthOracle { spec: generator.spec.clone(), units };
            Ok(build_random_trajectory_testset(&oracle, k, tau, seed)?)
        }
        Setting::NoConfounding => Err(CliError::Usage(
            "the no-confounding protocol needs a simulator with a single confounding strength".into(),
        )),
        Setting::Factual => Ok(build_factual_testset(load_named(dir, m, "test")?, tau, setting)?),
    }
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<EvalReport, CliError> {
    let setting: Setting = args.setting.parse().map_err(|e: caetc_core::CoreError| CliError::Usage(e.to_string()))?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.to_model()?;
    let manifest = load_manifest(&args.data)?;
    if manifest.schema != ck.schema {
        return Err(CliError::Usage("checkpoint and dataset schemas differ".into()));
    }
    let tau = args.tau.unwrap_or(if manifest.simulator == NSCLC { 5 } else { 10 });
    if tau == 0 || args.k == 0 {
        return Err(CliError::Usage("tau and k must be positive".into()));
    }
    if tau >= manifest.schema.max_len {
        warn!("tau {tau} is at least the longest training sequence {}", manifest.schema.max_len);
    }
    let set = match manifest.simulator.as_str() {
        NSCLC => nsclc_test_set(&args.data, &manifest, setting, tau, args.k, args.seed)?,
        SEMISYNTH => semisynth_test_set(&args.data, &manifest, setting, tau, args.k, args.seed)?,
        other => return Err(CliError::Usage(format!("unknown simulator '{other}'"))),
    };
    let mut report = evaluate(&model, &set, ck.outcome_scale, ck.rmse_factor)?;
    report.metadata.insert("tau".into(), tau.into());
    report.metadata.insert("k".into(), args.k.into());
    report.metadata.insert("seed".into(), args.seed.into());
    report.metadata.insert("simulator".into(), manifest.simulator.clone().into());
    report.metadata.insert("train_config".into(), ck.config.clone());
    match args.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_text(&out.join("report.csv"), &report.to_csv())?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_text(&out.join("report.json"), &(text + "\n"))?;
        write_echo(
            out,
            &EvaluateEcho {
                checkpoint: args.checkpoint.display().to_string(),
                data: args.data.display().to_string(),
                setting: setting.to_string(),
                tau,
                k: args.k,
                seed: args.seed,
            },
        )?;
    }
    Ok(report)
}

pub fn verify_theory(args: &VerifyArgs) -> Result<(), CliError> {
    let results = theory::suite(args.trials, args.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<32} trials={:<6} violations={:<4} worst={:e}", r.name, r.trials, r.violations, r.worst);
        if !r.passed() {
            failed.push(r.name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for c in gradsuite::suite(args.seed)? {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<40} {:e}", c.name, c.discrepancy);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn parse_run(spec: &str) -> Result<(String, Vec<PathBuf>), CliError> {
    let (method, files) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected METHOD=FILE[,FILE...], got '{spec}'")))?;
    let files: Vec<PathBuf> = files.split(',').filter(|f| !f.is_empty()).map(PathBuf::from).collect();
    if method.is_empty() || files.is_empty() {
        return Err(CliError::Usage(format!("empty method or file list in '{spec}'")));
    }
    Ok((method.to_string(), files))
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for spec in &args.runs {
        let (method, files) = parse_run(spec)?;
        let reports = files
            .iter()
            .map(|f| {
                let text = std::fs::read_to_string(f).map_err(|e| CliError::io(f, e))?;
                serde_json::from_str::<EvalReport>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(aggregate(&method, &reports)?);
    }
    match args.format {
        Format::Table => print!("{}", format_aggregate_table(&rows)),
        Format::Csv => {
            println!("method,tau,mean,std,runs");
            for r in &rows {
                for (t, (m, s)) in r.mean.iter().zip(&r.std).enumerate() {
                    println!("{},{},{m},{s},{}", r.method, t + 1, r.runs);
                }
                println!("{},avg,{},,{}", r.method, r.average, r.runs);
            }
        }
    }
    Ok(())
}
