//! The experiment subcommands: generate → train → tune/penalty → evaluate,
//! plus the folded-method scaling probe.

use std::path::Path;

use ensteer_core::baselines::{
    fit_loglog_slope, penalty_tune_from, qfolded_iteration_cost_probe, qfolded_train,
    scaling_to_csv,
};
use ensteer_core::dynamics::{
    control_to_string, load_control, ControlHeader, ControlSignal, Model, ReadoutMap,
};
use ensteer_core::ensemble::{
    average_error, dataset_to_string, generate_ball_dataset, load_dataset, Ensemble,
};
use ensteer_core::endpoint_jacobian::per_sample_cost;
use ensteer_core::tuner::{
    phase1, tune_without_forgetting, TuneContext, TuningReport, TuningState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, TrainMethod};
use crate::manifest::RunManifest;
use crate::CliError;

const DATASET_FILE: &str = "dataset.txt";
const U0_FILE: &str = "u0.ctrl";
const TRAIN_CURVE_FILE: &str = "train_curve.csv";
const TUNED_FILE: &str = "u_star.ctrl";
const TUNE_REPORT_FILE: &str = "tune_report.csv";
const EVAL_FILE: &str = "eval.csv";
const SCALING_FILE: &str = "scaling.csv";

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {}", out.display(), e)))
}

fn model_and_readout(config: &ExperimentConfig) -> Result<(Model, ReadoutMap), CliError> {
    let model = Model::two_layer_tanh(config.nbar);
    let readout = ReadoutMap::canonical(config.n_out, config.nbar)?;
    Ok((model, readout))
}

fn load_dataset_checked(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<(Ensemble, std::path::PathBuf), CliError> {
    let path = out.join(DATASET_FILE);
    let (ensemble, _seed) = load_dataset(&path)?;
    if ensemble.len() != config.q || ensemble.input_dim() != config.n {
        return Err(CliError::Config(format!(
            "dataset {} has q={}, n={} but the config says q={}, n={}",
            path.display(),
            ensemble.len(),
            ensemble.input_dim(),
            config.q,
            config.n
        )));
    }
    Ok((ensemble, path))
}

fn load_control_checked(
    config: &ExperimentConfig,
    path: &Path,
) -> Result<(ControlHeader, ControlSignal), CliError> {
    let (header, u) = load_control(path)?;
    let model = Model::two_layer_tanh(config.nbar);
    if header.kind != model.kind_name()
        || header.nbar != config.nbar
        || header.params_per_step != model.params_per_step()
        || header.steps != config.steps
    {
        return Err(CliError::Config(format!(
            "checkpoint {} (model={}, nbar={}, p={}, N={}) does not match the config (model={}, nbar={}, p={}, N={})",
            path.display(),
            header.kind,
            header.nbar,
            header.params_per_step,
            header.steps,
            model.kind_name(),
            config.nbar,
            model.params_per_step(),
            config.steps,
        )));
    }
    Ok((header, u))
}

pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("gen-data", config.echo());
    let ensemble = generate_ball_dataset(
        config.q,
        config.data_seed,
        config.data_margin,
        config.data_box_halfwidth,
    )?;
    let inside = ensemble.samples().iter().filter(|s| s.y[0] < 0.0).count();
    let text = dataset_to_string(&ensemble, config.data_seed);
    manifest.write_output(&out.join(DATASET_FILE), &text)?;
    manifest.finish(out)?;
    println!(
        "generated {} samples ({} inside the unit ball, {} outside) -> {}",
        ensemble.len(),
        inside,
        ensemble.len() - inside,
        out.join(DATASET_FILE).display()
    );
    Ok(())
}

pub fn train(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("train", config.echo());
    let (ensemble, dataset_path) = load_dataset_checked(config, out)?;
    manifest.record_input(&dataset_path)?;
    let (model, readout) = model_and_readout(config)?;
    let view = ensemble.prefix(config.j)?;
    if view.is_empty() {
        return Err(CliError::Config("cannot train on an empty prefix (j = 0)".into()));
    }

    let (u0, curve_csv) = match config.train_method {
        TrainMethod::QFolded => {
            let outcome = qfolded_train(
                &model,
                &readout,
                &view,
                config.steps,
                config.horizon,
                &config.qfolded_config(),
                config.init_seed,
            )?;
            if !outcome.converged {
                return Err(CliError::NonConvergence(format!(
                    "joint training stopped after {} iterations with stacked residual {:e} (threshold {:e})",
                    outcome.iterations,
                    outcome.final_residual_norm,
                    config.train_residual_threshold,
                )));
            }
            (outcome.control, outcome.curve.to_csv_string())
        }
        TrainMethod::ScratchPhase1 => {
            // phase 1 from an empty memorized set: each prefix sample is
            // learned in turn, constrained by the ones before it
            let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
            let std_dev = 0.1 / (config.nbar as f64).sqrt();
            let u_init = ControlSignal::gaussian(
                model.params_per_step(),
                config.steps,
                config.horizon,
                std_dev,
                &mut rng,
            );
            let ctx = TuneContext {
                model: &model,
                readout: &readout,
                ensemble: &ensemble,
            };
            let mut state = TuningState::new(ctx, u_init, 0, config.tuner_config())?;
            let mut curve = String::from("iteration,cost,avg_error\n");
            for i in 1..=config.j {
                phase1(&mut state, ctx, &[i])?;
                let seen = ensemble.prefix(i)?;
                let mut cost_sum = 0.0;
                for sample in seen.iter() {
                    cost_sum += per_sample_cost(&model, &readout, state.control(), sample)?.value;
                }
                let avg = average_error(&model, &readout, state.control(), &seen)?;
                curve.push_str(&format!("{},{},{}\n", i, cost_sum, avg));
            }
            (state.into_control(), curve)
        }
    };

    let avg = average_error(&model, &readout, &u0, &view)?;
    manifest.write_output(&out.join(U0_FILE), &control_to_string(&model, &u0))?;
    manifest.write_output(&out.join(TRAIN_CURVE_FILE), &curve_csv)?;
    manifest.finish(out)?;
    println!(
        "trained on the first {} samples: average error {} -> {}",
        config.j,
        avg,
        out.join(U0_FILE).display()
    );
    Ok(())
}

pub fn tune(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("tune", config.echo());
    let (ensemble, dataset_path) = load_dataset_checked(config, out)?;
    manifest.record_input(&dataset_path)?;
    let u0_path = out.join(U0_FILE);
    let (_, u0) = load_control_checked(config, &u0_path)?;
    manifest.record_input(&u0_path)?;
    let (model, readout) = model_and_readout(config)?;
    let ctx = TuneContext {
        model: &model,
        readout: &readout,
        ensemble: &ensemble,
    };
    let (u_star, report) = tune_without_forgetting(ctx, &u0, config.j, &config.tuner_config())?;
    for w in &report.warnings {
        eprintln!("warning: {}", w);
    }
    manifest.write_output(&out.join(TUNED_FILE), &control_to_string(&model, &u_star))?;
    manifest.write_output(&out.join(TUNE_REPORT_FILE), &report.to_csv_string())?;
    manifest.finish(out)?;
    print_final_errors(&report);
    Ok(())
}

fn print_final_errors(report: &TuningReport) {
    let final_round = report.rows.iter().map(|r| r.round).max().unwrap_or(0);
    for set in ["memorized", "new", "all"] {
        let last = report
            .rows
            .iter()
            .rfind(|r| r.set == set && r.metric == "avg_error");
        let first = report
            .rows
            .iter()
            .find(|r| r.set == set && r.metric == "avg_error");
        if let (Some(first), Some(last)) = (first, last) {
            println!(
                "E({:9}) round 0: {:<22} round {}: {}",
                set, first.value, final_round, last.value
            );
        }
    }
}

pub fn penalty(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("penalty", config.echo());
    let (ensemble, dataset_path) = load_dataset_checked(config, out)?;
    manifest.record_input(&dataset_path)?;
    let u0_path = out.join(U0_FILE);
    let (_, u0) = load_control_checked(config, &u0_path)?;
    manifest.record_input(&u0_path)?;
    let (model, readout) = model_and_readout(config)?;
    let ctx = TuneContext {
        model: &model,
        readout: &readout,
        ensemble: &ensemble,
    };
    let view = ensemble.prefix(ensemble.len())?;

    for &lambda in &config.penalty_lambdas {
        // split the iteration budget into as many segments as the tuner has
        // rounds, so the report shares the round axis with the tuner's
        let segments = config.tuner_rounds.max(1);
        let base = config.penalty_iters / segments;
        let mut report = TuningReport::default();
        report.push_metrics(ctx, &u0, config.j, 0, "init", None)?;
        let mut u = u0.clone();
        for r in 1..=segments {
            let budget = if r == segments {
                config.penalty_iters - base * (segments - 1)
            } else {
                base
            };
            let mut penalty_config = config.penalty_config(lambda);
            penalty_config.max_iterations = budget;
            let outcome = penalty_tune_from(&model, &readout, &view, u, &u0, &penalty_config)?;
            u = outcome.control;
            report.push_metrics(ctx, &u, config.j, r, "penalty", Some(outcome.iterations))?;
        }
        let ctrl_path = out.join(format!("penalty_lambda{}.ctrl", lambda));
        let report_path = out.join(format!("penalty_report_lambda{}.csv", lambda));
        manifest.write_output(&ctrl_path, &control_to_string(&model, &u))?;
        manifest.write_output(&report_path, &report.to_csv_string())?;
        println!("penalty λ={} -> {}", lambda, report_path.display());
    }
    manifest.finish(out)?;
    Ok(())
}

pub fn eval(config: &ExperimentConfig, out: &Path, control: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("eval", config.echo());
    let (ensemble, dataset_path) = load_dataset_checked(config, out)?;
    manifest.record_input(&dataset_path)?;
    let (_, u) = load_control_checked(config, control)?;
    manifest.record_input(control)?;
    let (model, readout) = model_and_readout(config)?;

    let q = ensemble.len();
    let mut csv = String::from("set,metric,value\n");
    for (name, lo, hi) in [
        ("memorized", 0, config.j),
        ("new", config.j, q),
        ("all", 0, q),
    ] {
        if hi == lo {
            continue;
        }
        let view = ensemble.view(lo, hi)?;
        let avg = average_error(&model, &readout, &u, &view)?;
        csv.push_str(&format!("{},avg_error,{}\n", name, avg));
        println!("E({}) = {}", name, avg);
    }
    manifest.write_output(&out.join(EVAL_FILE), &csv)?;
    manifest.finish(out)?;
    Ok(())
}

pub fn scaling(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("scaling", config.echo());
    let rows = qfolded_iteration_cost_probe(
        &config.scaling_n_list,
        &config.scaling_q_list,
        config.scaling_steps,
        config.scaling_seed,
    );
    manifest.write_output(&out.join(SCALING_FILE), &scaling_to_csv(&rows))?;
    manifest.finish(out)?;
    for &n in &config.scaling_n_list {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.state_dim == n && r.q > 1)
            .map(|r| (r.q as f64, r.seconds_per_iteration))
            .collect();
        if points.len() >= 2 {
            println!(
                "n={}: fitted log-log slope over q in {:?}: {:.3}",
                n,
                points.iter().map(|(q, _)| *q as usize).collect::<Vec<_>>(),
                fit_loglog_slope(&points)
            );
        }
    }
    println!("-> {}", out.join(SCALING_FILE).display());
    Ok(())
}
