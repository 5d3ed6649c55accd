//! Subcommand implementations. Each command resolves everything it needs from
//! the configuration, writes its artifacts plus sidecars into the output
//! directory and drops the resolved configuration next to them.

use std::path::{Path, PathBuf};

use conefocus::appearance::{
    descriptor_for, evaluate, generate_dataset, save_model, split_by_phantom, train,
    DatasetConfig, RegressorModel, TrainConfig,
};
use conefocus::autofocus::{
    fine_tune, initial_view_mask, optimize_trajectory, AutofocusProblem, Stage,
};
use conefocus::bench::{
    parse_metric_name, results_csv_rows, run_benchmark, timings_csv_rows, BenchWorld, Scenario,
    RESULTS_CSV_HEADER, TIMINGS_CSV_HEADER,
};
use conefocus::config::ExperimentConfig;
use conefocus::error::{Error, Result};
use conefocus::fdk::{parker_safe_range, FdkReconstructor};
use conefocus::geometry::compose;
use conefocus::io;
use conefocus::iqm::{build_metric, MetricContext};
use conefocus::motion::{
    annihilating_motion, curves_from_splines, random_motion, Axis, MotionSplineSet,
};
use conefocus::phantom::{render_projections, voxelize};

fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.json"), cfg.canonical_json()?)?;
    Ok(())
}

fn metric_context(cfg: &ExperimentConfig) -> Result<MetricContext> {
    let model = match &cfg.metrics.model_path {
        Some(path) => Some(conefocus::appearance::load_model(path)?),
        None => None,
    };
    Ok(MetricContext {
        window: cfg.bone_window()?,
        markers: cfg.markers()?,
        slice_set: cfg.slice_set()?,
        model,
    })
}

/// Writes the phantom definition and the voxelized ground-truth volume.
pub fn cmd_phantom(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dir = out.join("phantom");
    write_resolved_config(cfg, &dir)?;
    let phantom = cfg.active_phantom()?;
    let hash = cfg.hash()?;
    std::fs::write(dir.join("phantom.json"), serde_json::to_string_pretty(&phantom)?)?;
    let grid = cfg.voxel_grid()?;
    let vol = voxelize(&phantom, &grid);
    io::write_volume(&dir.join("ground_truth.f32"), &vol, &hash, grid.spacing)?;
    println!("phantom: wrote {} ellipsoids and a {:?} volume", phantom.ellipsoids.len(), grid.dims);
    Ok(())
}

/// Renders projections of the static phantom and writes the motion metadata
/// describing the simulated geometry corruption.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dir = out.join("simulate");
    write_resolved_config(cfg, &dir)?;
    let hash = cfg.hash()?;
    let traj = cfg.trajectory()?;
    let phantom = cfg.active_phantom()?;
    io::write_trajectory(&dir.join("trajectory.json"), &traj)?;
    let raw = render_projections(&phantom, &traj, None)?;
    io::write_projections(
        &dir.join("projections.f32"),
        &raw,
        &hash,
        (cfg.geometry.du, cfg.geometry.dv),
        Some(PathBuf::from("trajectory.json")),
    )?;
    let safe = parker_safe_range(&traj)?;
    let spline = random_motion(
        cfg.motion.axis,
        cfg.motion.amplitude,
        cfg.motion.n_nodes,
        traj.len(),
        safe,
        cfg.seed,
    )?;
    let labels =
        conefocus::appearance::labels_for_motion(&spline, &traj, &cfg.markers()?)?;
    let record = io::MotionRecord {
        schema_version: io::SCHEMA_VERSION,
        config_hash: hash,
        axis: cfg.motion.axis,
        amplitude: cfg.motion.amplitude,
        n_nodes: cfg.motion.n_nodes,
        seed: cfg.seed,
        spline,
        labels,
    };
    io::write_motion_record(&dir.join("motion.json"), &record)?;
    io::write_rpe_profile_csv(
        &dir.join("rpe_profile.csv"),
        &conefocus::rpe::RpeProfile {
            values: record.labels.profile_all.clone(),
            variant: conefocus::rpe::RpeVariant::AllAxes,
        },
    )?;
    println!(
        "simulate: {} views rendered, motion {} amplitude {} (mRPE {:.4} mm)",
        traj.len(),
        record.axis.label(),
        record.amplitude,
        record.labels.mrpe
    );
    Ok(())
}

/// Reconstructs the nine slices; with motion metadata the corrupted geometry
/// is composed into the back-projection.
pub fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    out: &Path,
    projections: Option<&Path>,
    motion: Option<&Path>,
) -> Result<()> {
    let dir = out.join("reconstruct");
    write_resolved_config(cfg, &dir)?;
    let hash = cfg.hash()?;
    let traj = cfg.trajectory()?;
    let proj_path = projections
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("simulate").join("projections.f32"));
    let (raw, _) = io::read_projections(&proj_path)?;
    if raw.shape()[0] != traj.len() {
        return Err(Error::Shape(format!(
            "projections carry {} views, config expects {}",
            raw.shape()[0],
            traj.len()
        )));
    }
    let motions = match motion {
        Some(path) => {
            let record = io::read_motion_record(path)?;
            let curves = curves_from_splines(&record.spline, traj.len())?;
            annihilating_motion(&curves)
        }
        None => vec![conefocus::geometry::RigidMotion::identity(); traj.len()],
    };
    let eff = compose(&traj, &motions)?;
    let set = cfg.slice_set()?;
    let slices = conefocus::fdk::reconstruct(&set, &eff, raw)?;
    io::write_slices(&dir.join("slices.f32"), &slices, &set, &hash)?;
    println!("reconstruct: wrote {} slice pixels", slices.total_pixels());
    Ok(())
}

/// Generates the dataset, trains the regressor with early stopping and writes
/// the model container, training history and held-out evaluation.
/// Training with an optional dataset dump (one record per sample).
pub fn cmd_train_with(cfg: &ExperimentConfig, out: &Path, save_dataset: bool) -> Result<()> {
    let dir = out.join("train");
    write_resolved_config(cfg, &dir)?;
    let traj = cfg.trajectory()?;
    let set = cfg.slice_set()?;
    let markers = cfg.markers()?;
    let phantoms = cfg.phantoms()?;
    let ds_cfg = DatasetConfig {
        n_samples: cfg.dataset.n_samples,
        amplitude_range: (cfg.dataset.amplitude_lower, cfg.dataset.amplitude_upper),
        n_nodes: cfg.dataset.n_nodes,
        seed: cfg.seed,
    };
    println!("train: generating {} samples over {} phantoms", ds_cfg.n_samples, phantoms.len());
    let dataset = generate_dataset(&phantoms, &traj, &set, &markers, &ds_cfg)?;
    if save_dataset {
        let ds_dir = dir.join("dataset");
        std::fs::create_dir_all(&ds_dir)?;
        let hash = cfg.hash()?;
        for (i, sample) in dataset.iter().enumerate() {
            io::write_sample(&ds_dir, i, sample, &set, &hash)?;
        }
    }
    let (train_set, val_set, test_set) =
        split_by_phantom(&dataset, cfg.dataset.val_fraction, cfg.dataset.test_fraction);
    println!(
        "train: split {} train / {} val / {} test samples",
        train_set.len(),
        val_set.len(),
        test_set.len()
    );
    let desc = descriptor_for(&set, traj.len());
    let model = RegressorModel::init(desc, cfg.seed)?;
    let train_cfg = TrainConfig {
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.train.batch_size,
        max_epochs: cfg.train.max_epochs,
        patience: cfg.train.patience,
        seed: cfg.seed,
    };
    let outcome = train(model, &train_set, &val_set, &set, &train_cfg)?;
    save_model(&outcome.model, &dir.join("model.bin"))?;
    io::write_history_csv(&dir.join("history.csv"), &outcome.history)?;
    let report = evaluate(&outcome.model, &test_set, &set, cfg.metrics.threshold)?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    io::write_profile_errors_csv(&dir.join("profile_errors.csv"), &report.per_view)?;
    // Train-split correlation, recorded for the generalization comparison.
    let train_probe: Vec<&conefocus::appearance::Sample> =
        train_set.iter().copied().take(test_set.len().max(32)).collect();
    let train_report = evaluate(&outcome.model, &train_probe, &set, cfg.metrics.threshold)?;
    std::fs::write(
        dir.join("generalization.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "train_pearson_mrpe": train_report.pearson_mrpe,
            "heldout_pearson_mrpe": report.pearson_mrpe,
        }))?,
    )?;
    println!(
        "train: best epoch {} (val loss {:.4}); held-out r = {:.3}, FN = {:.1}%, FP = {:.1}%",
        outcome.best_epoch,
        outcome.history[outcome.best_epoch].val_loss,
        report.pearson_mrpe,
        100.0 * report.false_negative_rate,
        100.0 * report.false_positive_rate
    );
    Ok(())
}

/// Estimates the annihilating trajectory for the stored corrupted scan and
/// writes the result bundle.
pub fn cmd_autofocus(
    cfg: &ExperimentConfig,
    out: &Path,
    metric_name: &str,
    projections: Option<&Path>,
    motion: Option<&Path>,
    all_axes: bool,
) -> Result<()> {
    let dir = out.join("autofocus");
    write_resolved_config(cfg, &dir)?;
    let hash = cfg.hash()?;
    let traj = cfg.trajectory()?;
    let set = cfg.slice_set()?;
    let proj_path = projections
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("simulate").join("projections.f32"));
    let motion_path =
        motion.map(Path::to_path_buf).unwrap_or_else(|| out.join("simulate").join("motion.json"));
    let (raw, _) = io::read_projections(&proj_path)?;
    let record = io::read_motion_record(&motion_path)?;
    let prior = annihilating_motion(&curves_from_splines(&record.spline, traj.len())?);

    let (primary, tuner) = parse_metric_name(metric_name)?;
    let ctx = metric_context(cfg)?;
    let metric = build_metric(&primary, &ctx)?;
    let reconstructor = FdkReconstructor::new(raw, &traj, set.clone())?;
    let mask = if primary == "cnn" {
        Some(initial_view_mask(
            metric.as_ref(),
            &reconstructor,
            &traj,
            Some(&prior),
            cfg.metrics.threshold,
        )?)
    } else {
        None
    };
    let axes: Vec<Axis> =
        if all_axes { Axis::OPTIMIZATION_ORDER.to_vec() } else { vec![record.axis] };
    let annihilation_nodes = record.n_nodes.max(2);
    let problem = AutofocusProblem::new(
        &reconstructor,
        &traj,
        Some(prior.clone()),
        metric.as_ref(),
        mask.clone(),
    )?;
    let m0 = MotionSplineSet::zero(annihilation_nodes, traj.len())?;
    let mut result = optimize_trajectory(&problem, &m0, &axes, &cfg.optimizer)?;
    if let Some(second) = tuner {
        let second_metric = build_metric(&second, &ctx)?;
        let problem2 = AutofocusProblem::new(
            &reconstructor,
            &traj,
            Some(prior),
            second_metric.as_ref(),
            mask,
        )?;
        let tail = *cfg.optimizer.stages.last().unwrap();
        result = fine_tune(
            &problem2,
            &result,
            &axes,
            Stage { step: 0.5 * tail.step, max_iterations: tail.max_iterations },
            cfg.optimizer.tolerance,
        )?;
    }
    std::fs::write(dir.join("estimate.json"), serde_json::to_string_pretty(&result.estimate)?)?;
    io::write_slices(&dir.join("compensated.f32"), &result.reconstruction, &set, &hash)?;
    io::write_trace_csv(&dir.join("trace.csv"), &result.trace)?;
    io::write_csv(
        &dir.join("metric_log.csv"),
        "iteration,metric,score",
        result
            .trace
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{i},{metric_name},{}", r.score)),
    )?;
    // Motion-vs-annihilating overlay for the corrupted axis.
    let gt_curves = curves_from_splines(&record.spline, traj.len())?;
    let est_curves = curves_from_splines(&result.estimate, traj.len())?;
    io::write_curves_svg(
        &dir.join("curves.svg"),
        &format!("{} motion vs annihilating estimate", record.axis.label()),
        &[
            ("motion".into(), gt_curves.row(record.axis).to_vec()),
            ("annihilating".into(), est_curves.row(record.axis).to_vec()),
        ],
    )?;
    // Wall-clock goes to its own file so every other artifact stays
    // byte-reproducible.
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "wall_clock_s": result.wall_clock.as_secs_f64(),
            "objective_evaluations": result.evaluations,
        }))?,
    )?;
    println!(
        "autofocus[{}]: final score {:.6} after {} evaluations",
        metric_name, result.final_score, result.evaluations
    );
    Ok(())
}

/// Runs the scenario benchmark and writes the result tables.
pub fn cmd_benchmark(cfg: &ExperimentConfig, out: &Path, plots: bool) -> Result<()> {
    let dir = out.join("benchmark");
    write_resolved_config(cfg, &dir)?;
    let traj = cfg.trajectory()?;
    let set = cfg.slice_set()?;
    let markers = cfg.markers()?;
    let window = cfg.bone_window()?;
    let model = match &cfg.metrics.model_path {
        Some(path) => Some(conefocus::appearance::load_model(path)?),
        None => None,
    };
    let needs_model = cfg.bench.metrics.iter().any(|m| {
        parse_metric_name(m).map(|(p, _)| p == "cnn").unwrap_or(false)
    });
    if needs_model && model.is_none() {
        return Err(Error::Config(
            "benchmark includes 'cnn' but no model path is configured".into(),
        ));
    }
    let phantoms = cfg.phantoms()?;
    let mut worlds = Vec::new();
    for variant in &cfg.bench.phantom_variants {
        let phantom = phantoms.get(*variant).ok_or_else(|| {
            Error::Config(format!("phantom variant {variant} outside the family"))
        })?;
        worlds.push(BenchWorld::new(
            phantom,
            &traj,
            &set,
            markers.clone(),
            window,
            model.clone(),
            cfg.metrics.threshold,
        )?);
    }
    let scenarios = cfg
        .bench
        .scenarios
        .iter()
        .map(|s| Scenario::from_name(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (rows, summary) = run_benchmark(
        &worlds,
        &scenarios,
        &cfg.bench.axes,
        &cfg.bench.metrics,
        &cfg.optimizer,
        (cfg.bench.voi_lower, cfg.bench.voi_upper),
    )?;
    io::write_csv(&dir.join("results.csv"), RESULTS_CSV_HEADER, results_csv_rows(&rows))?;
    io::write_csv(&dir.join("summary.csv"), RESULTS_CSV_HEADER, results_csv_rows(&summary))?;
    io::write_csv(&dir.join("timings.csv"), TIMINGS_CSV_HEADER, timings_csv_rows(&rows))?;
    if plots {
        write_benchmark_plots(&dir.join("plots"), &summary)?;
    }
    println!("benchmark: {} rows over {} phantoms", rows.len(), worlds.len());
    print_summary_table(&summary);
    Ok(())
}

fn write_benchmark_plots(dir: &Path, summary: &[conefocus::bench::BenchRow]) -> Result<()> {
    let mut scenarios: Vec<String> = summary.iter().map(|r| r.scenario.clone()).collect();
    scenarios.sort();
    scenarios.dedup();
    for sc in scenarios {
        let mut by_metric: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for r in summary.iter().filter(|r| r.scenario == sc) {
            by_metric.entry(r.metric.clone()).or_default().push(r.misalignment);
        }
        let cats: Vec<(String, f64)> = by_metric
            .into_iter()
            .map(|(m, v)| (m, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        io::write_bar_svg(
            &dir.join(format!("misalignment_{sc}.svg")),
            &format!("scenario {sc}: mean misalignment"),
            &cats,
        )?;
    }
    Ok(())
}

fn print_summary_table(summary: &[conefocus::bench::BenchRow]) {
    println!("scenario axis metric  misalignment  ssim   ssim_voi");
    for r in summary {
        println!(
            "{:<8} {:<4} {:<7} {:<13.4} {:<6.1} {:<6.1}",
            r.scenario,
            r.axis.label(),
            r.metric,
            r.misalignment,
            r.ssim,
            r.ssim_voi
        );
    }
}

/// Reads a results CSV back and prints/plots its per-metric summary.
pub fn cmd_report(
    cfg: &ExperimentConfig,
    out: &Path,
    results: Option<&Path>,
    plots: bool,
) -> Result<()> {
    let _ = cfg;
    let path = results
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("benchmark").join("results.csv"));
    let text = std::fs::read_to_string(&path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != RESULTS_CSV_HEADER {
        return Err(Error::Config(format!("unexpected results header '{header}'")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Config(format!("malformed results row {}", ln + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Config(format!("bad number '{s}': {e}")))
        };
        rows.push(conefocus::bench::BenchRow {
            scenario: parts[0].into(),
            axis: Axis::from_label(parts[1])?,
            metric: parts[2].into(),
            phantom: parts[3].into(),
            misalignment: parse(parts[4])?,
            ssim: parse(parts[5])?,
            ssim_voi: parse(parts[6])?,
            runtime_s: 0.0,
        });
    }
    println!("report: {} rows from {}", rows.len(), path.display());
    print_summary_table(&rows);
    if plots {
        write_benchmark_plots(&out.join("report").join("plots"), &rows)?;
    }
    Ok(())
}
