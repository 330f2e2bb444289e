//! The five subcommand bodies. Everything here consumes a resolved
//! `Settings` and reports `Failure` with the right exit class.

use std::path::Path;
use std::time::Instant;

use serde_json::json;

use moelo_core::checkpoint::{load_experiment, load_model, save_experiment};
use moelo_core::derive_seed;
use moelo_core::etf::generate_etf;
use moelo_core::fingerprints::{
    generate_building, generate_dataset, load_dataset_csv, save_dataset_csv, scale_rss,
    BuildingSpec, DriftModel,
};
use moelo_core::model::{ModelConfig, MoEModel};
use moelo_core::numkit::{grad_check, Matrix};
use moelo_core::scenarios::{
    build_plan, build_summary, granularity_sweep, localization_error, run_scenario, write_summary,
    ScenarioPlan, Track,
};

use crate::config::Settings;
use crate::Failure;

fn building(settings: &Settings) -> Result<BuildingSpec, Failure> {
    generate_building(settings.template, settings.building_seed).map_err(Failure::runtime)
}

fn plan_for(settings: &Settings, track: Track, building: &BuildingSpec) -> Result<ScenarioPlan, Failure> {
    build_plan(
        track,
        building.clone(),
        settings.devices.clone(),
        settings.n_rp,
    )
    .map_err(Failure::runtime)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::runtime_msg(format!("cannot create {}: {e}", dir.display())))
}

/// Writes the dataset a scenario run would train and evaluate on. The rows
/// cover every device at every drift step from its introduction on, over the
/// configured partition; the seed derivation matches `run`, so the CSV shows
/// exactly the world a run with the same seed draws its slices from.
pub fn gen_data(settings: &Settings) -> Result<(), Failure> {
    let building = building(settings)?;
    let plan = plan_for(settings, settings.tracks[0], &building)?;
    let max_time = settings
        .devices
        .iter()
        .map(|d| d.intro_time_index)
        .max()
        .expect("devices are validated non-empty");
    let times: Vec<usize> = (0..=max_time).collect();
    let data_seed = derive_seed(settings.seed, "data");
    let drift = DriftModel::standard(
        max_time + 1,
        building.n_aps(),
        derive_seed(data_seed, "drift"),
    )
    .map_err(Failure::runtime)?;
    let dataset = generate_dataset(
        &building,
        &settings.devices,
        &plan.region_of,
        &drift,
        &times,
        settings.run.samples_per_triple,
        data_seed,
    )
    .map_err(Failure::runtime)?;

    ensure_dir(&settings.out)?;
    let path = settings.out.join("dataset.csv");
    save_dataset_csv(&dataset, &path).map_err(Failure::runtime)?;
    log::info!(
        "wrote {} fingerprints ({} regions) to {}",
        dataset.len(),
        plan.n_regions,
        path.display()
    );
    println!("{}", path.display());
    Ok(())
}

/// Executes the configured track(s): per track, train through the plan and
/// emit metrics.csv, summary.json, and a resumable checkpoint. With
/// `track = "all"` each track gets its own subdirectory.
pub fn run(settings: &Settings) -> Result<(), Failure> {
    let building = building(settings)?;
    for &track in &settings.tracks {
        let dir = if settings.all_tracks {
            settings.out.join(track.name())
        } else {
            settings.out.clone()
        };
        ensure_dir(&dir)?;

        let started = Instant::now();
        let plan = plan_for(settings, track, &building)?;
        let run = run_scenario(&plan, &settings.run, settings.seed).map_err(Failure::runtime)?;
        log::info!(
            "track {}: {} steps in {:.1} s",
            track.name(),
            plan.steps.len(),
            started.elapsed().as_secs_f64()
        );

        run.log
            .write_csv(dir.join("metrics.csv"))
            .map_err(Failure::runtime)?;
        let summary = build_summary(track, &run.log, &run.model, &run.wall_clock_s)
            .map_err(Failure::runtime)?;
        write_summary(dir.join("summary.json"), &summary).map_err(Failure::runtime)?;
        save_experiment(&run.model, &run.replay, &dir.join("checkpoint.json"))
            .map_err(Failure::runtime)?;
        println!(
            "{}: final mean LE {:.3} m",
            track.name(),
            run.log.final_mean_le().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Region-granularity sweep on the paired track: one run per configured
/// n_rp value, with the partition (and anchor capacity) rebuilt each time.
pub fn sweep(settings: &Settings) -> Result<(), Failure> {
    let building = building(settings)?;
    let rows = granularity_sweep(
        &building,
        &settings.devices,
        &settings.sweep_values,
        &settings.run,
        settings.seed,
    )
    .map_err(Failure::runtime)?;

    ensure_dir(&settings.out)?;
    let path = settings.out.join("sweep.csv");
    let mut text = String::from("n_rp,region_count,final_mean_le_m\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.n_rp, r.region_count, r.final_mean_le_m));
    }
    std::fs::write(&path, text)
        .map_err(|e| Failure::runtime_msg(format!("cannot write {}: {e}", path.display())))?;
    for r in &rows {
        println!(
            "n_rp {:>3} -> {} regions, final mean LE {:.3} m",
            r.n_rp, r.region_count, r.final_mean_le_m
        );
    }
    Ok(())
}

/// Loads a checkpoint (model or experiment form) plus a dataset CSV and
/// prints aggregate localization metrics as JSON on standard output.
pub fn eval(checkpoint: &Path, data: &Path) -> Result<(), Failure> {
    let model: MoEModel = match load_model(checkpoint) {
        Ok(m) => m,
        Err(_) => {
            let (m, _) = load_experiment(checkpoint).map_err(|e| {
                Failure::config(format!("cannot load checkpoint {}: {e}", checkpoint.display()))
            })?;
            m
        }
    };
    let dataset = load_dataset_csv(data)
        .map_err(|e| Failure::config(format!("cannot load dataset {}: {e}", data.display())))?;
    if dataset.is_empty() {
        return Err(Failure::config(format!("dataset {} is empty", data.display())));
    }

    let mut sum = 0.0;
    let mut worst: f64 = 0.0;
    let mut routed = 0usize;
    for f in &dataset.records {
        let (global, _, coords) = model
            .predict_location(&scale_rss(&f.rss))
            .map_err(Failure::runtime)?;
        let le = localization_error(coords, f.coords);
        sum += le;
        worst = worst.max(le);
        let (region, _) = model.registry().global_class(global).map_err(Failure::runtime)?;
        if region == f.region_id {
            routed += 1;
        }
    }
    let n = dataset.len();
    let report = json!({
        "n": n,
        "mean_le_m": sum / n as f64,
        "worst_le_m": worst,
        "region_accuracy": routed as f64 / n as f64,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("valid json"));
    Ok(())
}

/// Self-check: anchor geometry across the supported capacity range, then a
/// finite-difference audit of the full loss gradient on a small model.
pub fn check(seed: u64) -> Result<(), Failure> {
    let dim = 64;
    let mut worst_norm = 0.0f64;
    let mut worst_cos = 0.0f64;
    for k in 2..=16 {
        let frame = generate_etf(k, dim, seed).map_err(Failure::runtime)?;
        for i in 0..k {
            let a = frame.anchor(i).map_err(Failure::runtime)?;
            let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_norm = worst_norm.max((norm - 1.0).abs());
            for j in (i + 1)..k {
                let b = frame.anchor(j).map_err(Failure::runtime)?;
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = -1.0 / (k as f64 - 1.0);
                worst_cos = worst_cos.max((dot - target).abs());
            }
        }
    }
    let geometry_ok = worst_norm < 1e-12 && worst_cos < 1e-9;
    println!(
        "anchor geometry K=2..16: norm err {worst_norm:.2e}, cosine err {worst_cos:.2e} -> {}",
        if geometry_ok { "ok" } else { "FAIL" }
    );

    let config = ModelConfig {
        input_dim: 6,
        encoder_hidden: 10,
        latent_dim: 8,
        expert_hidden: 7,
        dropout_rate: 0.2,
        r_max: 4,
        dr_target: Default::default(),
        w_ce: 1.0,
        w_dr: 1.0,
        seed,
    };
    let mut model = MoEModel::new(config).map_err(Failure::runtime)?;
    let classes0: Vec<(usize, [f64; 3])> = (0..2).map(|rp| (rp, [rp as f64, 0.0, 1.5])).collect();
    let classes1: Vec<(usize, [f64; 3])> = (2..5).map(|rp| (rp, [rp as f64, 1.0, 1.5])).collect();
    model.add_expert(0, &classes0).map_err(Failure::runtime)?;
    model.add_expert(2, &classes1).map_err(Failure::runtime)?;

    let n = 4;
    let d = 6;
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x.set(i, j, (((i * 7 + j * 13 + 3) % 17) as f64) / 17.0 - 0.3);
        }
    }
    let global_labels = vec![0, 2, 4, 1];
    let anchor_labels = vec![
        model.anchor_for_region(0).map_err(Failure::runtime)?,
        model.anchor_for_region(2).map_err(Failure::runtime)?,
        model.anchor_for_region(2).map_err(Failure::runtime)?,
        model.anchor_for_region(0).map_err(Failure::runtime)?,
    ];
    let dropout_seed = derive_seed(seed, "check");
    let (_, grads) = model
        .loss_and_grads(&x, &global_labels, &anchor_labels, true, true, dropout_seed)
        .map_err(Failure::runtime)?;
    let mut analytic = Vec::new();
    analytic.extend(grads.encoder.flat().iter().flat_map(|s| s.iter().copied()));
    analytic.extend(grads.projection.flat().iter().flat_map(|s| s.iter().copied()));
    for e in &grads.experts {
        analytic.extend(e.flat().iter().flat_map(|s| s.iter().copied()));
    }
    let mut theta = model.flat_param_vec();
    let mut probe = model.clone();
    let report = grad_check(&mut theta, &analytic, 1e-5, 1e-4, |t| {
        probe.set_flat_params(t)?;
        let (terms, _) =
            probe.loss_and_grads(&x, &global_labels, &anchor_labels, true, true, dropout_seed)?;
        Ok(terms.total)
    })
    .map_err(Failure::runtime)?;
    println!(
        "gradient audit ({} parameters): max rel err {:.2e} -> {}",
        report.checked,
        report.max_rel_err,
        if report.passed { "ok" } else { "FAIL" }
    );

    if geometry_ok && report.passed {
        Ok(())
    } else {
        Err(Failure::runtime_msg("self-check failed".into()))
    }
}
