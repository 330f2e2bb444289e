//! TOML run configuration and its merge with command-line overrides. Every
//! field is optional in the file; flags win over file values, and anything
//! still unset falls back to the standard defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use moelo_core::fingerprints::{standard_devices, BuildingTemplate, DeviceProfile};
use moelo_core::scenarios::{RunSettings, Track};

use crate::Failure;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub building: Option<String>,
    pub building_seed: Option<u64>,
    pub n_rp: Option<usize>,
    pub track: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub devices: Option<Vec<DeviceEntry>>,
    pub train: Option<TrainSection>,
    pub run: Option<RunSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEntry {
    pub acronym: String,
    pub rss_bias: f64,
    pub gain_scale: f64,
    pub noise_std: f64,
    pub miss_probability: f64,
    pub intro_time_index: usize,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub replay_fraction: Option<f64>,
    pub learning_rate: Option<f64>,
    pub cil_train_gate: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub replay_capacity: Option<usize>,
    pub samples_per_triple: Option<usize>,
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n_rp_values: Option<Vec<usize>>,
}

/// Flag values that may override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub track: Option<String>,
    pub building: Option<String>,
    pub out: Option<PathBuf>,
    pub n_rp: Option<usize>,
}

/// Fully resolved configuration: what the commands actually consume.
#[derive(Debug, Clone)]
pub struct Settings {
    pub template: BuildingTemplate,
    pub building_seed: u64,
    pub n_rp: usize,
    pub tracks: Vec<Track>,
    /// True when the track came in as `all`; runs then split into
    /// per-track subdirectories.
    pub all_tracks: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub devices: Vec<DeviceProfile>,
    pub run: RunSettings,
    pub sweep_values: Vec<usize>,
}

pub fn load_file(path: &Path) -> Result<FileConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

fn parse_template(name: &str) -> Result<BuildingTemplate, Failure> {
    match name {
        "building1" => Ok(BuildingTemplate::Building1),
        "building2" => Ok(BuildingTemplate::Building2),
        other => Err(Failure::config(format!(
            "building: unknown template {other:?}, expected building1 or building2"
        ))),
    }
}

fn parse_tracks(name: &str) -> Result<(Vec<Track>, bool), Failure> {
    if name == "all" {
        return Ok((
            vec![Track::DilExclusive, Track::CilExclusive, Track::Cdil],
            true,
        ));
    }
    let track = Track::from_str(name)
        .map_err(|e| Failure::config(format!("track: {e}")))?;
    Ok((vec![track], false))
}

pub fn resolve(file: FileConfig, flags: Overrides) -> Result<Settings, Failure> {
    let building = flags
        .building
        .or(file.building)
        .unwrap_or_else(|| "building1".into());
    let template = parse_template(&building)?;

    let track = flags.track.or(file.track).unwrap_or_else(|| "cil".into());
    let (tracks, all_tracks) = parse_tracks(&track)?;

    let n_rp = flags.n_rp.or(file.n_rp).unwrap_or(10);
    if n_rp == 0 {
        return Err(Failure::config("n_rp: must be at least 1".into()));
    }

    let devices = match file.devices {
        None => standard_devices(),
        Some(entries) => {
            if entries.is_empty() {
                return Err(Failure::config("devices: list cannot be empty".into()));
            }
            entries
                .into_iter()
                .enumerate()
                .map(|(id, d)| {
                    DeviceProfile::new(
                        &d.acronym,
                        d.rss_bias,
                        d.gain_scale,
                        d.noise_std,
                        d.miss_probability,
                        d.intro_time_index,
                    )
                    .map_err(|e| Failure::config(format!("devices[{id}]: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };

    let mut run = RunSettings::standard();
    if let Some(t) = file.train {
        if let Some(v) = t.batch_size {
            run.train.batch_size = v;
        }
        if let Some(v) = t.epochs {
            run.train.epochs = v;
        }
        if let Some(v) = t.replay_fraction {
            if !(0.0..1.0).contains(&v) {
                return Err(Failure::config(format!(
                    "train.replay_fraction: {v} outside [0, 1)"
                )));
            }
            run.train.replay_fraction = v;
        }
        if let Some(v) = t.learning_rate {
            if v <= 0.0 {
                return Err(Failure::config(format!(
                    "train.learning_rate: {v} must be positive"
                )));
            }
            run.train.learning_rate = v;
        }
        if let Some(v) = t.cil_train_gate {
            run.train.cil_train_gate = v;
        }
    }
    if let Some(r) = file.run {
        if let Some(v) = r.replay_capacity {
            if v == 0 {
                return Err(Failure::config(
                    "run.replay_capacity: must be at least 1".into(),
                ));
            }
            run.replay_capacity = v;
        }
        if let Some(v) = r.samples_per_triple {
            if v == 0 {
                return Err(Failure::config(
                    "run.samples_per_triple: must be at least 1".into(),
                ));
            }
            run.samples_per_triple = v;
        }
        if let Some(v) = r.test_fraction {
            if !(0.0..1.0).contains(&v) {
                return Err(Failure::config(format!(
                    "run.test_fraction: {v} outside [0, 1)"
                )));
            }
            run.test_fraction = v;
        }
    }

    let sweep_values = file
        .sweep
        .and_then(|s| s.n_rp_values)
        .unwrap_or_else(|| vec![5, 10, 15, 20]);
    if sweep_values.is_empty() {
        return Err(Failure::config("sweep.n_rp_values: list cannot be empty".into()));
    }

    Ok(Settings {
        template,
        building_seed: file.building_seed.unwrap_or(7),
        n_rp,
        tracks,
        all_tracks,
        seed: flags.seed.or(file.seed).unwrap_or(42),
        out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        devices,
        run,
        sweep_values,
    })
}
