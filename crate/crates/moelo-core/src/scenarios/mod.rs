//! Experiment tracks: scripted sequences of increments over the synthetic
//! world, with per-step evaluation and forgetting accounting.

pub mod metrics;
pub mod naive;
pub mod runner;

use serde::{Deserialize, Serialize};

use crate::continual::IncrementMode;
use crate::error::{Error, Result};
use crate::fingerprints::{partition_regions, region_count, BuildingSpec, DeviceProfile};

pub use metrics::{
    forgetting_metrics, localization_error, old_unit_mean_forgetting, MetricLog, MetricRow,
};
pub use naive::naive_baseline_run;
pub use runner::{
    build_summary, granularity_sweep, run_scenario, write_summary, RunSettings, ScenarioRun,
    SweepRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    /// New devices arrive one at a time; the region set is fixed up front.
    DilExclusive,
    /// New regions arrive one at a time; all devices are known up front.
    CilExclusive,
    /// Each step brings a new device and a new region together.
    Cdil,
}

impl Track {
    pub fn mode(&self) -> IncrementMode {
        match self {
            Track::DilExclusive => IncrementMode::Dil,
            Track::CilExclusive => IncrementMode::Cil,
            Track::Cdil => IncrementMode::Cdil,
        }
    }

    /// What a "learning unit" means on this track.
    pub fn unit_type(&self) -> &'static str {
        match self {
            Track::DilExclusive => "device",
            Track::CilExclusive | Track::Cdil => "region",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Track::DilExclusive => "dil",
            Track::CilExclusive => "cil",
            Track::Cdil => "cdil",
        }
    }
}

impl std::str::FromStr for Track {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dil" => Ok(Track::DilExclusive),
            "cil" => Ok(Track::CilExclusive),
            "cdil" => Ok(Track::Cdil),
            other => Err(Error::Config(format!(
                "unknown track {other:?}, expected dil, cil, or cdil"
            ))),
        }
    }
}

/// One training step: which slice of the world it trains on and what it
/// introduces. `unit_id` is the device (DIL) or region (CIL/CDIL) whose
/// held-out split this step contributes to the evaluation schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub step: usize,
    /// None marks the joint baseline step.
    pub mode: Option<IncrementMode>,
    pub devices: Vec<usize>,
    pub regions: Vec<usize>,
    pub new_region: Option<usize>,
    pub time_index: usize,
    pub unit_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPlan {
    pub track: Track,
    pub building: BuildingSpec,
    pub region_of: Vec<usize>,
    pub n_regions: usize,
    pub devices: Vec<DeviceProfile>,
    /// Baseline first, then the incremental steps, already in order.
    pub steps: Vec<Increment>,
}

impl ScenarioPlan {
    pub fn max_time_index(&self) -> usize {
        self.steps.iter().map(|s| s.time_index).max().unwrap_or(0)
    }

    pub fn time_indices(&self) -> Vec<usize> {
        let mut times: Vec<usize> = self.steps.iter().map(|s| s.time_index).collect();
        times.sort_unstable();
        times.dedup();
        times
    }
}

/// Lays out a track over a building partition.
///
/// DIL: baseline trains the first device over every region with all experts
/// instantiated; each later step brings one device at its introduction time.
/// CIL: baseline trains region 0 with every device present (so everything
/// happens at the last introduction time); each later step brings one region.
/// CDIL: baseline is (first device, region 0); each later step pairs the next
/// device with the next region. When regions outnumber devices the schedule
/// cycles through the devices again, surveying at the last introduction time.
pub fn build_plan(
    track: Track,
    building: BuildingSpec,
    devices: Vec<DeviceProfile>,
    n_rp: usize,
) -> Result<ScenarioPlan> {
    if devices.is_empty() {
        return Err(Error::Plan("plan needs at least one device".into()));
    }
    for pair in devices.windows(2) {
        if pair[0].intro_time_index > pair[1].intro_time_index {
            return Err(Error::Plan(
                "devices must be ordered by introduction time".into(),
            ));
        }
    }
    let region_of = partition_regions(&building, n_rp)?;
    let n_regions = region_count(&region_of);
    let all_regions: Vec<usize> = (0..n_regions).collect();
    let all_devices: Vec<usize> = (0..devices.len()).collect();

    let mut steps = Vec::new();
    match track {
        Track::DilExclusive => {
            steps.push(Increment {
                step: 0,
                mode: None,
                devices: vec![0],
                regions: all_regions.clone(),
                new_region: None,
                time_index: devices[0].intro_time_index,
                unit_id: 0,
            });
            for d in 1..devices.len() {
                steps.push(Increment {
                    step: d,
                    mode: Some(IncrementMode::Dil),
                    devices: vec![d],
                    regions: all_regions.clone(),
                    new_region: None,
                    time_index: devices[d].intro_time_index,
                    unit_id: d,
                });
            }
        }
        Track::CilExclusive => {
            if n_regions < 2 {
                return Err(Error::Plan(format!(
                    "region track needs at least 2 regions, partition gives {n_regions}"
                )));
            }
            let t = devices
                .iter()
                .map(|d| d.intro_time_index)
                .max()
                .expect("devices is non-empty");
            steps.push(Increment {
                step: 0,
                mode: None,
                devices: all_devices.clone(),
                regions: vec![0],
                new_region: None,
                time_index: t,
                unit_id: 0,
            });
            for r in 1..n_regions {
                steps.push(Increment {
                    step: r,
                    mode: Some(IncrementMode::Cil),
                    devices: all_devices.clone(),
                    regions: vec![r],
                    new_region: Some(r),
                    time_index: t,
                    unit_id: r,
                });
            }
        }
        Track::Cdil => {
            if n_regions < 2 {
                return Err(Error::Plan(format!(
                    "paired track needs at least 2 regions, partition gives {n_regions}"
                )));
            }
            steps.push(Increment {
                step: 0,
                mode: None,
                devices: vec![0],
                regions: vec![0],
                new_region: None,
                time_index: devices[0].intro_time_index,
                unit_id: 0,
            });
            let last_intro = devices
                .iter()
                .map(|d| d.intro_time_index)
                .max()
                .expect("devices is non-empty");
            for r in 1..n_regions {
                let d = r % devices.len();
                let time_index = if r < devices.len() {
                    devices[d].intro_time_index
                } else {
                    last_intro
                };
                steps.push(Increment {
                    step: r,
                    mode: Some(IncrementMode::Cdil),
                    devices: vec![d],
                    regions: vec![r],
                    new_region: Some(r),
                    time_index,
                    unit_id: r,
                });
            }
        }
    }
    Ok(ScenarioPlan {
        track,
        building,
        region_of,
        n_regions,
        devices,
        steps,
    })
}
