//! Synthetic RSS fingerprint world: seeded buildings, heterogeneous devices,
//! slow signal drift, and the dataset containers the trainer consumes.

pub mod csv;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::continual::Sample;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

pub use csv::{load_dataset_csv, save_dataset_csv};

pub const RSS_SENTINEL: f64 = -100.0;

/// One collected scan: raw dBm per access point with -100 marking APs that
/// were not heard.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub rss: Vec<f64>,
    pub device_id: usize,
    pub region_id: usize,
    pub rp_id: usize,
    pub coords: [f64; 3],
    pub time_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLoss {
    pub p0_dbm: f64,
    pub exponent: f64,
    pub shadow_sigma_db: f64,
}

impl Default for PathLoss {
    fn default() -> Self {
        PathLoss {
            p0_dbm: -30.0,
            exponent: 3.0,
            shadow_sigma_db: 2.0,
        }
    }
}

/// Static radio environment: reference points on a 1 m grid, access point
/// positions, and a frozen per-(rp, ap) shadowing map so repeated visits to
/// the same spot see the same multipath offset.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingSpec {
    pub name: String,
    pub rp_grid: Vec<[f64; 3]>,
    pub ap_positions: Vec<[f64; 3]>,
    pub path_loss: PathLoss,
    pub detection_threshold_dbm: f64,
    pub seed: u64,
    shadow_map: Vec<Vec<f64>>,
}

impl BuildingSpec {
    pub fn n_rps(&self) -> usize {
        self.rp_grid.len()
    }

    pub fn n_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn rp_position(&self, rp_id: usize) -> Result<[f64; 3]> {
        self.rp_grid
            .get(rp_id)
            .copied()
            .ok_or_else(|| Error::Registry(format!("unknown reference point {rp_id}")))
    }

    pub fn shadow(&self, rp_id: usize, ap: usize) -> f64 {
        self.shadow_map[rp_id][ap]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildingTemplate {
    /// 60 RPs on a 20 x 3 grid, 172 APs.
    Building1,
    /// 48 RPs on a 16 x 3 grid, 168 APs.
    Building2,
    Custom {
        nx: usize,
        ny: usize,
        n_aps: usize,
    },
}

/// Lays out the RP grid and scatters APs around the floor. APs can land
/// outside the walkable area, so the far ones carry weak, low-contrast
/// signals and the occasional one drops below the detection threshold.
pub fn generate_building(template: BuildingTemplate, seed: u64) -> Result<BuildingSpec> {
    let (name, nx, ny, n_aps) = match template {
        BuildingTemplate::Building1 => ("building1".to_string(), 10, 6, 172),
        BuildingTemplate::Building2 => ("building2".to_string(), 8, 6, 168),
        BuildingTemplate::Custom { nx, ny, n_aps } => {
            if nx == 0 || ny == 0 || n_aps == 0 {
                return Err(Error::Config(
                    "custom building needs positive grid dims and AP count".into(),
                ));
            }
            (format!("custom{nx}x{ny}"), nx, ny, n_aps)
        }
    };

    let mut rp_grid = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            rp_grid.push([x as f64, y as f64, 1.5]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("aps.{name}")));
    let x_max = (nx - 1) as f64;
    let y_max = (ny - 1) as f64;
    let mut ap_positions = Vec::with_capacity(n_aps);
    for _ in 0..n_aps {
        let x = rng.random_range(-30.0..x_max + 30.0);
        let y = rng.random_range(-15.0..y_max + 15.0);
        ap_positions.push([x, y, 3.0]);
    }

    let path_loss = PathLoss::default();
    let mut shadow_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shadow.{name}")));
    let shadow_map = (0..rp_grid.len())
        .map(|_| {
            (0..n_aps)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut shadow_rng);
                    path_loss.shadow_sigma_db * z
                })
                .collect()
        })
        .collect();

    Ok(BuildingSpec {
        name,
        rp_grid,
        ap_positions,
        path_loss,
        detection_threshold_dbm: -95.0,
        seed,
        shadow_map,
    })
}

/// Hardware profile for one phone model. `device_id` is positional: the
/// index into the device list used when generating a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub acronym: String,
    pub rss_bias: f64,
    pub gain_scale: f64,
    pub noise_std: f64,
    pub miss_probability: f64,
    pub intro_time_index: usize,
}

impl DeviceProfile {
    pub fn new(
        acronym: &str,
        rss_bias: f64,
        gain_scale: f64,
        noise_std: f64,
        miss_probability: f64,
        intro_time_index: usize,
    ) -> Result<Self> {
        if noise_std < 0.0 {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&miss_probability) {
            return Err(Error::Config("miss probability must lie in [0, 1)".into()));
        }
        Ok(DeviceProfile {
            acronym: acronym.to_string(),
            rss_bias,
            gain_scale,
            noise_std,
            miss_probability,
            intro_time_index,
        })
    }
}

/// The six phones, in introduction order (index = device_id = intro time).
pub fn standard_devices() -> Vec<DeviceProfile> {
    [
        ("BLU", 0.0, 1.00, 2.0, 0.03),
        ("HTC", 3.0, 1.05, 2.2, 0.04),
        ("LG", -4.0, 0.95, 2.5, 0.05),
        ("MOTO", 2.0, 1.10, 1.8, 0.03),
        ("OP3", -2.5, 0.90, 2.8, 0.06),
        ("S7", 4.5, 1.02, 2.0, 0.04),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(name, bias, gain, noise, miss))| {
        DeviceProfile::new(name, bias, gain, noise, miss, i).expect("static table is valid")
    })
    .collect()
}

/// Slow environment change: a cumulative global offset per time index plus an
/// independent random walk per AP. Both are zero at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    global_offsets: Vec<f64>,
    ap_walks: Vec<Vec<f64>>,
}

impl DriftModel {
    pub fn new(
        n_time_indices: usize,
        n_aps: usize,
        global_step_db: f64,
        walk_sigma_db: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_time_indices == 0 {
            return Err(Error::Config("drift needs at least one time index".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "drift"));
        let mut global_offsets = Vec::with_capacity(n_time_indices);
        let mut ap_walks = Vec::with_capacity(n_time_indices);
        global_offsets.push(0.0);
        ap_walks.push(vec![0.0; n_aps]);
        for t in 1..n_time_indices {
            global_offsets.push(global_step_db * t as f64);
            let prev = &ap_walks[t - 1];
            let next: Vec<f64> = prev
                .iter()
                .map(|w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    w + walk_sigma_db * z
                })
                .collect();
            ap_walks.push(next);
        }
        Ok(DriftModel {
            global_offsets,
            ap_walks,
        })
    }

    /// Default drift magnitudes: -0.6 dB of global decay per step and a
    /// 0.5 dB per-AP walk.
    pub fn standard(n_time_indices: usize, n_aps: usize, seed: u64) -> Result<Self> {
        DriftModel::new(n_time_indices, n_aps, -0.6, 0.5, seed)
    }

    pub fn zero(n_time_indices: usize, n_aps: usize) -> Result<Self> {
        DriftModel::new(n_time_indices, n_aps, 0.0, 0.0, 0)
    }

    pub fn n_time_indices(&self) -> usize {
        self.global_offsets.len()
    }

    pub fn offset(&self, time_index: usize, ap: usize) -> Result<f64> {
        if time_index >= self.global_offsets.len() {
            return Err(Error::Config(format!(
                "time index {time_index} beyond drift horizon {}",
                self.global_offsets.len()
            )));
        }
        Ok(self.global_offsets[time_index] + self.ap_walks[time_index][ap])
    }
}

/// One scan at one reference point. Profiles and partitions are positional,
/// so the caller supplies the ids that label the record. Consumes exactly two
/// RNG draws per AP (noise, miss roll) so streams stay aligned across devices
/// and outcomes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fingerprint(
    building: &BuildingSpec,
    device: &DeviceProfile,
    device_id: usize,
    region_id: usize,
    rp_id: usize,
    time_index: usize,
    drift: &DriftModel,
    rng: &mut ChaCha8Rng,
) -> Result<Fingerprint> {
    let coords = building.rp_position(rp_id)?;
    if time_index < device.intro_time_index {
        return Err(Error::Data(format!(
            "device {} enters at time {}, asked for time {time_index}",
            device.acronym, device.intro_time_index
        )));
    }
    let pl = &building.path_loss;
    let mut rss = Vec::with_capacity(building.n_aps());
    for (ap, pos) in building.ap_positions.iter().enumerate() {
        let dist = ((coords[0] - pos[0]).powi(2)
            + (coords[1] - pos[1]).powi(2)
            + (coords[2] - pos[2]).powi(2))
        .sqrt();
        let noise: f64 = StandardNormal.sample(rng);
        let missed = rng.random::<f64>() < device.miss_probability;
        let raw = pl.p0_dbm - 10.0 * pl.exponent * dist.max(1.0).log10()
            + building.shadow(rp_id, ap)
            + device.rss_bias
            + drift.offset(time_index, ap)?
            + device.gain_scale * device.noise_std * noise;
        let value = if missed || raw < building.detection_threshold_dbm {
            RSS_SENTINEL
        } else {
            raw.clamp(RSS_SENTINEL, 0.0)
        };
        rss.push(value);
    }
    Ok(Fingerprint {
        rss,
        device_id,
        region_id,
        rp_id,
        coords,
        time_index,
    })
}

/// Chunks RPs in grid order into consecutive groups of `n_rp`; the tail
/// region may be smaller. Returns rp_id -> region_id.
pub fn partition_regions(building: &BuildingSpec, n_rp: usize) -> Result<Vec<usize>> {
    if n_rp == 0 {
        return Err(Error::Config("region size must be at least 1".into()));
    }
    if n_rp > building.n_rps() {
        return Err(Error::Config(format!(
            "region size {n_rp} exceeds the {} reference points",
            building.n_rps()
        )));
    }
    Ok((0..building.n_rps()).map(|rp| rp / n_rp).collect())
}

pub fn region_count(region_of: &[usize]) -> usize {
    region_of.iter().copied().max().map_or(0, |m| m + 1)
}

/// Immutable labeled collection; `n_aps` fixes the feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_aps: usize,
    pub records: Vec<Fingerprint>,
}

impl Dataset {
    pub fn new(n_aps: usize) -> Self {
        Dataset {
            n_aps,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter<F: Fn(&Fingerprint) -> bool>(&self, keep: F) -> Dataset {
        Dataset {
            n_aps: self.n_aps,
            records: self.records.iter().filter(|f| keep(f)).cloned().collect(),
        }
    }

    /// Training view: RSS min-max scaled from [-100, 0] to [0, 1].
    pub fn to_samples(&self) -> Vec<Sample> {
        self.records
            .iter()
            .map(|f| Sample {
                features: scale_rss(&f.rss),
                device_id: f.device_id,
                region_id: f.region_id,
                rp_id: f.rp_id,
            })
            .collect()
    }
}

pub fn scale_rss(rss: &[f64]) -> Vec<f64> {
    rss.iter().map(|v| (v + 100.0) / 100.0).collect()
}

/// Full sweep over (device, rp, time) triples. Each triple gets its own RNG
/// stream derived from the master seed, so any subset regenerates
/// bit-identically. Devices contribute only from their introduction time on.
pub fn generate_dataset(
    building: &BuildingSpec,
    devices: &[DeviceProfile],
    region_of: &[usize],
    drift: &DriftModel,
    time_indices: &[usize],
    samples_per_triple: usize,
    seed: u64,
) -> Result<Dataset> {
    if region_of.len() != building.n_rps() {
        return Err(Error::Config(format!(
            "partition covers {} RPs, building has {}",
            region_of.len(),
            building.n_rps()
        )));
    }
    if samples_per_triple == 0 {
        return Err(Error::Config("need at least one sample per triple".into()));
    }
    let mut dataset = Dataset::new(building.n_aps());
    for (device_id, device) in devices.iter().enumerate() {
        for rp_id in 0..building.n_rps() {
            for &t in time_indices {
                if t < device.intro_time_index {
                    continue;
                }
                let tag = format!("triple.{device_id}.{rp_id}.{t}");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
                for _ in 0..samples_per_triple {
                    let f = simulate_fingerprint(
                        building,
                        device,
                        device_id,
                        region_of[rp_id],
                        rp_id,
                        t,
                        drift,
                        &mut rng,
                    )?;
                    dataset.records.push(f);
                }
            }
        }
    }
    Ok(dataset)
}

/// Stratified split: every (device, region) pair with at least two samples
/// lands in both halves.
pub fn split_train_test(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, f) in dataset.records.iter().enumerate() {
        groups.entry((f.device_id, f.region_id)).or_default().push(i);
    }
    let mut train = Dataset::new(dataset.n_aps);
    let mut test = Dataset::new(dataset.n_aps);
    for ((device, region), mut idxs) in groups {
        let tag = format!("split.{device}.{region}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
        use rand::seq::SliceRandom;
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        let n_test = if n < 2 {
            0
        } else {
            ((test_fraction * n as f64).floor() as usize).clamp(1, n - 1)
        };
        for (k, &i) in idxs.iter().enumerate() {
            let record = dataset.records[i].clone();
            if k < n_test {
                test.records.push(record);
            } else {
                train.records.push(record);
            }
        }
    }
    Ok((train, test))
}
