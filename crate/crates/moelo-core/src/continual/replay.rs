//! Herding-based exemplar replay, balanced per (device, region) pair.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::continual::{Batch, Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{registry::ClassRegistry, MoEModel};
use crate::numkit::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub features: Vec<f64>,
    pub global_label: usize,
    pub device_id: usize,
    pub region_id: usize,
}

/// Exemplar store holding at most `per_pair_capacity` fingerprints for every
/// (device, region) pair seen so far. Iteration order is fixed by the pair
/// key so downstream sampling is reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub per_pair_capacity: usize,
    entries: BTreeMap<(usize, usize), Vec<ReplayEntry>>,
}

impl ReplayBuffer {
    pub fn new(per_pair_capacity: usize) -> Result<Self> {
        if per_pair_capacity == 0 {
            return Err(Error::Config("replay capacity must be at least 1".into()));
        }
        Ok(ReplayBuffer {
            per_pair_capacity,
            entries: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries_for_pair(&self, device_id: usize, region_id: usize) -> &[ReplayEntry] {
        self.entries
            .get(&(device_id, region_id))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// All entries in deterministic (device, region) order.
    pub fn flattened(&self) -> Vec<&ReplayEntry> {
        self.entries.values().flatten().collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub(crate) fn set_pair(&mut self, device_id: usize, region_id: usize, entries: Vec<ReplayEntry>) {
        self.entries.insert((device_id, region_id), entries);
    }
}

/// Greedy herding: picks `m` indices whose running average tracks the set
/// mean as closely as possible at each step, ties to the lowest index.
pub fn herding_select(embeddings: &Matrix, m: usize) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(Error::Data("herding over an empty embedding set".into()));
    }
    if m > n {
        return Err(Error::Data(format!(
            "cannot herd {m} prototypes out of {n} embeddings"
        )));
    }
    let d = embeddings.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(embeddings.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running_sum = vec![0.0; d];
    for t in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let row = embeddings.row(j);
            let mut dist_sq = 0.0;
            for c in 0..d {
                let gap = mean[c] - (running_sum[c] + row[c]) / t as f64;
                dist_sq += gap * gap;
            }
            // Strict improvement only, so equal distances keep the earlier
            // (= lower) index.
            if best.map_or(true, |(_, bd)| dist_sq < bd) {
                best = Some((j, dist_sq));
            }
        }
        let (j, _) = best.expect("m <= n guarantees a free candidate");
        taken[j] = true;
        for (acc, v) in running_sum.iter_mut().zip(embeddings.row(j)) {
            *acc += v;
        }
        selected.push(j);
    }
    Ok(selected)
}

/// Re-selects prototypes for every (device, region) pair present in
/// `new_data`, embedding through the model's current encoder. Pairs absent
/// from `new_data` keep their existing entries.
pub fn update_replay(
    buffer: &mut ReplayBuffer,
    model: &MoEModel,
    new_data: &[Sample],
) -> Result<()> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in new_data.iter().enumerate() {
        groups.entry((s.device_id, s.region_id)).or_default().push(i);
    }
    for ((device_id, region_id), idxs) in groups {
        let rows: Vec<Vec<f64>> = idxs.iter().map(|&i| new_data[i].features.clone()).collect();
        let x = Matrix::from_rows(&rows)?;
        let z = model.encoder().forward(&x, false, 0)?;
        let m = buffer.per_pair_capacity.min(idxs.len());
        let picks = herding_select(&z, m)?;
        let mut entries = Vec::with_capacity(m);
        for p in picks {
            let s = &new_data[idxs[p]];
            entries.push(ReplayEntry {
                features: s.features.clone(),
                global_label: model.registry().global_index(s.region_id, s.rp_id)?,
                device_id,
                region_id,
            });
        }
        buffer.set_pair(device_id, region_id, entries);
    }
    Ok(())
}

/// Assembles one training batch: up to (N - floor(rho N)) new samples from
/// the front of `new_chunk`, plus floor(rho N) replay exemplars (distinct
/// when the buffer is large enough, with replacement otherwise). An empty
/// buffer or rho = 0 yields a purely new batch.
pub fn compose_batch(
    new_chunk: &[&Sample],
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    registry: &ClassRegistry,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if new_chunk.is_empty() {
        return Err(Error::Data("batch needs at least one new sample".into()));
    }
    let n_replay = if buffer.is_empty() || cfg.replay_fraction == 0.0 {
        0
    } else {
        (cfg.replay_fraction * cfg.batch_size as f64).floor() as usize
    };
    let n_new = (cfg.batch_size - n_replay).min(new_chunk.len());

    let mut rows = Vec::with_capacity(n_new + n_replay);
    let mut global_labels = Vec::with_capacity(n_new + n_replay);
    let mut region_ids = Vec::with_capacity(n_new + n_replay);
    for s in &new_chunk[..n_new] {
        rows.push(s.features.clone());
        global_labels.push(registry.global_index(s.region_id, s.rp_id)?);
        region_ids.push(s.region_id);
    }
    if n_replay > 0 {
        let pool = buffer.flattened();
        let picks: Vec<usize> = if pool.len() >= n_replay {
            rand::seq::index::sample(rng, pool.len(), n_replay).into_vec()
        } else {
            (0..n_replay).map(|_| rng.random_range(0..pool.len())).collect()
        };
        for p in picks {
            let e = pool[p];
            rows.push(e.features.clone());
            global_labels.push(e.global_label);
            region_ids.push(e.region_id);
        }
    }
    Ok(Batch {
        x: Matrix::from_rows(&rows)?,
        global_labels,
        region_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::model::{ModelConfig, MoEModel};
    use crate::model::losses::DrTarget;

    fn embeddings(points: &[(f64, f64)]) -> Matrix {
        Matrix::from_rows(&points.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn herding_picks_the_mean_member_first() {
        let e = embeddings(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(herding_select(&e, 1).unwrap(), vec![1]);
    }

    #[test]
    fn herding_breaks_second_pick_tie_toward_lowest_index() {
        // After picking (1,0), candidates 0 and 2 both leave the running
        // average 0.5 away from the mean.
        let e = embeddings(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(herding_select(&e, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn herding_exhaustion_returns_all_indices() {
        let e = embeddings(&[(0.0, 1.0), (4.0, 0.0), (1.0, 1.0), (2.0, -1.0)]);
        let picks = herding_select(&e, 4).unwrap();
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        // First pick must be the single point closest to the mean.
        let mean = (1.75, 0.25);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..4 {
            let (x, y) = (e.get(i, 0), e.get(i, 1));
            let d = (x - mean.0).powi(2) + (y - mean.1).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        assert_eq!(picks[0], best);
    }

    #[test]
    fn herding_rejects_bad_requests() {
        let e = embeddings(&[(0.0, 0.0)]);
        assert!(matches!(herding_select(&e, 2), Err(Error::Data(_))));
        let empty = Matrix::zeros(0, 2);
        assert!(matches!(herding_select(&empty, 0), Err(Error::Data(_))));
    }

    fn toy_model(regions: &[(usize, &[usize])]) -> MoEModel {
        let config = ModelConfig {
            input_dim: 3,
            encoder_hidden: 8,
            latent_dim: 6,
            expert_hidden: 6,
            dropout_rate: 0.0,
            r_max: 4,
            dr_target: DrTarget::InverseSqrt,
            w_ce: 1.0,
            w_dr: 1.0,
            seed: 5,
        };
        let mut model = MoEModel::new(config).unwrap();
        for &(region, rps) in regions {
            let classes: Vec<(usize, [f64; 3])> = rps
                .iter()
                .map(|&rp| (rp, [rp as f64, 0.0, 3.0]))
                .collect();
            model.add_expert(region, &classes).unwrap();
        }
        model
    }

    fn sample(device: usize, region: usize, rp: usize, features: [f64; 3]) -> Sample {
        Sample {
            features: features.to_vec(),
            device_id: device,
            region_id: region,
            rp_id: rp,
        }
    }

    #[test]
    fn update_replay_allocates_one_slot_per_pair() {
        let model = toy_model(&[(0, &[0, 1]), (1, &[2, 3]), (2, &[4, 5])]);
        let mut buffer = ReplayBuffer::new(1).unwrap();
        let first = vec![
            sample(0, 0, 0, [0.1, 0.2, 0.3]),
            sample(0, 0, 1, [0.4, 0.1, 0.0]),
        ];
        update_replay(&mut buffer, &model, &first).unwrap();
        assert_eq!(buffer.len(), 1);

        let mut more = Vec::new();
        for device in 0..2 {
            for region in 0..3 {
                for k in 0..4 {
                    let rp = region * 2 + (k % 2);
                    more.push(sample(
                        device,
                        region,
                        rp,
                        [k as f64 * 0.1, region as f64 * 0.2, device as f64 * 0.3],
                    ));
                }
            }
        }
        update_replay(&mut buffer, &model, &more).unwrap();
        assert_eq!(buffer.pair_count(), 6);
        assert_eq!(buffer.len(), 6);
        for (device, region) in buffer.pairs().collect::<Vec<_>>() {
            assert_eq!(buffer.entries_for_pair(device, region).len(), 1);
        }
    }

    #[test]
    fn selected_prototype_is_nearest_to_the_pair_mean() {
        let model = toy_model(&[(0, &[0, 1, 2])]);
        let mut buffer = ReplayBuffer::new(1).unwrap();
        let data: Vec<Sample> = (0..7)
            .map(|k| {
                sample(
                    0,
                    0,
                    k % 3,
                    [0.15 * k as f64, 0.7 - 0.1 * k as f64, 0.2],
                )
            })
            .collect();
        update_replay(&mut buffer, &model, &data).unwrap();
        let chosen = &buffer.entries_for_pair(0, 0)[0];

        // Brute-force oracle: embed everything, find the single embedding
        // closest to the mean embedding.
        let rows: Vec<Vec<f64>> = data.iter().map(|s| s.features.clone()).collect();
        let z = model
            .encoder()
            .forward(&Matrix::from_rows(&rows).unwrap(), false, 0)
            .unwrap();
        let d = z.cols();
        let mut mean = vec![0.0; d];
        for i in 0..z.rows() {
            for c in 0..d {
                mean[c] += z.get(i, c) / z.rows() as f64;
            }
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..z.rows() {
            let dist: f64 = (0..d).map(|c| (z.get(i, c) - mean[c]).powi(2)).sum();
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        assert_eq!(chosen.features, data[best].features);
    }

    #[test]
    fn batch_mixes_replay_and_new_per_the_fraction() {
        let model = toy_model(&[(0, &[0, 1]), (1, &[2, 3])]);
        let mut buffer = ReplayBuffer::new(8).unwrap();
        let mut pool = Vec::new();
        for device in 0..2 {
            for region in 0..2 {
                for k in 0..8 {
                    pool.push(sample(
                        device,
                        region,
                        region * 2 + (k % 2),
                        [k as f64 * 0.1, device as f64, region as f64],
                    ));
                }
            }
        }
        update_replay(&mut buffer, &model, &pool).unwrap();
        assert_eq!(buffer.len(), 32);

        let cfg = TrainConfig::standard(0);
        let fresh: Vec<Sample> = (0..100)
            .map(|k| sample(1, 1, 2 + (k % 2), [k as f64 * 0.01, 0.5, 1.0]))
            .collect();
        let refs: Vec<&Sample> = fresh.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = compose_batch(&refs, &buffer, &cfg, model.registry(), &mut rng).unwrap();
        assert_eq!(batch.x.rows(), 64);
        assert_eq!(batch.global_labels.len(), 64);
        // First 48 rows come from the front of the chunk, last 16 are replay.
        for (i, s) in fresh[..48].iter().enumerate() {
            assert_eq!(batch.x.row(i), s.features.as_slice());
        }
    }

    #[test]
    fn empty_buffer_or_zero_fraction_gives_all_new() {
        let model = toy_model(&[(0, &[0, 1])]);
        let buffer = ReplayBuffer::new(1).unwrap();
        let cfg = TrainConfig::standard(0);
        let fresh: Vec<Sample> = (0..80)
            .map(|k| sample(0, 0, k % 2, [0.1, 0.2, 0.3]))
            .collect();
        let refs: Vec<&Sample> = fresh.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = compose_batch(&refs, &buffer, &cfg, model.registry(), &mut rng).unwrap();
        assert_eq!(batch.x.rows(), 64);

        let mut filled = ReplayBuffer::new(1).unwrap();
        update_replay(&mut filled, &model, &fresh).unwrap();
        let mut cfg_zero = TrainConfig::standard(0);
        cfg_zero.replay_fraction = 0.0;
        let batch = compose_batch(&refs, &filled, &cfg_zero, model.registry(), &mut rng).unwrap();
        assert_eq!(batch.x.rows(), 64);
        for (i, s) in fresh[..64].iter().enumerate() {
            assert_eq!(batch.x.row(i), s.features.as_slice());
        }
    }

    #[test]
    fn small_buffer_draws_replay_with_replacement() {
        let model = toy_model(&[(0, &[0, 1])]);
        let mut buffer = ReplayBuffer::new(1).unwrap();
        let seeds: Vec<Sample> = (0..4)
            .map(|k| sample(0, 0, k % 2, [k as f64, 0.0, 0.0]))
            .collect();
        update_replay(&mut buffer, &model, &seeds).unwrap();
        assert_eq!(buffer.len(), 1);

        let cfg = TrainConfig::standard(0);
        let fresh: Vec<Sample> = (0..60)
            .map(|k| sample(0, 0, k % 2, [0.5, 0.5, 0.5]))
            .collect();
        let refs: Vec<&Sample> = fresh.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = compose_batch(&refs, &buffer, &cfg, model.registry(), &mut rng).unwrap();
        // 16 replay slots from a single stored entry: repetition expected.
        assert_eq!(batch.x.rows(), 48 + 16);
    }
}
