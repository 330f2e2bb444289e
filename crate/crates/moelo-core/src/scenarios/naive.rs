//! Control model: one encoder, one monolithic softmax head over every global
//! class, fine-tuned sequentially with no replay and no freezing. Exists to
//! show what the expert mixture is protecting against.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::{Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::model::registry::ClassRegistry;
use crate::numkit::{softmax_rows, Activation, AdamState, DenseLayer, Matrix, Mlp};
use crate::scenarios::runner::{evaluate_units, prepare_slices, region_classes, RunSettings};
use crate::scenarios::{MetricLog, ScenarioPlan};
use crate::seeds::derive_seed;

pub struct NaiveModel {
    encoder: Mlp,
    head: Option<DenseLayer>,
    registry: ClassRegistry,
    latent_dim: usize,
    seed: u64,
}

impl NaiveModel {
    pub fn new(input_dim: usize, encoder_hidden: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        let encoder = Mlp::new(
            vec![
                DenseLayer::new_seeded(
                    input_dim,
                    encoder_hidden,
                    Activation::Relu,
                    derive_seed(seed, "encoder.l0"),
                ),
                DenseLayer::new_seeded(
                    encoder_hidden,
                    latent_dim,
                    Activation::Relu,
                    derive_seed(seed, "encoder.l1"),
                ),
            ],
            0.0,
        )?;
        Ok(NaiveModel {
            encoder,
            head: None,
            registry: ClassRegistry::new(),
            latent_dim,
            seed,
        })
    }

    pub fn head_width(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.output_dim())
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    /// Registers the region and widens the head, keeping every existing
    /// output weight bit-identical.
    pub fn add_region(&mut self, region_id: usize, classes: &[(usize, [f64; 3])]) -> Result<()> {
        self.registry.add_region(region_id, classes)?;
        let new_width = self.registry.global_count();
        let old = self.head.take();
        let grown = match old {
            None => DenseLayer::new_seeded(
                self.latent_dim,
                new_width,
                Activation::Identity,
                derive_seed(self.seed, "head.0"),
            ),
            Some(prev) => {
                let old_width = prev.output_dim();
                let fresh = DenseLayer::new_seeded(
                    self.latent_dim,
                    new_width,
                    Activation::Identity,
                    derive_seed(self.seed, &format!("head.grow.{old_width}.{new_width}")),
                );
                let mut weights = fresh.weights.clone();
                for i in 0..self.latent_dim {
                    for c in 0..old_width {
                        weights.set(i, c, prev.weights.get(i, c));
                    }
                }
                let mut bias = vec![0.0; new_width];
                bias[..old_width].copy_from_slice(&prev.bias);
                DenseLayer {
                    weights,
                    bias,
                    activation: Activation::Identity,
                }
            }
        };
        self.head = Some(grown);
        Ok(())
    }

    fn head_ref(&self) -> Result<&DenseLayer> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::State("no regions registered yet".into()))
    }

    /// Cross-entropy fine-tuning on exactly the given samples.
    pub fn train(&mut self, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("increment received no training samples".into()));
        }
        self.head_ref()?;
        let lens = |slices: Vec<&[f64]>| slices.iter().map(|s| s.len()).collect::<Vec<_>>();
        let mut adam_encoder =
            AdamState::with_lr(&lens(self.encoder.flat_params()), cfg.learning_rate);
        let mut adam_head = AdamState::with_lr(
            &lens(self.head_ref()?.flat_params()),
            cfg.learning_rate,
        );

        let mut epoch_ce = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let epoch_seed = derive_seed(cfg.seed, &format!("epoch.{epoch}"));
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, "shuffle")));

            let mut sum_ce = 0.0;
            let mut rows_seen = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let rows: Vec<Vec<f64>> =
                    chunk.iter().map(|&i| samples[i].features.clone()).collect();
                let labels: Vec<usize> = chunk
                    .iter()
                    .map(|&i| {
                        self.registry
                            .global_index(samples[i].region_id, samples[i].rp_id)
                    })
                    .collect::<Result<_>>()?;
                let x = Matrix::from_rows(&rows)?;
                let n = x.rows();

                let tape = self.encoder.forward_tape(&x, true, 0)?;
                let head = self.head_ref()?;
                let (pre, logits) = head.forward(&tape.output)?;
                let mut probs = logits.clone();
                let cols = probs.cols();
                softmax_rows(probs.as_mut_slice(), cols)?;

                let mut ce = 0.0;
                let mut d_logits = Matrix::zeros(n, cols);
                for (i, &label) in labels.iter().enumerate() {
                    let p = probs.get(i, label).max(1e-12);
                    ce -= p.ln();
                    for c in 0..cols {
                        let indicator = if c == label { 1.0 } else { 0.0 };
                        d_logits.set(i, c, (probs.get(i, c) - indicator) / n as f64);
                    }
                }
                ce /= n as f64;

                let (head_grads, d_latent) = head.backward(&tape.output, &pre, &d_logits)?;
                let (encoder_grads, _) = self.encoder.backward(&tape, &d_latent)?;

                let flat: Vec<&[f64]> = encoder_grads.flat();
                let mut params = self.encoder.flat_params_mut();
                adam_encoder.step(&mut params, &flat)?;
                let flat: Vec<&[f64]> = head_grads.flat();
                let head = self.head.as_mut().expect("head checked above");
                let mut params = head.flat_params_mut();
                adam_head.step(&mut params, &flat)?;

                sum_ce += ce * n as f64;
                rows_seen += n;
            }
            epoch_ce.push(sum_ce / rows_seen.max(1) as f64);
        }
        Ok(epoch_ce)
    }

    pub fn predict_location(&self, features: &[f64]) -> Result<[f64; 3]> {
        let x = Matrix::from_rows(&[features.to_vec()])?;
        let z = self.encoder.forward(&x, false, 0)?;
        let (_, logits) = self.head_ref()?.forward(&z)?;
        let row = logits.row(0);
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        let (_, rp_id) = self.registry.global_class(best)?;
        self.registry.rp_coord(rp_id)
    }
}

pub struct NaiveRun {
    pub log: MetricLog,
    pub model: NaiveModel,
}

/// Runs the plan with the monolithic model over the exact same data slices
/// and splits as the mixture run for the same seed, making the two logs
/// directly comparable.
pub fn naive_baseline_run(
    plan: &ScenarioPlan,
    settings: &RunSettings,
    seed: u64,
) -> Result<NaiveRun> {
    let slices = prepare_slices(plan, settings, seed)?;
    let mut model = NaiveModel::new(
        plan.building.n_aps(),
        128,
        64,
        derive_seed(seed, "naive.model"),
    )?;
    let mut log = MetricLog::new();
    let mut eval_sets: Vec<(usize, crate::fingerprints::Dataset)> = Vec::new();
    let unit_type = plan.track.unit_type();

    for (s, step) in plan.steps.iter().enumerate() {
        let (train, test) = &slices[s];
        if s == 0 {
            for &region in &step.regions {
                model.add_region(region, &region_classes(plan, region))?;
            }
        } else if let Some(region) = step.new_region {
            model.add_region(region, &region_classes(plan, region))?;
        }
        let mut cfg = settings.train.clone();
        cfg.seed = derive_seed(seed, &format!("naive.train.{s}"));
        model.train(&train.to_samples(), &cfg)?;
        eval_sets.push((step.unit_id, test.clone()));

        let mode_name = if s == 0 { "baseline" } else { plan.track.name() };
        evaluate_units(&mut log, s, mode_name, unit_type, &eval_sets, |x| {
            model.predict_location(x)
        })?;
    }
    Ok(NaiveRun { log, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprints::{generate_building, standard_devices, BuildingTemplate};
    use crate::scenarios::{build_plan, Track};

    fn tiny_settings() -> RunSettings {
        let mut settings = RunSettings::standard();
        settings.train.epochs = 4;
        settings.train.batch_size = 32;
        settings.samples_per_triple = 4;
        settings
    }

    fn tiny_plan() -> ScenarioPlan {
        let building =
            generate_building(BuildingTemplate::Custom { nx: 6, ny: 2, n_aps: 24 }, 5).unwrap();
        let devices = standard_devices()[..3].to_vec();
        build_plan(Track::CilExclusive, building, devices, 4).unwrap()
    }

    #[test]
    fn head_tracks_the_cumulative_class_count() {
        let plan = tiny_plan();
        let run = naive_baseline_run(&plan, &tiny_settings(), 5).unwrap();
        // 12 RPs in 3 regions of 4: all present at the end.
        assert_eq!(run.model.head_width(), 12);
        assert_eq!(run.model.registry().global_count(), 12);
    }

    #[test]
    fn growth_preserves_existing_output_weights() {
        let mut model = NaiveModel::new(6, 8, 5, 3).unwrap();
        model
            .add_region(0, &[(0, [0.0, 0.0, 0.0]), (1, [1.0, 0.0, 0.0])])
            .unwrap();
        let before = model.head.as_ref().unwrap().clone();
        model
            .add_region(1, &[(2, [2.0, 0.0, 0.0]), (3, [3.0, 0.0, 0.0])])
            .unwrap();
        let after = model.head.as_ref().unwrap();
        assert_eq!(after.output_dim(), 4);
        for i in 0..5 {
            for c in 0..2 {
                assert_eq!(after.weights.get(i, c).to_bits(), before.weights.get(i, c).to_bits());
            }
        }
        assert_eq!(&after.bias[..2], &before.bias[..]);
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let plan = tiny_plan();
        let a = naive_baseline_run(&plan, &tiny_settings(), 8).unwrap();
        let b = naive_baseline_run(&plan, &tiny_settings(), 8).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn structural_log_shape_matches_the_mixture_run() {
        let plan = tiny_plan();
        let run = naive_baseline_run(&plan, &tiny_settings(), 13).unwrap();
        for s in 0..plan.steps.len() {
            let count = run.log.rows.iter().filter(|r| r.step == s).count();
            assert_eq!(count, s + 1);
        }
    }
}
