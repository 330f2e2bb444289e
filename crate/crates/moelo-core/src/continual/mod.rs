//! Incremental training: mode-specific freezing plans and the replay-backed
//! optimization loop that applies them.

pub mod replay;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::numkit::{AdamState, GradSet, Matrix};
use crate::seeds::derive_seed;

pub use replay::{compose_batch, herding_select, update_replay, ReplayBuffer, ReplayEntry};

/// One labeled fingerprint, detached from any particular dataset container.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub device_id: usize,
    pub region_id: usize,
    pub rp_id: usize,
}

/// A fully materialized training batch: feature rows plus the two label
/// views the losses consume.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub global_labels: Vec<usize>,
    pub region_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementMode {
    Dil,
    Cil,
    Cdil,
}

impl std::fmt::Display for IncrementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            IncrementMode::Dil => "dil",
            IncrementMode::Cil => "cil",
            IncrementMode::Cdil => "cdil",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Projection,
    NewExpert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Dr,
}

/// Classes for a region that is about to be registered: (reference point id,
/// position) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub region_id: usize,
    pub classes: Vec<(usize, [f64; 3])>,
}

/// What an increment is allowed to touch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub mode: IncrementMode,
    pub trainable: Vec<ParamGroup>,
    pub losses: Vec<LossKind>,
    pub new_region: Option<RegionSpec>,
}

/// Maps an increment mode to its freezing plan. New-device increments adapt
/// the shared trunk, new-region increments grow a frozen-trunk expert, and
/// combined increments do both.
pub fn plan_increment(mode: IncrementMode, new_region: Option<RegionSpec>) -> Result<TrainPlan> {
    match (mode, &new_region) {
        (IncrementMode::Dil, Some(_)) => Err(Error::Plan(
            "a device increment cannot introduce a region".into(),
        )),
        (IncrementMode::Cil, None) | (IncrementMode::Cdil, None) => Err(Error::Plan(format!(
            "{mode} increments require a new region"
        ))),
        (IncrementMode::Dil, None) => Ok(TrainPlan {
            mode,
            trainable: vec![ParamGroup::Encoder, ParamGroup::Projection],
            losses: vec![LossKind::Ce, LossKind::Dr],
            new_region: None,
        }),
        (IncrementMode::Cil, Some(_)) => Ok(TrainPlan {
            mode,
            trainable: vec![ParamGroup::NewExpert],
            losses: vec![LossKind::Ce],
            new_region,
        }),
        (IncrementMode::Cdil, Some(_)) => Ok(TrainPlan {
            mode,
            trainable: vec![
                ParamGroup::Encoder,
                ParamGroup::Projection,
                ParamGroup::NewExpert,
            ],
            losses: vec![LossKind::Ce, LossKind::Dr],
            new_region,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of each batch drawn from the replay buffer, in [0, 1).
    pub replay_fraction: f64,
    pub learning_rate: f64,
    /// Off by default: when set, region increments also train the projection
    /// with the anchor-alignment loss so new regions become routable.
    pub cil_train_gate: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn standard(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            replay_fraction: 0.25,
            learning_rate: 1e-3,
            cil_train_gate: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.replay_fraction) {
            return Err(Error::Config(format!(
                "replay fraction {} outside [0, 1)",
                self.replay_fraction
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::standard(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub ce: f64,
    pub dr: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<EpochLoss>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<&EpochLoss> {
        self.epoch_losses.last()
    }
}

#[derive(Clone, Copy)]
enum ExpertsMask {
    Frozen,
    One(usize),
    All,
}

impl ExpertsMask {
    fn trains(&self, position: usize) -> bool {
        match self {
            ExpertsMask::Frozen => false,
            ExpertsMask::One(p) => *p == position,
            ExpertsMask::All => true,
        }
    }
}

/// Runs one increment under `plan`. Grows the model first when the plan
/// carries a region, then optimizes only the plan's trainable groups; every
/// other parameter is left byte-identical. Returns per-epoch mean losses.
pub fn train_increment(
    model: &mut MoEModel,
    plan: &TrainPlan,
    new_data: &[Sample],
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let new_position = match &plan.new_region {
        Some(spec) => Some(model.add_expert(spec.region_id, &spec.classes)?),
        None => None,
    };

    let use_ce = plan.losses.contains(&LossKind::Ce);
    let mut use_dr = plan.losses.contains(&LossKind::Dr);
    let train_encoder = plan.trainable.contains(&ParamGroup::Encoder);
    let mut train_projection = plan.trainable.contains(&ParamGroup::Projection);
    if plan.mode == IncrementMode::Cil && cfg.cil_train_gate {
        train_projection = true;
        use_dr = true;
    }

    let experts_mask = if plan.trainable.contains(&ParamGroup::NewExpert) {
        let p = new_position.ok_or_else(|| {
            Error::Plan("plan trains a new expert but carries no region".into())
        })?;
        ExpertsMask::One(p)
    } else {
        ExpertsMask::Frozen
    };

    run_training(
        model,
        use_ce,
        use_dr,
        train_encoder,
        train_projection,
        experts_mask,
        new_data,
        buffer,
        cfg,
    )
}

/// Initial joint training: every group trainable, both losses on, no replay.
pub fn train_baseline(model: &mut MoEModel, new_data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    let empty = ReplayBuffer::new(1)?;
    run_training(
        model,
        true,
        true,
        true,
        true,
        ExpertsMask::All,
        new_data,
        &empty,
        cfg,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    model: &mut MoEModel,
    use_ce: bool,
    use_dr: bool,
    train_encoder: bool,
    train_projection: bool,
    experts_mask: ExpertsMask,
    new_data: &[Sample],
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if new_data.is_empty() {
        return Err(Error::Data("increment received no training samples".into()));
    }
    if !use_ce && !use_dr {
        return Err(Error::Plan("plan enables no loss term".into()));
    }

    for position in 0..model.experts().len() {
        let frozen = !experts_mask.trains(position);
        model.expert_mut(position)?.frozen = frozen;
    }

    let tensor_lens = |slices: Vec<&[f64]>| slices.iter().map(|s| s.len()).collect::<Vec<_>>();
    let mut adam_encoder = train_encoder
        .then(|| AdamState::with_lr(&tensor_lens(model.encoder().flat_params()), cfg.learning_rate));
    let mut adam_projection = train_projection.then(|| {
        AdamState::with_lr(&tensor_lens(model.projection().flat_params()), cfg.learning_rate)
    });
    let mut adam_experts: Vec<Option<AdamState>> = model
        .experts()
        .iter()
        .enumerate()
        .map(|(position, e)| {
            experts_mask.trains(position).then(|| {
                AdamState::with_lr(&tensor_lens(e.net.flat_params()), cfg.learning_rate)
            })
        })
        .collect();

    let n_replay = if buffer.is_empty() || cfg.replay_fraction == 0.0 {
        0
    } else {
        (cfg.replay_fraction * cfg.batch_size as f64).floor() as usize
    };
    let new_per_batch = cfg.batch_size - n_replay;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, &format!("epoch.{epoch}"));
        let mut order: Vec<usize> = (0..new_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, "shuffle")));
        let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, "replay"));

        let mut sum_ce = 0.0;
        let mut sum_dr = 0.0;
        let mut sum_total = 0.0;
        let mut rows_seen = 0usize;
        for (batch_index, chunk) in order.chunks(new_per_batch).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &new_data[i]).collect();
            let batch = compose_batch(&refs, buffer, cfg, model.registry(), &mut replay_rng)?;
            let anchor_labels: Vec<usize> = batch
                .region_ids
                .iter()
                .map(|&r| model.anchor_for_region(r))
                .collect::<Result<_>>()?;
            let dropout_seed = derive_seed(epoch_seed, &format!("dropout.{batch_index}"));
            let (terms, grads) = model.loss_and_grads(
                &batch.x,
                &batch.global_labels,
                &anchor_labels,
                use_ce,
                use_dr,
                dropout_seed,
            )?;

            if let Some(state) = adam_encoder.as_mut() {
                let flat: Vec<&[f64]> = grads.encoder.flat();
                let mut params = model.encoder_mut().flat_params_mut();
                state.step(&mut params, &flat)?;
            }
            if let Some(state) = adam_projection.as_mut() {
                let flat: Vec<&[f64]> = grads.projection.flat();
                let mut params = model.projection_mut().flat_params_mut();
                state.step(&mut params, &flat)?;
            }
            for (position, slot) in adam_experts.iter_mut().enumerate() {
                if let Some(state) = slot.as_mut() {
                    let grad_set: &GradSet = &grads.experts[position];
                    let flat: Vec<&[f64]> = grad_set.flat();
                    let mut params = model.expert_mut(position)?.net.flat_params_mut();
                    state.step(&mut params, &flat)?;
                }
            }

            let n = batch.x.rows() as f64;
            sum_ce += terms.ce * n;
            sum_dr += terms.dr * n;
            sum_total += terms.total * n;
            rows_seen += batch.x.rows();
        }
        let n = rows_seen.max(1) as f64;
        epoch_losses.push(EpochLoss {
            ce: sum_ce / n,
            dr: sum_dr / n,
            total: sum_total / n,
        });
    }
    Ok(TrainReport { epoch_losses })
}
