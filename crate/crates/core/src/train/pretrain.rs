use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{adamw_step, augment, clip_global_norm, AdamHyper, AdamWState, Schedule, TrainConfig, TrainError};
use crate::data::Dataset;
use crate::exec::Exec;
use crate::mask::{mae_mask_plan, mmae_mask_plan, MaskPlan, PatchGrid};
use crate::model::{pretrain_loss, triplet_tokens, ModelConfig, ModelError, ModelParams};
use crate::rng;
use crate::tensor::{Graph, Tensor, TensorError};

/// Everything needed to continue pretraining at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub params: ModelParams,
    pub optimizer: AdamWState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean reconstruction loss of each completed epoch.
    pub losses: Vec<f64>,
}

pub fn pretrain_init(model: &ModelConfig, cfg: &TrainConfig) -> Result<PretrainState, TrainError> {
    cfg.validate()?;
    Ok(PretrainState {
        params: ModelParams::init(model, cfg.seed)?,
        optimizer: AdamWState::default(),
        epoch: 0,
        losses: Vec::new(),
    })
}

fn sample_plan(
    model: &ModelConfig,
    cfg: &TrainConfig,
    grid: &PatchGrid,
    epoch: usize,
    k: usize,
) -> Result<MaskPlan, TrainError> {
    let seed: u64 = rng::stream(cfg.seed, &[rng::tag::MASK, epoch as u64, k as u64]).random();
    Ok(if model.is_multimodal() {
        let budget = cfg.mask.budget_for(grid.num_positions());
        mmae_mask_plan(grid, &cfg.mask.alphas, budget, cfg.mask.strategy, seed, &[])?
    } else {
        mae_mask_plan(grid, cfg.mask.ratio, seed)?
    })
}

/// Loss and parameter gradients of sample `k` (its position in the epoch's
/// order) of `epoch`. Augmentation and masking streams depend only on
/// `(seed, epoch, k)`.
pub fn sample_loss_and_grads(
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    item: usize,
    epoch: usize,
    k: usize,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let grid = model.grid()?;
    let mut arng = rng::stream(cfg.seed, &[rng::tag::AUGMENT, epoch as u64, k as u64]);
    let (triplet, _) = augment(
        &dataset.items[item].triplet,
        &cfg.augment,
        grid.image_size() as u32,
        &mut arng,
    );
    let tokens = triplet_tokens(&triplet, &grid, model.encoder.modality_list())?;
    let plan = sample_plan(model, cfg, &grid, epoch, k)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| true);
    let loss = pretrain_loss(&mut g, &bound, model, &tokens, &plan, cfg.norm_pix)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), bound.grads(&g)))
}

/// Sums `parts` in order and divides by their count.
pub(crate) fn mean_grads(parts: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let n = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        for (k, g) in p {
            if let Some(a) = acc.get_mut(&k) {
                a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
            }
        }
    }
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    acc
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize, tag: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, tag, epoch as u64]));
    order
}

const PRETRAIN_SHUFFLE: u64 = 0;

/// Continues pretraining from `state` until `until_epoch` epochs are done
/// (capped at `cfg.epochs`). Resuming from a saved state reproduces an
/// uninterrupted run exactly.
pub fn pretrain_run(
    mut state: PretrainState,
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    exec: Exec,
    until_epoch: usize,
) -> Result<PretrainState, TrainError> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    let n = dataset.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = Schedule::new(cfg, steps_per_epoch);
    let hyper = AdamHyper::from_config(cfg);
    let until = until_epoch.min(cfg.epochs);
    while state.epoch < until {
        let epoch = state.epoch;
        let order = epoch_order(n, cfg.seed, epoch, PRETRAIN_SHUFFLE);
        let mut total = 0.0;
        for step in 0..steps_per_epoch {
            let start = step * batch;
            let ids = &order[start..(start + batch).min(n)];
            let results = exec.try_map(ids.len(), |j| {
                sample_loss_and_grads(&state.params, model, cfg, dataset, ids[j], epoch, start + j)
            });
            let fault = |detail: String, state: &PretrainState| TrainError::NumericalFault {
                epoch,
                step,
                detail,
                last_good: Box::new(state.clone()),
            };
            let results = match results {
                Ok(r) => r,
                Err(e) if is_non_finite(&e) => return Err(fault(e.to_string(), &state)),
                Err(e) => return Err(e),
            };
            let (losses, grads): (Vec<f64>, Vec<_>) = results.into_iter().unzip();
            let batch_loss: f64 = losses.iter().sum();
            if !batch_loss.is_finite() {
                return Err(fault("non-finite loss".into(), &state));
            }
            total += batch_loss;
            let mut grads = mean_grads(grads);
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(fault("non-finite gradient norm".into(), &state));
            }
            let lr = schedule.at(epoch * steps_per_epoch + step);
            adamw_step(&mut state.params, &grads, &mut state.optimizer, lr, cfg.weight_decay, hyper)?;
        }
        state.losses.push(total / n as f64);
        state.epoch += 1;
    }
    Ok(state)
}

/// Full pretraining run from a fresh initialization.
pub fn pretrain(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<PretrainState, TrainError> {
    let state = pretrain_init(model, cfg)?;
    pretrain_run(state, dataset, model, cfg, exec, cfg.epochs)
}
