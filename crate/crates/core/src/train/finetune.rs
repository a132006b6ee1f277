use std::collections::BTreeMap;

use super::pretrain::{epoch_order, mean_grads};
use super::{adamw_step, augment, clip_global_norm, AdamHyper, AdamWState, Schedule, TrainConfig, TrainError};
use crate::data::Dataset;
use crate::exec::Exec;
use crate::model::{finetune_forward, rgb_tokens, ModelConfig, ModelParams};
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean test accuracy over folds (or the single kNN accuracy).
    pub accuracy: f64,
    /// Test accuracy of the model trained in each fold.
    pub fold_accuracies: Vec<f64>,
    /// Accuracy on each fold's held-out labeled part.
    pub fold_val_accuracies: Vec<f64>,
    pub k: Option<usize>,
    pub num_labeled: usize,
}

/// Arg-max class of an unaugmented RGB tile.
pub fn predict(params: &ModelParams, model: &ModelConfig, img: &image::RgbImage) -> Result<usize, TrainError> {
    let tokens = rgb_tokens(img, &model.grid()?)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let logits = finetune_forward(&mut g, &bound, model, &tokens)?;
    let row = g.value(logits).data();
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

fn accuracy(params: &ModelParams, model: &ModelConfig, ds: &Dataset, ids: &[usize], exec: Exec) -> Result<f64, TrainError> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let hits = exec.try_map(ids.len(), |j| {
        let item = &ds.items[ids[j]];
        Ok::<_, TrainError>(usize::from(predict(params, model, &item.triplet.rgb)? == item.label))
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / ids.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn sample_grads(
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    ds: &Dataset,
    item: usize,
    fold: usize,
    epoch: usize,
    k: usize,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let grid = model.grid()?;
    let mut arng = rng::stream(
        cfg.seed,
        &[rng::tag::AUGMENT, FINETUNE_TAG, fold as u64, epoch as u64, k as u64],
    );
    let (triplet, _) = augment(&ds.items[item].triplet, &cfg.augment, grid.image_size() as u32, &mut arng);
    let tokens = rgb_tokens(&triplet.rgb, &grid)?;
    let frozen = cfg.freeze_encoder;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |n| n.starts_with("head.") || (!frozen && n.starts_with("enc.")));
    let logits = finetune_forward(&mut g, &bound, model, &tokens)?;
    let loss = g.cross_entropy(logits, ds.items[item].label)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), bound.grads(&g)))
}

const FINETUNE_TAG: u64 = 1;

/// Fine-tunes one model on `train_ids` and returns its parameters.
fn train_fold(
    init: ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    ds: &Dataset,
    train_ids: &[usize],
    fold: usize,
    exec: Exec,
) -> Result<ModelParams, TrainError> {
    let mut params = init;
    let mut opt = AdamWState::default();
    let n = train_ids.len();
    let batch = cfg.batch_size.min(n);
    let steps = n.div_ceil(batch);
    let schedule = Schedule::new(cfg, steps);
    let hyper = AdamHyper::from_config(cfg);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch, FINETUNE_TAG + 1 + fold as u64);
        for step in 0..steps {
            let start = step * batch;
            let ids = &order[start..(start + batch).min(n)];
            let results = exec.try_map(ids.len(), |j| {
                sample_grads(&params, model, cfg, ds, train_ids[ids[j]], fold, epoch, start + j)
            })?;
            let (losses, grads): (Vec<f64>, Vec<_>) = results.into_iter().unzip();
            if !losses.iter().all(|l| l.is_finite()) {
                return Err(TrainError::Contract(format!("non-finite fine-tuning loss in fold {fold}")));
            }
            let mut grads = mean_grads(grads);
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = schedule.at(epoch * steps + step);
            adamw_step(&mut params, &grads, &mut opt, lr, cfg.weight_decay, hyper)?;
        }
    }
    Ok(params)
}

/// K-fold fine-tuning over `labeled`: each fold trains encoder and head on
/// the other folds, is validated on its own fold, and is scored on `test`.
/// The reported accuracy is the mean test accuracy. `pretrained = None`
/// trains from a random initialization.
pub fn finetune(
    pretrained: Option<&ModelParams>,
    model: &ModelConfig,
    labeled: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<EvalReport, TrainError> {
    cfg.validate()?;
    model.validate()?;
    let n = labeled.len();
    if n < cfg.folds {
        return Err(TrainError::Config(format!("{n} labeled samples for {} folds", cfg.folds)));
    }
    if let Some(&bad) = labeled.labels().iter().chain(&test.labels()).find(|&&l| l >= model.num_classes) {
        return Err(TrainError::Config(format!("label {bad} outside {} classes", model.num_classes)));
    }
    let order = epoch_order(n, cfg.seed, 0, FINETUNE_TAG);
    let test_ids: Vec<usize> = (0..test.len()).collect();
    let mut fold_accuracies = Vec::with_capacity(cfg.folds);
    let mut fold_val_accuracies = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let (val, train): (Vec<usize>, Vec<usize>) = (0..n).map(|i| (i, order[i])).fold(
            (Vec::new(), Vec::new()),
            |(mut v, mut t), (i, id)| {
                if i % cfg.folds == fold {
                    v.push(id);
                } else {
                    t.push(id);
                }
                (v, t)
            },
        );
        let mut init = ModelParams::init(model, cfg.seed.wrapping_add(1 + fold as u64))?;
        if let Some(p) = pretrained {
            init.load_encoder_from(p);
        }
        let params = train_fold(init, model, cfg, labeled, &train, fold, exec)?;
        fold_val_accuracies.push(accuracy(&params, model, labeled, &val, exec)?);
        fold_accuracies.push(accuracy(&params, model, test, &test_ids, exec)?);
    }
    Ok(EvalReport {
        accuracy: fold_accuracies.iter().sum::<f64>() / cfg.folds as f64,
        fold_accuracies,
        fold_val_accuracies,
        k: None,
        num_labeled: n,
    })
}
