use std::cmp::Ordering;

use super::{EvalReport, TrainError};
use crate::data::Dataset;
use crate::exec::Exec;
use crate::model::{global_embedding, rgb_tokens, ModelConfig, ModelParams};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Global-token embedding of every image in `ds`, in item order.
pub fn embed_dataset(params: &ModelParams, model: &ModelConfig, ds: &Dataset, exec: Exec) -> Result<Vec<Vec<f64>>, TrainError> {
    let grid = model.grid()?;
    exec.try_map(ds.len(), |i| {
        let tokens = rgb_tokens(&ds.items[i].triplet.rgb, &grid)?;
        Ok(global_embedding(params, model, &tokens)?.data().to_vec())
    })
}

/// Majority vote among the `k` most cosine-similar training embeddings.
/// Neighbours are ranked by similarity, then by index; vote ties go to the
/// class with the larger summed similarity, then to the lower label.
pub fn knn_predict(train: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize) -> usize {
    let mut sims: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (cosine(t, query), i)).collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![(0usize, 0.0f64); classes];
    for &(s, i) in sims.iter().take(k) {
        votes[labels[i]].0 += 1;
        votes[labels[i]].1 += s;
    }
    let mut best = 0;
    for c in 1..classes {
        let (n, s) = votes[c];
        let (bn, bs) = votes[best];
        if n > bn || (n == bn && s.total_cmp(&bs) == Ordering::Greater) {
            best = c;
        }
    }
    best
}

/// Fraction of `test` embeddings whose kNN prediction equals their label.
pub fn knn_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
    exec: Exec,
) -> Result<f64, TrainError> {
    if k == 0 || k > train.len() {
        return Err(TrainError::Config(format!("k = {k} with {} training embeddings", train.len())));
    }
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(TrainError::Contract("embedding and label counts differ".into()));
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let hits = exec.map(test.len(), |i| usize::from(knn_predict(train, train_labels, &test[i], k) == test_labels[i]));
    Ok(hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

pub fn knn_eval(
    params: &ModelParams,
    model: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    k: usize,
    exec: Exec,
) -> Result<EvalReport, TrainError> {
    let tr = embed_dataset(params, model, train, exec)?;
    let te = embed_dataset(params, model, test, exec)?;
    let accuracy = knn_accuracy(&tr, &train.labels(), &te, &test.labels(), k, exec)?;
    Ok(EvalReport {
        accuracy,
        fold_accuracies: vec![accuracy],
        fold_val_accuracies: Vec::new(),
        k: Some(k),
        num_labeled: train.len(),
    })
}
