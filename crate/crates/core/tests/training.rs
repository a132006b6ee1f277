use mmae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mmae::data::{split, subset, synth_generate, Dataset, SynthSpec};
use mmae::model::ModelConfig;
use mmae::train::{
    finetune, knn_accuracy, knn_predict, pretrain, pretrain_init, pretrain_run, TrainConfig, TrainError,
};
use mmae::Exec;
use rand::Rng;

fn data(count: usize, seed: u64) -> Dataset {
    synth_generate(&SynthSpec { count, seed, ..SynthSpec::default() }, Exec::Parallel).unwrap()
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 1,
        ..TrainConfig::desk_pretrain()
    }
}

#[test]
fn sequential_and_parallel_runs_are_identical() {
    let ds = data(48, 1);
    for mods in [1, 3] {
        let model = ModelConfig::desk(mods, 4);
        let a = pretrain(&ds, &model, &short(2), Exec::Sequential).unwrap();
        let b = pretrain(&ds, &model, &short(2), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let ds = data(48, 2);
    let model = ModelConfig::desk(3, 4);
    let cfg = short(4);
    let full = pretrain(&ds, &model, &cfg, Exec::Parallel).unwrap();

    let half = pretrain_run(pretrain_init(&model, &cfg).unwrap(), &ds, &model, &cfg, Exec::Parallel, 2).unwrap();
    assert_eq!(half.losses[..], full.losses[..2]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&Checkpoint::from_state(&half, &model, &cfg).unwrap(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let snap = loaded.snapshot().unwrap();
    let resumed = pretrain_run(loaded.pretrain_state().unwrap(), &ds, &snap.model, &snap.train, Exec::Parallel, 4).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.losses), bits(&full.losses));
    assert_eq!(resumed, full);
}

#[test]
fn block_smoothed_loss_does_not_increase() {
    let ds = data(96, 3);
    let model = ModelConfig::desk(1, 4);
    let cfg = TrainConfig {
        epochs: 30,
        warmup_epochs: 2,
        ..TrainConfig::desk_pretrain()
    };
    let st = pretrain(&ds, &model, &cfg, Exec::Parallel).unwrap();
    let blocks: Vec<f64> = st.losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(blocks.windows(2).all(|w| w[1] <= w[0]), "{blocks:?}");
}

#[test]
fn divergence_reports_fault_with_last_good_state() {
    let ds = data(32, 4);
    let model = ModelConfig::desk(1, 4);
    let cfg = TrainConfig {
        base_lr: 1e200,
        warmup_start_lr: 1e200,
        clip_norm: 1e300,
        ..short(3)
    };
    match pretrain(&ds, &model, &cfg, Exec::Parallel) {
        Err(TrainError::NumericalFault { last_good, .. }) => {
            assert!(last_good.params.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
            assert!(last_good.optimizer.step >= 1);
        }
        other => panic!("expected a numerical fault, got {:?}", other.map(|s| s.losses)),
    }
}

#[test]
fn permuted_labels_give_chance_accuracy() {
    let ds = data(300, 5);
    let (train, test) = split(&ds, 2.0 / 3.0, 5).unwrap();
    let mut labeled = subset(&train, 100, 5).unwrap();
    // relabel independently of the true class: within each class, labels
    // cycle through 0..4 in a shuffled order, so every true class spreads
    // evenly over the new labels
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut mmae::rng::stream(5, &[42]));
    let mut seen = [0usize; 4];
    for i in order {
        let c = labeled.items[i].label;
        labeled.items[i].label = (seen[c] + c) % 4;
        seen[c] += 1;
    }
    let model = ModelConfig::desk(1, 4);
    let cfg = TrainConfig {
        seed: 5,
        ..TrainConfig::desk_finetune()
    };
    let r = finetune(None, &model, &labeled, &test, &cfg, Exec::Parallel).unwrap();
    assert!((r.accuracy - 0.25).abs() <= 0.1, "accuracy {}", r.accuracy);
    assert_eq!(r.fold_accuracies.len(), 5);
}

#[test]
fn too_few_labels_for_folds() {
    let ds = data(8, 6);
    let labeled = subset(&ds, 4, 0).unwrap();
    let model = ModelConfig::desk(1, 4);
    assert!(matches!(
        finetune(None, &model, &labeled, &ds, &TrainConfig::desk_finetune(), Exec::Sequential),
        Err(TrainError::Config(_))
    ));
}

/// All-pairs oracle: normalize, fill the full similarity matrix, pick the
/// top k by repeated arg-max scans, vote.
fn oracle(train: &[Vec<f64>], labels: &[usize], queries: &[Vec<f64>], k: usize) -> Vec<usize> {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let tr: Vec<Vec<f64>> = train.iter().map(unit).collect();
    let classes = labels.iter().max().unwrap() + 1;
    queries
        .iter()
        .map(|q| {
            let q = unit(q);
            let sims: Vec<f64> = tr.iter().map(|t| t.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
            let mut taken = vec![false; sims.len()];
            let mut count = vec![0usize; classes];
            let mut total = vec![0.0; classes];
            for _ in 0..k {
                let mut best = usize::MAX;
                for i in 0..sims.len() {
                    if !taken[i] && (best == usize::MAX || sims[i] > sims[best]) {
                        best = i;
                    }
                }
                taken[best] = true;
                count[labels[best]] += 1;
                total[labels[best]] += sims[best];
            }
            (0..classes)
                .max_by(|&a, &b| count[a].cmp(&count[b]).then(total[a].total_cmp(&total[b])).then(b.cmp(&a)))
                .unwrap()
        })
        .collect()
}

#[test]
fn knn_matches_all_pairs_oracle() {
    let mut r = mmae::rng::stream(9, &[]);
    let emb: Vec<Vec<f64>> = (0..200).map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..200).map(|_| r.random_range(0..4)).collect();
    let (tr, q) = emb.split_at(150);
    let (trl, ql) = labels.split_at(150);
    for k in [10, 20] {
        let expect = oracle(tr, trl, q, k);
        let got: Vec<usize> = q.iter().map(|x| knn_predict(tr, trl, x, k)).collect();
        assert_eq!(got, expect, "k = {k}");
        let acc = expect.iter().zip(ql).filter(|(a, b)| a == b).count() as f64 / q.len() as f64;
        assert_eq!(knn_accuracy(tr, trl, q, ql, k, Exec::Parallel).unwrap(), acc);
    }
}
