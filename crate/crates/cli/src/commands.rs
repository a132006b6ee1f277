use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mmae::data::{self, Dataset, ManifestEntry, Split};
use mmae::mask::{mask_trials, mmae_mask_plan, PatchGrid};
use mmae::model::{attention_image, attention_maps, global_embedding, rgb_tokens, ModelConfig, ModelParams};
use mmae::stain::{self, snmf_fit, to_optical_density, OpticalDensity, DEFAULT_I0};
use mmae::train::{self, pretrain_init, pretrain_run, EvalReport, PretrainState, TrainError};
use mmae::Exec;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug)]
pub enum Action {
    Synth { classes: Option<usize> },
    Stainsep,
    Maskplan,
    Pretrain,
    Finetune,
    Knn,
    Attnmap,
    Embed,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn execute(action: Action, cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(runtime)?;
    match action {
        Action::Synth { .. } => synth(cfg, out, exec),
        Action::Stainsep => stainsep(cfg, out, exec),
        Action::Maskplan => maskplan(cfg, out, exec),
        Action::Pretrain => pretrain(cfg, out, exec),
        Action::Finetune => finetune(cfg, out, exec),
        Action::Knn => knn(cfg, out, exec),
        Action::Attnmap => attnmap(cfg, out, exec),
        Action::Embed => embed(cfg, out, exec),
    }
}

fn synth(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let all = data::synth_generate(&cfg.synth, exec).map_err(runtime)?;
    let (tr, te) = data::split(&all, cfg.data.train_fraction, cfg.seed).map_err(runtime)?;
    let mut rows = data::write_dataset(&tr, out).map_err(runtime)?;
    rows.extend(data::write_dataset(&te, out).map_err(runtime)?);
    rows.sort_by(|a, b| a.path.cmp(&b.path));
    data::write_manifest(&rows, &out.join("manifest.csv")).map_err(runtime)?;
    println!("wrote {} tiles ({} train, {} test) to {}", rows.len(), tr.len(), te.len(), out.display());
    Ok(())
}

fn data_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.paths
        .data
        .as_deref()
        .ok_or_else(|| usage("no dataset given (use --data or paths.data)"))
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    Ok(data_dir(cfg)?.join("manifest.csv"))
}

fn stainsep(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let root = data_dir(cfg)?;
    let entries = data::read_manifest(&root.join("manifest.csv")).map_err(runtime)?;
    let images = exec
        .try_map(entries.len(), |i| data::load_rgb(&root.join(&entries[i].path)))
        .map_err(runtime)?;
    let snmf = &cfg.stain.snmf;
    let (triplets, vectors): (Vec<_>, Vec<_>) = if cfg.stain.shared {
        let ods = exec
            .try_map(images.len(), |i| to_optical_density(&images[i], DEFAULT_I0))
            .map_err(runtime)?;
        let fit = snmf_fit(&OpticalDensity::concat(&ods).map_err(runtime)?, snmf).map_err(runtime)?;
        let w = fit.model.w.clone();
        let t = exec
            .try_map(images.len(), |i| stain::separate_with(&images[i], &w, snmf.lambda))
            .map_err(runtime)?;
        let v = (fit.model.stain_vector(0), fit.model.stain_vector(1));
        (t, vec![v; images.len()])
    } else {
        stain::separate_batch(&images, snmf, exec)
            .into_iter()
            .map(|r| r.map(|(t, fit)| (t, (fit.model.stain_vector(0), fit.model.stain_vector(1)))))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?
            .into_iter()
            .unzip()
    };
    let mut w = csv::Writer::from_path(out.join("stain_vectors.csv")).map_err(runtime)?;
    w.write_record(["path", "h_r", "h_g", "h_b", "e_r", "e_g", "e_b"]).map_err(runtime)?;
    for ((entry, t), (h, e)) in entries.iter().zip(&triplets).zip(&vectors) {
        let abs = out.join(&entry.path);
        data::save_png(&t.rgb, &abs).map_err(runtime)?;
        data::save_png(&t.h_channel, &data::stain_sibling(&abs, "H")).map_err(runtime)?;
        data::save_png(&t.e_channel, &data::stain_sibling(&abs, "E")).map_err(runtime)?;
        let mut rec = vec![entry.path.to_string_lossy().into_owned()];
        rec.extend(h.iter().chain(e).map(|v| v.to_string()));
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    data::write_manifest(&entries, &out.join("manifest.csv")).map_err(runtime)?;
    println!("separated {} tiles into {}", entries.len(), out.display());
    Ok(())
}

fn maskplan(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let m = &cfg.maskplan;
    let grid = PatchGrid::with_side(m.grid).map_err(|e| usage(e.to_string()))?;
    let stats =
        mask_trials(&grid, &m.alphas, m.budget, m.strategy, m.trials, cfg.seed, exec).map_err(|e| usage(e.to_string()))?;
    fs::write(out.join("stats.txt"), stats.to_text()).map_err(runtime)?;
    let plan = mmae_mask_plan(&grid, &m.alphas, m.budget, m.strategy, cfg.seed, &[]).map_err(runtime)?;
    fs::write(out.join("plan.txt"), plan.to_text()).map_err(runtime)?;
    print!("{}", stats.to_text());
    Ok(())
}

fn load_split(cfg: &RunConfig, splits: &[Split], exec: Exec) -> Result<Dataset, CliError> {
    data::load_dataset(&manifest_path(cfg)?, splits, &cfg.stain.snmf, exec).map_err(runtime)
}

/// Train tiles, or every tile when the manifest has no train split.
fn load_train(cfg: &RunConfig, exec: Exec) -> Result<Dataset, CliError> {
    let ds = load_split(cfg, &[Split::Train], exec)?;
    if ds.is_empty() {
        load_split(cfg, &[], exec)
    } else {
        Ok(ds)
    }
}

fn check_size(model: &ModelConfig, ds: &Dataset) -> Result<(), CliError> {
    if let Some(item) = ds.items.first() {
        let (w, h) = item.triplet.rgb.dimensions();
        let s = model.encoder.image_size;
        if w as usize != s || h as usize != s {
            return Err(usage(format!("tiles are {w}x{h} but the model expects {s}x{s}")));
        }
    }
    Ok(())
}

fn save_state(state: &PretrainState, cfg: &RunConfig, model: &ModelConfig, path: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::from_state(state, model, &cfg.pretrain).map_err(runtime)?;
    save_checkpoint(&ckpt, path).map_err(runtime)
}

fn pretrain(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let ds = load_train(cfg, exec)?;
    let mut model = cfg.model.clone();
    model.num_classes = ds.num_classes().max(1);
    check_size(&model, &ds)?;
    let tc = &cfg.pretrain;
    let mut state = match &cfg.paths.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(runtime)?;
            let snap = ckpt.snapshot().map_err(runtime)?;
            if snap.model != model || snap.train != *tc {
                return Err(usage(format!("{} was written with a different configuration", path.display())));
            }
            ckpt.pretrain_state().map_err(runtime)?
        }
        None => pretrain_init(&model, tc).map_err(runtime)?,
    };
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(runtime)?;
    while state.epoch < tc.epochs {
        let next = state.epoch + 1;
        state = match pretrain_run(state, &ds, &model, tc, exec, next) {
            Ok(s) => s,
            Err(TrainError::NumericalFault { epoch, step, detail, last_good }) => {
                save_state(&last_good, cfg, &model, &out.join("last_good.ckpt"))?;
                train::write_loss_csv(&last_good.losses, &out.join("loss.csv")).map_err(runtime)?;
                return Err(runtime(format!(
                    "numerical fault at epoch {epoch}, step {step}: {detail}; last good state saved"
                )));
            }
            Err(e) => return Err(runtime(e)),
        };
        let loss = state.losses.last().copied().unwrap_or(f64::NAN);
        println!("epoch {} loss {loss:e}", state.epoch);
        save_state(&state, cfg, &model, &ckpt_dir.join(format!("epoch_{:04}.ckpt", state.epoch)))?;
    }
    save_state(&state, cfg, &model, &out.join("final.ckpt"))?;
    train::write_loss_csv(&state.losses, &out.join("loss.csv")).map_err(runtime)?;
    Ok(())
}

/// Parameters and model config from `paths.ckpt`.
fn load_model(cfg: &RunConfig) -> Result<(ModelParams, ModelConfig), CliError> {
    let path = cfg
        .paths
        .ckpt
        .as_deref()
        .ok_or_else(|| usage("no checkpoint given (use --ckpt or paths.ckpt)"))?;
    let ckpt = load_checkpoint(path).map_err(runtime)?;
    let snap = ckpt.snapshot().map_err(runtime)?;
    Ok((ckpt.params(), snap.model))
}

fn labeled_subset(cfg: &RunConfig, train: &Dataset) -> Result<Dataset, CliError> {
    let n = cfg.data.n_labeled.min(train.len());
    data::subset(train, n, cfg.seed).map_err(runtime)
}

fn write_report(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    train::write_eval_csv(report, &out.join("eval.csv")).map_err(runtime)?;
    let mut text = Vec::new();
    train::write_report_text(report, &mut text).map_err(runtime)?;
    fs::write(out.join("report.txt"), &text).map_err(runtime)?;
    std::io::stdout().write_all(&text).map_err(runtime)
}

fn finetune(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let (pretrained, mut model) = match (&cfg.paths.ckpt, cfg.eval.random_init) {
        (None, true) => (None, cfg.model.clone()),
        (_, random) => {
            let (p, m) = load_model(cfg)?;
            ((!random).then_some(p), m)
        }
    };
    let train_ds = load_split(cfg, &[Split::Train], exec)?;
    let test_ds = load_split(cfg, &[Split::Test], exec)?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(usage("fine-tuning needs train and test tiles in the manifest"));
    }
    model.num_classes = train_ds.num_classes();
    check_size(&model, &train_ds)?;
    let labeled = labeled_subset(cfg, &train_ds)?;
    let report = train::finetune(pretrained.as_ref(), &model, &labeled, &test_ds, &cfg.finetune, exec).map_err(runtime)?;
    write_report(&report, out)
}

fn knn(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let (params, model) = load_model(cfg)?;
    let train_ds = load_split(cfg, &[Split::Train], exec)?;
    let test_ds = load_split(cfg, &[Split::Test], exec)?;
    check_size(&model, &train_ds)?;
    let labeled = labeled_subset(cfg, &train_ds)?;
    let report = train::knn_eval(&params, &model, &labeled, &test_ds, cfg.eval.k, exec).map_err(|e| match e {
        TrainError::Config(msg) => usage(msg),
        e => runtime(e),
    })?;
    write_report(&report, out)
}

fn attnmap(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let (params, model) = load_model(cfg)?;
    let grid = model.grid().map_err(runtime)?;
    let tiles: Vec<(String, image::RgbImage)> = if cfg.paths.images.is_empty() {
        let ds = load_split(cfg, &[Split::Test], exec)?;
        ds.items
            .iter()
            .take(cfg.eval.attn_images)
            .map(|it| (it.id.replace(['/', '\\'], "_"), it.triplet.rgb.clone()))
            .collect()
    } else {
        cfg.paths
            .images
            .iter()
            .map(|p| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                data::load_rgb(p).map(|img| (stem, img)).map_err(runtime)
            })
            .collect::<Result<_, _>>()?
    };
    let mut written = 0;
    for (stem, img) in &tiles {
        let tokens = rgb_tokens(img, &grid).map_err(|e| usage(format!("{stem}: {e}")))?;
        let maps = attention_maps(&params, &model, &tokens, cfg.eval.layer, cfg.eval.threshold)
            .map_err(|e| usage(e.to_string()))?;
        for (head, map) in maps.iter().enumerate() {
            let png = attention_image(map).map_err(runtime)?;
            let path = out.join(format!("{stem}_L{}H{head}.png", cfg.eval.layer));
            data::save_png(&png, &path).map_err(runtime)?;
            written += 1;
        }
    }
    println!("wrote {written} attention maps to {}", out.display());
    Ok(())
}

fn embed(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let (params, model) = load_model(cfg)?;
    let grid = model.grid().map_err(runtime)?;
    let entries: Vec<ManifestEntry> = data::read_manifest(&manifest_path(cfg)?).map_err(runtime)?;
    let ds = load_split(cfg, &[], exec)?;
    check_size(&model, &ds)?;
    let rows = exec
        .try_map(ds.len(), |i| {
            let tokens = rgb_tokens(&ds.items[i].triplet.rgb, &grid)?;
            Ok::<_, mmae::model::ModelError>(global_embedding(&params, &model, &tokens)?.data().to_vec())
        })
        .map_err(runtime)?;
    let mut w = csv::Writer::from_path(out.join("embeddings.csv")).map_err(runtime)?;
    let dim = rows.first().map_or(0, Vec::len);
    let mut header = vec!["path".to_string(), "label".into(), "split".into()];
    header.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(runtime)?;
    for (entry, row) in entries.iter().zip(&rows) {
        let mut rec = vec![
            entry.path.to_string_lossy().into_owned(),
            entry.label.to_string(),
            entry.split.as_str().to_string(),
        ];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("wrote {} embeddings of dimension {dim}", rows.len());
    Ok(())
}
