use super::*;
use crate::mask::{mae_mask_plan, mask_one_plan, MaskPlan};
use crate::rng;

fn zero_tokens(cfg: &ModelConfig) -> ModalityTokens {
    let grid = cfg.grid().unwrap();
    cfg.encoder
        .modality_list()
        .iter()
        .map(|&m| (m, Tensor::zeros(&[grid.num_positions(), grid.token_len(channels(m))])))
        .collect()
}

fn random_tokens(cfg: &ModelConfig, seed: u64) -> ModalityTokens {
    let grid = cfg.grid().unwrap();
    let mut r = rng::stream(seed, &[]);
    cfg.encoder
        .modality_list()
        .iter()
        .map(|&m| {
            let (rows, cols) = (grid.num_positions(), grid.token_len(channels(m)));
            let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
            (m, Tensor::matrix(rows, cols, data).unwrap())
        })
        .collect()
}

/// Spreads weights out so that outputs depend visibly on every input.
fn jitter(params: &mut ModelParams, seed: u64, amount: f64) {
    let mut r = rng::stream(seed, &[]);
    params.update(|_, t| t.data_mut().iter_mut().for_each(|v| *v += amount * r.random_range(-1.0..1.0)));
}

#[test]
fn vit_small_shapes() {
    let cfg = ModelConfig::vit_small(1, 8);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let tokens = zero_tokens(&cfg);
    let grid = cfg.grid().unwrap();
    let plan = mae_mask_plan(&grid, 0.75, 1).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let out = encode(&mut g, &p, &cfg, &tokens, &plan).unwrap();
    assert_eq!(g.value(out.latents).shape(), [50, 384]);
    let pred = decode_mae(&mut g, &p, &cfg, out.latents, &plan).unwrap();
    assert_eq!(g.value(pred).shape(), [147, 768]);
}

#[test]
fn vit_small_multimodal_budget() {
    let cfg = ModelConfig::vit_small(3, 8);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let tokens = zero_tokens(&cfg);
    let grid = cfg.grid().unwrap();
    let plan = mask_one_plan(&grid, [152, 19, 19], &mut rng::stream(2, &[])).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let out = encode(&mut g, &p, &cfg, &tokens, &plan).unwrap();
    assert_eq!(g.value(out.latents).shape(), [191, 384]);
    let pred = decode_mmae(&mut g, &p, &cfg, out.latents, &plan).unwrap();
    assert_eq!(g.value(pred).shape(), [44, 768]);
}

#[test]
fn zero_input_tokens_are_position_embeddings() {
    let cfg = ModelConfig::desk(1, 4);
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    params.set("enc.patch.rgb.w", Tensor::zeros(&[192, 32]));
    let tokens = random_tokens(&cfg, 1);
    let idx = [3usize, 0, 9];
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let x = embed_tokens(&mut g, &p, &cfg, &[(Modality::Rgb, &tokens[&Modality::Rgb], &idx)]).unwrap();
    let pos = sincos_2d(4, 32).gather_rows(&idx).unwrap();
    let x = g.value(x);
    assert_eq!(x.rows(), 4);
    assert_eq!(x.row(0), params.get("enc.global").unwrap().row(0));
    for i in 0..3 {
        assert_eq!(x.row(i + 1), pos.row(i));
    }
}

#[test]
fn sincos_table() {
    let t = sincos_2d(4, 32);
    assert_eq!(t.shape(), [16, 32]);
    // position (0, 0): sines 0, cosines 1
    assert!(t.row(0)[..8].iter().all(|v| *v == 0.0));
    assert!(t.row(0)[8..16].iter().all(|v| *v == 1.0));
    // same row shares the first half; same column the second half
    assert_eq!(t.row(5)[..16], t.row(6)[..16]);
    assert_eq!(t.row(1)[16..], t.row(5)[16..]);
    assert_ne!(t.row(1), t.row(4));
}

#[test]
fn zero_pixel_projection_predicts_zero() {
    let cfg = ModelConfig::desk(1, 4);
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    params.set("dec.pred.w", Tensor::zeros(&[32, 192]));
    let plan = mae_mask_plan(&cfg.grid().unwrap(), 0.75, 3).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let out = encode(&mut g, &p, &cfg, &random_tokens(&cfg, 1), &plan).unwrap();
    let pred = decode_mae(&mut g, &p, &cfg, out.latents, &plan).unwrap();
    assert_eq!(g.value(pred).shape(), [12, 192]);
    assert!(g.value(pred).data().iter().all(|v| *v == 0.0));
}

#[test]
fn stain_latents_reach_the_decoder() {
    let cfg = ModelConfig::desk(3, 4);
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    jitter(&mut params, 4, 0.2);
    let grid = cfg.grid().unwrap();
    let plan = mask_one_plan(&grid, [6, 3, 3], &mut rng::stream(5, &[])).unwrap();
    let tokens = random_tokens(&cfg, 2);
    let run = |zero_stains: bool| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let out = encode(&mut g, &p, &cfg, &tokens, &plan).unwrap();
        let mut lat = g.value(out.latents).clone();
        if zero_stains {
            let d = lat.cols();
            lat.data_mut()[(1 + 6) * d..].iter_mut().for_each(|v| *v = 0.0);
        }
        let lat = g.constant(lat);
        let pred = decode_mmae(&mut g, &p, &cfg, lat, &plan).unwrap();
        g.value(pred).clone()
    };
    let delta = run(false).max_abs_diff(&run(true));
    assert!(delta > 1e-6, "delta {delta}");
}

#[test]
fn reconstruction_loss_examples() {
    let mut g = Graph::new();
    let t = Tensor::matrix(2, 3, vec![0.1, 0.4, -0.2, 0.7, 0.0, 1.0]).unwrap();
    let pred = g.leaf(t.clone(), true);
    let l = reconstruction_loss(&mut g, pred, &t, false).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let zero = g.leaf(Tensor::zeros(&[1, 2]), true);
    let target = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
    let l = reconstruction_loss(&mut g, zero, &target, false).unwrap();
    assert_eq!(g.value(l).item(), 1.0);

    let pred = g.leaf(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap(), true);
    let flat = Tensor::full(&[1, 3], 0.5);
    let l = reconstruction_loss(&mut g, pred, &flat, true).unwrap();
    let expect = (0.25 + 1.0 + 4.0) / 3.0;
    assert!((g.value(l).item() - expect).abs() < 1e-15);

    assert!(reconstruction_loss(&mut g, pred, &target, false).is_err());
}

#[test]
fn finetune_head_starts_uniform() {
    let cfg = ModelConfig::desk(1, 8);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let tokens = random_tokens(&cfg, 3);
    let run = || {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| true);
        let logits = finetune_forward(&mut g, &p, &cfg, &tokens[&Modality::Rgb]).unwrap();
        let ce = g.cross_entropy(logits, 5).unwrap();
        (g.value(logits).clone(), g.value(ce).item())
    };
    let (logits, ce) = run();
    assert_eq!(logits.shape(), [1, 8]);
    assert!(logits.data().iter().all(|v| *v == 0.0));
    assert!((ce - 8f64.ln()).abs() < 1e-15);
    assert_eq!(run(), (logits, ce));
}

#[test]
fn multimodal_params_finetune_on_rgb_only() {
    let cfg = ModelConfig::desk(3, 4);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let tokens = random_tokens(&cfg, 3);
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| true);
    let logits = finetune_forward(&mut g, &p, &cfg, &tokens[&Modality::Rgb]).unwrap();
    assert_eq!(g.value(logits).shape(), [1, 4]);
}

#[test]
fn attention_maps_are_sub_distributions() {
    let cfg = ModelConfig::desk(1, 4);
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    jitter(&mut params, 1, 0.3);
    let tokens = random_tokens(&cfg, 8);
    let rgb = &tokens[&Modality::Rgb];
    for layer in 0..2 {
        let maps = attention_maps(&params, &cfg, rgb, layer, 0.0).unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            assert_eq!(m.shape(), [32, 32]);
            assert!(m.data().iter().all(|v| *v >= 0.0));
            // each grid cell is repeated over an 8x8 block
            let cells: f64 = m.data().iter().sum::<f64>() / 64.0;
            assert!(cells <= 1.0 + 1e-12 && cells > 0.0);
        }
        assert_eq!(maps, attention_maps(&params, &cfg, rgb, layer, 0.0).unwrap());
        let zero = attention_maps(&params, &cfg, rgb, layer, 1.0).unwrap();
        assert!(zero.iter().all(|m| m.data().iter().all(|v| *v == 0.0)));
        let half = attention_maps(&params, &cfg, rgb, layer, 0.5).unwrap();
        for m in &half {
            let nonzero = m.data().iter().filter(|v| **v > 0.0).count() / 64;
            assert!(nonzero <= 8);
        }
    }
    assert!(attention_maps(&params, &cfg, rgb, 2, 0.0).is_err());
    let mut no_global = cfg.clone();
    no_global.encoder.num_global_tokens = 0;
    let params = ModelParams::init(&no_global, 0).unwrap();
    assert!(attention_maps(&params, &no_global, rgb, 0, 0.0).is_err());
}

#[test]
fn attention_image_scales_to_max() {
    let m = Tensor::matrix(2, 2, vec![0.0, 0.1, 0.2, 0.4]).unwrap();
    let img = attention_image(&m).unwrap();
    assert_eq!(img.dimensions(), (2, 2));
    assert_eq!(img.as_raw(), &[0, 64, 128, 255]);
    let blank = attention_image(&Tensor::zeros(&[3, 3])).unwrap();
    assert!(blank.as_raw().iter().all(|v| *v == 0));
    assert!(attention_image(&Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn threshold_examples() {
    let mut v = vec![0.1, 0.4, 0.2, 0.3];
    threshold_map(&mut v, 0.5);
    // median by interpolation is 0.25
    assert_eq!(v, vec![0.0, 0.4, 0.0, 0.3]);
    let mut v = vec![0.1, 0.4];
    threshold_map(&mut v, 0.0);
    assert_eq!(v, vec![0.1, 0.4]);
}

#[test]
fn contract_errors() {
    let cfg = ModelConfig::desk(1, 4);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let grid = cfg.grid().unwrap();
    let mm = mask_one_plan(&grid, [4, 2, 2], &mut rng::stream(0, &[])).unwrap();
    let mut tokens = zero_tokens(&ModelConfig::desk(3, 4));
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    assert!(matches!(encode(&mut g, &p, &cfg, &tokens, &mm), Err(ModelError::Contract(_))));
    let mae = mae_mask_plan(&grid, 0.5, 0).unwrap();
    let out = encode(&mut g, &p, &cfg, &tokens, &mae).unwrap();
    assert!(decode_mae(&mut g, &p, &cfg, out.latents, &mm).is_err());
    assert!(decode_mmae(&mut g, &p, &cfg, out.latents, &mae).is_err());
    tokens.remove(&Modality::Rgb);
    assert!(encode(&mut g, &p, &cfg, &tokens, &mae).is_err());

    let mut bad = cfg.clone();
    bad.encoder.modalities = 2;
    assert!(ModelParams::init(&bad, 0).is_err());
    let mut bad = ModelConfig::desk(3, 4);
    bad.decoder.has_cross_attention = false;
    assert!(bad.validate().is_err());
}

#[test]
fn permuted_visible_order_gives_same_reconstruction() {
    for cfg in [ModelConfig::desk(1, 4), ModelConfig::desk(3, 4)] {
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        jitter(&mut params, 9, 0.2);
        let tokens = random_tokens(&cfg, 4);
        let rgb = [1usize, 4, 6, 11, 13];
        let h = [0usize, 7];
        let e = [9usize, 15];
        let run = |rgb: &[usize], h: &[usize], e: &[usize]| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, |_| false);
            let mut seqs = vec![(Modality::Rgb, &tokens[&Modality::Rgb], rgb)];
            if cfg.is_multimodal() {
                seqs.push((Modality::H, &tokens[&Modality::H], h));
                seqs.push((Modality::E, &tokens[&Modality::E], e));
            }
            let out = encode_ordered(&mut g, &p, &cfg, &seqs).unwrap();
            let pred = if cfg.is_multimodal() {
                decode_mmae_ordered(&mut g, &p, &cfg, out.latents, rgb).unwrap()
            } else {
                decode_mae_ordered(&mut g, &p, &cfg, out.latents, rgb).unwrap()
            };
            g.value(pred).clone()
        };
        let a = run(&rgb, &h, &e);
        let b = run(&[13, 4, 1, 11, 6], &[7, 0], &[15, 9]);
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }
}

#[test]
fn plan_text_feeds_the_model() {
    let cfg = ModelConfig::desk(1, 4);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let plan = MaskPlan::from_text("positions 16\nbudget 3\nrgb: 0 5 10\n").unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let loss = pretrain_loss(&mut g, &p, &cfg, &random_tokens(&cfg, 0), &plan, true).unwrap();
    assert!(g.value(loss).item() > 0.0);
}
