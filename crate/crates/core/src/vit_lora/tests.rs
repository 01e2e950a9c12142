use super::*;
use crate::tensor_nn::{layer_norm, Graph, Mode, Module, Parameter, RngState, Tensor};

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product::<usize>();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.uniform_range(lo, hi)).collect::<Vec<_>>()).unwrap()
}

fn desk() -> VitConfig {
    VitConfig::default()
}

fn small() -> VitConfig {
    VitConfig { image_size: 8, patch_size: 4, channels: 1, dim: 16, depth: 2, heads: 2, mlp_ratio: 2.0, num_classes: 2 }
}

/// Randomises every LoRA `B` so the low-rank path is live.
fn perturb_lora(m: &mut VitModel<f64>, rng: &mut RngState) {
    m.visit_mut("", &mut |n, p| {
        if n.ends_with("lora.B") {
            let shape = p.value.shape().to_vec();
            p.value = random(&shape, -0.3, 0.3, rng);
        }
    });
}

#[test]
fn token_counts() {
    let mut rng = RngState::new(1);
    let m = VitModel::<f32>::new(&desk(), &mut rng).unwrap();
    let mut g = Graph::inference();
    let x = m.embed_tokens(&mut g, &Tensor::zeros([2, 1, 32, 32])).unwrap();
    assert_eq!(g.value(x).shape(), &[2, 17, 64]);
    let err = m.embed_tokens(&mut Graph::inference(), &Tensor::zeros([1, 1, 28, 28])).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension(_)));
}

#[test]
fn zero_image_and_projection_leave_positions() {
    let mut rng = RngState::new(2);
    let mut m = VitModel::<f64>::new(&small(), &mut rng).unwrap();
    m.patch_embed.weight.value.fill(0.0);
    let mut g = Graph::inference();
    let x = m.embed_tokens(&mut g, &Tensor::zeros([1, 1, 8, 8])).unwrap();
    let tokens = g.value(x);
    let pos = &m.pos_embed.value;
    for t in 1..5 {
        assert_eq!(tokens.row(t), pos.row(t));
    }
    let cls: Vec<f64> = m.cls_token.value.data().iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
    assert_eq!(tokens.row(0), cls.as_slice());
}

#[test]
fn patchify_layout() {
    let cfg = VitConfig { image_size: 4, patch_size: 2, dim: 4, heads: 2, ..small() };
    let m = VitModel::<f64>::new(&cfg, &mut RngState::new(0)).unwrap();
    let img = Tensor::from_f64([1, 1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
    let p = m.patchify(&img).unwrap();
    assert_eq!(p.shape(), &[1, 4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn single_token_attention_is_identity_weighting() {
    let mut rng = RngState::new(3);
    let m = VitModel::<f64>::new(&small(), &mut rng).unwrap();
    let block = &m.blocks[0];
    let mut g = Graph::inference();
    let x = g.constant(random(&[1, 1, 16], -1.0, 1.0, &mut rng));
    let (_, att) = block.attention(&mut g, x, Mode::Eval, &mut rng).unwrap();
    assert!(g.attention_probs(att).unwrap().iter().all(|&p| p == 1.0));
}

#[test]
fn zero_query_key_weights_give_uniform_attention() {
    let mut rng = RngState::new(4);
    let mut m = VitModel::<f64>::new(&small(), &mut rng).unwrap();
    let d = 16;
    let block = &mut m.blocks[0];
    for v in &mut block.qkv.base.weight.value.data_mut()[..2 * d * d] {
        *v = 0.0;
    }
    block.qkv.base.bias.as_mut().unwrap().fill_zero_for_test();
    let mut g = Graph::inference();
    let x = g.constant(random(&[2, 5, d], -1.0, 1.0, &mut rng));
    let (_, att) = m.blocks[0].attention(&mut g, x, Mode::Eval, &mut rng).unwrap();
    for &p in g.attention_probs(att).unwrap() {
        assert!((p - 0.2).abs() < 1e-12);
    }
}

trait ZeroFill {
    fn fill_zero_for_test(&mut self);
}

impl ZeroFill for Parameter<f64> {
    fn fill_zero_for_test(&mut self) {
        self.value.fill(0.0);
    }
}

#[test]
fn attention_matches_per_head_loop() {
    let mut rng = RngState::new(5);
    let cfg = small();
    let mut m = VitModel::<f64>::new(&cfg, &mut rng).unwrap();
    // Larger weights so attention is far from uniform.
    m.visit_mut("", &mut |n, p| {
        if n.ends_with("weight") {
            p.value = p.value.map(|v| v * 25.0);
        }
    });
    m.attach_lora(&LoraConfig { rank: 4, ..LoraConfig::default() }, &mut rng).unwrap();
    perturb_lora(&mut m, &mut rng);
    let block = &m.blocks[0];
    let (n, d, heads) = (3, cfg.dim, cfg.heads);
    let dh = d / heads;
    let tokens = random(&[1, n, d], -1.0, 1.0, &mut rng);

    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let (out, att) = block.attention(&mut g, x, Mode::Eval, &mut rng).unwrap();
    let probs = g.attention_probs(att).unwrap();
    for row in probs.chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    // Literal reference: dense effective weights, explicit head loop.
    let dense = |l: &LoraLinear<f64>| {
        let w = match &l.lora {
            Some(lr) => l.base.weight.value.zip_map(&lr.delta(), |a, b| a + b).unwrap(),
            None => l.base.weight.value.clone(),
        };
        (w, l.base.bias.as_ref().unwrap().value.clone())
    };
    let apply = |x: &[f64], (w, b): &(Tensor<f64>, Tensor<f64>)| -> Vec<f64> {
        let (o, i) = w.dims2().unwrap();
        (0..o).map(|r| (0..i).map(|c| w.at2(r, c) * x[c]).sum::<f64>() + b.data()[r]).collect()
    };
    let flat = tokens.clone().reshape([n, d]).unwrap();
    let normed = layer_norm(&flat, &block.norm1.gain.value, &block.norm1.bias.value, 1e-5).unwrap();
    let qkv_w = dense(&block.qkv);
    let qkv: Vec<Vec<f64>> = (0..n).map(|i| apply(normed.row(i), &qkv_w)).collect();
    let mut heads_out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| qkv[i][h * dh + t] * qkv[j][d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            scores.iter_mut().for_each(|s| *s = (*s - max).exp() / z);
            for t in 0..dh {
                heads_out[i][h * dh + t] = (0..n).map(|j| scores[j] * qkv[j][2 * d + h * dh + t]).sum();
            }
        }
    }
    let proj_w = dense(&block.proj);
    let got = g.value(out);
    for i in 0..n {
        let projected = apply(&heads_out[i], &proj_w);
        for c in 0..d {
            let expect = flat.at2(i, c) + projected[c];
            assert!((got.data()[i * d + c] - expect).abs() < 1e-5, "token {i} dim {c}");
        }
    }
}

#[test]
fn forward_shapes_and_batch_independence() {
    let mut rng = RngState::new(6);
    let m = VitModel::<f32>::new(&desk(), &mut rng).unwrap();
    let one = random(&[1, 1, 32, 32], 0.0, 1.0, &mut rng).cast::<f32>();
    let two = Tensor::stack(&[one.index_axis0(0), one.index_axis0(0)]).unwrap();
    let out = m.forward(&two, Mode::Eval, &mut rng).unwrap();
    assert_eq!(out.logits.shape(), &[2, 2]);
    assert_eq!(out.embedding.shape(), &[2, 64]);
    assert_eq!(out.logits.row(0), out.logits.row(1));
    assert_eq!(out.embedding.row(0), out.embedding.row(1));
    assert!(out.logits.all_finite() && out.embedding.all_finite());
}

#[test]
fn one_pixel_changes_logits() {
    let mut rng = RngState::new(7);
    let m = VitModel::<f64>::new(&desk(), &mut rng).unwrap();
    let img = random(&[1, 1, 32, 32], 0.0, 1.0, &mut rng);
    let mut poked = img.clone();
    poked.data_mut()[100] += 0.5;
    let a = m.forward(&img, Mode::Eval, &mut rng).unwrap();
    let b = m.forward(&poked, Mode::Eval, &mut rng).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits).unwrap() > 0.0);
}

#[test]
fn permuting_the_batch_permutes_outputs() {
    let mut rng = RngState::new(8);
    let mut m = VitModel::<f64>::new(&small(), &mut rng).unwrap();
    m.attach_lora(&LoraConfig { rank: 4, ..LoraConfig::default() }, &mut rng).unwrap();
    perturb_lora(&mut m, &mut rng);
    let imgs: Vec<Tensor<f64>> = (0..4).map(|_| random(&[1, 8, 8], 0.0, 1.0, &mut rng)).collect();
    let fwd = Tensor::stack(&imgs).unwrap();
    let rev: Vec<Tensor<f64>> = imgs.iter().rev().cloned().collect();
    let bwd = Tensor::stack(&rev).unwrap();
    let a = m.forward(&fwd, Mode::Eval, &mut rng).unwrap();
    let b = m.forward(&bwd, Mode::Eval, &mut rng).unwrap();
    for i in 0..4 {
        assert!(ops_rows_close(a.logits.row(i), b.logits.row(3 - i)));
    }
}

fn ops_rows_close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

#[test]
fn zero_init_is_bit_identical_to_plain_model() {
    let mut rng = RngState::new(9);
    let plain = VitModel::<f32>::new(&desk(), &mut rng).unwrap();
    let mut adapted = plain.clone();
    adapted.attach_lora(&LoraConfig::default(), &mut rng).unwrap();
    let imgs = random(&[3, 1, 32, 32], 0.0, 1.0, &mut rng).cast::<f32>();
    let a = plain.forward(&imgs, Mode::Eval, &mut rng).unwrap();
    let b = adapted.forward(&imgs, Mode::Eval, &mut rng).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.logits), bits(&b.logits));
    assert_eq!(bits(&a.embedding), bits(&b.embedding));
}

#[test]
fn merged_model_agrees() {
    let mut rng = RngState::new(10);
    let mut m = VitModel::<f64>::new(&small(), &mut rng).unwrap();
    m.attach_lora(&LoraConfig { rank: 4, ..LoraConfig::default() }, &mut rng).unwrap();
    perturb_lora(&mut m, &mut rng);
    let merged = m.merged();
    assert!(merged.lora_config().is_none());
    assert!(!merged.param_names().iter().any(|n| n.contains("lora")));
    let imgs = random(&[20, 1, 8, 8], 0.0, 1.0, &mut rng);
    let a = m.forward(&imgs, Mode::Eval, &mut rng).unwrap();
    let b = merged.forward(&imgs, Mode::Eval, &mut rng).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits).unwrap() < 1e-5);
}

#[test]
fn attach_freezes_everything_but_factors_and_head() {
    let mut rng = RngState::new(11);
    let mut m = VitModel::<f32>::new(&small(), &mut rng).unwrap();
    m.attach_lora(&LoraConfig { rank: 4, ..LoraConfig::default() }, &mut rng).unwrap();
    m.visit("", &mut |n, p| {
        let expect = n.contains(".lora.") || n.starts_with("head.");
        assert_eq!(p.is_trainable(), expect, "{n}");
    });
    assert!(m.attach_lora(&LoraConfig::default(), &mut rng).is_err());
    // Rank larger than the 16-wide layers is rejected up front.
    let mut m = VitModel::<f32>::new(&small(), &mut rng).unwrap();
    assert!(m.attach_lora(&LoraConfig { rank: 17, ..LoraConfig::default() }, &mut rng).is_err());
}

#[test]
fn lora_layer_count_formula() {
    let mut rng = RngState::new(12);
    let mut l = LoraLinear::<f32>::plain(crate::tensor_nn::Linear::trunc_normal(64, 64, 0.02, true, &mut rng));
    l.attach(&LoraConfig::default(), &mut rng);
    assert_eq!(l.param_counts().0, 8 * (64 + 64));
}

/// Σ over targeted layers of r·(d_in + d_out), plus the head.
fn trainable_by_formula(cfg: &VitConfig, lora: &LoraConfig) -> usize {
    let (d, h, r) = (cfg.dim, cfg.mlp_hidden(), lora.rank);
    let mut per_block = 0;
    if lora.targets(LoraTarget::AttentionQkv) {
        per_block += r * (d + 3 * d);
    }
    if lora.targets(LoraTarget::FullyConnected) {
        per_block += r * (d + d) + r * (d + h) + r * (h + d);
    }
    cfg.depth * per_block + d * cfg.num_classes + cfg.num_classes
}

#[test]
fn desk_parameter_budget() {
    let cfg = desk();
    let lora = LoraConfig::default();
    let mut rng = RngState::new(13);
    let mut m = VitModel::<f32>::new(&cfg, &mut rng).unwrap();
    let (_, frozen_total) = m.trainable_param_count();
    m.attach_lora(&lora, &mut rng).unwrap();
    let (trainable, total) = m.trainable_param_count();
    assert_eq!(trainable, trainable_by_formula(&cfg, &lora));
    assert_eq!(total, frozen_total + trainable - (cfg.dim * 2 + 2));
    // Hand count for D=64, depth 4, mlp 128, 17 tokens, 8x8 patches:
    // LoRA 4·(2048+1024+1536+1536) + head 130; base 139 328 scalars.
    assert_eq!(trainable, 24_706);
    assert_eq!(total, 164_034);
    let ratio = trainable as f64 / total as f64;
    assert!((ratio - 0.150_615).abs() < 1e-6, "{ratio}");

    let mut r1 = VitModel::<f32>::new(&cfg, &mut rng).unwrap();
    r1.attach_lora(&LoraConfig { rank: 1, ..lora }, &mut rng).unwrap();
    assert!(r1.trainable_param_count().0 < trainable);
}

#[test]
fn softmax_probabilities_for_scores() {
    let logits = Tensor::<f64>::from_f64([2, 2], &[0.0, 0.0, -40.0, 40.0]).unwrap();
    let p = morph_probabilities(&logits);
    assert!((p[0] - 0.5).abs() < 1e-12 && p[1] > 0.999);
}
