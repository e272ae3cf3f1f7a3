use rand::Rng;

use super::checkpoint::{checkpoint_bytes, checkpoint_from_bytes, CheckpointMeta};
use super::*;
use crate::autograd::{gradcheck, Graph, Mode, Pad2};
use crate::rng::stream_rng;
use crate::text::{encode_sentence, Alignment, Vocabulary};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        word_embed_dim: 6,
        image_channels: vec![4, 6],
        text_channels: vec![6, 8],
        blocks_per_stage: 1,
        num_classes: 4,
        dropout: 0.5,
        image_size: 8,
        text_len: 8,
        vocab_size: 10,
        bn_momentum: 0.1,
        bn_epsilon: 1e-5,
    }
}

fn tiny_model(seed: u64) -> DualPathModel {
    let config = tiny_config();
    let mut rng = stream_rng(seed, "model-init");
    let emb = Tensor::new(
        vec![10, 6],
        (0..60).map(|_| rng.gen_range(-0.4..0.4)).collect(),
    )
    .unwrap();
    DualPathModel::new(config, emb, &mut rng).unwrap()
}

fn tiny_vocab() -> Vocabulary {
    let corpus = (0..10).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    Vocabulary::build([corpus.as_str()], None, 1).unwrap()
}

fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, "imgs");
    let data = (0..n * 3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![n, 3, size, size], data).unwrap()
}

#[test]
fn image_features_have_shape_n_by_d_and_are_deterministic() {
    let mut model = tiny_model(1);
    let one = random_images(1, 8, 2);
    let mut two = Tensor::zeros(vec![2, 3, 8, 8]);
    two.data_mut()[..192].copy_from_slice(one.data());
    two.data_mut()[192..].copy_from_slice(one.data());

    let mut g = Graph::new();
    let mut rng = stream_rng(3, "d");
    let out = model.image_forward(&mut g, &two, Mode::Eval, &mut rng).unwrap();
    let f = g.value(out.features);
    assert_eq!(f.shape(), &[2, 8]);
    assert_eq!(&f.data()[..8], &f.data()[8..]);
    assert_eq!(out.features, out.clean);
}

#[test]
fn text_features_have_shape_n_by_d_and_are_deterministic() {
    let mut model = tiny_model(2);
    let vocab = tiny_vocab();
    let mut enc_rng = stream_rng(5, "enc");
    let code = encode_sentence("w1 w3 w5", &vocab, 8, Alignment::Left, &mut enc_rng).unwrap();
    let codes = vec![code.clone(), code];
    let mut g = Graph::new();
    let mut rng = stream_rng(6, "d");
    let out = model.text_forward(&mut g, &codes, Mode::Eval, &mut rng).unwrap();
    let f = g.value(out.features);
    assert_eq!(f.shape(), &[2, 8]);
    assert_eq!(&f.data()[..8], &f.data()[8..]);
}

#[test]
fn wrong_image_extent_is_a_dimension_error() {
    let mut model = tiny_model(3);
    let images = random_images(1, 16, 4);
    let mut g = Graph::new();
    assert!(matches!(
        model.image_backbone_features(&mut g, &images, Mode::Eval),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn backward_populates_every_unfrozen_parameter() {
    let mut model = tiny_model(4);
    let vocab = tiny_vocab();
    let images = random_images(3, 8, 5);
    let mut enc_rng = stream_rng(7, "enc");
    let codes: Vec<_> = (0..3)
        .map(|i| {
            encode_sentence(&format!("w{i} w{} w2", i + 4), &vocab, 8, Alignment::Left, &mut enc_rng)
                .unwrap()
        })
        .collect();

    let mut g = Graph::new();
    let mut rng = stream_rng(8, "d");
    let img = model.image_forward(&mut g, &images, Mode::Train, &mut rng).unwrap();
    let txt = model.text_forward(&mut g, &codes, Mode::Train, &mut rng).unwrap();
    let w = model.w_share_var(&mut g);
    let li = g.matmul(img.features, w).unwrap();
    let lt = g.matmul(txt.features, w).unwrap();
    let ci = g.softmax_cross_entropy(li, &[0, 1, 2]).unwrap();
    let ct = g.softmax_cross_entropy(lt, &[0, 1, 2]).unwrap();
    let total = g.add(ci, ct).unwrap();
    let mut params = std::mem::take(&mut model.params);
    g.backward(total, &mut params).unwrap();

    for (_, p) in params.iter() {
        let grad = p.value.grad();
        assert!(grad.is_some(), "parameter {} received no gradient", p.name);
        assert!(
            grad.unwrap().iter().all(|v| v.is_finite()),
            "parameter {} has a non-finite gradient",
            p.name
        );
    }
}

#[test]
fn shared_classifier_is_pulled_by_both_modalities() {
    let mut model = tiny_model(5);
    let vocab = tiny_vocab();
    let images = random_images(2, 8, 9);
    let mut enc_rng = stream_rng(10, "enc");
    let codes: Vec<_> = ["w0 w1", "w2 w3"]
        .iter()
        .map(|s| encode_sentence(s, &vocab, 8, Alignment::Left, &mut enc_rng).unwrap())
        .collect();

    for path in ["visual", "textual"] {
        let mut g = Graph::new();
        let mut rng = stream_rng(11, "d");
        let feats = if path == "visual" {
            model.image_forward(&mut g, &images, Mode::Train, &mut rng).unwrap()
        } else {
            model.text_forward(&mut g, &codes, Mode::Train, &mut rng).unwrap()
        };
        let logits = model.classify(&mut g, feats.features).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        let mut params = model.params.clone();
        params.zero_grads();
        g.backward(loss, &mut params).unwrap();
        let wgrad = params.get(model.w_share()).value.grad().unwrap();
        assert!(
            wgrad.iter().any(|v| v.abs() > 1e-12),
            "{path} loss leaves W_share untouched"
        );
    }
}

#[test]
fn heads_are_independent() {
    let mut model = tiny_model(6);
    let images = random_images(2, 8, 12);
    let before = {
        let mut g = Graph::new();
        let mut rng = stream_rng(13, "d");
        let out = model.image_forward(&mut g, &images, Mode::Eval, &mut rng).unwrap();
        g.value(out.features).data().to_vec()
    };
    for id in model.text_params() {
        let p = model.params.get_mut(id);
        for v in p.value.data_mut() {
            *v = 0.0;
        }
    }
    let after = {
        let mut g = Graph::new();
        let mut rng = stream_rng(13, "d");
        let out = model.image_forward(&mut g, &images, Mode::Eval, &mut rng).unwrap();
        g.value(out.features).data().to_vec()
    };
    assert_eq!(before, after);
}

#[test]
fn features_are_finite_across_seeds() {
    let vocab = tiny_vocab();
    for seed in 0..10 {
        let mut model = tiny_model(100 + seed);
        let images = random_images(2, 8, 50 + seed);
        let mut enc_rng = stream_rng(14, "enc");
        let codes: Vec<_> = ["w0 w5 w9", "w7 w1"]
            .iter()
            .map(|s| encode_sentence(s, &vocab, 8, Alignment::Left, &mut enc_rng).unwrap())
            .collect();
        let mut g = Graph::new();
        let mut rng = stream_rng(15, "d");
        let img = model.image_forward(&mut g, &images, Mode::Eval, &mut rng).unwrap();
        let txt = model.text_forward(&mut g, &codes, Mode::Eval, &mut rng).unwrap();
        g.value(img.features).check_finite("image features").unwrap();
        g.value(txt.features).check_finite("text features").unwrap();
    }
}

#[test]
fn zero_weight_block_with_identity_bn_is_relu() {
    let config = tiny_config();
    let mut params = ParamSet::new();
    let mut bns = Vec::new();
    let mut rng = stream_rng(16, "blk");
    let block = ResidualBlock::new(
        &mut params,
        &mut bns,
        &config,
        "blk",
        4,
        4,
        (3, 3),
        Pad2::symmetric(1, 1),
        (1, 1),
        ShortcutKind::Identity,
        &mut rng,
    )
    .unwrap();
    for (_, p) in params.iter_mut() {
        if p.name.contains("conv") {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
    }
    let x = Tensor::new(vec![1, 4, 3, 3], (0..36).map(|i| i as f64 - 18.0).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block.forward(&mut g, &params, &mut bns, xv, Mode::Eval).unwrap();
    assert_eq!(g.value(y).shape(), x.shape());
    for (out, orig) in g.value(y).data().iter().zip(x.data()) {
        assert!((out - orig.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn identity_shortcut_with_mismatched_channels_is_a_config_error() {
    let config = tiny_config();
    let mut params = ParamSet::new();
    let mut bns = Vec::new();
    let mut rng = stream_rng(17, "blk");
    let err = ResidualBlock::new(
        &mut params,
        &mut bns,
        &config,
        "blk",
        4,
        6,
        (3, 3),
        Pad2::symmetric(1, 1),
        (1, 1),
        ShortcutKind::Identity,
        &mut rng,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn gradient_flows_to_block_input_through_both_branches() {
    let mut rng_x = stream_rng(18, "blk-x");
    let x = Tensor::new(
        vec![2, 3, 3, 3],
        (0..54).map(|_| rng_x.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let res = gradcheck::check(
        |g, vars| {
            let config = tiny_config();
            let mut params = ParamSet::new();
            let mut bns = Vec::new();
            let mut rng = stream_rng(19, "blk-init");
            let block = ResidualBlock::new(
                &mut params,
                &mut bns,
                &config,
                "blk",
                3,
                3,
                (3, 3),
                Pad2::symmetric(1, 1),
                (1, 1),
                ShortcutKind::Identity,
                &mut rng,
            )?;
            let y = block.forward(g, &params, &mut bns, vars[0], Mode::Train)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(res.passes(1e-4), "max rel error {}", res.max_rel_error);
}

#[test]
fn classify_contracts() {
    // identity classifier: D == N, W = I
    let mut config = tiny_config();
    config.num_classes = config.embed_dim;
    let mut rng = stream_rng(20, "model-init");
    let emb = Tensor::zeros(vec![10, 6]);
    let model = DualPathModel::new(config.clone(), emb, &mut rng).unwrap();
    let mut identity = Tensor::zeros(vec![8, 8]);
    for i in 0..8 {
        identity.data_mut()[i * 8 + i] = 1.0;
    }
    let mut model = model;
    model.params.get_mut(model.w_share()).value = {
        let mut t = identity;
        t.set_requires_grad(true);
        t
    };
    let feats = Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.25).collect()).unwrap();
    let mut g = Graph::new();
    let fv = g.input(feats.clone());
    let logits = model.classify(&mut g, fv).unwrap();
    assert_eq!(g.value(logits).data(), feats.data());

    // zero features -> zero logits
    let zv = g.input(Tensor::zeros(vec![2, 8]));
    let zl = model.classify(&mut g, zv).unwrap();
    assert!(g.value(zl).data().iter().all(|v| *v == 0.0));
}

#[test]
fn permuting_classifier_columns_permutes_both_paths_identically() {
    let mut model = tiny_model(7);
    let vocab = tiny_vocab();
    let images = random_images(1, 8, 21);
    let mut enc_rng = stream_rng(22, "enc");
    let codes =
        vec![encode_sentence("w1 w2", &vocab, 8, Alignment::Left, &mut enc_rng).unwrap()];

    let logits = |model: &mut DualPathModel| -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let mut rng = stream_rng(23, "d");
        let img = model.image_forward(&mut g, &images, Mode::Eval, &mut rng).unwrap();
        let txt = model.text_forward(&mut g, &codes, Mode::Eval, &mut rng).unwrap();
        let w = model.w_share_var(&mut g);
        let li = g.matmul(img.features, w).unwrap();
        let lt = g.matmul(txt.features, w).unwrap();
        (g.value(li).data().to_vec(), g.value(lt).data().to_vec())
    };

    let (img_before, txt_before) = logits(&mut model);
    // rotate classifier columns by one
    let n = model.config.num_classes;
    let d = model.config.embed_dim;
    {
        let w = &mut model.params.get_mut(model.w_share()).value;
        let old = w.data().to_vec();
        for r in 0..d {
            for c in 0..n {
                w.data_mut()[r * n + (c + 1) % n] = old[r * n + c];
            }
        }
    }
    let (img_after, txt_after) = logits(&mut model);
    for c in 0..n {
        assert!((img_after[(c + 1) % n] - img_before[c]).abs() < 1e-12);
        assert!((txt_after[(c + 1) % n] - txt_before[c]).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut model = tiny_model(8);
    // make optimizer and batch-norm state nontrivial
    model.params.get_mut(model.w_share()).momentum[3] = 0.125;
    model.set_image_backbone_frozen(true);
    model.bn_entries_mut()[0].state.running_mean[0] = 0.5;
    let meta = CheckpointMeta { stage: 1, epochs_done: 7, seed: 42 };

    let bytes = checkpoint_bytes(&model, meta);
    let (loaded, meta2) = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(meta, meta2);
    let bytes2 = checkpoint_bytes(&loaded, meta2);
    assert_eq!(bytes, bytes2);
    assert!(loaded.image_backbone_frozen());
}

#[test]
fn loaded_model_produces_identical_features() {
    let mut model = tiny_model(9);
    let images = random_images(2, 8, 24);
    let before = {
        let mut g = Graph::new();
        let mut rng = stream_rng(25, "d");
        let out = model.image_forward(&mut g, &images, Mode::Eval, &mut rng).unwrap();
        g.value(out.features).data().to_vec()
    };
    let meta = CheckpointMeta { stage: 1, epochs_done: 0, seed: 0 };
    let bytes = checkpoint_bytes(&model, meta);
    let (mut loaded, _) = checkpoint_from_bytes(&bytes).unwrap();
    let after = {
        let mut g = Graph::new();
        let mut rng = stream_rng(25, "d");
        let out = loaded.image_forward(&mut g, &images, Mode::Eval, &mut rng).unwrap();
        g.value(out.features).data().to_vec()
    };
    assert_eq!(before, after);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = tiny_model(10);
    let meta = CheckpointMeta { stage: 1, epochs_done: 0, seed: 0 };
    let mut bytes = checkpoint_bytes(&model, meta);

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(checkpoint_from_bytes(&wrong_magic), Err(Error::Format(_))));

    let truncated = &bytes[..bytes.len() - 40];
    assert!(matches!(checkpoint_from_bytes(truncated), Err(Error::Format(_))));

    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn config_kv_round_trips_and_hash_tracks_content() {
    let config = tiny_config();
    let kv = config.kv_pairs();
    let back = ModelConfig::from_kv(&kv).unwrap();
    assert_eq!(back, config);
    let mut other = config.clone();
    other.embed_dim = 16;
    assert_ne!(config.hash(), other.hash());
    assert_eq!(config.hash(), back.hash());
}

#[test]
fn stack_images_validates_shapes() {
    let a = Tensor::zeros(vec![3, 4, 4]);
    let b = Tensor::zeros(vec![3, 4, 4]);
    let batch = stack_images(&[&a, &b]).unwrap();
    assert_eq!(batch.shape(), &[2, 3, 4, 4]);
    let c = Tensor::zeros(vec![3, 2, 2]);
    assert!(matches!(stack_images(&[&a, &c]), Err(Error::Dimension(_))));
    assert!(matches!(stack_images(&[]), Err(Error::Data(_))));
}

#[test]
fn frozen_backbone_runs_eval_batchnorm_during_training() {
    let mut model = tiny_model(11);
    model.set_image_backbone_frozen(true);
    let images = random_images(2, 8, 26);
    let stats_before: Vec<f64> = model.bn_entries()[0].state.running_mean.clone();
    let mut g = Graph::new();
    model.image_backbone_features(&mut g, &images, Mode::Train).unwrap();
    let stats_after: Vec<f64> = model.bn_entries()[0].state.running_mean.clone();
    assert_eq!(stats_before, stats_after);
}
