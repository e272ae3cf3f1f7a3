use rand::Rng;

use super::*;
use crate::dataset::{generate_corpus, AttributeGrammar, SplitSizes};
use crate::model::checkpoint::checkpoint_bytes;
use crate::model::ModelConfig;
use crate::rng::stream_rng;
use crate::text::{init_word_embedding, EmbeddingSource};

fn tiny_setup(seed: u64) -> (Dataset, Vocabulary, DualPathModel) {
    let grammar = AttributeGrammar::desk_default().truncated(4, 3, 3, 2);
    let sizes = SplitSizes { train: 6, val: 2, test: 2 };
    let dataset = generate_corpus(&grammar, sizes, 2, 16, seed).unwrap();
    let captions: Vec<&str> = dataset
        .train
        .iter()
        .flat_map(|g| g.captions.iter().map(|s| s.as_str()))
        .collect();
    let vocab = Vocabulary::build(captions, None, 1).unwrap();
    let config = ModelConfig {
        embed_dim: 8,
        word_embed_dim: 6,
        image_channels: vec![4, 6],
        text_channels: vec![6, 8],
        blocks_per_stage: 1,
        num_classes: dataset.num_train_classes(),
        dropout: 0.5,
        image_size: 16,
        text_len: 8,
        vocab_size: vocab.len(),
        bn_momentum: 0.1,
        bn_epsilon: 1e-5,
    };
    let mut init_rng = stream_rng(seed, "model-init");
    let emb = init_word_embedding(
        &vocab,
        EmbeddingSource::Random { dim: config.word_embed_dim },
        &mut init_rng,
    )
    .unwrap();
    let model = DualPathModel::new(config, emb, &mut init_rng).unwrap();
    (dataset, vocab, model)
}

fn tiny_stage1_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        ..TrainConfig::stage1_defaults(seed)
    }
}

fn tiny_stage2_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        ..TrainConfig::stage2_defaults(seed)
    }
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.cfg");
    let mut config = TrainConfig::stage2_defaults(99);
    config.strategy = NegativeStrategy::Hardest;
    config.patience = 20;
    config.save(&path).unwrap();
    let loaded = TrainConfig::load(&path).unwrap();
    assert_eq!(loaded, config);
}

#[test]
fn unknown_config_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.cfg");
    std::fs::write(&path, "stage=1\nwat=7\n").unwrap();
    match TrainConfig::load(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn epoch_order_is_a_partition_and_reseeds_per_epoch() {
    let (dataset, _, _) = tiny_setup(1);
    let split = dataset.split(Split::Train);
    let order0 = epoch_order(split, 7, "t.shuffle", 0);
    let order0_again = epoch_order(split, 7, "t.shuffle", 0);
    let order1 = epoch_order(split, 7, "t.shuffle", 1);
    assert_eq!(order0, order0_again);
    assert_ne!(order0, order1);

    let batches = epoch_batches(&order0, 4);
    let mut seen: Vec<SampleRef> = batches.into_iter().flatten().collect();
    assert_eq!(seen.len(), 12);
    seen.sort_by_key(|s| (s.group, s.caption));
    seen.dedup();
    assert_eq!(seen.len(), 12, "every caption appears exactly once");
}

#[test]
fn lone_trailing_sample_joins_the_previous_batch() {
    let order: Vec<SampleRef> = (0..9).map(|i| SampleRef { group: i, caption: 0 }).collect();
    let batches = epoch_batches(&order, 4);
    assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
}

#[test]
fn stage1_freezes_the_backbone_bitwise() {
    let (dataset, vocab, mut model) = tiny_setup(2);
    let before: Vec<Vec<f64>> = model
        .image_backbone_params()
        .iter()
        .map(|&id| model.params.get(id).value.data().to_vec())
        .collect();
    let config = tiny_stage1_config(3, 2);
    train_stage1(&mut model, &dataset, &vocab, &config, None, 0).unwrap();
    let after: Vec<Vec<f64>> = model
        .image_backbone_params()
        .iter()
        .map(|&id| model.params.get(id).value.data().to_vec())
        .collect();
    assert_eq!(before, after);

    // and something else did train
    let w = model.params.get(model.w_share()).momentum.clone();
    assert!(w.iter().any(|v| v.abs() > 0.0));
}

#[test]
fn stage2_updates_the_backbone() {
    let (dataset, vocab, mut model) = tiny_setup(4);
    let config1 = tiny_stage1_config(5, 1);
    train_stage1(&mut model, &dataset, &vocab, &config1, None, 0).unwrap();
    let before: Vec<f64> = {
        let id = model.image_backbone_params()[0];
        model.params.get(id).value.data().to_vec()
    };
    let config2 = tiny_stage2_config(5, 1);
    train_stage2(&mut model, &dataset, &vocab, &config2, None, 0).unwrap();
    let after: Vec<f64> = {
        let id = model.image_backbone_params()[0];
        model.params.get(id).value.data().to_vec()
    };
    assert_ne!(before, after);
    assert!(!model.image_backbone_frozen());
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let run = || {
        let (dataset, vocab, mut model) = tiny_setup(6);
        let config = tiny_stage1_config(7, 3);
        let log = train_stage1(&mut model, &dataset, &vocab, &config, None, 0).unwrap();
        let meta = CheckpointMeta { stage: 1, epochs_done: 3, seed: 7 };
        (log, checkpoint_bytes(&model, meta))
    };
    let (log_a, bytes_a) = run();
    let (log_b, bytes_b) = run();
    assert!(log_a.same_trajectory(&log_b));
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn resume_equals_uninterrupted_training_bitwise() {
    let total_epochs = 4;
    let split_at = 2;

    let (dataset, vocab, mut straight) = tiny_setup(8);
    let config = tiny_stage2_config(9, total_epochs);
    train_stage2(&mut straight, &dataset, &vocab, &config, None, 0).unwrap();
    let meta = CheckpointMeta { stage: 2, epochs_done: total_epochs as u64, seed: 9 };
    let straight_bytes = checkpoint_bytes(&straight, meta);

    let (_, _, mut resumed) = tiny_setup(8);
    let mut first_leg = config.clone();
    first_leg.epochs = split_at;
    train_stage2(&mut resumed, &dataset, &vocab, &first_leg, None, 0).unwrap();
    let mid_meta = CheckpointMeta { stage: 2, epochs_done: split_at as u64, seed: 9 };
    let mid_bytes = checkpoint_bytes(&resumed, mid_meta);
    let (mut reloaded, loaded_meta) =
        crate::model::checkpoint::checkpoint_from_bytes(&mid_bytes).unwrap();
    assert_eq!(loaded_meta.epochs_done, split_at as u64);
    train_stage2(&mut reloaded, &dataset, &vocab, &config, None, split_at).unwrap();
    let resumed_bytes = checkpoint_bytes(&reloaded, meta);

    assert_eq!(straight_bytes, resumed_bytes);
}

#[test]
fn training_logs_one_record_per_epoch_with_monotone_numbering() {
    let (dataset, vocab, mut model) = tiny_setup(10);
    let config = tiny_stage1_config(11, 3);
    let log = train_stage1(&mut model, &dataset, &vocab, &config, None, 0).unwrap();
    assert_eq!(log.records.len(), 3);
    for (i, r) in log.records.iter().enumerate() {
        assert_eq!(r.epoch, i);
        assert_eq!(r.rank_loss, 0.0, "stage 1 never evaluates the ranking term");
    }
}

#[test]
fn batch_size_larger_than_dataset_is_a_config_error() {
    let (dataset, vocab, mut model) = tiny_setup(12);
    let mut config = tiny_stage1_config(13, 1);
    config.batch_size = 1000;
    assert!(matches!(
        train_stage1(&mut model, &dataset, &vocab, &config, None, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn stage_mismatch_is_a_config_error() {
    let (dataset, vocab, mut model) = tiny_setup(14);
    let config = tiny_stage2_config(15, 1);
    assert!(matches!(
        train_stage1(&mut model, &dataset, &vocab, &config, None, 0),
        Err(Error::Config(_))
    ));
    let config = tiny_stage1_config(15, 1);
    assert!(matches!(
        train_stage2(&mut model, &dataset, &vocab, &config, None, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn stage_presets_are_enforced() {
    let (dataset, vocab, mut model) = tiny_setup(16);
    let mut config = tiny_stage1_config(17, 1);
    config.lambda1 = 0.5;
    assert!(matches!(
        train_stage1(&mut model, &dataset, &vocab, &config, None, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn cadence_checkpoints_appear_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, vocab, mut model) = tiny_setup(18);
    let mut config = tiny_stage1_config(19, 4);
    config.checkpoint_every = 2;
    train_stage1(&mut model, &dataset, &vocab, &config, Some(dir.path()), 0).unwrap();
    assert!(dir.path().join("checkpoint_epoch_2.dpck").exists());
    assert!(dir.path().join("checkpoint_epoch_4.dpck").exists());
    assert!(!dir.path().join("checkpoint_epoch_3.dpck").exists());
}

#[test]
fn train_log_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.tsv");
    let log = TrainLog {
        records: vec![
            EpochRecord { epoch: 0, err_img: 0.5, err_text: 0.25, rank_loss: 0.0, total_loss: 3.5, seconds: 0.125 },
            EpochRecord { epoch: 1, err_img: 0.125, err_text: 0.0, rank_loss: 0.5, total_loss: 1.25, seconds: 0.5 },
        ],
    };
    log.save(&path).unwrap();
    let loaded = TrainLog::load(&path).unwrap();
    assert!(loaded.same_trajectory(&log));
}

#[test]
fn eval_classification_error_is_a_fraction() {
    let (dataset, vocab, mut model) = tiny_setup(20);
    let (ei, et) = eval_classification_error(&mut model, &dataset, Split::Train, &vocab).unwrap();
    assert!((0.0..=1.0).contains(&ei));
    assert!((0.0..=1.0).contains(&et));
}

#[test]
fn augment_draw_matches_cached_flip_decision() {
    // The pooled-feature cache replays the same single draw per sample that
    // augment_image consumes, keeping both code paths on one rng schedule.
    let (dataset, _, _) = tiny_setup(21);
    let image = &dataset.train[0].image;
    for seed in 0..20 {
        let mut a = stream_rng(seed, "flip");
        let mut b = stream_rng(seed, "flip");
        let augmented = augment_image(image, &mut a, crate::dataset::AugMode::Train);
        let flip = b.gen::<f64>() < 0.5;
        let expected = if flip { hflip(image) } else { image.clone() };
        assert_eq!(augmented, expected);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>(), "rng streams stay aligned");
    }
}
