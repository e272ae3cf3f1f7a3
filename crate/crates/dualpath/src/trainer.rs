//! The two-stage training procedure.
//!
//! Stage I freezes the image backbone and minimizes the instance loss over
//! both paths; stage II unfreezes everything and adds the ranking loss.
//! Every stochastic choice draws from a stream keyed by (seed, purpose,
//! epoch), so a run is a pure function of its seed and resuming from a
//! checkpoint is bitwise-equal to never having stopped.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, Mode};
use crate::dataset::{augment_image, hflip, Dataset, ImageTextGroup, Split};
use crate::error::{Error, Result};
use crate::model::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::model::{stack_images, DualPathModel};
use crate::objectives::{
    combined_loss, instance_loss, ranking_loss, sample_negatives, LossWeights, NegativeStrategy,
};
use crate::rng::epoch_rng;
use crate::tensor::Tensor;
use crate::text::{encode_sentence, Alignment, TextCode, Vocabulary};

/// Full training configuration; field names double as the keys of the
/// on-disk config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub shift_mode: Alignment,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub strategy: NegativeStrategy,
    /// Stop after this many epochs without train-error improvement (0 = off).
    pub patience: usize,
    /// Stop once both paths' train error falls to this level (0 = off).
    pub early_stop_error: f64,
}

impl TrainConfig {
    pub fn stage1_defaults(seed: u64) -> Self {
        TrainConfig {
            stage: 1,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 300,
            lambda1: 0.0,
            lambda2: 1.0,
            lambda3: 1.0,
            margin: 1.0,
            shift_mode: Alignment::Shift,
            seed,
            checkpoint_every: 0,
            strategy: NegativeStrategy::Random,
            patience: 0,
            early_stop_error: 0.0,
        }
    }

    pub fn stage2_defaults(seed: u64) -> Self {
        TrainConfig {
            stage: 2,
            epochs: 100,
            lambda1: 1.0,
            ..Self::stage1_defaults(seed)
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { rank: self.lambda1, visual: self.lambda2, textual: self.lambda3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.lr <= 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::Config(format!(
                "bad optimizer settings lr={} momentum={}",
                self.lr, self.momentum
            )));
        }
        self.weights().validate()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "stage={}", self.stage).expect("string write");
        writeln!(out, "lr={}", self.lr).expect("string write");
        writeln!(out, "momentum={}", self.momentum).expect("string write");
        writeln!(out, "batch_size={}", self.batch_size).expect("string write");
        writeln!(out, "epochs={}", self.epochs).expect("string write");
        writeln!(out, "lambda1={}", self.lambda1).expect("string write");
        writeln!(out, "lambda2={}", self.lambda2).expect("string write");
        writeln!(out, "lambda3={}", self.lambda3).expect("string write");
        writeln!(out, "margin={}", self.margin).expect("string write");
        writeln!(out, "shift_mode={}", self.shift_mode.name()).expect("string write");
        writeln!(out, "seed={}", self.seed).expect("string write");
        writeln!(out, "checkpoint_every={}", self.checkpoint_every).expect("string write");
        let strategy = match self.strategy {
            NegativeStrategy::Random => "random",
            NegativeStrategy::Hardest => "hardest",
        };
        writeln!(out, "strategy={strategy}").expect("string write");
        writeln!(out, "patience={}", self.patience).expect("string write");
        writeln!(out, "early_stop_error={}", self.early_stop_error).expect("string write");
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut config = Self::stage1_defaults(0);
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let bad = |what: &str| Error::Parse {
                line: lineno + 1,
                msg: format!("bad {what} value {value:?}"),
            };
            match key {
                "stage" => config.stage = value.parse().map_err(|_| bad("stage"))?,
                "lr" => config.lr = value.parse().map_err(|_| bad("lr"))?,
                "momentum" => config.momentum = value.parse().map_err(|_| bad("momentum"))?,
                "batch_size" => config.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "epochs" => config.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "lambda1" => config.lambda1 = value.parse().map_err(|_| bad("lambda1"))?,
                "lambda2" => config.lambda2 = value.parse().map_err(|_| bad("lambda2"))?,
                "lambda3" => config.lambda3 = value.parse().map_err(|_| bad("lambda3"))?,
                "margin" => config.margin = value.parse().map_err(|_| bad("margin"))?,
                "shift_mode" => config.shift_mode = Alignment::parse(value)?,
                "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
                "checkpoint_every" => {
                    config.checkpoint_every = value.parse().map_err(|_| bad("checkpoint_every"))?
                }
                "strategy" => config.strategy = NegativeStrategy::parse(value)?,
                "patience" => config.patience = value.parse().map_err(|_| bad("patience"))?,
                "early_stop_error" => {
                    config.early_stop_error = value.parse().map_err(|_| bad("early_stop_error"))?
                }
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("unknown config key {other:?}"),
                    })
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Fraction of training samples the image path misclassifies, measured
    /// on the dropout-free branch with the parameters of the moment.
    pub err_img: f64,
    pub err_text: f64,
    /// Mean ranking loss over the epoch (0 when the term is off).
    pub rank_loss: f64,
    pub total_loss: f64,
    pub seconds: f64,
}

/// Per-epoch records of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Numeric trajectory equality; wall time is excluded.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.err_img == b.err_img
                    && a.err_text == b.err_text
                    && a.rank_loss == b.rank_loss
                    && a.total_loss == b.total_loss
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch\terr_img\terr_text\trank_loss\ttotal_loss\tseconds\n");
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.3}",
                r.epoch, r.err_img, r.err_text, r.rank_loss, r.total_loss, r.seconds
            )
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (lineno, line) in content.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 6 tab-separated fields, got {}", fields.len()),
                });
            }
            let parse = |i: usize| -> Result<f64> {
                fields[i].parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad number {:?}", fields[i]),
                })
            };
            records.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad epoch {:?}", fields[0]),
                })?,
                err_img: parse(1)?,
                err_text: parse(2)?,
                rank_loss: parse(3)?,
                total_loss: parse(4)?,
                seconds: parse(5)?,
            });
        }
        Ok(TrainLog { records })
    }
}

/// One caption of one group within a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub group: usize,
    pub caption: usize,
}

/// Caption-level order for one epoch, shuffled by the epoch's stream.
pub fn epoch_order(split: &[ImageTextGroup], seed: u64, tag: &str, epoch: usize) -> Vec<SampleRef> {
    let mut order: Vec<SampleRef> = split
        .iter()
        .enumerate()
        .flat_map(|(g, group)| {
            (0..group.captions.len()).map(move |c| SampleRef { group: g, caption: c })
        })
        .collect();
    let mut rng = epoch_rng(seed, tag, epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Chunk an epoch order into batches. The final short batch is kept, except
/// that a lone trailing sample joins the previous batch because batch
/// statistics need at least two rows.
pub fn epoch_batches(order: &[SampleRef], batch_size: usize) -> Vec<Vec<SampleRef>> {
    let mut batches: Vec<Vec<SampleRef>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

struct EpochStats {
    samples: usize,
    img_errors: usize,
    text_errors: usize,
    rank_sum: f64,
    total_sum: f64,
}

fn argmax_errors(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let data = logits.data();
    labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = &data[r * k..(r + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best != label
        })
        .count()
}

/// The inner optimization loop shared by both stages (and by the
/// loss-regime comparison, which feeds custom weights through `config`).
pub fn run_training(
    model: &mut DualPathModel,
    dataset: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<TrainLog> {
    config.validate()?;
    let split = dataset.split(Split::Train);
    let total_captions: usize = split.iter().map(|g| g.captions.len()).sum();
    if total_captions < config.batch_size {
        return Err(Error::Config(format!(
            "training split has {total_captions} captions, fewer than the batch size {}",
            config.batch_size
        )));
    }
    for group in split {
        if group.group_id >= model.config.num_classes {
            return Err(Error::Config(format!(
                "group id {} exceeds the classifier's {} classes",
                group.group_id, model.config.num_classes
            )));
        }
    }
    let weights = config.weights();
    let tag = format!("train.s{}", config.stage);

    // With a frozen image backbone and flip-only augmentation the backbone
    // output is a fixed function of (group, flipped), so compute it once
    // per group and variant instead of once per batch.
    let mut pooled_cache: Option<Vec<[Vec<f64>; 2]>> = None;
    if model.image_backbone_frozen() {
        let mut cache = Vec::with_capacity(split.len());
        for group in split {
            let plain = stack_images(&[&group.image])?;
            let flipped = stack_images(&[&hflip(&group.image)])?;
            let mut g = Graph::new();
            let a = model.image_backbone_features(&mut g, &plain, Mode::Eval)?;
            let b = model.image_backbone_features(&mut g, &flipped, Mode::Eval)?;
            cache.push([g.value(a).data().to_vec(), g.value(b).data().to_vec()]);
        }
        pooled_cache = Some(cache);
    }

    let mut log = TrainLog::default();
    let mut best_err = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let order = epoch_order(split, config.seed, &format!("{tag}.shuffle"), epoch);
        let batches = epoch_batches(&order, config.batch_size);
        let mut shift_rng = epoch_rng(config.seed, &format!("{tag}.shift"), epoch as u64);
        let mut flip_rng = epoch_rng(config.seed, &format!("{tag}.flip"), epoch as u64);
        let mut dropout_rng = epoch_rng(config.seed, &format!("{tag}.dropout"), epoch as u64);
        let mut neg_rng = epoch_rng(config.seed, &format!("{tag}.neg"), epoch as u64);

        let mut stats =
            EpochStats { samples: 0, img_errors: 0, text_errors: 0, rank_sum: 0.0, total_sum: 0.0 };

        for batch in &batches {
            let class_ids: Vec<usize> = batch.iter().map(|s| split[s.group].group_id).collect();
            let codes: Vec<TextCode> = batch
                .iter()
                .map(|s| {
                    encode_sentence(
                        &split[s.group].captions[s.caption],
                        vocab,
                        model.config.text_len,
                        config.shift_mode,
                        &mut shift_rng,
                    )
                })
                .collect::<Result<_>>()?;

            let mut g = Graph::new();
            let img_out = if let Some(cache) = &pooled_cache {
                let dim = cache[0][0].len();
                let mut data = Vec::with_capacity(batch.len() * dim);
                for s in batch {
                    let flip = flip_rng.gen::<f64>() < 0.5;
                    data.extend_from_slice(&cache[s.group][usize::from(flip)]);
                }
                let pooled = g.input(Tensor::new(vec![batch.len(), dim], data)?);
                model.image_head_forward(&mut g, pooled, Mode::Train, &mut dropout_rng)?
            } else {
                let images: Vec<Tensor> = batch
                    .iter()
                    .map(|s| {
                        augment_image(
                            &split[s.group].image,
                            &mut flip_rng,
                            crate::dataset::AugMode::Train,
                        )
                    })
                    .collect();
                let refs: Vec<&Tensor> = images.iter().collect();
                let stacked = stack_images(&refs)?;
                model.image_forward(&mut g, &stacked, Mode::Train, &mut dropout_rng)?
            };
            let txt_out = model.text_forward(&mut g, &codes, Mode::Train, &mut dropout_rng)?;

            let w = model.w_share_var(&mut g);
            let (l_visual, l_textual) =
                instance_loss(&mut g, img_out.features, txt_out.features, &class_ids, w)?;

            let distinct_classes = {
                let mut ids = class_ids.clone();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            };
            // A row whose feature dropout zeroed entirely has no direction;
            // such batches train on the instance term alone.
            let min_norm = |t: &Tensor| -> f64 {
                let d = t.shape()[1];
                t.data()
                    .chunks(d)
                    .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            };
            let normable = min_norm(g.value(img_out.features)) > 1e-12
                && min_norm(g.value(txt_out.features)) > 1e-12;
            let rank = if weights.rank > 0.0 && distinct_classes >= 2 && normable {
                let quad = sample_negatives(
                    &mut g,
                    img_out.features,
                    txt_out.features,
                    &class_ids,
                    config.strategy,
                    &mut neg_rng,
                )?;
                Some(ranking_loss(&mut g, &quad, config.margin)?)
            } else {
                None
            };
            let batch_weights =
                if rank.is_none() { LossWeights { rank: 0.0, ..weights } } else { weights };
            let total = combined_loss(&mut g, rank, l_visual, l_textual, &batch_weights)?;
            let total_value = g.scalar(total);
            if !total_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged to {total_value} in epoch {epoch}"
                )));
            }

            // Error bookkeeping on the dropout-free branch; these nodes
            // hang off the graph without feeding the loss, so they cost no
            // backward work.
            let clean_img_logits = g.matmul(img_out.clean, w)?;
            let clean_txt_logits = g.matmul(txt_out.clean, w)?;
            stats.img_errors += argmax_errors(g.value(clean_img_logits), &class_ids);
            stats.text_errors += argmax_errors(g.value(clean_txt_logits), &class_ids);
            stats.samples += batch.len();
            stats.rank_sum += rank.map_or(0.0, |r| g.scalar(r)) * batch.len() as f64;
            stats.total_sum += total_value * batch.len() as f64;

            model.params.zero_grads();
            g.backward(total, &mut model.params)?;
            model.params.sgd_momentum_step(config.lr, config.momentum)?;
        }

        let n = stats.samples as f64;
        let record = EpochRecord {
            epoch,
            err_img: stats.img_errors as f64 / n,
            err_text: stats.text_errors as f64 / n,
            rank_loss: stats.rank_sum / n,
            total_loss: stats.total_sum / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        let worst = record.err_img.max(record.err_text);
        log.records.push(record);

        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                let meta = CheckpointMeta {
                    stage: config.stage,
                    epochs_done: (epoch + 1) as u64,
                    seed: config.seed,
                };
                save_checkpoint(
                    model,
                    meta,
                    &dir.join(format!("checkpoint_epoch_{}.dpck", epoch + 1)),
                )?;
            }
        }

        if config.early_stop_error > 0.0 && worst <= config.early_stop_error {
            break;
        }
        if worst < best_err - 1e-12 {
            best_err = worst;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }
    Ok(log)
}

/// Stage I: freeze the image backbone, train the text path, both heads and
/// the shared classifier with the instance loss alone.
pub fn train_stage1(
    model: &mut DualPathModel,
    dataset: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<TrainLog> {
    if config.stage != 1 {
        return Err(Error::Config(format!("stage-1 training got a stage-{} config", config.stage)));
    }
    if config.weights() != LossWeights::stage1() {
        return Err(Error::Config(format!(
            "stage 1 uses loss weights (0,1,1), got ({},{},{})",
            config.lambda1, config.lambda2, config.lambda3
        )));
    }
    model.set_image_backbone_frozen(true);
    run_training(model, dataset, vocab, config, ckpt_dir, start_epoch)
}

/// Stage II: unfreeze everything and fine-tune end to end with instance
/// plus ranking losses.
pub fn train_stage2(
    model: &mut DualPathModel,
    dataset: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<TrainLog> {
    if config.stage != 2 {
        return Err(Error::Config(format!("stage-2 training got a stage-{} config", config.stage)));
    }
    if config.weights() != LossWeights::stage2() {
        return Err(Error::Config(format!(
            "stage 2 uses loss weights (1,1,1), got ({},{},{})",
            config.lambda1, config.lambda2, config.lambda3
        )));
    }
    model.set_image_backbone_frozen(false);
    run_training(model, dataset, vocab, config, ckpt_dir, start_epoch)
}

/// Dropout-free full-pass classification error of a model over a split,
/// with eval-mode batch norm and left-aligned captions.
pub fn eval_classification_error(
    model: &mut DualPathModel,
    dataset: &Dataset,
    split: Split,
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    let groups = dataset.split(split);
    if groups.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.name())));
    }
    let mut rng = epoch_rng(0, "eval-error", 0);
    let mut img_errors = 0usize;
    let mut img_total = 0usize;
    let mut txt_errors = 0usize;
    let mut txt_total = 0usize;
    for chunk in groups.chunks(32) {
        let refs: Vec<&Tensor> = chunk.iter().map(|g| &g.image).collect();
        let stacked = stack_images(&refs)?;
        let ids: Vec<usize> = chunk.iter().map(|g| g.group_id).collect();
        let mut g = Graph::new();
        let out = model.image_forward(&mut g, &stacked, Mode::Eval, &mut rng)?;
        let logits = model.classify(&mut g, out.features)?;
        img_errors += argmax_errors(g.value(logits), &ids);
        img_total += chunk.len();

        let mut codes = Vec::new();
        let mut code_ids = Vec::new();
        for group in chunk {
            for caption in &group.captions {
                codes.push(encode_sentence(
                    caption,
                    vocab,
                    model.config.text_len,
                    Alignment::Left,
                    &mut rng,
                )?);
                code_ids.push(group.group_id);
            }
        }
        let mut g = Graph::new();
        let out = model.text_forward(&mut g, &codes, Mode::Eval, &mut rng)?;
        let logits = model.classify(&mut g, out.features)?;
        txt_errors += argmax_errors(g.value(logits), &code_ids);
        txt_total += codes.len();
    }
    Ok((
        img_errors as f64 / img_total as f64,
        txt_errors as f64 / txt_total as f64,
    ))
}

#[cfg(test)]
mod tests;
