use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::flip_and_crop;
use super::config::TrainConfig;
use super::sampler::{sample_episode, ClassPool, Episode};
use crate::backbone::{
    backbone_forward, global_average_pool, init_backbone, init_pretrain_head, pretrain_head_forward, BackboneConfig,
    PRETRAIN_PREFIX,
};
use crate::data::DatasetContainer;
use crate::error::{Error, Result};
use crate::head::{self, LossBreakdown, LossWeights};
use crate::model::{forward_episode, EpisodeInputs, IcrlModel};
use crate::rng;
use crate::tensor::{lr_multiplier, Graph, OptimizerState, ParamGroupRates, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Backbone parameters of the selected epoch.
    pub backbone: ParamStore,
    /// 1-based epoch whose weights were kept; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
    pub history: Vec<PretrainEpoch>,
}

impl PretrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,val_acc\n");
        for e in &self.history {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.train_acc, e.val_acc));
        }
        s
    }
}

/// Mean-pooled backbone features, one vector per image.
pub fn pooled_features(params: &ParamStore, cfg: &BackboneConfig, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    images
        .iter()
        .map(|img| {
            let x = g.constant((*img).clone());
            let fm = backbone_forward(&mut g, &bound, cfg, x)?;
            let v = global_average_pool(&mut g, &fm);
            Ok(g.value(v).data().to_vec())
        })
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt()).max(1e-12)
}

/// Query accuracy of a cosine nearest-prototype classifier on mean-pooled
/// backbone features, prototypes being per-class support means.
pub fn prototype_accuracy(
    params: &ParamStore,
    cfg: &BackboneConfig,
    data: &DatasetContainer,
    episode: &Episode,
) -> Result<f64> {
    let (support, queries, labels) = episode.images(data);
    let sf = pooled_features(params, cfg, &support)?;
    let qf = pooled_features(params, cfg, &queries)?;
    let k = episode.shots();
    let protos: Vec<Vec<f32>> = sf
        .chunks(k)
        .map(|c| {
            let mut p = vec![0.0f32; c[0].len()];
            for f in c {
                p.iter_mut().zip(f).for_each(|(a, b)| *a += b / k as f32);
            }
            p
        })
        .collect();
    let predictions: Vec<usize> = qf
        .iter()
        .map(|q| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (i, p) in protos.iter().enumerate() {
                let s = cosine(q, p);
                if s > best_s {
                    best = i;
                    best_s = s;
                }
            }
            best
        })
        .collect();
    Ok(head::accuracy(&predictions, &labels))
}

/// Whole-classifier pre-training of the backbone over `classes`.
///
/// Every class is split 80/20 into training and held-out instances. After
/// each epoch the backbone is scored on fixed 1-shot episodes drawn from the
/// held-out instances; the best-scoring epoch is returned (earliest on ties).
pub fn pretrain(
    data: &DatasetContainer,
    classes: &[usize],
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    backbone.validate()?;
    cfg.validate()?;
    if classes.len() < 2 {
        return Err(Error::Insufficient(format!(
            "pre-training needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    if data.instance_shape() != backbone.image_shape() {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, backbone expects {:?}",
            data.instance_shape(),
            backbone.image_shape()
        )));
    }
    let mut train = Vec::new();
    let mut held_out = Vec::with_capacity(classes.len());
    for (label, &c) in classes.iter().enumerate() {
        let n = data.class(c).instances.len();
        let n_val = n / 5;
        if n_val < 2 {
            return Err(Error::Insufficient(format!(
                "class {} has {} instances; pre-training needs at least 10 to hold out validation",
                c, n
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream_indexed(cfg.seed, "pretrain.holdout", c as u64));
        held_out.push(idx[..n_val].to_vec());
        train.extend(idx[n_val..].iter().map(|&i| (label, c, i)));
    }
    let val_pool = ClassPool::new(classes.to_vec(), held_out.clone())?;
    let val_ways = cfg.ways.min(classes.len());
    let val_queries = cfg.queries.min(held_out.iter().map(Vec::len).min().unwrap_or(1) - 1);
    let val_episodes = (0..cfg.pretrain_val_episodes)
        .map(|i| {
            let mut r = rng::stream_indexed(cfg.seed, "pretrain.val-episode", i as u64);
            sample_episode(&val_pool, &mut r, val_ways, 1, val_queries)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut store = ParamStore::new();
    init_backbone(&mut store, backbone, &mut rng::stream(cfg.seed, "init.backbone"));
    let init = store.clone();
    init_pretrain_head(
        &mut store,
        backbone.channels,
        classes.len(),
        &mut rng::stream(cfg.seed, "init.pretrain-head"),
    );
    let mut opt = OptimizerState::new(
        store.names().map(str::to_string).collect::<Vec<_>>(),
        ParamGroupRates::uniform(cfg.pretrain_lr),
        cfg.momentum,
        cfg.weight_decay,
        cfg.nesterov,
    );
    let base_rates = opt.rates;

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        opt.rates = base_rates.scaled(lr_multiplier(epoch, cfg.pretrain_epochs, cfg.lr_decay));
        let mut order = train.clone();
        order.shuffle(&mut rng::stream_indexed(cfg.seed, "pretrain.order", epoch as u64));
        let mut aug = rng::stream_indexed(cfg.seed, "pretrain.augment", epoch as u64);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.pretrain_batch) {
            let mut g = Graph::<f32>::new();
            let bound = store.bind(&mut g);
            let mut logits = Vec::with_capacity(batch.len());
            for &(_, c, i) in batch {
                let img = data.instance(c, i);
                let img = if cfg.augment {
                    flip_and_crop(img, &mut aug)
                } else {
                    img.clone()
                };
                let x = g.constant(img);
                let fm = backbone_forward(&mut g, &bound, backbone, x)?;
                logits.push(pretrain_head_forward(&mut g, &bound, &fm));
            }
            let logits = g.stack(&logits);
            let labels: Vec<usize> = batch.iter().map(|&(l, _, _)| l).collect();
            let loss = g.softmax_cross_entropy(logits, &labels);
            loss_sum += g.value(loss).item() as f64 * batch.len() as f64;
            let preds = head::predict(g.value(logits));
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let grads = g.backward(loss);
            store.zero_grad();
            store.accumulate(&bound, &grads);
            opt.step(&mut store)?;
        }
        let accs = val_episodes
            .par_iter()
            .map(|ep| prototype_accuracy(&store, backbone, data, ep))
            .collect::<Result<Vec<f64>>>()?;
        let val_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        let row = PretrainEpoch {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        };
        info!(
            "pretrain epoch {}: loss {:.4} train acc {:.4} val 1-shot acc {:.4}",
            row.epoch, row.loss, row.train_acc, row.val_acc
        );
        if best.as_ref().is_none_or(|(b, _, _)| val_acc > *b) {
            let mut snapshot = store.clone();
            snapshot.remove_prefix(PRETRAIN_PREFIX);
            snapshot.zero_grad();
            best = Some((val_acc, epoch + 1, snapshot));
        }
        history.push(row);
    }
    let (backbone, selected_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (init, None),
    };
    Ok(PretrainOutcome {
        backbone,
        selected_epoch,
        history,
    })
}

/// One logged meta-training episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub episode: usize,
    pub losses: LossBreakdown,
    pub query_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,episode,l_cls,l_intra,l_inter,l_joint,query_acc";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.episode, l.l_cls, l.l_intra, l.l_inter, l.l_joint, self.query_acc
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Optimizer over every model parameter with the two meta-training groups.
pub fn meta_optimizer(model: &IcrlModel, cfg: &TrainConfig) -> OptimizerState {
    OptimizerState::new(
        model.trainable(),
        cfg.meta_rates(),
        cfg.momentum,
        cfg.weight_decay,
        cfg.nesterov,
    )
}

/// Forward, backward and one SGD update on a single episode. Returns the
/// losses and query accuracy measured before the update.
pub fn train_step(
    model: &mut IcrlModel,
    opt: &mut OptimizerState,
    inputs: &EpisodeInputs<'_>,
    weights: LossWeights,
) -> Result<(LossBreakdown, f64)> {
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g);
    let out = forward_episode(&mut g, &bound, &model.config, inputs, weights)?;
    let losses = out.breakdown(&g);
    if !losses.l_joint.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {:?}", losses)));
    }
    let acc = head::accuracy(&head::predict(g.value(out.logits)), &inputs.query_labels);
    let grads = g.backward(out.l_joint);
    model.params.zero_grad();
    model.params.accumulate(&bound, &grads);
    opt.step(&mut model.params)?;
    Ok((losses, acc))
}

/// Episode `index` of meta-training, drawn from its own seeded stream.
pub fn training_episode(pool: &ClassPool, cfg: &TrainConfig, index: u64) -> Result<(Episode, rand_chacha::ChaCha8Rng)> {
    let mut r = rng::stream_indexed(cfg.seed, "train-episode", index);
    let ep = sample_episode(pool, &mut r, cfg.ways, cfg.shots, cfg.queries)?;
    Ok((ep, r))
}

/// Episodic meta-training over `classes`. Every episode is sampled, embedded,
/// scored with the joint loss and followed by one SGD step; its metrics row
/// is handed to `sink` before the next episode starts.
pub fn meta_train_with(
    data: &DatasetContainer,
    classes: &[usize],
    model: &mut IcrlModel,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    model.check_shots(cfg.shots)?;
    if data.instance_shape() != model.config.backbone.image_shape() {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, model expects {:?}",
            data.instance_shape(),
            model.config.backbone.image_shape()
        )));
    }
    let pool = ClassPool::all(data, classes)?;
    let weights = cfg.loss_weights();
    let mut opt = meta_optimizer(model, cfg);
    let base = opt.rates;
    for epoch in 0..cfg.epochs {
        opt.rates = base.scaled(lr_multiplier(epoch, cfg.epochs, cfg.lr_decay));
        let mut acc_sum = 0.0;
        for episode in 0..cfg.episodes_per_epoch {
            let index = (epoch * cfg.episodes_per_epoch + episode) as u64;
            let (ep, mut r) = training_episode(&pool, cfg, index)?;
            let (losses, acc) = if cfg.augment {
                let (support, queries, labels) = ep.images(data);
                let support: Vec<Tensor<f32>> = support.iter().map(|t| flip_and_crop(t, &mut r)).collect();
                let queries: Vec<Tensor<f32>> = queries.iter().map(|t| flip_and_crop(t, &mut r)).collect();
                let inputs = EpisodeInputs {
                    ways: ep.ways(),
                    shots: ep.shots(),
                    support: support.iter().collect(),
                    queries: queries.iter().collect(),
                    query_labels: labels,
                };
                train_step(model, &mut opt, &inputs, weights)?
            } else {
                train_step(model, &mut opt, &ep.inputs(data), weights)?
            };
            debug!("epoch {} episode {}: {:?} acc {:.4}", epoch, episode, losses, acc);
            acc_sum += acc;
            sink(&MetricsRow {
                epoch,
                episode,
                losses,
                query_acc: acc,
            })?;
        }
        info!(
            "meta-train epoch {}: mean query acc {:.4}",
            epoch,
            acc_sum / cfg.episodes_per_epoch.max(1) as f64
        );
    }
    Ok(())
}

pub fn meta_train(
    data: &DatasetContainer,
    classes: &[usize],
    model: &mut IcrlModel,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);
    meta_train_with(data, classes, model, cfg, &mut |r| {
        rows.push(*r);
        Ok(())
    })?;
    Ok(rows)
}
