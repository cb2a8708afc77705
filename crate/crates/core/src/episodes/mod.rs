//! Episodic protocol: task sampling, pre-training, meta-training, inference
//! and evaluation, plus the checkpoint format that carries models between them.

mod augment;
mod checkpoint;
mod config;
mod eval;
mod sampler;
mod train;

use std::collections::BTreeMap;

pub use augment::flip_and_crop;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LossTerms, TrainConfig};
pub use eval::{eval_episode, evaluate, infer_episode, EvalReport, EvalSpec, DEFAULT_EVAL_EPISODES};
pub use sampler::{sample_episode, ClassPool, Episode};
pub use train::{
    meta_optimizer, meta_train, meta_train_with, metrics_csv, pooled_features, pretrain, prototype_accuracy,
    train_step, training_episode, MetricsRow, PretrainEpoch, PretrainOutcome, METRICS_HEADER,
};

use crate::airn::AirnInit;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{IcrlModel, ModelConfig};
use crate::tensor::ParamStore;

const BACKBONE_KEYS: [&str; 5] = [
    "model.blocks",
    "model.channels",
    "model.input_size",
    "model.input_channels",
    "model.pool",
];

fn backbone_kv(cfg: &BackboneConfig) -> BTreeMap<String, String> {
    let full = ModelConfig::new(cfg.clone(), 1).to_kv();
    full.into_iter()
        .filter(|(k, _)| BACKBONE_KEYS.contains(&k.as_str()))
        .collect()
}

/// Checkpoint holding a complete model and the run configuration that produced it.
pub fn model_checkpoint(model: &IcrlModel, cfg: &TrainConfig) -> Checkpoint {
    let mut meta = cfg.to_kv();
    meta.extend(model.config.to_kv());
    meta.insert("kind".into(), "model".into());
    let mut params = model.params.clone();
    params.zero_grad();
    Checkpoint { params, meta }
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(IcrlModel, TrainConfig)> {
    if ck.kind() != Some("model") {
        return Err(Error::Config(format!(
            "expected a model checkpoint, found kind `{}`",
            ck.kind().unwrap_or("none")
        )));
    }
    let config = ModelConfig::from_kv(&ck.meta)?;
    let train = TrainConfig::from_kv(&ck.meta)?;
    let template = IcrlModel::new(config.clone(), 0, AirnInit::Zero)?;
    let expected: Vec<(&str, &[usize])> = template
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape()))
        .collect();
    let found: Vec<(&str, &[usize])> = ck.params.iter().map(|p| (p.name.as_str(), p.value.shape())).collect();
    if expected != found {
        return Err(Error::Shape(format!(
            "checkpoint parameters {:?} do not match the configured model {:?}",
            found, expected
        )));
    }
    Ok((
        IcrlModel {
            config,
            params: ck.params.clone(),
        },
        train,
    ))
}

/// Checkpoint holding pre-trained backbone weights.
pub fn backbone_checkpoint(
    params: &ParamStore,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    selected_epoch: Option<usize>,
) -> Checkpoint {
    let mut meta = cfg.to_kv();
    meta.extend(backbone_kv(backbone));
    meta.insert("kind".into(), "backbone".into());
    meta.insert(
        "selected_epoch".into(),
        selected_epoch.map_or("none".to_string(), |e| e.to_string()),
    );
    let mut params = params.clone();
    params.zero_grad();
    Checkpoint { params, meta }
}

/// Copies pre-trained backbone weights into `model` after checking that the
/// architectures agree.
pub fn load_pretrained(model: &mut IcrlModel, ck: &Checkpoint) -> Result<()> {
    if ck.kind() != Some("backbone") {
        return Err(Error::Config(format!(
            "expected a backbone checkpoint, found kind `{}`",
            ck.kind().unwrap_or("none")
        )));
    }
    let want = backbone_kv(&model.config.backbone);
    for (k, v) in &want {
        if ck.meta.get(k) != Some(v) {
            return Err(Error::Shape(format!(
                "pre-trained backbone has {} = {}, model needs {}",
                k,
                ck.meta.get(k).map_or("missing", String::as_str),
                v
            )));
        }
    }
    model.load_backbone(&ck.params)
}
