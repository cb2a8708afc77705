//! The full few-shot model: parameters, configuration, and the per-episode
//! forward pass shared by training, inference and gradient checking.

use std::collections::BTreeMap;

use crate::abfe::{embed_instance, init_abfe, PoolingVariant, NAIVE_BILINEAR_MAX_CHANNELS};
use crate::airn::{self, init_airn, AirnInit};
use crate::backbone::{init_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{self, LossBreakdown, LossWeights, Temperature};
use crate::kv;
use crate::rng;
use crate::tensor::{Bound, Graph, ParamGroup, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pooling: PoolingVariant,
    /// Weighted class representations when on; plain support means when off.
    pub airn: bool,
    /// Shot count the revaluing network is built for.
    pub shots: usize,
    pub hidden: usize,
    pub tau: f64,
    pub learn_tau: bool,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, shots: usize) -> Self {
        ModelConfig {
            backbone,
            pooling: PoolingVariant::Full,
            airn: true,
            shots,
            hidden: airn::default_hidden(shots),
            tau: 10.0,
            learn_tau: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.shots == 0 || self.hidden == 0 {
            return Err(Error::Config("shots and hidden width must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.pooling == PoolingVariant::NaiveBilinear && self.backbone.channels > NAIVE_BILINEAR_MAX_CHANNELS {
            return Err(Error::Config(format!(
                "model-5 needs at most {} channels, got {}",
                NAIVE_BILINEAR_MAX_CHANNELS, self.backbone.channels
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        let s = self.backbone.output_size();
        self.pooling.embedding_dim(self.backbone.channels, s, s)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let b = &self.backbone;
        [
            ("model.blocks", b.blocks.to_string()),
            ("model.channels", b.channels.to_string()),
            ("model.input_size", b.input_size.to_string()),
            ("model.input_channels", b.input_channels.to_string()),
            ("model.pool", b.pool.to_string()),
            ("model.pooling", self.pooling.to_string()),
            ("model.airn", if self.airn { "on" } else { "off" }.to_string()),
            ("model.shots", self.shots.to_string()),
            ("model.hidden", self.hidden.to_string()),
            ("model.tau", self.tau.to_string()),
            ("model.learn_tau", if self.learn_tau { "on" } else { "off" }.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub const KEYS: [&'static str; 11] = [
        "model.blocks",
        "model.channels",
        "model.input_size",
        "model.input_channels",
        "model.pool",
        "model.pooling",
        "model.airn",
        "model.shots",
        "model.hidden",
        "model.tau",
        "model.learn_tau",
    ];

    /// Applies one `model.*` key. Returns `Ok(false)` for keys it does not own.
    /// Setting `model.shots` also resets the hidden width to its default.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let b = &mut self.backbone;
        match key {
            "model.blocks" => b.blocks = kv::value(key, v)?,
            "model.channels" => b.channels = kv::value(key, v)?,
            "model.input_size" => b.input_size = kv::value(key, v)?,
            "model.input_channels" => b.input_channels = kv::value(key, v)?,
            "model.pool" => b.pool = kv::value(key, v)?,
            "model.pooling" => self.pooling = v.parse()?,
            "model.airn" => self.airn = kv::on_off(key, v)?,
            "model.shots" => {
                self.shots = kv::value(key, v)?;
                self.hidden = airn::default_hidden(self.shots);
            }
            "model.hidden" => self.hidden = kv::value(key, v)?,
            "model.tau" => self.tau = kv::value(key, v)?,
            "model.learn_tau" => self.learn_tau = kv::on_off(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Reads a configuration written by [`ModelConfig::to_kv`]; every key must be present.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::new(BackboneConfig::default(), 1);
        for key in Self::KEYS {
            let v = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing key `{}`", key)))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcrlModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl IcrlModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64, airn_init: AirnInit) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_backbone(&mut params, &config.backbone, &mut rng::stream(seed, "init.backbone"));
        init_abfe(
            &mut params,
            config.backbone.channels,
            config.pooling,
            &mut rng::stream(seed, "init.abfe"),
        );
        if config.airn {
            init_airn(
                &mut params,
                config.shots,
                config.hidden,
                airn_init,
                &mut rng::stream(seed, "init.airn"),
            );
        }
        if config.learn_tau {
            params.insert(head::TAU, ParamGroup::Module, Tensor::new([1], vec![config.tau as f32]));
        }
        Ok(IcrlModel { config, params })
    }

    /// Replace the backbone with pre-trained weights.
    pub fn load_backbone(&mut self, pretrained: &ParamStore) -> Result<()> {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|p| p.group == ParamGroup::Backbone)
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let src = pretrained
                .value(&name)
                .ok_or_else(|| Error::Contract(format!("pre-trained weights lack `{}`", name)))?;
            let dst = self.params.get_mut(&name).expect("listed above");
            if src.shape() != dst.value.shape() {
                return Err(Error::Shape(format!(
                    "pre-trained `{}` has shape {:?}, model expects {:?}",
                    name,
                    src.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = src.clone();
        }
        Ok(())
    }

    /// Every parameter the forward pass touches.
    pub fn trainable(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    pub fn check_shots(&self, shots: usize) -> Result<()> {
        if self.config.airn && shots != self.config.shots {
            return Err(Error::ShotMismatch {
                trained: self.config.shots,
                requested: shots,
            });
        }
        Ok(())
    }
}

/// Images of one episode, support ordered class-major (`n·K + k`).
#[derive(Clone, Debug)]
pub struct EpisodeInputs<'a> {
    pub ways: usize,
    pub shots: usize,
    pub support: Vec<&'a Tensor<f32>>,
    pub queries: Vec<&'a Tensor<f32>>,
    pub query_labels: Vec<usize>,
}

impl EpisodeInputs<'_> {
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.ways * self.shots).map(|i| i / self.shots).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 {
            return Err(Error::Contract("episode needs at least one way and one shot".into()));
        }
        if self.support.len() != self.ways * self.shots {
            return Err(Error::Shape(format!(
                "{} support images for a {}-way {}-shot episode",
                self.support.len(),
                self.ways,
                self.shots
            )));
        }
        if self.queries.len() != self.query_labels.len() || self.queries.is_empty() {
            return Err(Error::Shape("query images and labels disagree or are empty".into()));
        }
        if let Some(&bad) = self.query_labels.iter().find(|&&l| l >= self.ways) {
            return Err(Error::Contract(format!("query label {} out of range", bad)));
        }
        Ok(())
    }
}

/// Graph handles for everything one episode produces.
#[derive(Clone, Debug)]
pub struct EpisodeGraph {
    pub support_reps: Var,
    pub query_reps: Var,
    pub class_reps: Var,
    /// `N×K` significance weights; absent for the averaging baseline.
    pub significance: Option<Var>,
    pub logits: Var,
    pub l_cls: Var,
    pub l_intra: Var,
    pub l_inter: Var,
    pub l_joint: Var,
    pub weights: LossWeights,
}

impl EpisodeGraph {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            l_cls: g.value(self.l_cls).item().as_f64(),
            l_intra: g.value(self.l_intra).item().as_f64(),
            l_inter: g.value(self.l_inter).item().as_f64(),
            l_joint: g.value(self.l_joint).item().as_f64(),
            w_cls: self.weights.cls,
            lambda1: self.weights.lambda1,
            lambda2: self.weights.lambda2,
        }
    }
}

fn embed_all<T: Scalar>(g: &mut Graph<T>, params: &Bound, cfg: &ModelConfig, images: &[&Tensor<f32>]) -> Result<Var> {
    let reps = images
        .iter()
        .map(|img| {
            let v = g.constant(img.cast());
            embed_instance(g, params, &cfg.backbone, cfg.pooling, v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.stack(&reps))
}

/// Embed supports and queries, build class representations, classify the
/// queries and assemble the joint loss.
pub fn forward_episode<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    cfg: &ModelConfig,
    ep: &EpisodeInputs<'_>,
    weights: LossWeights,
) -> Result<EpisodeGraph> {
    ep.validate()?;
    if cfg.airn && ep.shots != cfg.shots {
        return Err(Error::ShotMismatch {
            trained: cfg.shots,
            requested: ep.shots,
        });
    }
    let support_reps = embed_all(g, params, cfg, &ep.support)?;
    let mut class_reps = Vec::with_capacity(ep.ways);
    let mut significance = Vec::with_capacity(ep.ways);
    for n in 0..ep.ways {
        let block = g.slice_rows(support_reps, n * ep.shots, ep.shots);
        if cfg.airn {
            let (c, a) = airn::class_representation(g, params, block)?;
            class_reps.push(c);
            significance.push(a);
        } else {
            class_reps.push(airn::mean_prototype(g, block)?);
        }
    }
    let class_reps = g.stack(&class_reps);
    let significance = if cfg.airn { Some(g.stack(&significance)) } else { None };
    let query_reps = embed_all(g, params, cfg, &ep.queries)?;

    let tau = if cfg.learn_tau {
        Temperature::Learned(params.var(head::TAU))
    } else {
        Temperature::Fixed(cfg.tau)
    };
    let logits = head::cosine_logits(g, query_reps, class_reps, tau)?;
    let l_cls = head::loss_cls(g, logits, &ep.query_labels);
    let l_intra = head::loss_intra(g, support_reps, class_reps, &ep.support_labels(), tau)?;
    let l_inter = head::loss_inter(g, class_reps)?;
    let l_joint = head::loss_joint(g, l_cls, l_intra, l_inter, weights)?;
    Ok(EpisodeGraph {
        support_reps,
        query_reps,
        class_reps,
        significance,
        logits,
        l_cls,
        l_intra,
        l_inter,
        l_joint,
        weights,
    })
}

/// Result of classifying one episode without touching parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Tensor<f32>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// One weight vector per class slot when the revaluing network is on.
    pub significance: Option<Vec<airn::SignificanceVector>>,
    pub class_reps: Vec<airn::ClassRepresentation>,
    pub losses: LossBreakdown,
}

pub fn infer(model: &IcrlModel, ep: &EpisodeInputs<'_>, weights: LossWeights) -> Result<Inference> {
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g);
    let out = forward_episode(&mut g, &bound, &model.config, ep, weights)?;
    let logits = g.value(out.logits).clone();
    let predictions = head::predict(&logits);
    let accuracy = head::accuracy(&predictions, &ep.query_labels);
    let significance = out.significance.map(|s| {
        g.value(s)
            .data()
            .chunks(ep.shots)
            .map(|c| airn::SignificanceVector(c.to_vec()))
            .collect()
    });
    let d = g.shape(out.class_reps)[1];
    let class_reps = g
        .value(out.class_reps)
        .data()
        .chunks(d)
        .enumerate()
        .map(|(class, v)| airn::ClassRepresentation {
            class,
            vector: v.to_vec(),
        })
        .collect();
    Ok(Inference {
        logits,
        predictions,
        accuracy,
        significance,
        class_reps,
        losses: out.breakdown(&g),
    })
}
