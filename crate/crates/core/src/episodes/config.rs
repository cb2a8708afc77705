use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::kv;
use crate::tensor::ParamGroupRates;

/// Which terms of the joint loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub cls: bool,
    pub intra: bool,
    pub inter: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            cls: true,
            intra: true,
            inter: true,
        }
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.cls, "cls"), (self.intra, "intra"), (self.inter, "inter")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, n)| n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossTerms {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut t = LossTerms {
            cls: false,
            intra: false,
            inter: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part {
                "cls" => &mut t.cls,
                "intra" => &mut t.intra,
                "inter" => &mut t.inter,
                _ => return Err(Error::Config(format!("unknown loss term `{}` (cls|intra|inter)", part))),
            };
            if *slot {
                return Err(Error::Config(format!("loss term `{}` listed twice", part)));
            }
            *slot = true;
        }
        if !(t.cls || t.intra || t.inter) {
            return Err(Error::Config("at least one loss term is required".into()));
        }
        Ok(t)
    }
}

/// Episodic and optimisation settings shared by pre-training, meta-training
/// and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub backbone_lr: f32,
    pub module_lr: f32,
    pub pretrain_lr: f32,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    /// Validation episodes used to pick the best pre-training epoch.
    pub pretrain_val_episodes: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
    pub lr_decay: f32,
    pub lambda1: f64,
    pub lambda2: f64,
    pub losses: LossTerms,
    pub augment: bool,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ways: 5,
            shots: 5,
            queries: 15,
            epochs: 200,
            episodes_per_epoch: 100,
            backbone_lr: 0.001,
            module_lr: 0.01,
            pretrain_lr: 0.1,
            pretrain_epochs: 100,
            pretrain_batch: 64,
            pretrain_val_episodes: 100,
            momentum: 0.9,
            weight_decay: 0.0005,
            nesterov: true,
            lr_decay: 0.1,
            lambda1: 0.1,
            lambda2: 0.1,
            losses: LossTerms::default(),
            augment: true,
            eval_episodes: 600,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "n",
        "k",
        "m",
        "epochs",
        "episodes",
        "backbone_lr",
        "module_lr",
        "pretrain_lr",
        "pretrain_epochs",
        "pretrain_batch",
        "pretrain_val_episodes",
        "momentum",
        "weight_decay",
        "nesterov",
        "lr_decay",
        "lambda1",
        "lambda2",
        "losses",
        "augment",
        "eval_episodes",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::Config(format!("episodes need N ≥ 2, got {}", self.ways)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::Config("K and M must be positive".into()));
        }
        for (name, lr) in [
            ("backbone_lr", self.backbone_lr),
            ("module_lr", self.module_lr),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", name, lr)));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight decay be non-negative".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if self.pretrain_batch == 0 || self.eval_episodes == 0 || self.pretrain_val_episodes == 0 {
            return Err(Error::Config("batch size and episode counts must be positive".into()));
        }
        Ok(())
    }

    /// Loss coefficients with disabled terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: if self.losses.cls { 1.0 } else { 0.0 },
            lambda1: if self.losses.intra { self.lambda1 } else { 0.0 },
            lambda2: if self.losses.inter { self.lambda2 } else { 0.0 },
        }
    }

    pub fn meta_rates(&self) -> ParamGroupRates {
        ParamGroupRates {
            backbone: self.backbone_lr,
            module: self.module_lr,
        }
    }

    /// Applies one key. Returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "n" => self.ways = kv::value(key, v)?,
            "k" => self.shots = kv::value(key, v)?,
            "m" => self.queries = kv::value(key, v)?,
            "epochs" => self.epochs = kv::value(key, v)?,
            "episodes" => self.episodes_per_epoch = kv::value(key, v)?,
            "backbone_lr" => self.backbone_lr = kv::value(key, v)?,
            "module_lr" => self.module_lr = kv::value(key, v)?,
            "pretrain_lr" => self.pretrain_lr = kv::value(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = kv::value(key, v)?,
            "pretrain_batch" => self.pretrain_batch = kv::value(key, v)?,
            "pretrain_val_episodes" => self.pretrain_val_episodes = kv::value(key, v)?,
            "momentum" => self.momentum = kv::value(key, v)?,
            "weight_decay" => self.weight_decay = kv::value(key, v)?,
            "nesterov" => self.nesterov = kv::on_off(key, v)?,
            "lr_decay" => self.lr_decay = kv::value(key, v)?,
            "lambda1" => self.lambda1 = kv::value(key, v)?,
            "lambda2" => self.lambda2 = kv::value(key, v)?,
            "losses" => self.losses = v.parse()?,
            "augment" => self.augment = kv::on_off(key, v)?,
            "eval_episodes" => self.eval_episodes = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        [
            ("n", self.ways.to_string()),
            ("k", self.shots.to_string()),
            ("m", self.queries.to_string()),
            ("epochs", self.epochs.to_string()),
            ("episodes", self.episodes_per_epoch.to_string()),
            ("backbone_lr", self.backbone_lr.to_string()),
            ("module_lr", self.module_lr.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_val_episodes", self.pretrain_val_episodes.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("nesterov", on(self.nesterov)),
            ("lr_decay", self.lr_decay.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("losses", self.losses.to_string()),
            ("augment", on(self.augment)),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads the keys this type owns, starting from defaults. Other keys are ignored.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
