//! Flat run configuration: training, model and path keys in one `key = value` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use icrl_core::airn::default_hidden;
use icrl_core::backbone::BackboneConfig;
use icrl_core::data::{split_classes, SplitSpec};
use icrl_core::episodes::TrainConfig;
use icrl_core::kv;
use icrl_core::model::ModelConfig;
use icrl_core::{Error, Result};

/// Keys owned by the run itself rather than the model or optimiser.
pub const RUN_KEYS: [(&str, &str); 7] = [
    ("dataset", "FSDS dataset path (required for every command except synth)"),
    (
        "split",
        "class split file; when unset classes are split by split_ratios",
    ),
    ("split_ratios", "train,val,test class fractions (default 0.64,0.16,0.2)"),
    (
        "eval_split",
        "split evaluated by eval and inspect: train|val|test (default test)",
    ),
    ("checkpoint", "input checkpoint path"),
    ("out", "output path"),
    ("metrics", "metrics CSV path (default: <out>.metrics.csv)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub split_ratios: (f64, f64, f64),
    pub eval_split: String,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    explicit_hidden: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            model: ModelConfig::new(BackboneConfig::default(), train.shots),
            train,
            dataset: None,
            split: None,
            split_ratios: (0.64, 0.16, 0.2),
            eval_split: "test".into(),
            checkpoint: None,
            out: None,
            metrics: None,
            explicit_hidden: false,
        }
    }
}

fn parse_ratios(v: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad split_ratios `{}`", v)))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("split_ratios needs three values, got `{}`", v))),
    }
}

impl RunConfig {
    /// Every key a config file may contain.
    #[cfg(test)]
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = TrainConfig::KEYS.to_vec();
        keys.extend(ModelConfig::KEYS.iter().filter(|k| **k != "model.shots"));
        keys.extend(RUN_KEYS.iter().map(|(k, _)| *k));
        keys
    }

    /// Default values of every key, with the path keys described in comments.
    pub fn defaults_text() -> String {
        let mut s = RunConfig::default().to_text();
        s.push('\n');
        for (k, doc) in RUN_KEYS {
            s.push_str(&format!("# {}: {}\n", k, doc));
        }
        s
    }

    /// Applies one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "dataset" => self.dataset = path(),
            "split" => self.split = path(),
            "split_ratios" => self.split_ratios = parse_ratios(v)?,
            "eval_split" => {
                if !["train", "val", "test"].contains(&v) {
                    return Err(Error::Config(format!("eval_split must be train|val|test, got `{}`", v)));
                }
                self.eval_split = v.to_string();
            }
            "checkpoint" => self.checkpoint = path(),
            "out" => self.out = path(),
            "metrics" => self.metrics = path(),
            "model.shots" => return Err(Error::Config("the shot count is set with `k`".into())),
            "model.hidden" => {
                self.model.set(key, v)?;
                self.explicit_hidden = true;
            }
            _ => {
                if !self.train.set(key, v)? && !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown config key `{}`", key)));
                }
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        for (k, v) in kv::parse(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Copies every training and model key recorded in a checkpoint.
    pub fn apply_checkpoint_meta(&mut self, meta: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in meta {
            if k == "model.shots" {
                continue;
            }
            if self.train.set(k, v)? {
                continue;
            }
            if k == "model.hidden" {
                self.model.set(k, v)?;
                self.explicit_hidden = true;
            } else {
                self.model.set(k, v)?;
            }
        }
        Ok(())
    }

    /// Syncs derived fields and validates everything.
    pub fn finish(&mut self) -> Result<()> {
        self.model.shots = self.train.shots;
        if !self.explicit_hidden {
            self.model.hidden = default_hidden(self.train.shots);
        }
        self.train.validate()?;
        self.model.validate()
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (use --dataset or `dataset` in the config)".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output path given (use --out)".into()))
    }

    pub fn metrics_path(&self) -> Result<PathBuf> {
        match &self.metrics {
            Some(p) => Ok(p.clone()),
            None => {
                let mut s = self.out()?.as_os_str().to_owned();
                s.push(".metrics.csv");
                Ok(PathBuf::from(s))
            }
        }
    }

    pub fn split_spec(&self, num_classes: usize) -> Result<SplitSpec> {
        let spec = match &self.split {
            Some(p) => SplitSpec::load(p)?,
            None => split_classes(num_classes, self.split_ratios, self.train.seed)?,
        };
        spec.check_bounds(num_classes)?;
        Ok(spec)
    }

    /// The full configuration as `key = value` text, one line per key.
    pub fn to_text(&self) -> String {
        let mut map = self.train.to_kv();
        map.extend(self.model.to_kv());
        map.remove("model.shots");
        let (a, b, c) = self.split_ratios;
        map.insert("split_ratios".into(), format!("{},{},{}", a, b, c));
        map.insert("eval_split".into(), self.eval_split.clone());
        for (k, v) in [
            ("dataset", &self.dataset),
            ("split", &self.split),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
            ("metrics", &self.metrics),
        ] {
            if let Some(p) = v {
                map.insert(k.into(), p.display().to_string());
            }
        }
        kv::format(&map)
    }
}
