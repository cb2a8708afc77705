//! Python module `icrl`: datasets, synthetic generators, model training,
//! evaluation and per-episode inference.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use icrl_core::abfe::PoolingVariant;
use icrl_core::airn::AirnInit;
use icrl_core::backbone::BackboneConfig;
use icrl_core::data::{self, DatasetContainer, SyntheticSpec};
use icrl_core::episodes::{
    self, eval_episode, infer_episode, model_checkpoint, model_from_checkpoint, Checkpoint, ClassPool, EvalSpec,
    TrainConfig,
};
use icrl_core::model::{IcrlModel, ModelConfig};
use icrl_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::MissingGrad(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Dataset", module = "icrl", frozen)]
struct PyDataset {
    inner: DatasetContainer,
}

#[pymethods]
impl PyDataset {
    /// Reads an FSDS file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_container(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_container(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn instance_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.instance_shape();
        (c, h, w)
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance.clone()
    }

    fn class_name(&self, class: usize) -> PyResult<String> {
        self.check_class(class)?;
        Ok(self.inner.class(class).name.clone())
    }

    fn class_size(&self, class: usize) -> PyResult<usize> {
        self.check_class(class)?;
        Ok(self.inner.class(class).instances.len())
    }

    /// Flat `c·h·w` pixel values of one instance.
    fn instance(&self, class: usize, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.class_size(class)? {
            return Err(PyValueError::new_err(format!("instance {} out of range", index)));
        }
        Ok(self.inner.instance(class, index).data().to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.num_classes()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(classes={}, shape={:?}, provenance={:?})",
            self.inner.num_classes(),
            self.inner.instance_shape(),
            self.inner.provenance
        )
    }
}

impl PyDataset {
    fn check_class(&self, class: usize) -> PyResult<()> {
        if class >= self.inner.num_classes() {
            return Err(PyValueError::new_err(format!("class {} out of range", class)));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn synthetic_spec(
    classes: usize,
    per_class: usize,
    channels: usize,
    size: usize,
    separation: f64,
    noise: f64,
    outlier_fraction: f64,
    rule: &str,
    seed: u64,
) -> PyResult<SyntheticSpec> {
    Ok(SyntheticSpec {
        classes,
        instances_per_class: per_class,
        channels,
        size,
        separation,
        noise,
        outlier_fraction,
        outlier_rule: rule.parse().map_err(py_err)?,
        seed,
    })
}

/// Gaussian clusters around one random centre image per class.
#[pyfunction]
#[pyo3(signature = (classes=20, per_class=40, channels=3, size=16, separation=10.0, noise=0.1, seed=0))]
fn gen_blobs(
    classes: usize,
    per_class: usize,
    channels: usize,
    size: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let spec = synthetic_spec(
        classes,
        per_class,
        channels,
        size,
        separation,
        noise,
        0.0,
        "other-class",
        seed,
    )?;
    Ok(PyDataset {
        inner: data::gen_blobs(&spec).map_err(py_err)?,
    })
}

/// Like `gen_blobs` with a fraction of instances replaced by outliers;
/// returns the dataset and `flags[class][instance]`.
#[pyfunction]
#[pyo3(signature = (classes=20, per_class=40, channels=3, size=16, separation=10.0, noise=0.1,
                    fraction=0.2, rule="other-class", seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_outlier_blobs(
    classes: usize,
    per_class: usize,
    channels: usize,
    size: usize,
    separation: f64,
    noise: f64,
    fraction: f64,
    rule: &str,
    seed: u64,
) -> PyResult<(PyDataset, Vec<Vec<bool>>)> {
    let spec = synthetic_spec(
        classes, per_class, channels, size, separation, noise, fraction, rule, seed,
    )?;
    let (inner, flags) = data::gen_outlier_blobs(&spec).map_err(py_err)?;
    Ok((PyDataset { inner }, flags.0))
}

/// Disjoint `(train, val, test)` class-id lists.
#[pyfunction]
#[pyo3(signature = (num_classes, ratios=(0.64, 0.16, 0.2), seed=0))]
fn split_classes(
    num_classes: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = data::split_classes(num_classes, ratios, seed).map_err(py_err)?;
    Ok((s.train, s.val, s.test))
}

#[pyclass(name = "Model", module = "icrl")]
struct PyModel {
    inner: IcrlModel,
    train: TrainConfig,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (shots=5, blocks=4, channels=32, input_size=32, input_channels=3,
                        pooling="full", airn=true, tau=10.0, seed=0, zero_airn=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        shots: usize,
        blocks: usize,
        channels: usize,
        input_size: usize,
        input_channels: usize,
        pooling: &str,
        airn: bool,
        tau: f64,
        seed: u64,
        zero_airn: bool,
    ) -> PyResult<Self> {
        let backbone = BackboneConfig {
            blocks,
            channels,
            input_size,
            input_channels,
            pool: 2,
        };
        let mut config = ModelConfig::new(backbone, shots);
        config.pooling = pooling.parse::<PoolingVariant>().map_err(py_err)?;
        config.airn = airn;
        config.tau = tau;
        let init = if zero_airn { AirnInit::Zero } else { AirnInit::Random };
        let inner = IcrlModel::new(config, seed, init).map_err(py_err)?;
        let train = TrainConfig {
            shots,
            seed,
            ..TrainConfig::default()
        };
        Ok(PyModel { inner, train })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        let (inner, train) = model_from_checkpoint(&ck).map_err(py_err)?;
        Ok(PyModel { inner, train })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_checkpoint(&self.inner, &self.train).save(path).map_err(py_err)
    }

    #[getter]
    fn shots(&self) -> usize {
        self.inner.config.shots
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.trainable()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.iter().map(|p| p.value.len()).sum()
    }

    /// Model and training settings as `key -> value` strings.
    fn config(&self) -> BTreeMap<String, String> {
        let mut m = self.train.to_kv();
        m.extend(self.inner.config.to_kv());
        m
    }

    /// Episodic meta-training on `classes`. `options` maps training config
    /// keys (`n`, `k`, `m`, `epochs`, `episodes`, `module_lr`, ...) to values.
    /// Returns one dict per episode.
    #[pyo3(signature = (dataset, classes, options=None))]
    fn meta_train(
        &mut self,
        py: Python<'_>,
        dataset: PyRef<'_, PyDataset>,
        classes: Vec<usize>,
        options: Option<BTreeMap<String, String>>,
    ) -> PyResult<Vec<BTreeMap<String, f64>>> {
        let mut cfg = self.train.clone();
        for (k, v) in options.unwrap_or_default() {
            if !cfg.set(&k, &v).map_err(py_err)? {
                return Err(PyValueError::new_err(format!("unknown training option `{}`", k)));
            }
        }
        let data = &dataset.inner;
        let model = &mut self.inner;
        let rows = py
            .detach(|| episodes::meta_train(data, &classes, model, &cfg))
            .map_err(py_err)?;
        self.train = cfg;
        Ok(rows
            .iter()
            .map(|r| {
                BTreeMap::from([
                    ("epoch".to_string(), r.epoch as f64),
                    ("episode".to_string(), r.episode as f64),
                    ("l_cls".to_string(), r.losses.l_cls),
                    ("l_intra".to_string(), r.losses.l_intra),
                    ("l_inter".to_string(), r.losses.l_inter),
                    ("l_joint".to_string(), r.losses.l_joint),
                    ("query_acc".to_string(), r.query_acc),
                ])
            })
            .collect())
    }

    /// Mean accuracy and 95% interval half-width over `episodes` episodes.
    #[pyo3(signature = (dataset, classes, episodes=600, n=5, k=None, m=15, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: PyRef<'_, PyDataset>,
        classes: Vec<usize>,
        episodes: usize,
        n: usize,
        k: Option<usize>,
        m: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = EvalSpec {
            episodes,
            ways: n,
            shots: k.unwrap_or(self.inner.config.shots),
            queries: m,
            seed,
        };
        let data = &dataset.inner;
        let model = &self.inner;
        let report = py
            .detach(|| episodes::evaluate(model, data, &classes, &spec))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("mean", report.mean)?;
        d.set_item("ci95", report.ci95)?;
        d.set_item("episodes", report.episodes)?;
        d.set_item("n", report.n)?;
        d.set_item("k", report.k)?;
        d.set_item("m", report.m)?;
        d.set_item("seed", report.seed)?;
        d.set_item("text", report.to_text())?;
        d.set_item("accuracies", report.accuracies)?;
        Ok(d)
    }

    /// Classifies evaluation episode `index` for `seed` and returns the
    /// predictions together with per-class significance weights.
    #[pyo3(signature = (dataset, classes, n=5, k=None, m=15, seed=0, index=0))]
    #[allow(clippy::too_many_arguments)]
    fn infer_episode<'py>(
        &self,
        py: Python<'py>,
        dataset: PyRef<'_, PyDataset>,
        classes: Vec<usize>,
        n: usize,
        k: Option<usize>,
        m: usize,
        seed: u64,
        index: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = EvalSpec {
            episodes: 1,
            ways: n,
            shots: k.unwrap_or(self.inner.config.shots),
            queries: m,
            seed,
        };
        let pool = ClassPool::all(&dataset.inner, &classes).map_err(py_err)?;
        let ep = eval_episode(&pool, &spec, index).map_err(py_err)?;
        let inf = infer_episode(&self.inner, &dataset.inner, &ep).map_err(py_err)?;
        let labels: Vec<usize> = (0..ep.ways())
            .flat_map(|s| std::iter::repeat_n(s, ep.queries_per_class()))
            .collect();
        let d = PyDict::new(py);
        d.set_item("classes", ep.classes.clone())?;
        d.set_item("support", ep.support.clone())?;
        d.set_item("query", ep.query.clone())?;
        d.set_item("labels", labels)?;
        d.set_item("predictions", inf.predictions)?;
        d.set_item("accuracy", inf.accuracy)?;
        d.set_item(
            "significance",
            inf.significance.map(|s| s.into_iter().map(|v| v.0).collect::<Vec<_>>()),
        )?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(shots={}, pooling={}, airn={}, channels={}, blocks={})",
            c.shots,
            c.pooling,
            if c.airn { "on" } else { "off" },
            c.backbone.channels,
            c.backbone.blocks
        )
    }
}

#[pymodule]
fn icrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(gen_outlier_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(split_classes, m)?)?;
    m.add("DEFAULT_EVAL_EPISODES", episodes::DEFAULT_EVAL_EPISODES)?;
    Ok(())
}
