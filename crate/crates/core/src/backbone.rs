//! Convolutional feature extractor (conv 3×3 → ReLU → max-pool blocks) and
//! the linear head used during whole-classifier pre-training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamStore, Scalar, Tensor, Var};

pub const PRETRAIN_PREFIX: &str = "pretrain.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub channels: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub pool: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            blocks: 4,
            channels: 32,
            input_size: 32,
            input_channels: 3,
            pool: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.input_channels == 0 || self.pool < 2 {
            return Err(Error::Config(format!("degenerate backbone config {:?}", self)));
        }
        let div = self.pool.pow(self.blocks as u32);
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by {}^{}",
                self.input_size, self.pool, self.blocks
            )));
        }
        Ok(())
    }

    /// Spatial extent of the final feature map.
    pub fn output_size(&self) -> usize {
        self.input_size / self.pool.pow(self.blocks as u32)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }

    pub fn conv_weight(i: usize) -> String {
        format!("backbone.conv{}.weight", i)
    }

    pub fn conv_bias(i: usize) -> String {
        format!("backbone.conv{}.bias", i)
    }
}

/// Output of the backbone, `channels × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn from_var<T: Scalar>(g: &Graph<T>, var: Var) -> Result<Self> {
        match *g.shape(var) {
            [channels, height, width] => Ok(FeatureMap {
                var,
                channels,
                height,
                width,
            }),
            ref s => Err(Error::Shape(format!("feature map must be d×h×w, got {:?}", s))),
        }
    }
}

/// He-normal tensor: N(0, 2/fan_in).
pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) {
    let mut c_in = cfg.input_channels;
    for i in 0..cfg.blocks {
        let w = he_normal(rng, &[cfg.channels, c_in, 3, 3], c_in * 9);
        store.insert(BackboneConfig::conv_weight(i), ParamGroup::Backbone, w);
        store.insert(
            BackboneConfig::conv_bias(i),
            ParamGroup::Backbone,
            Tensor::zeros([cfg.channels]),
        );
        c_in = cfg.channels;
    }
}

pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    cfg: &BackboneConfig,
    image: Var,
) -> Result<FeatureMap> {
    let want = cfg.image_shape();
    if g.shape(image) != want {
        return Err(Error::Shape(format!(
            "backbone expects image {:?}, got {:?}",
            want,
            g.shape(image)
        )));
    }
    let mut x = image;
    for i in 0..cfg.blocks {
        let w = params.var(&BackboneConfig::conv_weight(i));
        let b = params.var(&BackboneConfig::conv_bias(i));
        x = g.conv2d(x, w, Some(b), 1, 1);
        x = g.relu(x);
        x = g.maxpool2d(x, cfg.pool, cfg.pool);
    }
    FeatureMap::from_var(g, x)
}

pub fn init_pretrain_head(store: &mut ParamStore, dim: usize, classes: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (dim as f32).sqrt();
    let w = Tensor::from_fn([classes, dim], |_| rng.gen_range(-bound..bound));
    store.insert(format!("{}fc.weight", PRETRAIN_PREFIX), ParamGroup::Module, w);
    store.insert(
        format!("{}fc.bias", PRETRAIN_PREFIX),
        ParamGroup::Module,
        Tensor::zeros([classes]),
    );
}

/// Global-average-pool `fm` to a `d`-vector.
pub fn global_average_pool<T: Scalar>(g: &mut Graph<T>, fm: &FeatureMap) -> Var {
    let flat = g.reshape(fm.var, &[fm.channels, fm.height * fm.width]);
    g.reduce_mean(flat, 1)
}

/// Pooled feature followed by the affine classification layer; returns
/// logits over every pre-training class.
pub fn pretrain_head_forward<T: Scalar>(g: &mut Graph<T>, params: &Bound, fm: &FeatureMap) -> Var {
    let w = params.var(&format!("{}fc.weight", PRETRAIN_PREFIX));
    let b = params.var(&format!("{}fc.bias", PRETRAIN_PREFIX));
    let pooled = global_average_pool(g, fm);
    let col = g.reshape(pooled, &[fm.channels, 1]);
    let z = g.matmul(w, col);
    let classes = g.shape(z)[0];
    let z = g.reshape(z, &[classes]);
    g.add(z, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &BackboneConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_backbone(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(0));
        s
    }

    #[test]
    fn default_config_maps_32_to_2() {
        let cfg = BackboneConfig::default();
        let s = setup(&cfg);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::full([3, 32, 32], 0.5));
        let fm = backbone_forward(&mut g, &p, &cfg, img).unwrap();
        assert_eq!((fm.channels, fm.height, fm.width), (32, 2, 2));
        assert_eq!(cfg.output_size(), 2);
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_map() {
        let cfg = BackboneConfig {
            input_size: 16,
            ..Default::default()
        };
        let s = setup(&cfg);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::zeros([3, 16, 16]));
        let fm = backbone_forward(&mut g, &p, &cfg, img).unwrap();
        assert!(g.value(fm.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = BackboneConfig {
            input_size: 16,
            channels: 8,
            ..Default::default()
        };
        let s = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = Tensor::from_fn([3, 16, 16], |_| rng.gen::<f32>());
        let run = || {
            let mut g = Graph::<f32>::new();
            let p = s.bind(&mut g);
            let img = g.constant(image.clone());
            let fm = backbone_forward(&mut g, &p, &cfg, img).unwrap();
            g.value(fm.var).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = BackboneConfig::default();
        let s = setup(&cfg);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let img = g.constant(Tensor::zeros([3, 16, 16]));
        assert!(matches!(backbone_forward(&mut g, &p, &cfg, img), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            input_size: 24,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            channels: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn head_store(w: Vec<f32>, classes: usize, d: usize) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("pretrain.fc.weight", ParamGroup::Module, Tensor::new([classes, d], w));
        s.insert("pretrain.fc.bias", ParamGroup::Module, Tensor::zeros([classes]));
        s
    }

    #[test]
    fn head_on_zero_feature_is_uniform() {
        let s = head_store(vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4], 3, 2);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let fm = g.constant(Tensor::zeros([2, 2, 2]));
        let fm = FeatureMap::from_var(&g, fm).unwrap();
        let z = pretrain_head_forward(&mut g, &p, &fm);
        assert_eq!(g.value(z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_head_picks_pooled_coordinate() {
        let s = head_store(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        // pooled feature [1, 0]
        let fm = g.constant(Tensor::new([2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]));
        let fm = FeatureMap::from_var(&g, fm).unwrap();
        let z = pretrain_head_forward(&mut g, &p, &fm);
        assert_eq!(g.value(z).data(), &[1.0, 0.0]);
    }

    #[test]
    fn head_matches_pool_then_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (classes, d, hw) = (4, 3, 4);
        let w: Vec<f32> = (0..classes * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f32> = (0..d * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pooled: Vec<f64> = f
            .chunks(hw)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
            .collect();
        let want: Vec<f64> = (0..classes)
            .map(|c| b[c] as f64 + (0..d).map(|j| w[c * d + j] as f64 * pooled[j]).sum::<f64>())
            .collect();

        let mut s = head_store(w, classes, d);
        s.insert("pretrain.fc.bias", ParamGroup::Module, Tensor::new([classes], b));
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let fm = g.constant(Tensor::new([d, 2, 2], f));
        let fm = FeatureMap::from_var(&g, fm).unwrap();
        let z = pretrain_head_forward(&mut g, &p, &fm);
        for (&got, &w) in g.value(z).data().iter().zip(&want) {
            assert!((got as f64 - w).abs() < 1e-6);
        }
    }
}
