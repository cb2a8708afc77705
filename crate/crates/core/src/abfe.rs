//! Attentional bilinear feature extractor.
//!
//! Two parallel 1×1 convolutions of the backbone map are multiplied
//! elementwise, a third 1×1 convolution followed by a sigmoid scores every
//! spatial position, and the attention-weighted spatial sum is L2-normalised
//! into the instance representation. The remaining [`PoolingVariant`]s are
//! structural ablations of that pipeline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{backbone_forward, global_average_pool, he_normal, BackboneConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamGroup, ParamStore, Scalar, Tensor, Var};

pub const PROJ_A_WEIGHT: &str = "abfe.proj_a.weight";
pub const PROJ_A_BIAS: &str = "abfe.proj_a.bias";
pub const PROJ_B_WEIGHT: &str = "abfe.proj_b.weight";
pub const PROJ_B_BIAS: &str = "abfe.proj_b.bias";
pub const ATTENTION_WEIGHT: &str = "abfe.attention.weight";
pub const ATTENTION_BIAS: &str = "abfe.attention.bias";

/// Norm guard for the final L2 normalisation.
pub const NORM_EPS: f64 = 1e-12;

/// Largest channel count for which the `d×d` naive bilinear descriptor is allowed.
pub const NAIVE_BILINEAR_MAX_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolingVariant {
    /// Two 1×1 projections, Hadamard product, sigmoid attention pooling.
    #[default]
    Full,
    /// Global average pooling replaces attention pooling (model-1).
    GlobalAverage,
    /// No pooling: the whole intermediate map is flattened (model-2).
    Flatten,
    /// Projections removed, attention pooling on the raw map (model-3).
    NoProjection,
    /// One projection times the raw map (model-4).
    SingleProjection,
    /// Spatially averaged outer product of the raw map (model-5).
    NaiveBilinear,
}

impl PoolingVariant {
    pub const ALL: [PoolingVariant; 6] = [
        PoolingVariant::Full,
        PoolingVariant::GlobalAverage,
        PoolingVariant::Flatten,
        PoolingVariant::NoProjection,
        PoolingVariant::SingleProjection,
        PoolingVariant::NaiveBilinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingVariant::Full => "full",
            PoolingVariant::GlobalAverage => "model-1",
            PoolingVariant::Flatten => "model-2",
            PoolingVariant::NoProjection => "model-3",
            PoolingVariant::SingleProjection => "model-4",
            PoolingVariant::NaiveBilinear => "model-5",
        }
    }

    fn uses_w1(self) -> bool {
        !matches!(self, PoolingVariant::NoProjection | PoolingVariant::NaiveBilinear)
    }

    fn uses_w2(self) -> bool {
        matches!(
            self,
            PoolingVariant::Full | PoolingVariant::GlobalAverage | PoolingVariant::Flatten
        )
    }

    fn uses_attention(self) -> bool {
        matches!(
            self,
            PoolingVariant::Full | PoolingVariant::NoProjection | PoolingVariant::SingleProjection
        )
    }

    /// Length of the instance representation for a `d×h×w` backbone map.
    pub fn embedding_dim(self, d: usize, h: usize, w: usize) -> usize {
        match self {
            PoolingVariant::Flatten => d * h * w,
            PoolingVariant::NaiveBilinear => d * d,
            _ => d,
        }
    }
}

impl fmt::Display for PoolingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling variant `{}` (expected full or model-1..5)", s)))
    }
}

/// Adds the extractor parameters the variant needs. Projection kernels are
/// He-initialised; the attention kernel and every bias start at zero, so the
/// initial attention is uniformly 0.5.
pub fn init_abfe(store: &mut ParamStore, d: usize, variant: PoolingVariant, rng: &mut impl Rng) {
    if variant.uses_w1() {
        store.insert(PROJ_A_WEIGHT, ParamGroup::Module, he_normal(rng, &[d, d, 1, 1], d));
        store.insert(PROJ_A_BIAS, ParamGroup::Module, Tensor::zeros([d]));
    }
    if variant.uses_w2() {
        store.insert(PROJ_B_WEIGHT, ParamGroup::Module, he_normal(rng, &[d, d, 1, 1], d));
        store.insert(PROJ_B_BIAS, ParamGroup::Module, Tensor::zeros([d]));
    }
    if variant.uses_attention() {
        store.insert(ATTENTION_WEIGHT, ParamGroup::Module, Tensor::zeros([1, d, 1, 1]));
        store.insert(ATTENTION_BIAS, ParamGroup::Module, Tensor::zeros([1]));
    }
}

/// `(proj_a ∗ map) ⊙ (proj_b ∗ map)` for the full extractor; the ablations replace one
/// or both projections by the identity.
pub fn bilinear_intermediate<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    fm: &FeatureMap,
    variant: PoolingVariant,
) -> Var {
    let f = fm.var;
    match variant {
        PoolingVariant::NoProjection | PoolingVariant::NaiveBilinear => f,
        PoolingVariant::SingleProjection => {
            let f1 = g.conv2d(f, params.var(PROJ_A_WEIGHT), Some(params.var(PROJ_A_BIAS)), 1, 0);
            g.hadamard(f1, f)
        }
        _ => {
            let f1 = g.conv2d(f, params.var(PROJ_A_WEIGHT), Some(params.var(PROJ_A_BIAS)), 1, 0);
            let f2 = g.conv2d(f, params.var(PROJ_B_WEIGHT), Some(params.var(PROJ_B_BIAS)), 1, 0);
            g.hadamard(f1, f2)
        }
    }
}

/// Spatial attention `sigmoid(attention ∗ inter)`, reshaped to `hw × 1`.
pub fn attention_weights<T: Scalar>(g: &mut Graph<T>, params: &Bound, inter: Var) -> Var {
    let s = g.shape(inter).to_vec();
    let logits = g.conv2d(
        inter,
        params.var(ATTENTION_WEIGHT),
        Some(params.var(ATTENTION_BIAS)),
        1,
        0,
    );
    let a = g.sigmoid(logits);
    g.reshape(a, &[s[1] * s[2], 1])
}

/// `reshape(inter, d×hw) · attention`, an unnormalised attention-weighted spatial sum.
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, params: &Bound, inter: Var) -> Var {
    let s = g.shape(inter).to_vec();
    let (d, hw) = (s[0], s[1] * s[2]);
    let a = attention_weights(g, params, inter);
    let flat = g.reshape(inter, &[d, hw]);
    let pooled = g.matmul(flat, a);
    g.reshape(pooled, &[d])
}

/// Pre-normalisation descriptor of a backbone map.
pub fn pool_features<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    fm: &FeatureMap,
    variant: PoolingVariant,
) -> Result<Var> {
    let inter = bilinear_intermediate(g, params, fm, variant);
    let (d, hw) = (fm.channels, fm.height * fm.width);
    Ok(match variant {
        PoolingVariant::Full | PoolingVariant::NoProjection | PoolingVariant::SingleProjection => {
            attention_pool(g, params, inter)
        }
        PoolingVariant::GlobalAverage => {
            let m = FeatureMap { var: inter, ..*fm };
            global_average_pool(g, &m)
        }
        PoolingVariant::Flatten => g.reshape(inter, &[d * hw]),
        PoolingVariant::NaiveBilinear => {
            if d > NAIVE_BILINEAR_MAX_CHANNELS {
                return Err(Error::Config(format!(
                    "naive bilinear pooling needs d <= {}, got {}",
                    NAIVE_BILINEAR_MAX_CHANNELS, d
                )));
            }
            let x = g.reshape(inter, &[d, hw]);
            let xt = g.transpose(x);
            let outer = g.matmul(x, xt);
            let outer = g.scale(outer, T::lit(1.0 / hw as f64));
            g.reshape(outer, &[d * d])
        }
    })
}

/// Image to unit-norm instance representation. Support and query images go
/// through this same path.
pub fn embed_instance<T: Scalar>(
    g: &mut Graph<T>,
    params: &Bound,
    backbone: &BackboneConfig,
    variant: PoolingVariant,
    image: Var,
) -> Result<Var> {
    let fm = backbone_forward(g, params, backbone, image)?;
    let pooled = pool_features(g, params, &fm, variant)?;
    Ok(g.l2_normalize(pooled, T::lit(NORM_EPS)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_kernel(d: usize) -> Tensor<f32> {
        Tensor::from_fn([d, d, 1, 1], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    fn store(d: usize, proj_a: Tensor<f32>, proj_b: Tensor<f32>, attention: Tensor<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(PROJ_A_WEIGHT, ParamGroup::Module, proj_a);
        s.insert(PROJ_A_BIAS, ParamGroup::Module, Tensor::zeros([d]));
        s.insert(PROJ_B_WEIGHT, ParamGroup::Module, proj_b);
        s.insert(PROJ_B_BIAS, ParamGroup::Module, Tensor::zeros([d]));
        s.insert(ATTENTION_WEIGHT, ParamGroup::Module, attention);
        s.insert(ATTENTION_BIAS, ParamGroup::Module, Tensor::zeros([1]));
        s
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_projections_square_the_map() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm_t = random(&mut rng, &[d, 2, 2]);
        let s = store(d, identity_kernel(d), identity_kernel(d), Tensor::zeros([1, d, 1, 1]));
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let v = g.constant(fm_t.clone());
        let fm = FeatureMap::from_var(&g, v).unwrap();
        let h = bilinear_intermediate(&mut g, &p, &fm, PoolingVariant::Full);
        let want: Vec<f32> = fm_t.data().iter().map(|x| x * x).collect();
        assert_eq!(g.value(h).data(), &want[..]);
    }

    #[test]
    fn zero_second_projection_annihilates() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = store(
            d,
            random(&mut rng, &[d, d, 1, 1]),
            Tensor::zeros([d, d, 1, 1]),
            Tensor::zeros([1, d, 1, 1]),
        );
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let v = g.constant(random(&mut rng, &[d, 3, 3]));
        let fm = FeatureMap::from_var(&g, v).unwrap();
        let h = bilinear_intermediate(&mut g, &p, &fm, PoolingVariant::Full);
        assert!(g.value(h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn intermediate_matches_per_pixel_products() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (proj_a, proj_b) = (random(&mut rng, &[d, d, 1, 1]), random(&mut rng, &[d, d, 1, 1]));
        let fm_t = random(&mut rng, &[d, 2, 2]);
        let mut want = vec![0.0f64; d * 4];
        for c in 0..d {
            for px in 0..4 {
                let f1: f64 = (0..d)
                    .map(|j| proj_a.data()[c * d + j] as f64 * fm_t.data()[j * 4 + px] as f64)
                    .sum();
                let f2: f64 = (0..d)
                    .map(|j| proj_b.data()[c * d + j] as f64 * fm_t.data()[j * 4 + px] as f64)
                    .sum();
                want[c * 4 + px] = f1 * f2;
            }
        }
        let s = store(d, proj_a, proj_b, Tensor::zeros([1, d, 1, 1]));
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let v = g.constant(fm_t);
        let fm = FeatureMap::from_var(&g, v).unwrap();
        let h = bilinear_intermediate(&mut g, &p, &fm, PoolingVariant::Full);
        for (&got, &w) in g.value(h).data().iter().zip(&want) {
            assert!((got as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_attention_kernel_halves_spatial_sum() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inter = random(&mut rng, &[d, 2, 3]);
        let want: Vec<f32> = inter.data().chunks(6).map(|c| 0.5 * c.iter().sum::<f32>()).collect();
        let s = store(d, identity_kernel(d), identity_kernel(d), Tensor::zeros([1, d, 1, 1]));
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let v = g.constant(inter);
        let out = attention_pool(&mut g, &p, v);
        for (&got, &w) in g.value(out).data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_constant_map_factorises() {
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let consts = [0.7f32, -1.3];
        let inter = Tensor::from_fn([d, 2, 2], |i| consts[i / 4]);
        let s = store(
            d,
            identity_kernel(d),
            identity_kernel(d),
            random(&mut rng, &[1, d, 1, 1]),
        );
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let v = g.constant(inter);
        let a = attention_weights(&mut g, &p, v);
        let total: f32 = g.value(a).data().iter().sum();
        let out = attention_pool(&mut g, &p, v);
        for (c, &got) in g.value(out).data().iter().enumerate() {
            assert!((got - consts[c] * total).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_pool_matches_double_loop() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inter = random(&mut rng, &[d, 2, 2]);
        let kernel = random(&mut rng, &[1, d, 1, 1]);
        let mut a = [0.0f64; 4];
        for (px, slot) in a.iter_mut().enumerate() {
            let z: f64 = (0..d)
                .map(|c| kernel.data()[c] as f64 * inter.data()[c * 4 + px] as f64)
                .sum();
            *slot = 1.0 / (1.0 + (-z).exp());
        }
        let mut want = vec![0.0f64; d];
        for c in 0..d {
            for px in 0..4 {
                want[c] += inter.data()[c * 4 + px] as f64 * a[px];
            }
        }
        let s = store(d, identity_kernel(d), identity_kernel(d), kernel);
        let mut g = Graph::<f32>::new();
        let p = s.bind(&mut g);
        let v = g.constant(inter);
        let out = attention_pool(&mut g, &p, v);
        for (&got, &w) in g.value(out).data().iter().zip(&want) {
            assert!((got as f64 - w).abs() < 1e-6);
        }
        let weights = attention_weights(&mut g, &p, v);
        assert!(g.value(weights).data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PoolingVariant::ALL {
            assert_eq!(v.as_str().parse::<PoolingVariant>().unwrap(), v);
        }
        assert!("model-6".parse::<PoolingVariant>().is_err());
    }
}
