//! Synthetic image datasets.
//!
//! Every class has a random centre image `z_c ~ N(0, I)`. An instance of
//! class `c` is `clamp01(0.5 + 0.05·separation·z_c + noise·ε)` with fresh
//! `ε ~ N(0, I)`, so `separation = 10` gives centre pixels a spread of 0.5.
//! Centres, per-instance noise and outlier draws come from separate seeded
//! streams, so turning outliers off reproduces the clean dataset exactly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::container::{ClassData, DatasetContainer};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutlierRule {
    /// Drawn from a uniformly chosen other class's cluster.
    #[default]
    OtherClass,
    /// Every pixel uniform in [0, 1].
    UniformNoise,
}

impl fmt::Display for OutlierRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutlierRule::OtherClass => "other-class",
            OutlierRule::UniformNoise => "uniform",
        })
    }
}

impl FromStr for OutlierRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "other-class" => Ok(OutlierRule::OtherClass),
            "uniform" => Ok(OutlierRule::UniformNoise),
            _ => Err(Error::Config(format!(
                "unknown outlier rule `{}` (other-class|uniform)",
                s
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub instances_per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub separation: f64,
    pub noise: f64,
    pub outlier_fraction: f64,
    pub outlier_rule: OutlierRule,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            instances_per_class: 40,
            channels: 3,
            size: 16,
            separation: 10.0,
            noise: 0.1,
            outlier_fraction: 0.0,
            outlier_rule: OutlierRule::OtherClass,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.instances_per_class == 0 || self.channels == 0 || self.size == 0 {
            return Err(Error::Config(
                "synthetic dataset needs positive counts and sizes".into(),
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.outlier_fraction > 0.0 && self.outlier_rule == OutlierRule::OtherClass && self.classes < 2 {
            return Err(Error::Config("other-class outliers need at least two classes".into()));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }
}

/// Per-instance outlier flags, `flags[class][instance]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutlierFlags(pub Vec<Vec<bool>>);

impl OutlierFlags {
    pub fn is_outlier(&self, class: usize, instance: usize) -> bool {
        self.0[class][instance]
    }

    pub fn count(&self) -> usize {
        self.0.iter().flatten().filter(|&&f| f).count()
    }

    /// CSV with header `class,instance,outlier`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,instance,outlier\n");
        for (c, row) in self.0.iter().enumerate() {
            for (i, &f) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", c, i, f as u8));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<bool>> = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("bad outlier flag line {}: `{}`", ln + 1, line));
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let c: usize = parts[0].parse().map_err(|_| bad())?;
            let i: usize = parts[1].parse().map_err(|_| bad())?;
            let f = match parts[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            if c >= rows.len() {
                rows.resize(c + 1, Vec::new());
            }
            if i != rows[c].len() {
                return Err(bad());
            }
            rows[c].push(f);
        }
        Ok(OutlierFlags(rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

fn centers(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut r = rng::stream(spec.seed, "synth.centers");
    (0..spec.classes)
        .map(|_| (0..spec.pixels()).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Which instance the outlier stream marks, and the class it is drawn from.
/// Public so callers can audit the flags of a generated dataset.
pub fn outlier_draw(spec: &SyntheticSpec, class: usize, instance: usize) -> Option<usize> {
    if spec.outlier_fraction <= 0.0 {
        return None;
    }
    let idx = (class * spec.instances_per_class + instance) as u64;
    let mut r = rng::stream_indexed(spec.seed, "synth.outlier", idx);
    let u: f64 = r.gen();
    if u >= spec.outlier_fraction {
        return None;
    }
    Some(match spec.outlier_rule {
        OutlierRule::OtherClass => {
            let pick = r.gen_range(0..spec.classes - 1);
            if pick >= class {
                pick + 1
            } else {
                pick
            }
        }
        OutlierRule::UniformNoise => class,
    })
}

/// Noise-free centre image of each class (after clamping).
pub fn class_centers(spec: &SyntheticSpec) -> Vec<Tensor<f32>> {
    let shape = [spec.channels, spec.size, spec.size];
    let scale = 0.05 * spec.separation;
    centers(spec)
        .into_iter()
        .map(|z| {
            Tensor::new(
                shape,
                z.iter().map(|&v| (0.5 + scale * v).clamp(0.0, 1.0) as f32).collect(),
            )
        })
        .collect()
}

/// Isotropic Gaussian clusters, one per class.
pub fn gen_blobs(spec: &SyntheticSpec) -> Result<DatasetContainer> {
    let clean = SyntheticSpec {
        outlier_fraction: 0.0,
        ..spec.clone()
    };
    gen_outlier_blobs(&clean).map(|(c, _)| c)
}

/// Gaussian clusters where a fraction of instances is replaced according to
/// the outlier rule; returns the per-instance flags alongside.
pub fn gen_outlier_blobs(spec: &SyntheticSpec) -> Result<(DatasetContainer, OutlierFlags)> {
    spec.validate()?;
    let centers = centers(spec);
    let shape = [spec.channels, spec.size, spec.size];
    let scale = 0.05 * spec.separation;
    let mut classes = Vec::with_capacity(spec.classes);
    let mut flags = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut instances = Vec::with_capacity(spec.instances_per_class);
        let mut class_flags = Vec::with_capacity(spec.instances_per_class);
        for i in 0..spec.instances_per_class {
            let idx = (c * spec.instances_per_class + i) as u64;
            let mut noise = rng::stream_indexed(spec.seed, "synth.noise", idx);
            let draw = outlier_draw(spec, c, i);
            let data: Vec<f32> = match (draw, spec.outlier_rule) {
                (Some(_), OutlierRule::UniformNoise) => (0..spec.pixels()).map(|_| noise.gen::<f32>()).collect(),
                _ => {
                    let src = &centers[draw.unwrap_or(c)];
                    src.iter()
                        .map(|&z| {
                            let e: f64 = noise.sample(StandardNormal);
                            (0.5 + scale * z + spec.noise * e).clamp(0.0, 1.0) as f32
                        })
                        .collect()
                }
            };
            instances.push(Tensor::new(shape, data));
            class_flags.push(draw.is_some());
        }
        classes.push(ClassData {
            name: format!("blob{:03}", c),
            instances,
        });
        flags.push(class_flags);
    }
    let provenance = format!(
        "synthetic: classes={} per_class={} size={}x{}x{} separation={} noise={} outliers={}({}) seed={}",
        spec.classes,
        spec.instances_per_class,
        spec.channels,
        spec.size,
        spec.size,
        spec.separation,
        spec.noise,
        spec.outlier_fraction,
        spec.outlier_rule,
        spec.seed
    );
    Ok((DatasetContainer::new(classes, provenance)?, OutlierFlags(flags)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            instances_per_class: 6,
            channels: 1,
            size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_collapses_each_class() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let c = gen_blobs(&spec).unwrap();
        let centres = class_centers(&spec);
        for (k, class) in c.classes().iter().enumerate() {
            for t in &class.instances {
                assert_eq!(t, &centres[k]);
            }
        }
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let spec = SyntheticSpec { noise: 2.0, ..small() };
        let c = gen_blobs(&spec).unwrap();
        for class in c.classes() {
            for t in &class.instances {
                assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn same_seed_same_container() {
        assert_eq!(gen_blobs(&small()).unwrap(), gen_blobs(&small()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(gen_blobs(&small()).unwrap(), gen_blobs(&other).unwrap());
    }

    #[test]
    fn zero_fraction_matches_clean_generator() {
        let (c, flags) = gen_outlier_blobs(&small()).unwrap();
        assert_eq!(c, gen_blobs(&small()).unwrap());
        assert_eq!(flags.count(), 0);
    }

    #[test]
    fn flags_csv_round_trip() {
        let spec = SyntheticSpec {
            outlier_fraction: 0.3,
            ..small()
        };
        let (_, flags) = gen_outlier_blobs(&spec).unwrap();
        assert_eq!(OutlierFlags::from_csv(&flags.to_csv()).unwrap(), flags);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticSpec {
            separation: 0.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            outlier_fraction: 1.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            classes: 1,
            outlier_fraction: 0.2,
            ..small()
        }
        .validate()
        .is_err());
    }
}
