use rand::seq::index;
use rand::Rng;

use crate::data::DatasetContainer;
use crate::error::{Error, Result};
use crate::model::EpisodeInputs;
use crate::tensor::Tensor;

/// Classes an episode may draw from, each with the instance indices it may use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPool {
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn new(classes: Vec<usize>, members: Vec<Vec<usize>>) -> Result<Self> {
        if classes.len() != members.len() {
            return Err(Error::Contract("class pool needs one member list per class".into()));
        }
        Ok(ClassPool { classes, members })
    }

    /// Every instance of the listed classes.
    pub fn all(data: &DatasetContainer, classes: &[usize]) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= data.num_classes()) {
            return Err(Error::Contract(format!(
                "class {} is not in a dataset of {} classes",
                bad,
                data.num_classes()
            )));
        }
        let members = classes
            .iter()
            .map(|&c| (0..data.class(c).instances.len()).collect())
            .collect();
        Ok(ClassPool {
            classes: classes.to_vec(),
            members,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn members(&self, slot: usize) -> &[usize] {
        &self.members[slot]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// One N-way K-shot task. Instances are `(global class, instance index)` via
/// the class map: `support[n][k]` and `query[n][m]` index into class `classes[n]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn queries_per_class(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }

    /// Support images class-major, then query images class-major with their slot labels.
    pub fn images<'a>(&self, data: &'a DatasetContainer) -> (Vec<&'a Tensor<f32>>, Vec<&'a Tensor<f32>>, Vec<usize>) {
        let mut support = Vec::with_capacity(self.ways() * self.shots());
        let mut queries = Vec::with_capacity(self.ways() * self.queries_per_class());
        let mut labels = Vec::with_capacity(queries.capacity());
        for (slot, &c) in self.classes.iter().enumerate() {
            support.extend(self.support[slot].iter().map(|&i| data.instance(c, i)));
            for &i in &self.query[slot] {
                queries.push(data.instance(c, i));
                labels.push(slot);
            }
        }
        (support, queries, labels)
    }

    pub fn inputs<'a>(&self, data: &'a DatasetContainer) -> EpisodeInputs<'a> {
        let (support, queries, query_labels) = self.images(data);
        EpisodeInputs {
            ways: self.ways(),
            shots: self.shots(),
            support,
            queries,
            query_labels,
        }
    }
}

/// Draws `n` classes without replacement, then `k + m` distinct instances per
/// class; the first `k` form the support set in draw order.
pub fn sample_episode(pool: &ClassPool, rng: &mut impl Rng, n: usize, k: usize, m: usize) -> Result<Episode> {
    if n == 0 || k == 0 || m == 0 {
        return Err(Error::Contract(format!(
            "episode sizes must be positive, got N={} K={} M={}",
            n, k, m
        )));
    }
    if pool.len() < n {
        return Err(Error::Insufficient(format!(
            "{}-way episodes need {} classes, pool has {}",
            n,
            n,
            pool.len()
        )));
    }
    if let Some(slot) = (0..pool.len()).find(|&s| pool.members(s).len() < k + m) {
        return Err(Error::Insufficient(format!(
            "class {} has {} instances, {}-shot episodes with {} queries need {}",
            pool.classes()[slot],
            pool.members(slot).len(),
            k,
            m,
            k + m
        )));
    }
    let slots = index::sample(rng, pool.len(), n).into_vec();
    let mut ep = Episode {
        classes: Vec::with_capacity(n),
        support: Vec::with_capacity(n),
        query: Vec::with_capacity(n),
    };
    for s in slots {
        let members = pool.members(s);
        let picks: Vec<usize> = index::sample(rng, members.len(), k + m)
            .iter()
            .map(|i| members[i])
            .collect();
        ep.classes.push(pool.classes()[s]);
        ep.support.push(picks[..k].to_vec());
        ep.query.push(picks[k..].to_vec());
    }
    Ok(ep)
}
