//! Disjoint train/val/test class partitions.
//!
//! Split files are plain text: a `[train]`, `[val]` or `[test]` header
//! followed by one global class id per line. Blank lines and `#` comments
//! are ignored.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Builds a split from explicit lists, rejecting duplicates and overlap.
    pub fn from_lists(train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let s = SplitSpec { train, val, test };
        s.check_disjoint()?;
        Ok(s)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (part, ids) in self.parts() {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::Contract(format!(
                        "class {} appears twice (again in {})",
                        id, part
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fails if any id is not a class of a container with `num_classes` classes.
    pub fn check_bounds(&self, num_classes: usize) -> Result<()> {
        for (part, ids) in self.parts() {
            if let Some(&bad) = ids.iter().find(|&&id| id >= num_classes) {
                return Err(Error::Contract(format!(
                    "{} split names class {} but the dataset has {} classes",
                    part, bad, num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn parts(&self) -> [(&'static str, &[usize]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn part(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split `{}` (train|val|test)", name))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (part, ids) in self.parts() {
            s.push_str(&format!("[{}]\n", part));
            for id in ids {
                s.push_str(&format!("{}\n", id));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lists: [Vec<usize>; 3] = Default::default();
        let mut current: Option<usize> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("split file line {}: {} `{}`", ln + 1, what, raw));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "train" => 0,
                    "val" => 1,
                    "test" => 2,
                    _ => return Err(bad("unknown section")),
                });
                continue;
            }
            let slot = current.ok_or_else(|| bad("class id before any section header"))?;
            lists[slot].push(line.parse().map_err(|_| bad("not a class id"))?);
        }
        let [train, val, test] = lists;
        Self::from_lists(train, val, test)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Shuffles `0..num_classes` and cuts it by `ratios` (train, val, test).
/// Counts are `floor(ratio·num_classes)`, so ratios summing below one leave
/// classes unused.
pub fn split_classes(num_classes: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || a + b + c > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {:?} must be in [0,1] and sum to at most 1",
            ratios
        )));
    }
    let count = |r: f64| ((r * num_classes as f64) + 1e-9).floor() as usize;
    let (nt, nv, ns) = (count(a), count(b), count(c));
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut rng::stream(seed, "split"));
    let test = ids[nt + nv..nt + nv + ns].to_vec();
    let val = ids[nt..nt + nv].to_vec();
    ids.truncate(nt);
    SplitSpec::from_lists(ids, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_classes_standard_counts() {
        let s = split_classes(100, (0.64, 0.16, 0.20), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        let all: BTreeSet<usize> = s.parts().iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn overlap_rejected() {
        assert!(SplitSpec::from_lists(vec![0, 1], vec![1], vec![2]).is_err());
        assert!(SplitSpec::from_lists(vec![0, 0], vec![], vec![]).is_err());
    }

    #[test]
    fn seeded_partition_is_stable() {
        let a = split_classes(30, (0.5, 0.2, 0.3), 9).unwrap();
        assert_eq!(a, split_classes(30, (0.5, 0.2, 0.3), 9).unwrap());
        assert_ne!(a, split_classes(30, (0.5, 0.2, 0.3), 10).unwrap());
    }

    #[test]
    fn text_round_trip() {
        let s = SplitSpec::from_lists(vec![4, 2], vec![0], vec![1, 3]).unwrap();
        assert_eq!(SplitSpec::from_text(&s.to_text()).unwrap(), s);
        let parsed = SplitSpec::from_text("# comment\n[val]\n7\n\n[train]\n1 # note\n").unwrap();
        assert_eq!(parsed.train, vec![1]);
        assert_eq!(parsed.val, vec![7]);
        assert!(SplitSpec::from_text("3\n").is_err());
        assert!(SplitSpec::from_text("[extra]\n").is_err());
    }

    #[test]
    fn bad_ratios() {
        assert!(split_classes(10, (0.8, 0.2, 0.2), 0).is_err());
        assert!(SplitSpec::from_lists(vec![5], vec![], vec![])
            .unwrap()
            .check_bounds(5)
            .is_err());
    }
}
