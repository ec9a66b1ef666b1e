//! Seeded and geographic train/validation splits.

use std::collections::BTreeSet;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SampleDescriptor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    RandomRatio,
    Geographic,
}

/// Whether a random split assigns whole scenes or individual patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    #[default]
    Scene,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub ratio: f64,
    pub seed: u64,
    pub unit: SplitUnit,
    pub train_cities: Vec<String>,
    pub val_cities: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::RandomRatio,
            ratio: 0.8,
            seed: 0,
            unit: SplitUnit::Scene,
            train_cities: Vec::new(),
            val_cities: Vec::new(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::RandomRatio => {
                if !(self.ratio > 0.0 && self.ratio < 1.0) {
                    return Err(Error::Config(format!("split ratio must lie in (0, 1), got {}", self.ratio)));
                }
            }
            SplitMode::Geographic => {
                let train: BTreeSet<_> = self.train_cities.iter().collect();
                let both: Vec<_> = self.val_cities.iter().filter(|c| train.contains(c)).collect();
                if !both.is_empty() {
                    return Err(Error::Config(format!("cities listed for both train and val: {both:?}")));
                }
                if self.train_cities.is_empty() || self.val_cities.is_empty() {
                    return Err(Error::Config("geographic split needs train and val city lists".into()));
                }
            }
        }
        Ok(())
    }
}

/// Anything carrying a city label.
pub trait Located {
    fn city(&self) -> &str;
}

impl Located for SampleDescriptor {
    fn city(&self) -> &str {
        &self.city
    }
}

impl Located for super::ImageSample {
    fn city(&self) -> &str {
        &self.city
    }
}

/// Indices of the train and validation members, each in input order.
pub fn split_indices<T: Located>(items: &[T], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    match spec.mode {
        SplitMode::RandomRatio => {
            let n = items.len();
            let n_train = ((spec.ratio * n as f64).round() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let mut train = order[..n_train].to_vec();
            let mut val = order[n_train..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            Ok((train, val))
        }
        SplitMode::Geographic => {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (i, item) in items.iter().enumerate() {
                let city = item.city();
                if spec.train_cities.iter().any(|c| c == city) {
                    train.push(i);
                } else if spec.val_cities.iter().any(|c| c == city) {
                    val.push(i);
                } else {
                    return Err(Error::Config(format!("city '{city}' is in neither the train nor the val list")));
                }
            }
            Ok((train, val))
        }
    }
}

pub fn split_dataset<T: Located + Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, va) = split_indices(items, spec)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        va.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Item(String, usize);
    impl Located for Item {
        fn city(&self) -> &str {
            &self.0
        }
    }

    fn corpus(n: usize) -> Vec<Item> {
        let cities = ["austin", "chicago", "kitsap", "tyrol", "vienna"];
        (0..n).map(|i| Item(cities[i % 5].to_string(), i)).collect()
    }

    #[test]
    fn ratio_split_sizes_and_determinism() {
        let items = corpus(180);
        let spec = SplitSpec { seed: 7, ..Default::default() };
        let (tr, va) = split_dataset(&items, &spec).unwrap();
        assert_eq!((tr.len(), va.len()), (144, 36));
        assert_eq!(split_dataset(&items, &spec).unwrap(), (tr.clone(), va));
        let (tr2, va2) = split_dataset(&items, &SplitSpec { seed: 8, ..spec }).unwrap();
        assert_eq!((tr2.len(), va2.len()), (144, 36));
        assert_ne!(tr, tr2);
    }

    #[test]
    fn geographic_holds_out_city() {
        let items = corpus(50);
        let spec = SplitSpec {
            mode: SplitMode::Geographic,
            train_cities: ["austin", "chicago", "kitsap", "tyrol"].map(String::from).to_vec(),
            val_cities: vec!["vienna".into()],
            ..Default::default()
        };
        let (tr, va) = split_dataset(&items, &spec).unwrap();
        assert!(tr.iter().all(|i| i.0 != "vienna"));
        assert!(va.iter().all(|i| i.0 == "vienna"));
        assert_eq!(tr.len() + va.len(), 50);
    }

    #[test]
    fn geographic_unlisted_city_named() {
        let items = corpus(5);
        let spec = SplitSpec {
            mode: SplitMode::Geographic,
            train_cities: vec!["austin".into()],
            val_cities: vec!["vienna".into()],
            ..Default::default()
        };
        let err = split_dataset(&items, &spec).unwrap_err().to_string();
        assert!(err.contains("chicago"), "{err}");
    }

    #[test]
    fn overlapping_city_lists_rejected() {
        let spec = SplitSpec {
            mode: SplitMode::Geographic,
            train_cities: vec!["austin".into()],
            val_cities: vec!["austin".into()],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exact(n in 0usize..300, seed in 0u64..1000, ratio in 0.05f64..0.95) {
            let items = corpus(n);
            let (tr, va) = split_indices(&items, &SplitSpec { seed, ratio, ..Default::default() }).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(tr.len(), (ratio * n as f64).round() as usize);
        }
    }
}
