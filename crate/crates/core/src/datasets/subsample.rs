use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{DatasetError, LabeledDataset};
use crate::rng;

/// Target subsampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Keep a fraction of the classes and all of their samples.
    #[serde(rename = "SI")]
    Classes,
    /// Keep a fraction of the samples inside every class.
    #[serde(rename = "SII")]
    PerClass,
}

impl Strategy {
    /// Smallest ratio the evaluation protocol uses for this strategy.
    pub fn min_ratio(self) -> f64 {
        match self {
            Strategy::Classes => 0.05,
            Strategy::PerClass => 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleSpec {
    pub strategy: Strategy,
    pub ratio: f64,
    pub seed: u64,
}

/// Draw a seeded subset of `ds`.
///
/// `Classes` keeps `max(2, round(ratio * K))` classes and re-indexes their
/// labels densely in ascending original order. `PerClass` keeps
/// `max(1, floor(ratio * n_c))` samples of every class. Surviving samples keep
/// their original relative order.
pub fn subsample(ds: &LabeledDataset, spec: &SubsampleSpec) -> Result<LabeledDataset, DatasetError> {
    if !(spec.ratio > 0.0 && spec.ratio <= 1.0) {
        return Err(DatasetError::Subsample(format!("ratio {} outside (0, 1]", spec.ratio)));
    }
    let mut r = rng::stream(spec.seed);
    let groups = ds.indices_by_class();
    match spec.strategy {
        Strategy::Classes => {
            let k = ds.num_classes();
            if (spec.ratio * k as f64).ceil() < 2.0 {
                return Err(DatasetError::Subsample(format!(
                    "ratio {} of {k} classes leaves fewer than two classes",
                    spec.ratio
                )));
            }
            let keep = ((spec.ratio * k as f64).round() as usize).clamp(2, k);
            let mut classes = index::sample(&mut r, k, keep).into_vec();
            classes.sort_unstable();
            let mut remap = vec![usize::MAX; k];
            for (new, &old) in classes.iter().enumerate() {
                remap[old] = new;
            }
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for i in 0..ds.len() {
                let (row, label) = ds.sample(i);
                if remap[label] != usize::MAX {
                    features.extend_from_slice(row);
                    labels.push(remap[label]);
                }
            }
            if labels.is_empty() {
                return Err(DatasetError::Subsample("selected classes have no samples".into()));
            }
            let out = LabeledDataset::new(ds.name(), ds.feature_dim(), keep, features, labels)?;
            match ds.image_shape() {
                Some(shape) => out.with_image_shape(shape),
                None => Ok(out),
            }
        }
        Strategy::PerClass => {
            let mut kept = Vec::new();
            for group in &groups {
                if group.is_empty() {
                    continue;
                }
                let take = ((spec.ratio * group.len() as f64).floor() as usize).max(1);
                let picks = index::sample(&mut r, group.len(), take);
                kept.extend(picks.iter().map(|p| group[p]));
            }
            if kept.is_empty() {
                return Err(DatasetError::Subsample("subset is empty".into()));
            }
            kept.sort_unstable();
            ds.select(&kept)
        }
    }
}

/// Stratified seeded split into `(train, test)`. Each class with at least two
/// samples contributes `max(1, round(test_fraction * n_c))` test samples.
pub fn train_test_split(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::Invalid(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut r = rng::stream(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in ds.indices_by_class() {
        group.shuffle(&mut r);
        let n_test = if group.len() < 2 {
            0
        } else {
            ((test_fraction * group.len() as f64).round() as usize).clamp(1, group.len() - 1)
        };
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    if test.is_empty() {
        return Err(DatasetError::Invalid(
            "no class has enough samples for a test split".into(),
        ));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select(&train)?, ds.select(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic, SyntheticSpec};

    fn ten_class() -> LabeledDataset {
        make_synthetic(&SyntheticSpec::blobs(10, 20, 3, 5)).unwrap()
    }

    #[test]
    fn full_ratio_is_identity() {
        let ds = ten_class();
        for strategy in [Strategy::Classes, Strategy::PerClass] {
            let out = subsample(
                &ds,
                &SubsampleSpec {
                    strategy,
                    ratio: 1.0,
                    seed: 4,
                },
            )
            .unwrap();
            assert_eq!(out, ds);
        }
    }

    #[test]
    fn per_class_quarter() {
        let ds = ten_class();
        let out = subsample(
            &ds,
            &SubsampleSpec {
                strategy: Strategy::PerClass,
                ratio: 0.25,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(out.class_counts(), vec![5; 10]);
    }

    #[test]
    fn class_floor_and_errors() {
        let ds = ten_class();
        let spec = |ratio| SubsampleSpec {
            strategy: Strategy::Classes,
            ratio,
            seed: 0,
        };
        // ceil(0.15 * 10) = 2 is allowed; round gives 2.
        assert_eq!(subsample(&ds, &spec(0.15)).unwrap().num_classes(), 2);
        assert!(subsample(&ds, &spec(0.05)).is_err());
        assert!(subsample(&ds, &spec(0.0)).is_err());
        assert!(subsample(&ds, &spec(1.2)).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = ten_class();
        let spec = SubsampleSpec {
            strategy: Strategy::PerClass,
            ratio: 0.3,
            seed: 77,
        };
        assert_eq!(subsample(&ds, &spec).unwrap(), subsample(&ds, &spec).unwrap());
        let other = SubsampleSpec { seed: 78, ..spec };
        assert_ne!(subsample(&ds, &spec).unwrap(), subsample(&ds, &other).unwrap());
    }

    #[test]
    fn split_is_stratified() {
        let ds = ten_class();
        let (train, test) = train_test_split(&ds, 0.2, 3).unwrap();
        assert_eq!(test.class_counts(), vec![4; 10]);
        assert_eq!(train.class_counts(), vec![16; 10]);
    }
}
