use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, LabeledDataset};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    GaussianBlobs,
    /// Gaussian blobs rotated by `angle_deg` in the plane of features 0 and 1.
    RotatedVariant {
        angle_deg: f64,
    },
    /// Gaussian blobs with a fraction of labels redrawn uniformly.
    LabelPermuted {
        fraction: f64,
    },
    /// Both of the above: rotated points with a fraction of redrawn labels.
    RotatedNoisy {
        angle_deg: f64,
        fraction: f64,
    },
}

impl Family {
    fn angle(&self) -> Option<f64> {
        match *self {
            Family::RotatedVariant { angle_deg } | Family::RotatedNoisy { angle_deg, .. } => Some(angle_deg),
            _ => None,
        }
    }

    fn label_fraction(&self) -> Option<f64> {
        match *self {
            Family::LabelPermuted { fraction } | Family::RotatedNoisy { fraction, .. } => Some(fraction),
            _ => None,
        }
    }
}

fn default_class_sep() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: Family,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Standard deviation of the class-mean distribution (before the means are
    /// centred); points scatter around their mean with unit variance.
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
}

impl SyntheticSpec {
    pub fn blobs(num_classes: usize, samples_per_class: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            family: Family::GaussianBlobs,
            num_classes,
            samples_per_class,
            feature_dim,
            seed,
            class_sep: default_class_sep(),
        }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.feature_dim == 0 {
            return bad("synthetic class count, samples per class and dimension must be positive".into());
        }
        if !self.class_sep.is_finite() || self.class_sep < 0.0 {
            return bad(format!("class_sep {} must be finite and non-negative", self.class_sep));
        }
        if let Some(angle_deg) = self.family.angle() {
            if self.feature_dim < 2 {
                return bad("rotated variant needs at least two features".into());
            }
            if !angle_deg.is_finite() {
                return bad("rotation angle must be finite".into());
            }
        }
        if let Some(fraction) = self.family.label_fraction() {
            if !(0.0..=1.0).contains(&fraction) {
                return bad(format!("label fraction {fraction} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Generate a dataset from `spec`. Generation is a pure function of the spec;
/// all families share the same underlying blobs for a given seed.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset, DatasetError> {
    spec.validate()?;
    let (k, m, d) = (spec.num_classes, spec.samples_per_class, spec.feature_dim);
    let mean_seed = rng::derive(spec.seed, &[1]);
    let point_seed = rng::derive(spec.seed, &[2]);

    // Class means are centred on the origin, so a rotation turns the cloud in
    // place rather than also moving it.
    let mut means: Vec<f64> = (0..k * d)
        .map(|i| spec.class_sep * rng::normal_at(mean_seed, i as u64))
        .collect();
    for j in 0..d {
        let centre = (0..k).map(|c| means[c * d + j]).sum::<f64>() / k as f64;
        for c in 0..k {
            means[c * d + j] -= centre;
        }
    }

    let mut features = Vec::with_capacity(k * m * d);
    let mut labels = Vec::with_capacity(k * m);
    for c in 0..k {
        for s in 0..m {
            let point = (c * m + s) * d;
            for j in 0..d {
                features.push(means[c * d + j] + rng::normal_at(point_seed, (point + j) as u64));
            }
            labels.push(c);
        }
    }

    if let Some(angle_deg) = spec.family.angle() {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        for row in features.chunks_exact_mut(d) {
            let (x0, x1) = (row[0], row[1]);
            row[0] = cos * x0 - sin * x1;
            row[1] = sin * x0 + cos * x1;
        }
    }
    if let Some(fraction) = spec.family.label_fraction() {
        let n = labels.len();
        let count = (fraction * n as f64).round() as usize;
        let mut r = rng::stream(rng::derive(spec.seed, &[3]));
        let mut picked = index::sample(&mut r, n, count).into_vec();
        picked.sort_unstable();
        for i in picked {
            labels[i] = r.random_range(0..k);
        }
    }
    let name = match &spec.family {
        Family::GaussianBlobs => "gaussian-blobs".to_string(),
        Family::RotatedVariant { angle_deg } => format!("rotated-{angle_deg}"),
        Family::LabelPermuted { fraction } => format!("label-permuted-{fraction}"),
        Family::RotatedNoisy { angle_deg, fraction } => format!("rotated-{angle_deg}-noisy-{fraction}"),
    };
    LabeledDataset::new(name, d, k, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rotation_is_identity() {
        let base = SyntheticSpec::blobs(4, 10, 3, 11);
        let a = make_synthetic(&base).unwrap();
        let b = make_synthetic(&base.clone().with_family(Family::RotatedVariant { angle_deg: 0.0 })).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn zero_permutation_keeps_labels() {
        let base = SyntheticSpec::blobs(4, 10, 3, 11);
        let a = make_synthetic(&base).unwrap();
        let b = make_synthetic(&base.clone().with_family(Family::LabelPermuted { fraction: 0.0 })).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn permutation_changes_some_labels() {
        let base = SyntheticSpec::blobs(5, 40, 2, 3);
        let a = make_synthetic(&base).unwrap();
        let b = make_synthetic(&base.clone().with_family(Family::LabelPermuted { fraction: 0.5 })).unwrap();
        let changed = a.labels().iter().zip(b.labels()).filter(|(x, y)| x != y).count();
        // 100 labels redrawn, each keeps its class with probability 1/5.
        assert!((50..=95).contains(&changed), "{changed}");
    }

    #[test]
    fn seeds_change_samples_not_structure() {
        let a = make_synthetic(&SyntheticSpec::blobs(3, 7, 4, 1)).unwrap();
        let b = make_synthetic(&SyntheticSpec::blobs(3, 7, 4, 2)).unwrap();
        assert_ne!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.class_counts(), b.class_counts());
        assert_eq!((a.len(), a.feature_dim(), a.num_classes()), (21, 4, 3));
    }

    #[test]
    fn rotation_preserves_norms() {
        let base = SyntheticSpec::blobs(2, 5, 3, 9);
        let a = make_synthetic(&base).unwrap();
        let b = make_synthetic(&base.clone().with_family(Family::RotatedVariant { angle_deg: 33.0 })).unwrap();
        for i in 0..a.len() {
            let na: f64 = a.row(i).iter().map(|v| v * v).sum();
            let nb: f64 = b.row(i).iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-10 * na.max(1.0));
            assert_eq!(a.row(i)[2], b.row(i)[2]);
        }
    }

    #[test]
    fn noisy_rotation_composes_both_variants() {
        let base = SyntheticSpec::blobs(3, 20, 2, 4);
        let rot = make_synthetic(&base.clone().with_family(Family::RotatedVariant { angle_deg: 25.0 })).unwrap();
        let perm = make_synthetic(&base.clone().with_family(Family::LabelPermuted { fraction: 0.3 })).unwrap();
        let both = make_synthetic(&base.with_family(Family::RotatedNoisy {
            angle_deg: 25.0,
            fraction: 0.3,
        }))
        .unwrap();
        assert_eq!(both.features(), rot.features());
        assert_eq!(both.labels(), perm.labels());
        assert_eq!(both.name(), "rotated-25-noisy-0.3");
    }

    #[test]
    fn class_means_are_centred() {
        let ds = make_synthetic(&SyntheticSpec::blobs(4, 1, 3, 8)).unwrap();
        let spec = SyntheticSpec::blobs(4, 1, 3, 8);
        let point_seed = rng::derive(spec.seed, &[2]);
        for j in 0..3 {
            // Subtract the unit noise to recover the means.
            let s: f64 = (0..4)
                .map(|c| ds.row(c)[j] - rng::normal_at(point_seed, (c * 3 + j) as u64))
                .sum();
            assert!(s.abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn invalid_specs() {
        let s = SyntheticSpec::blobs(2, 5, 1, 0).with_family(Family::RotatedVariant { angle_deg: 5.0 });
        assert!(make_synthetic(&s).is_err());
        let s = SyntheticSpec::blobs(2, 5, 2, 0).with_family(Family::LabelPermuted { fraction: 1.5 });
        assert!(make_synthetic(&s).is_err());
        assert!(make_synthetic(&SyntheticSpec::blobs(0, 5, 2, 0)).is_err());
    }
}
