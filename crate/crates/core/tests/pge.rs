use num_rational::BigRational;
use num_traits::ToPrimitive;
use pge_core::datasets::{make_synthetic, Family, LabeledDataset, SyntheticSpec};
use pge_core::diffcore::Tensor;
use pge_core::models::{Backbone, Head, InitDistribution, LossMode, ModelSpec};
use pge_core::optim::process_steps;
use pge_core::pge::{
    estimate_pge, estimate_with, gap_value, rank_sources, restart_gradient, schwarz_check, seed_schedule,
    IncrementalMean, PgeConfig,
};
use pge_core::{rng, Record64};

fn spec(input_dim: usize) -> ModelSpec {
    ModelSpec {
        input_dim,
        backbone: Backbone::Mlp { hidden: vec![16, 8] },
        head: Head::Reconstructor,
    }
}

fn blobs(seed: u64) -> LabeledDataset {
    make_synthetic(&SyntheticSpec::blobs(4, 60, 4, seed)).unwrap()
}

fn rotated(base: &SyntheticSpec, angle_deg: f64) -> LabeledDataset {
    make_synthetic(&base.clone().with_family(Family::RotatedVariant { angle_deg }))
        .unwrap()
        .with_name(format!("rot{angle_deg}"))
}

fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    (0..n as u64).map(|i| rng::normal_at(seed, i)).collect()
}

#[test]
fn incremental_mean_matches_direct_sum() {
    let ds = blobs(1);
    let s = spec(4).with_head(Head::Reconstructor);
    for restarts in [1usize, 2, 8, 64] {
        let schedule = seed_schedule(42, restarts);
        let ge = estimate_pge::<f64>(
            &ds,
            &s,
            LossMode::Unsupervised,
            InitDistribution::FanInGaussian,
            32,
            &schedule,
        )
        .unwrap();
        let grads: Vec<Vec<f64>> = schedule
            .iter()
            .map(|&seed| {
                restart_gradient::<f64>(
                    &ds,
                    &s,
                    LossMode::Unsupervised,
                    InitDistribution::FanInGaussian,
                    32,
                    seed,
                )
                .unwrap()
            })
            .collect();
        for (j, &e) in ge.vector.iter().enumerate() {
            let direct = grads.iter().map(|g| g[j]).sum::<f64>() / restarts as f64;
            assert!(
                (e - direct).abs() <= 1e-12 * direct.abs().max(1e-300) || (e - direct).abs() <= 1e-15,
                "I = {restarts}, coord {j}: {e} vs {direct}"
            );
        }
    }
}

#[test]
fn scalar_model_hand_example() {
    // L(theta) = (theta * x - y)^2 with x = 1, y = 0 at theta in {1, 3}.
    let mut mean = IncrementalMean::new();
    let mut grads = Vec::new();
    for theta in [1.0, 3.0] {
        let mut r = Record64::new();
        let x = r.input(Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let w = r.param(Tensor::new(vec![1, 1], vec![theta]).unwrap()).unwrap();
        let y = r.input(Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let pred = r.matmul(x, w).unwrap();
        let loss = r.mse(pred, y).unwrap();
        let g = r.backward(loss, 1.0).unwrap().get(w).unwrap().data().to_vec();
        grads.push(g[0]);
        mean.push(&g).unwrap();
    }
    assert_eq!(grads, vec![2.0, 6.0]);
    assert_eq!(mean.count(), 2);
    assert_eq!(mean.into_vec(), vec![4.0]);
}

fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

#[test]
fn gap_matches_exact_rational_oracle() {
    for k in 0..100u64 {
        let n = 1 + (rng::uniform_at(500, k) * 30.0) as usize;
        let s = random_vec(rng::derive(501, &[k]), n);
        let t = random_vec(rng::derive(502, &[k]), n);
        // gap^2 = |t - s|^2 / (|t|^2 |s|^2), evaluated exactly.
        let sq = |v: &mut dyn Iterator<Item = BigRational>| v.fold(rational(0.0), |a, x| a + x.clone() * x);
        let diff = sq(&mut s.iter().zip(&t).map(|(a, b)| rational(*b) - rational(*a)));
        let ns = sq(&mut s.iter().map(|a| rational(*a)));
        let nt = sq(&mut t.iter().map(|a| rational(*a)));
        let exact = (diff / (ns * nt)).to_f64().unwrap().sqrt();
        let got = gap_value(&s, &t).unwrap();
        assert!((got - exact).abs() <= 1e-12 * exact, "pair {k}: {got} vs {exact}");
    }
}

#[test]
fn gap_is_symmetric_and_scales_as_expected() {
    for k in 0..50u64 {
        let s = random_vec(rng::derive(600, &[k]), 12);
        let t = random_vec(rng::derive(601, &[k]), 12);
        assert_eq!(gap_value(&s, &t).unwrap(), gap_value(&t, &s).unwrap());
    }
    let g: f64 = gap_value(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    assert!((g - 2f64.sqrt()).abs() < 1e-15);
    // Orthogonal vectors of lengths a and b: sqrt(a^2 + b^2) / (a b).
    let g: f64 = gap_value(&[3.0, 0.0], &[0.0, 4.0]).unwrap();
    assert!((g - 5.0 / 12.0).abs() < 1e-15);
}

#[test]
fn schwarz_holds_on_random_pairs() {
    for k in 0..1000u64 {
        let n = 1 + (rng::uniform_at(700, k) * 20.0) as usize;
        let s = random_vec(rng::derive(701, &[k]), n);
        let t = random_vec(rng::derive(702, &[k]), n);
        let c = schwarz_check(&s, &t).unwrap();
        assert!(c.holds(), "pair {k}: {c:?}");
    }
}

#[test]
fn target_among_sources_has_zero_gap() {
    let target = blobs(2).with_name("target");
    let others: Vec<LabeledDataset> = (3..6).map(|s| blobs(s).with_name(format!("blobs{s}"))).collect();
    let mut sources = others.clone();
    sources.push(target.clone().with_name("copy"));
    let cfg = PgeConfig::new(LossMode::Unsupervised, 8, 3);
    let ranking = rank_sources::<f64>(&sources, &target, &spec(4), &cfg).unwrap();
    assert_eq!(ranking.entries[0].name(), "copy");
    assert_eq!(ranking.entries[0].gap.value, 0.0);
    assert!(ranking.entries[1..].iter().all(|e| e.gap.value > 0.0));
}

fn rotation_family() -> (Vec<LabeledDataset>, LabeledDataset) {
    let base = SyntheticSpec::blobs(4, 100, 4, 3);
    let target = make_synthetic(&base).unwrap().with_name("target");
    let sources = [0.0, 10.0, 20.0, 30.0, 40.0]
        .iter()
        .map(|&a| rotated(&base, a))
        .collect();
    (sources, target)
}

#[test]
fn rotated_sources_rank_by_angle() {
    let (sources, target) = rotation_family();
    let cfg = PgeConfig::new(LossMode::Unsupervised, 10, 1);
    let ranking = rank_sources::<f64>(&sources, &target, &spec(4), &cfg).unwrap();
    assert_eq!(ranking.names(), vec!["rot0", "rot10", "rot20", "rot30", "rot40"]);
}

#[test]
fn source_order_does_not_change_the_ranking() {
    let (sources, target) = rotation_family();
    let cfg = PgeConfig::new(LossMode::Unsupervised, 6, 2);
    let forward = rank_sources::<f64>(&sources, &target, &spec(4), &cfg).unwrap();
    let mut reversed = sources.clone();
    reversed.reverse();
    reversed.swap(0, 2);
    let backward = rank_sources::<f64>(&reversed, &target, &spec(4), &cfg).unwrap();
    assert_eq!(forward, backward);
}

#[test]
fn estimation_never_takes_an_optimizer_step() {
    let (sources, target) = rotation_family();
    let before = process_steps();
    let fingerprints: Vec<u64> = sources.iter().map(LabeledDataset::fingerprint).collect();
    let cfg = PgeConfig::new(LossMode::Supervised, 4, 2);
    let supervised = spec(4).with_head(Head::Classifier { num_classes: 4 });
    rank_sources::<f64>(&sources, &target, &supervised, &cfg).unwrap();
    assert_eq!(process_steps(), before);
    assert_eq!(
        sources.iter().map(LabeledDataset::fingerprint).collect::<Vec<_>>(),
        fingerprints
    );
}

#[test]
fn more_restarts_reduce_gap_variance() {
    let base = SyntheticSpec::blobs(3, 40, 3, 8);
    let target = make_synthetic(&base).unwrap();
    let source = rotated(&base, 45.0);
    let s = ModelSpec {
        input_dim: 3,
        backbone: Backbone::Mlp { hidden: vec![6] },
        head: Head::Reconstructor,
    };
    let gaps = |restarts: usize| -> Vec<f64> {
        (0..30u64)
            .map(|trial| {
                let mut cfg = PgeConfig::new(LossMode::Unsupervised, restarts, 1000 + trial);
                cfg.batch_size = Some(16);
                let a = estimate_with::<f64>(&source, &s, &cfg).unwrap();
                let b = estimate_with::<f64>(&target, &s, &cfg).unwrap();
                gap_value(&a.vector, &b.vector).unwrap()
            })
            .collect()
    };
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (few, many) = (var(&gaps(4)), var(&gaps(32)));
    assert!(many < few, "variance at 32 restarts {many} vs at 4 restarts {few}");
}

#[test]
fn estimates_are_reproducible_in_both_precisions() {
    let ds = blobs(4);
    let cfg = PgeConfig::new(LossMode::Unsupervised, 5, 9);
    let a = estimate_with::<f64>(&ds, &spec(4), &cfg).unwrap();
    let b = estimate_with::<f64>(&ds, &spec(4), &cfg).unwrap();
    assert_eq!(a, b);
    let c = estimate_with::<f32>(&ds, &spec(4), &cfg).unwrap();
    for (x, y) in a.vector.iter().zip(&c.vector) {
        assert!((x - *y as f64).abs() <= 1e-4 * x.abs().max(1e-2));
    }
}
