use pge_core::diffcore::{NodeId, Tensor};
use pge_core::models::{
    init_params, Backbone, Batch, GradScope, Head, InitDistribution, InitSpec, LossMode, ModelSpec, ModelState,
};
use pge_core::{rng, Record64};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

/// Values kept away from the ReLU kink so a central difference never
/// straddles it.
fn values(seed: u64, n: usize) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let v = rng::normal_at(seed, i);
            if v.abs() < 0.05 {
                v.signum() * 0.05 + v
            } else {
                v
            }
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

type Build = dyn Fn(&mut Record64, &[NodeId]) -> NodeId;

fn eval(shapes: &[Vec<usize>], vals: &[Vec<f64>], build: &Build) -> (f64, Vec<Vec<f64>>) {
    let mut r = Record64::new();
    let ids: Vec<NodeId> = shapes
        .iter()
        .zip(vals)
        .map(|(s, v)| r.param(Tensor::new(s.clone(), v.clone()).unwrap()).unwrap())
        .collect();
    let out = build(&mut r, &ids);
    let loss = r.value(out).item().unwrap();
    let grads = r.backward(out, 1.0).unwrap();
    let g = ids.iter().map(|&id| grads.get(id).unwrap().data().to_vec()).collect();
    (loss, g)
}

fn check_fd(shapes: &[Vec<usize>], seed: u64, build: &Build) {
    let vals: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| values(rng::derive(seed, &[k as u64]), s.iter().product()))
        .collect();
    let (_, analytic) = eval(shapes, &vals, build);
    for (k, v) in vals.iter().enumerate() {
        for j in 0..v.len() {
            let mut plus = vals.clone();
            plus[k][j] += STEP;
            let mut minus = vals.clone();
            minus[k][j] -= STEP;
            let fd = (eval(shapes, &plus, build).0 - eval(shapes, &minus, build).0) / (2.0 * STEP);
            let a = analytic[k][j];
            assert!(
                rel_err(a, fd) <= REL_TOL,
                "input {k} coord {j}: analytic {a} vs finite difference {fd}"
            );
        }
    }
}

/// Reduce a node to a scalar with a fixed random target so every output
/// coordinate receives a distinct upstream gradient.
fn to_scalar(r: &mut Record64, x: NodeId) -> NodeId {
    let shape = r.value(x).shape().to_vec();
    let n = r.value(x).len();
    let t = r.input(Tensor::new(shape, values(77, n)).unwrap()).unwrap();
    r.mse(x, t).unwrap()
}

#[test]
fn matmul_gradient() {
    check_fd(&[vec![3, 4], vec![4, 2]], 1, &|r, p| {
        let y = r.matmul(p[0], p[1]).unwrap();
        to_scalar(r, y)
    });
}

#[test]
fn conv2d_gradient() {
    for padding in [0, 1] {
        check_fd(
            &[vec![2, 2, 4, 4], vec![3, 2, 3, 3]],
            2 + padding as u64,
            &move |r, p| {
                let y = r.conv2d(p[0], p[1], padding).unwrap();
                to_scalar(r, y)
            },
        );
    }
}

#[test]
fn bias_add_gradient() {
    check_fd(&[vec![3, 2, 2, 2], vec![2]], 4, &|r, p| {
        let y = r.bias_add(p[0], p[1]).unwrap();
        to_scalar(r, y)
    });
    check_fd(&[vec![5, 3], vec![3]], 5, &|r, p| {
        let y = r.bias_add(p[0], p[1]).unwrap();
        to_scalar(r, y)
    });
}

#[test]
fn relu_gradient() {
    check_fd(&[vec![4, 5]], 6, &|r, p| {
        let y = r.relu(p[0]).unwrap();
        to_scalar(r, y)
    });
}

#[test]
fn reshape_gradient() {
    check_fd(&[vec![2, 6]], 7, &|r, p| {
        let y = r.reshape(p[0], vec![3, 2, 2]).unwrap();
        to_scalar(r, y)
    });
}

#[test]
fn mean_batch_gradient() {
    check_fd(&[vec![4, 3]], 8, &|r, p| {
        let y = r.mean_batch(p[0]).unwrap();
        to_scalar(r, y)
    });
    check_fd(&[vec![6]], 9, &|r, p| r.mean_batch(p[0]).unwrap());
}

#[test]
fn mse_gradient_in_both_arguments() {
    check_fd(&[vec![3, 4], vec![3, 4]], 10, &|r, p| r.mse(p[0], p[1]).unwrap());
}

#[test]
fn cross_entropy_gradient() {
    check_fd(&[vec![5, 4]], 11, &|r, p| {
        r.softmax_cross_entropy(p[0], &[0, 3, 1, 1, 2]).unwrap()
    });
}

fn random_spec(seed: u64) -> (ModelSpec, LossMode) {
    let u = |k: u64| rng::uniform_at(seed, k);
    let input_dim = 2 + (u(0) * 4.0) as usize;
    let depth = 1 + (u(1) * 2.0) as usize;
    let hidden: Vec<usize> = (0..depth).map(|k| 2 + (u(2 + k as u64) * 5.0) as usize).collect();
    let mode = if u(9) < 0.5 {
        LossMode::Supervised
    } else {
        LossMode::Unsupervised
    };
    let head = match mode {
        LossMode::Supervised => Head::Classifier {
            num_classes: 2 + (u(10) * 3.0) as usize,
        },
        LossMode::Unsupervised => Head::Reconstructor,
    };
    (
        ModelSpec {
            input_dim,
            backbone: Backbone::Mlp { hidden },
            head,
        },
        mode,
    )
}

fn batch_for(spec: &ModelSpec, n: usize, seed: u64) -> Batch<f64> {
    let classes = match spec.head {
        Head::Classifier { num_classes } => num_classes,
        Head::Reconstructor => 1,
    };
    Batch {
        inputs: Tensor::new(vec![n, spec.input_dim], values(seed, n * spec.input_dim)).unwrap(),
        labels: (0..n).map(|i| i % classes).collect(),
    }
}

#[test]
fn random_tiny_mlps_match_finite_differences() {
    let (mut checked, mut kinks, mut total) = (0, 0, 0);
    let mut seed = 100;
    while checked < 20 {
        seed += 1;
        let (spec, mode) = random_spec(seed);
        if spec.param_count() > 200 {
            continue;
        }
        checked += 1;
        let state: ModelState<f64> = init_params(
            &spec,
            InitSpec {
                distribution: InitDistribution::UnitGaussian,
                seed,
            },
        )
        .unwrap();
        let batch = batch_for(&spec, 5, seed ^ 0xfeed);
        let (_, grad) = state.loss_and_grad(&batch, mode, GradScope::All).unwrap();
        let loss_at = |params: Vec<f64>| {
            let s = ModelState::from_params(spec.clone(), params).unwrap();
            s.loss_and_grad(&batch, mode, GradScope::All).unwrap().0
        };
        let f0 = loss_at(state.params().to_vec());
        for j in 0..grad.len() {
            let mut plus = state.params().to_vec();
            plus[j] += STEP;
            let mut minus = state.params().to_vec();
            minus[j] -= STEP;
            let (fp, fm) = (loss_at(plus), loss_at(minus));
            let fd = (fp - fm) / (2.0 * STEP);
            if rel_err(grad[j], fd) <= REL_TOL {
                continue;
            }
            // A perturbation that pushes some pre-activation across zero makes
            // the two one-sided slopes disagree; the analytic gradient must
            // then equal the slope on the side without the kink.
            let (right, left) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            kinks += 1;
            assert!(
                rel_err(right, left) > 1e-3 && rel_err(grad[j], right).min(rel_err(grad[j], left)) <= 1e-4,
                "spec {spec:?} param {j}: analytic {} vs finite difference {fd}",
                grad[j]
            );
        }
        total += grad.len();
    }
    assert!(kinks * 50 <= total, "{kinks} of {total} coordinates sat on a kink");
}

#[test]
fn forward_matches_scalar_oracle() {
    let spec = ModelSpec {
        input_dim: 3,
        backbone: Backbone::Mlp { hidden: vec![4] },
        head: Head::Classifier { num_classes: 2 },
    };
    let state: ModelState<f64> = init_params(
        &spec,
        InitSpec {
            distribution: InitDistribution::UnitGaussian,
            seed: 3,
        },
    )
    .unwrap();
    let batch = batch_for(&spec, 4, 12);
    let (loss, _) = state
        .loss_and_grad(&batch, LossMode::Supervised, GradScope::All)
        .unwrap();

    let p = state.params();
    let (w1, b1) = (&p[0..12], &p[12..16]);
    let (w2, b2) = (&p[16..24], &p[24..26]);
    let x = batch.inputs.data();
    let mut total = 0.0;
    for i in 0..4 {
        let mut h = [0.0; 4];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut z = b1[j];
            for k in 0..3 {
                z += x[i * 3 + k] * w1[k * 4 + j];
            }
            *hj = z.max(0.0);
        }
        let mut logits = [0.0; 2];
        for (c, l) in logits.iter_mut().enumerate() {
            *l = b2[c];
            for j in 0..4 {
                *l += h[j] * w2[j * 2 + c];
            }
        }
        let lse = (logits[0].exp() + logits[1].exp()).ln();
        total += lse - logits[batch.labels[i]];
    }
    let oracle = total / 4.0;
    assert!(
        (loss - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
        "{loss} vs {oracle}"
    );
}

fn small_graph(seed_value: f64) -> Vec<Vec<f64>> {
    let mut r = Record64::new();
    let x = r.input(Tensor::new(vec![3, 4], values(20, 12)).unwrap()).unwrap();
    let w = r.param(Tensor::new(vec![4, 5], values(21, 20)).unwrap()).unwrap();
    let b = r.param(Tensor::new(vec![5], values(22, 5)).unwrap()).unwrap();
    let z = r.matmul(x, w).unwrap();
    let z = r.bias_add(z, b).unwrap();
    let h = r.relu(z).unwrap();
    let loss = r.softmax_cross_entropy(h, &[0, 4, 2]).unwrap();
    let g = r.backward(loss, seed_value).unwrap();
    vec![g.get(w).unwrap().data().to_vec(), g.get(b).unwrap().data().to_vec()]
}

#[test]
fn backward_is_linear_in_the_seed() {
    let one = small_graph(1.0);
    let two = small_graph(2.0);
    for (a, b) in one.iter().flatten().zip(two.iter().flatten()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_is_deterministic() {
    let a = small_graph(1.0);
    let b = small_graph(1.0);
    let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn single_precision_tracks_double() {
    let (spec, mode) = (
        ModelSpec {
            input_dim: 4,
            backbone: Backbone::Mlp { hidden: vec![6, 3] },
            head: Head::Reconstructor,
        },
        LossMode::Unsupervised,
    );
    let init = InitSpec {
        distribution: InitDistribution::FanInGaussian,
        seed: 8,
    };
    let s64: ModelState<f64> = init_params(&spec, init).unwrap();
    let s32: ModelState<f32> = init_params(&spec, init).unwrap();
    let b64 = batch_for(&spec, 6, 30);
    let b32 = Batch {
        inputs: Tensor::new(vec![6, 4], b64.inputs.data().iter().map(|&v| v as f32).collect()).unwrap(),
        labels: b64.labels.clone(),
    };
    let (_, g64) = s64.loss_and_grad(&b64, mode, GradScope::All).unwrap();
    let (_, g32) = s32.loss_and_grad(&b32, mode, GradScope::All).unwrap();
    for (a, b) in g64.iter().zip(&g32) {
        assert!((a - *b as f64).abs() <= 1e-4 * a.abs().max(1.0), "{a} vs {b}");
    }
}
