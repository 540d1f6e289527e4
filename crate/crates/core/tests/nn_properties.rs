use ncdkit_core::nn::{
    init_mlp, seeded_rng, shuffled_batches, select_rows, train_epoch, Activation, ArchitectureSpec, Batch,
    HeadSpec, LayerSpec, Loss, LossKind, Mlp, Mode, Optimizer, OptimizerKind, Rng, Target,
};
use ndarray::{Array2, Axis};
use rand::Rng as _;

const H: f64 = 1e-5;

fn random_activation(rng: &mut Rng) -> Activation {
    [Activation::ReLU, Activation::Sigmoid, Activation::Tanh, Activation::None][rng.random_range(0..4)]
}

struct Case {
    mlp: Mlp,
    x: Array2<f64>,
    loss: Loss,
    targets: Vec<Target>,
}

fn random_case(rng: &mut Rng, which: usize) -> Case {
    let input_dim = rng.random_range(1..=8);
    let depth = rng.random_range(1..=3);
    let hidden = (0..depth)
        .map(|_| LayerSpec::new(rng.random_range(1..=8), random_activation(rng), 0.0))
        .collect();
    let spec = ArchitectureSpec { input_dim, hidden };
    let n = rng.random_range(2..=6);
    let x = Array2::from_shape_fn((n, input_dim), |_| rng.random_range(-2.0..2.0));
    let width = rng.random_range(2..=5);
    let classes = |rng: &mut Rng| Target::Classes((0..n).map(|_| rng.random_range(0..width)).collect());
    let dense = |rng: &mut Rng, lo: f64, hi: f64| Target::Dense(Array2::from_shape_fn((n, width), |_| rng.random_range(lo..hi)));
    let (heads, loss, targets) = match which % 4 {
        0 => (
            vec![HeadSpec::new("out", width, Activation::None)],
            Loss::cross_entropy("out"),
            vec![classes(rng)],
        ),
        1 => {
            let act = random_activation(rng);
            (vec![HeadSpec::new("out", width, act)], Loss::mse("out"), vec![dense(rng, -1.0, 1.0)])
        }
        2 => (
            vec![HeadSpec::new("out", width, Activation::Sigmoid)],
            Loss::bce("out"),
            vec![dense(rng, 0.0, 1.0)],
        ),
        _ => (
            vec![
                HeadSpec::new("a", width, Activation::None),
                HeadSpec::new("b", width, Activation::Sigmoid),
            ],
            Loss::composite(vec![("a", LossKind::CrossEntropy, 0.7), ("b", LossKind::Bce, 1.3)]),
            vec![classes(rng), dense(rng, 0.0, 1.0)],
        ),
    };
    let mlp = init_mlp(&spec, &heads, rng.random()).unwrap();
    Case { mlp, x, loss, targets }
}

fn loss_at(case: &Case, mlp: &Mlp) -> f64 {
    mlp.loss_and_gradients(&case.x, &case.loss, &case.targets, Mode::Eval).unwrap().0
}

/// (coordinates checked, coordinates above the relative error bound)
fn gradient_check(case: &Case) -> (usize, usize) {
    let (_, grads) = case
        .mlp
        .loss_and_gradients(&case.x, &case.loss, &case.targets, Mode::Eval)
        .unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = case.mlp.clone();
    let (mut total, mut bad) = (0, 0);
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + H;
            let up = loss_at(case, &probe);
            probe.tensors_mut()[t][i] = orig - H;
            let down = loss_at(case, &probe);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            total += 1;
            if rel >= 1e-4 {
                bad += 1;
            }
        }
    }
    (total, bad)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = seeded_rng(2024);
    let (mut total, mut bad) = (0, 0);
    for which in 0..25 {
        let case = random_case(&mut rng, which);
        let (t, b) = gradient_check(&case);
        total += t;
        bad += b;
    }
    assert!(total > 0);
    let share = 1.0 - bad as f64 / total as f64;
    assert!(share > 0.99, "{bad} of {total} coordinates off");
}

#[test]
fn embedding_gradient_path_matches_finite_differences() {
    // loss = sum(embedding * g) for a fixed g, through backward's embedding input
    let spec = ArchitectureSpec {
        input_dim: 3,
        hidden: vec![LayerSpec::new(4, Activation::Tanh, 0.0), LayerSpec::new(3, Activation::Sigmoid, 0.0)],
    };
    let mlp = init_mlp(&spec, &[], 5).unwrap();
    let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
    let g = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64).sin());
    let value = |m: &Mlp| (m.embed(&x).unwrap() * &g).sum();
    let pass = mlp.forward_pass(&x, &[], Mode::Eval).unwrap();
    let grads = mlp.backward(&pass, &[], Some(&g)).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = mlp.clone();
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + H;
            let up = value(&probe);
            probe.tensors_mut()[t][i] = orig - H;
            let down = value(&probe);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * H);
            assert!((a - numeric).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {numeric}");
        }
    }
}

#[test]
fn inverted_dropout_preserves_mean_activation() {
    let spec = ArchitectureSpec {
        input_dim: 2,
        hidden: vec![LayerSpec::new(3, Activation::ReLU, 0.5)],
    };
    let mut mlp = init_mlp(&spec, &[], 11).unwrap();
    mlp.layers[0].bias.fill(0.5);
    let x = Array2::from_shape_vec((1, 2), vec![0.7, -0.2]).unwrap();
    let eval = mlp.embed(&x).unwrap();
    let batch = x.broadcast((100_000, 2)).unwrap().to_owned();
    let mut rng = seeded_rng(12);
    let pass = mlp.forward_pass(&batch, &[], Mode::Train(&mut rng)).unwrap();
    let mean = pass.embedding.mean_axis(Axis(0)).unwrap();
    for (m, e) in mean.iter().zip(eval.row(0)) {
        if *e == 0.0 {
            assert_eq!(*m, 0.0);
        } else {
            assert!((m - e).abs() / e.abs() < 0.02, "{m} vs {e}");
        }
    }
}

#[test]
fn zero_dropout_train_equals_eval() {
    let spec = ArchitectureSpec {
        input_dim: 3,
        hidden: vec![LayerSpec::new(5, Activation::ReLU, 0.0), LayerSpec::new(2, Activation::Tanh, 0.0)],
    };
    let mlp = init_mlp(&spec, &[HeadSpec::new("h", 2, Activation::None)], 1).unwrap();
    let x = Array2::from_shape_fn((7, 3), |(i, j)| i as f64 - j as f64);
    let (train, _) = mlp.forward(&x, "h", Mode::Train(&mut seeded_rng(0))).unwrap();
    let (eval, _) = mlp.forward(&x, "h", Mode::Eval).unwrap();
    assert_eq!(train, eval);
}

#[test]
fn identity_trunk_embeds_to_input() {
    let spec = ArchitectureSpec {
        input_dim: 3,
        hidden: vec![LayerSpec::new(3, Activation::None, 0.0)],
    };
    let mut mlp = init_mlp(&spec, &[], 0).unwrap();
    mlp.layers[0].weights = Array2::eye(3);
    let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 - 5.0);
    assert_eq!(mlp.embed(&x).unwrap(), x);
}

#[test]
fn duplicated_rows_embed_identically() {
    let spec = ArchitectureSpec {
        input_dim: 2,
        hidden: vec![LayerSpec::new(6, Activation::ReLU, 0.0), LayerSpec::new(4, Activation::Sigmoid, 0.0)],
    };
    let mlp = init_mlp(&spec, &[], 3).unwrap();
    let x = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, 0.1, 0.2, -1.0, 4.0]).unwrap();
    let z = mlp.embed(&x).unwrap();
    assert_eq!(z.dim(), (3, 4));
    assert_eq!(z.row(0), z.row(1));
    assert_eq!(z, mlp.embed(&x).unwrap());
}

fn train_once(seed: u64) -> (Mlp, Vec<f64>) {
    let spec = ArchitectureSpec {
        input_dim: 3,
        hidden: vec![LayerSpec::new(8, Activation::ReLU, 0.2), LayerSpec::new(4, Activation::Tanh, 0.0)],
    };
    let mut mlp = init_mlp(&spec, &[HeadSpec::new("c", 3, Activation::None)], seed).unwrap();
    let mut data_rng = seeded_rng(99);
    let x = Array2::from_shape_fn((50, 3), |_| data_rng.random_range(-1.0..1.0));
    let y: Vec<usize> = (0..50).map(|i| i % 3).collect();
    let mut rng = seeded_rng(seed);
    rng.set_stream(1);
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.01);
    let loss = Loss::cross_entropy("c");
    let mut losses = Vec::new();
    for _ in 0..5 {
        let batches: Vec<Batch> = shuffled_batches(50, 16, &mut rng)
            .into_iter()
            .map(|rows| Batch {
                x: select_rows(&x, &rows),
                targets: vec![Target::Classes(rows.iter().map(|&r| y[r]).collect())],
            })
            .collect();
        losses.push(train_epoch(&mut mlp, &mut opt, batches, &loss, &mut rng).unwrap());
    }
    (mlp, losses)
}

#[test]
fn training_is_bit_reproducible() {
    let (a, la) = train_once(4);
    let (b, lb) = train_once(4);
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    let (c, _) = train_once(5);
    assert_ne!(a.to_checkpoint(), c.to_checkpoint());
}
