use qcnn::data::Dataset;
use qcnn::emulation::{NoiseConfig, SampleMode};
use qcnn::harness::{evaluate, train, OptimizerConfig, RunConfig, RunMode};
use qcnn::net::{softmax_nll, Architecture, Checkpoint, LayerSpec, Network, Normalization, PoolKind};
use qcnn::rng::StreamKey;
use qcnn::tensor::{Dims3, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_layers(pool: Option<PoolKind>) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::Conv { height: 3, width: 3, in_depth: 1, out_depth: 2, noise: None },
        LayerSpec::Conv { height: 3, width: 3, in_depth: 2, out_depth: 3, noise: None },
    ];
    let features = match pool {
        Some(kind) => {
            layers.push(LayerSpec::Pool { pool: kind, size: 2 });
            12
        }
        None => 48,
    };
    layers.push(LayerSpec::Fc { inputs: features, outputs: 6, relu: true });
    layers.push(LayerSpec::Fc { inputs: 6, outputs: 4, relu: false });
    layers.push(LayerSpec::SoftmaxNll);
    layers
}

fn images(n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor3> {
    (0..n).map(|_| Tensor3::from_fn(Dims3::new(8, 8, 1), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()).collect()
}

/// Worst relative gap between backprop and central differences over every parameter.
fn worst_gradient_gap(net: &Network, xs: &[Tensor3], labels: &[usize]) -> f64 {
    let refs: Vec<&Tensor3> = xs.iter().collect();
    let ids: Vec<u64> = (0..xs.len() as u64).collect();
    let cfg = NoiseConfig { cap: 1e6, ..NoiseConfig::classical(0) };
    let key = StreamKey::new(0, [0, 0, 0]);
    let grads = net.batch_gradients(&refs, labels, &ids, &cfg, &key).unwrap().grads;
    let loss = |n: &Network| softmax_nll(n.logits(&refs, &ids, &cfg, &key).unwrap().view(), labels).unwrap().0;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = |analytic: f64, nudge: &dyn Fn(&mut Network, f64)| {
        let (mut p, mut m) = (net.clone(), net.clone());
        nudge(&mut p, h);
        nudge(&mut m, -h);
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4));
    };
    for l in 0..net.params.convs.len() {
        for i in 0..net.params.convs[l].as_slice().len() {
            probe(grads.convs[l].as_slice()[i], &|n, d| n.params.convs[l].as_mut_slice()[i] += d);
        }
    }
    for l in 0..net.params.fcs.len() {
        for ((r, c), g) in grads.fcs[l].weight.indexed_iter() {
            probe(*g, &|n, d| n.params.fcs[l].weight[[r, c]] += d);
        }
        for (r, g) in grads.fcs[l].bias.iter().enumerate() {
            probe(*g, &|n, d| n.params.fcs[l].bias[r] += d);
        }
    }
    worst
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arch = Architecture::new(Dims3::new(8, 8, 1), toy_layers(None)).unwrap();
    let net = Network::init(arch, &mut rng).unwrap();
    let xs = images(3, &mut rng);
    assert!(worst_gradient_gap(&net, &xs, &[0, 3, 1]) < 1e-5);
}

#[test]
fn pooled_network_gradients_match_finite_differences() {
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let arch = Architecture::new(Dims3::new(8, 8, 1), toy_layers(Some(kind))).unwrap();
        let net = Network::init(arch, &mut rng).unwrap();
        let xs = images(2, &mut rng);
        let gap = worst_gradient_gap(&net, &xs, &[2, 1]);
        assert!(gap < 1e-5, "{kind:?}: {gap}");
    }
}

fn synthetic(n: usize, seed: u64) -> Dataset {
    // class = quadrant holding a bright blob
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let label = rng.gen_range(0..4);
        let (oi, oj) = ((label / 2) * 4, (label % 2) * 4);
        let t = Tensor3::from_fn(Dims3::new(8, 8, 1), |i, j, _| {
            let inside = (oi..oi + 4).contains(&i) && (oj..oj + 4).contains(&j);
            rng.gen_range(-0.2..0.2) + if inside { 1.5 } else { 0.0 }
        })
        .unwrap();
        images.push(t);
        labels.push(label);
    }
    Dataset { images, labels }
}

fn toy_run(mode: RunMode, noise: NoiseConfig) -> RunConfig {
    RunConfig {
        mode,
        noise,
        optimizer: OptimizerConfig { learning_rate: 0.05, batch_size: 8, epochs: 3 },
        layers: Some(toy_layers(None)),
        eval_batch: 16,
        ..RunConfig::default()
    }
}

#[test]
fn training_is_reproducible_and_learns() {
    let (tr, te) = (synthetic(160, 1), synthetic(40, 2));
    let cfg = toy_run(RunMode::QuantumTrain, NoiseConfig::quantum(0.01, 0.01, 10.0, 0.8, 21));
    let a = train(&cfg, &tr, &te).unwrap();
    let b = train(&cfg, &tr, &te).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.network, b.network);
    assert_eq!(a.log.rows.len(), 60);

    let other = RunConfig { noise: NoiseConfig { seed: 22, ..cfg.noise }, ..cfg.clone() };
    assert_ne!(train(&other, &tr, &te).unwrap().log, a.log);

    let mut longer = toy_run(RunMode::ClassicalTrain, NoiseConfig::classical(3));
    longer.optimizer = OptimizerConfig { learning_rate: 0.1, batch_size: 8, epochs: 12 };
    let classical = train(&longer, &tr, &te).unwrap();
    let rows = &classical.log.rows;
    let first = rows[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let last = rows[rows.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(last < first, "loss went from {first} to {last}");
    assert!(classical.test_accuracy > 0.8, "accuracy {}", classical.test_accuracy);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (tr, te) = (synthetic(48, 5), synthetic(16, 6));
    let out = train(&toy_run(RunMode::ClassicalTrain, NoiseConfig::classical(4)), &tr, &te).unwrap();
    let norm = Normalization { mean: 0.25, std: 0.5 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::from_network(&out.network, norm).save(&path).unwrap();
    let (net, back) = Checkpoint::load(&path).unwrap().into_network().unwrap();
    assert_eq!(back, norm);
    assert_eq!(net, out.network);

    let eval_cfg = RunConfig {
        checkpoint_path: Some(path),
        ..toy_run(RunMode::WeightTransferEval, NoiseConfig::quantum(0.05, 0.0, 5.0, 0.6, 8))
    };
    assert_eq!(evaluate(&net, &te, &eval_cfg).unwrap(), evaluate(&out.network, &te, &eval_cfg).unwrap());
}

#[test]
fn transfer_eval_without_quantum_effects_equals_classical_eval() {
    let (tr, te) = (synthetic(48, 7), synthetic(24, 8));
    let classical_cfg = toy_run(RunMode::ClassicalTrain, NoiseConfig::classical(9));
    let out = train(&classical_cfg, &tr, &te).unwrap();
    let off = NoiseConfig { sample_mode: SampleMode::TopK, ..NoiseConfig::quantum(0.0, 0.0, f64::INFINITY, 1.0, 9) };
    let transfer =
        RunConfig { checkpoint_path: Some("unused.json".into()), ..toy_run(RunMode::WeightTransferEval, off) };
    let (loss, acc) = evaluate(&out.network, &te, &transfer).unwrap();
    assert_eq!((loss, acc), (out.test_loss, out.test_accuracy));
}
