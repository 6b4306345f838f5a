//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The MNIST criterion reads the IDX files from `QCNN_MNIST_DIR` (default
//! `/root/data/mnist`) and trains six networks; expect it to take a while.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use qcnn::data::{load_mnist, Dataset};
use qcnn::emulation::{big_m, noisy_conv, CapGradient, NoiseConfig, SampleMode};
use qcnn::harness::{evaluate, train, OptimizerConfig, RunConfig, RunMode};
use qcnn::net::{backward_conv, backward_conv_exact, forward_layer, softmax_nll, Architecture, LayerSpec, Network};
use qcnn::rng::StreamKey;
use qcnn::runtime::{forward_costs, kappa, mu, ForwardStats, DEFAULT_P_GRID};
use qcnn::sampling_tree::{inner_product_estimate, SamplingTree};
use qcnn::tensor::{
    direct_conv, expand_input, kernel_to_matrix, matmul_conv, output_dims, output_to_tensor, Dims3, Kernel4,
    KernelDims, Tensor3,
};
use qcnn::tomography::tomography;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn conv_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let kd =
            KernelDims::new(rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=5));
        let dims = Dims3::new(rng.gen_range(kd.height..=12), rng.gen_range(kd.width..=12), kd.in_depth);
        let x = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let k = Kernel4::from_fn(kd, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let y = matmul_conv(&expand_input(&x, kd).unwrap(), &kernel_to_matrix(&k)).unwrap();
        let via_matrix = output_to_tensor(&y, output_dims(dims, kd).unwrap()).unwrap();
        let direct = direct_conv(&x, &k).unwrap();
        let scale = direct.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let err = via_matrix.as_slice().iter().zip(direct.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
    }
    outcome(worst <= 1e-9, format!("worst relative difference {worst:.2e} over 100 pairs"))
}

fn tomography_guarantee() -> Outcome {
    let (d, delta, trials) = (100, 0.1, 200);
    let bound = (1.0 + 2f64.sqrt()) * delta;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut ok = 0;
    for _ in 0..trials {
        let x = unit_vector(d, &mut rng);
        if tomography(&x, delta, &mut rng).unwrap().linf_error(&x) <= bound {
            ok += 1;
        }
    }
    let frac = ok as f64 / trials as f64;
    outcome(frac >= 0.95, format!("{ok}/{trials} trials within {bound:.4}"))
}

fn sampling_tree() -> Outcome {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tree = SamplingTree::from_values(&v).unwrap();
    let total: f64 = v.iter().map(|x| x * x).sum();
    let draws = 1_000_000;
    let mut counts = vec![0usize; d];
    for _ in 0..draws {
        counts[tree.sample(&mut rng).unwrap()] += 1;
    }
    let tv = 0.5 * counts.iter().zip(&v).map(|(&c, x)| (c as f64 / draws as f64 - x * x / total).abs()).sum::<f64>();

    let mut tree = tree;
    let mut shadow = v.clone();
    for _ in 0..10_000 {
        let i = rng.gen_range(0..d);
        let val = rng.gen_range(-2.0..2.0);
        tree.update(i, val).unwrap();
        shadow[i] = val;
    }
    let audit = tree.is_consistent() && tree.values()[..d] == shadow[..];
    outcome(tv <= 0.01 && audit, format!("total variation {tv:.5}, audit after 10^4 updates {}", ok_word(audit)))
}

fn ok_word(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "failed"
    }
}

fn inner_product() -> Outcome {
    let (d, eps, fail, trials) = (128, 0.05, 0.1, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut ok = 0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let exact: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        let tree = SamplingTree::from_values(&x).unwrap();
        let s = inner_product_estimate(&tree, |i| y[i], eps, fail, &mut rng).unwrap();
        if (s - exact).abs() <= eps * nx * ny {
            ok += 1;
        }
    }
    outcome(ok as f64 / trials as f64 >= 0.90, format!("{ok}/{trials} estimates within eps |x| |y|"))
}

fn toy_network(rng: &mut ChaCha8Rng) -> Network {
    let arch = Architecture::new(
        Dims3::new(8, 8, 1),
        vec![
            LayerSpec::Conv { height: 3, width: 3, in_depth: 1, out_depth: 2, noise: None },
            LayerSpec::Conv { height: 3, width: 3, in_depth: 2, out_depth: 3, noise: None },
            LayerSpec::Fc { inputs: 48, outputs: 10, relu: false },
            LayerSpec::SoftmaxNll,
        ],
    )
    .unwrap();
    Network::init(arch, rng).unwrap()
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let net = toy_network(&mut rng);
    let images: Vec<Tensor3> =
        (0..2).map(|_| Tensor3::from_fn(Dims3::new(8, 8, 1), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()).collect();
    let refs: Vec<&Tensor3> = images.iter().collect();
    let labels = [3, 7];
    let ids = [0, 1];
    let cfg = NoiseConfig { cap: 1e6, ..NoiseConfig::classical(5) };
    let key = StreamKey::new(5, [0, 0, 0]);
    let grads = net.batch_gradients(&refs, &labels, &ids, &cfg, &key).unwrap().grads;
    let loss = |n: &Network| {
        let z = n.logits(&refs, &ids, &cfg, &key).unwrap();
        softmax_nll(z.view(), &labels).unwrap().0
    };

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut check = |analytic: f64, perturb: &dyn Fn(&mut Network, f64)| {
        let mut plus = net.clone();
        perturb(&mut plus, h);
        let mut minus = net.clone();
        perturb(&mut minus, -h);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
        worst = worst.max(rel);
        checked += 1;
    };
    for l in 0..net.params.convs.len() {
        for i in 0..net.params.convs[l].as_slice().len() {
            check(grads.convs[l].as_slice()[i], &|n, d| n.params.convs[l].as_mut_slice()[i] += d);
        }
    }
    for l in 0..net.params.fcs.len() {
        let (rows, cols) = net.params.fcs[l].weight.dim();
        for r in 0..rows {
            for c in 0..cols {
                check(grads.fcs[l].weight[[r, c]], &|n, d| n.params.fcs[l].weight[[r, c]] += d);
            }
            check(grads.fcs[l].bias[r], &|n, d| n.params.fcs[l].bias[r] += d);
        }
    }
    outcome(worst <= 1e-5, format!("{checked} parameters, worst relative error {worst:.2e}"))
}

fn noise_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let x = Tensor3::from_fn(Dims3::new(28, 28, 2), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
    let kd = KernelDims::new(5, 5, 2, 8);
    let k = Kernel4::from_fn(kd, |_, _, _, _| rng.gen_range(-0.5..0.5)).unwrap();
    let a = expand_input(&x, kd).unwrap();
    let f = kernel_to_matrix(&k);
    let eps = 0.05;
    let cfg = NoiseConfig::quantum(eps, 0.0, f64::INFINITY, 1.0, 0);
    let clean = matmul_conv(&a, &f).unwrap();
    let noisy = noisy_conv(&a, &f, &cfg, &mut rng).unwrap();
    let diffs: Vec<f64> = noisy.0.iter().zip(clean.0.iter()).map(|(a, b)| a - b).collect();
    let want = 2.0 * big_m(&a, &f) * eps;
    let fwd = std_dev(&diffs) / want;

    // backprop: the same traced layer, exact against noisy kernel gradients
    let delta = 0.1;
    let small = Tensor3::from_fn(Dims3::new(10, 10, 3), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
    let sk = Kernel4::from_fn(KernelDims::new(4, 4, 3, 5), |_, _, _, _| rng.gen_range(-0.5..0.5)).unwrap();
    let exact_cfg = NoiseConfig::classical(0);
    let (out, trace) = forward_layer(&small, &sk, &exact_cfg, None, &mut rng).unwrap();
    let upstream = Tensor3::from_fn(out.dims(), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
    let exact = backward_conv_exact(&trace, &upstream, &sk, false).unwrap().kernel;
    let norm = exact.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let noisy_cfg = NoiseConfig { delta, ..exact_cfg };
    let mut bdiffs = Vec::new();
    while bdiffs.len() < 10_000 {
        let g = backward_conv(&trace, &upstream, &sk, &noisy_cfg, &mut rng).unwrap().kernel;
        bdiffs.extend(g.as_slice().iter().zip(exact.as_slice()).map(|(a, b)| a - b));
    }
    let back = std_dev(&bdiffs) / (delta * norm);
    let pass = (fwd - 1.0).abs() <= 0.05 && (back - 1.0).abs() <= 0.10;
    outcome(
        pass,
        format!(
            "forward std / 2M eps = {fwd:.4} over {} entries, backprop std / (delta |g|) = {back:.4} over {} entries",
            diffs.len(),
            bdiffs.len()
        ),
    )
}

fn runtime_estimator() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for d in [1, 4, 17, 64] {
        let id = Array2::<f64>::eye(d);
        let (m, k) = (mu(id.view(), DEFAULT_P_GRID).unwrap(), kappa(id.view(), 0.0).unwrap());
        if m != 1.0 || k != 1.0 {
            pass = false;
            notes.push(format!("identity {d}: mu {m}, kappa {k}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut over = 0;
    for _ in 0..50 {
        let d = rng.gen_range(2..=40);
        let v = Array2::from_shape_fn((d, d), |_| StandardNormal.sample(&mut rng));
        if mu(v.view(), DEFAULT_P_GRID).unwrap() > (d as f64).sqrt() {
            over += 1;
        }
    }
    pass &= over == 0;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let out = Dims3::new(rng.gen_range(1..30), rng.gen_range(1..30), rng.gen_range(1..12));
        let stats = ForwardStats {
            input_dims: Dims3::new(out.height + 2, out.width + 2, 3),
            output_dims: out,
            m: rng.gen_range(0.1..50.0),
            mean_activation: rng.gen_range(0.01..5.0),
        };
        let c = forward_costs(&stats, rng.gen_range(1.0..20.0), rng.gen_range(0.001..0.5), rng.gen_range(0.05..1.0))
            .unwrap();
        worst = worst.max((c.quantum - c.quantum_sampled_form).abs() / c.quantum);
    }
    pass &= worst <= 8.0 * f64::EPSILON;
    notes.push(format!("identities exact, {over}/50 random mu above sqrt(d), cost identity gap {worst:.1e}"));
    outcome(pass, notes.join("; "))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("QCNN_MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data/mnist"))
}

fn run_config(mode: RunMode, noise: NoiseConfig) -> RunConfig {
    RunConfig { mode, noise, optimizer: OptimizerConfig::default(), ..RunConfig::default() }
}

fn quantum(sigma: f64, eps: f64, delta: f64) -> NoiseConfig {
    NoiseConfig {
        sample_mode: SampleMode::Measurement,
        cap_gradient: CapGradient::Zero,
        ..NoiseConfig::quantum(eps, delta, 10.0, sigma, 1)
    }
}

fn mnist_tables() -> Outcome {
    let dir = mnist_dir();
    let (train_set, test_set, _) = match load_mnist(&dir, None) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("cannot load MNIST from {}: {e}", dir.display())),
    };
    let run = |cfg: RunConfig, data: (&Dataset, &Dataset)| train(&cfg, data.0, data.1);
    let mut lines = Vec::new();
    let mut pass = true;

    let classical = match run(run_config(RunMode::ClassicalTrain, NoiseConfig::classical(1)), (&train_set, &test_set)) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("classical training failed: {e}")),
    };
    let ok = classical.test_accuracy >= 0.94 && classical.test_loss <= 0.25;
    pass &= ok;
    lines.push(format!(
        "classical acc {:.2}% loss {:.3} [{}]",
        100.0 * classical.test_accuracy,
        classical.test_loss,
        ok_word(ok)
    ));

    let transfer_cfg = run_config(RunMode::WeightTransferEval, quantum(0.5, 0.01, 0.01));
    match evaluate(&classical.network, &test_set, &transfer_cfg) {
        Ok((loss, acc)) => {
            let ok = acc >= 0.92;
            pass &= ok;
            lines.push(format!("transfer sigma 0.5 acc {:.2}% loss {loss:.3} [{}]", 100.0 * acc, ok_word(ok)));
        }
        Err(e) => {
            pass = false;
            lines.push(format!("transfer eval failed: {e}"));
        }
    }

    let mut quantum_with = |noise: NoiseConfig| -> Option<f64> {
        let (sigma, eps) = (noise.sigma, noise.epsilon);
        match run(run_config(RunMode::QuantumTrain, noise), (&train_set, &test_set)) {
            Ok(o) => Some(o.test_accuracy),
            Err(e) => {
                lines.push(format!("quantum sigma {sigma} eps {eps} failed: {e}"));
                None
            }
        }
    };
    let a5 = quantum_with(quantum(0.5, 0.01, 0.01));
    let a3 = quantum_with(quantum(0.3, 0.01, 0.01));
    let a1 = quantum_with(quantum(0.1, 0.01, 0.01));
    let degenerate = quantum_with(quantum(0.1, 0.1, 0.01));
    let pass_through =
        quantum_with(NoiseConfig { cap_gradient: CapGradient::PassThrough, ..quantum(0.5, 0.01, 0.01) });

    let check = |lines: &mut Vec<String>, name: &str, acc: Option<f64>, ok: fn(f64) -> bool| -> bool {
        match acc {
            Some(a) => {
                lines.push(format!("{name} acc {:.2}% [{}]", 100.0 * a, ok_word(ok(a))));
                ok(a)
            }
            None => false,
        }
    };
    pass &= check(&mut lines, "quantum sigma 0.5", a5, |a| a >= 0.92);
    pass &= check(&mut lines, "degenerate sigma 0.1 eps 0.1", degenerate, |a| a <= 0.50);
    let ordered = matches!((a1, a3, a5), (Some(x), Some(y), Some(z)) if x < y && y < z);
    pass &= ordered;
    lines.push(format!(
        "ordering sigma 0.1 < 0.3 < 0.5: {:.2}% < {:.2}% < {:.2}% [{}]",
        100.0 * a1.unwrap_or(f64::NAN),
        100.0 * a3.unwrap_or(f64::NAN),
        100.0 * a5.unwrap_or(f64::NAN),
        ok_word(ordered)
    ));
    if let Some(a) = pass_through {
        lines.push(format!("info: sigma 0.5 with pass-through cap gradient acc {:.2}%", 100.0 * a));
    }
    outcome(pass, lines.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("1 convolution equivalence", conv_equivalence, Some(Duration::from_secs(5))),
        ("2 linf tomography guarantee", tomography_guarantee, Some(Duration::from_secs(60))),
        ("3 sampling tree", sampling_tree, Some(Duration::from_secs(30))),
        ("4 sampled inner product", inner_product, Some(Duration::from_secs(60))),
        ("5 gradient oracle", gradient_oracle, Some(Duration::from_secs(60))),
        ("6 noise calibration", noise_calibration, None),
        ("7 MNIST tables", mnist_tables, Some(Duration::from_secs(2 * 3600))),
        ("8 runtime estimator", runtime_estimator, None),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let id = name.split(' ').next().unwrap_or_default();
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let mut o = check();
        let took = start.elapsed();
        if let Some(b) = budget.filter(|b| took > *b) {
            o.pass = false;
            o.detail.push_str(&format!("; over the {}s budget", b.as_secs()));
        }
        println!(
            "{} criterion {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
