//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any of them fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqprompt::backbone::{msa_forward, prefix_tuned_msa, pretrain_backbone, MsaBlockParams};
use vqprompt::cil::{calibrate_classifier, run_continual, sample_pseudo_features, CalibrationConfig, ClassGaussian, Learner};
use vqprompt::data::generate_benchmark;
use vqprompt::optim::{AdamW, AdamWConfig};
use vqprompt::prompt::{aggregate_prompt, commitment_loss, quantize_prompt, similarity_scores, vq_loss};
use vqprompt::{AccuracyMatrix, ClassStatistics, ClassifierHead, Graph, Tensor, Var};
use vqprompt_cli::{ExperimentConfig, RunMode};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// gradient routing

const N: usize = 10;
const LP: usize = 8;
const D: usize = 16;

struct Instance {
    pool: Tensor,
    keys: Tensor,
    query: Tensor,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    Instance {
        pool: Tensor::uniform(vec![N, LP, D], 1.0, rng),
        keys: Tensor::uniform(vec![N, D], 1.0, rng),
        query: Tensor::uniform(vec![D], 1.0, rng),
    }
}

type LossFn = fn(&mut Graph, Var, Var) -> vqprompt::Result<Var>;

/// Scores, mixes and quantizes, then applies `loss` to the continuous and the
/// selected prompt.
fn chain(g: &mut Graph, v: &[Var], loss: LossFn) -> vqprompt::Result<Var> {
    let alpha = similarity_scores(g, v[1], v[2], 1.0)?;
    let cont = aggregate_prompt(g, v[0], alpha)?;
    let q = quantize_prompt(g, v[0], cont)?;
    loss(g, cont, q.selected)
}

/// Largest relative error between analytic and central-difference gradients
/// over every coordinate whose analytic gradient is nonzero, with magnitudes
/// under 1e-6 compared absolutely. Perturbed evaluations replay the
/// stop-gradient constants of the base evaluation.
fn nonzero_fd_error(inst: &Instance, loss: LossFn) -> (f64, usize) {
    let inputs = [
        inst.pool.clone().with_requires_grad(true),
        inst.keys.clone().with_requires_grad(true),
        inst.query.clone().with_requires_grad(true),
    ];
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = chain(&mut g, &vars, loss).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    let constants = g.take_constants();
    let eval = |probe: &[Tensor]| {
        let mut g = Graph::replaying(constants.clone());
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = chain(&mut g, &vars, loss).unwrap();
        g.value(out).item().unwrap()
    };
    // fourth-order central stencil keeps truncation error far below the
    // roundoff of a smaller step
    let eps = 1e-4;
    let mut probe = inputs.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let x = inputs[i].data()[j];
            let mut at = |h: f64| {
                probe[i].data_mut()[j] = x + h;
                eval(&probe)
            };
            let numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
            probe[i].data_mut()[j] = x;
            // relative below a floor of 1e-6 in magnitude becomes absolute
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn gradient_routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let mut g = Graph::new();
        let pool = g.param(&inst.pool.clone().with_requires_grad(true));
        let keys = g.constant(inst.keys.clone());
        let q = g.constant(inst.query.clone());
        let alpha = similarity_scores(&mut g, keys, q, 1.0).unwrap();
        let cont_value = aggregate_prompt(&mut g, pool, alpha).unwrap();
        let cont_value = g.value(cont_value).clone();

        // the continuous prompt as its own leaf exposes its gradient directly
        let mut g = Graph::new();
        let pool = g.param(&inst.pool.clone().with_requires_grad(true));
        let cont = g.leaf(cont_value.clone().with_requires_grad(true));
        let sel = quantize_prompt(&mut g, pool, cont).unwrap();
        let vq = vq_loss(&mut g, cont, sel.selected).unwrap();
        g.backward(vq).unwrap();
        if g.grad_or_zeros(cont).iter().any(|&x| x != 0.0) {
            return Err("codebook loss leaked gradient into the continuous prompt".into());
        }

        let mut g = Graph::new();
        let pool = g.param(&inst.pool.clone().with_requires_grad(true));
        let cont = g.leaf(cont_value.with_requires_grad(true));
        let sel = quantize_prompt(&mut g, pool, cont).unwrap();
        let commit = commitment_loss(&mut g, cont, sel.selected).unwrap();
        g.backward(commit).unwrap();
        if g.grad_or_zeros(pool).iter().any(|&x| x != 0.0) {
            return Err("commitment loss reached the codebook directly".into());
        }

        for loss in [vq_loss as LossFn, commitment_loss] {
            let (err, n) = nonzero_fd_error(&inst, loss);
            worst = worst.max(err);
            checked += n;
        }
    }
    check(
        worst < 1e-4,
        format!("100 instances, {checked} nonzero coordinates, max relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// straight-through identity

fn downstream(g: &mut Graph, p: Var, weight: Var) -> Var {
    let z = g.mul(p, weight).unwrap();
    let z = g.tanh(z).unwrap();
    let s = g.squared_norm(z).unwrap();
    g.scale(s, 0.5).unwrap()
}

fn straight_through_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let pool = Tensor::uniform(vec![N, LP, D], 1.0, &mut rng);
        let cont = Tensor::uniform(vec![LP, D], 1.0, &mut rng).with_requires_grad(true);
        let weight = Tensor::uniform(vec![LP, D], 2.0, &mut rng);

        let mut g = Graph::new();
        let pv = g.constant(pool.clone());
        let cv = g.leaf(cont);
        let wv = g.constant(weight.clone());
        let quant = quantize_prompt(&mut g, pv, cv).unwrap();
        let k = quant.indices[0];
        let s = downstream(&mut g, quant.output, wv);
        g.backward(s).unwrap();
        let through = g.grad_or_zeros(cv);

        // the same loss written directly on the selected element
        let mut g = Graph::new();
        let element = Tensor::new(vec![LP, D], pool.row(k).to_vec()).unwrap();
        let ev = g.leaf(element.with_requires_grad(true));
        let wv = g.constant(weight);
        let s = downstream(&mut g, ev, wv);
        g.backward(s).unwrap();
        let substituted = g.grad_or_zeros(ev);
        for (a, b) in through.iter().zip(&substituted) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-10, format!("100 instances, max absolute difference {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// quantization oracle

fn brute_argmin(pool: &[f64], width: usize, p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..pool.len() / width {
        let mut d = 0.0;
        for j in 0..width {
            let diff = pool[i * width + j] - p[j];
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn quantization_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ties = 0;
    for trial in 0..10_000 {
        let n = rng.random_range(1..=12);
        let lp = 2 * rng.random_range(1..=4);
        let d = rng.random_range(1..=8);
        let width = lp * d;
        let mut pool = Tensor::uniform(vec![n, lp, d], 1.0, &mut rng);
        let mut p = Tensor::uniform(vec![lp, d], 1.0, &mut rng);
        let mut expected = None;
        if trial % 4 == 0 && n >= 2 {
            // exact tie: two copies of one element, queried at that element
            let (a, b) = {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n);
                while b == a {
                    b = rng.random_range(0..n);
                }
                (a.min(b), a.max(b))
            };
            let src = pool.row(a).to_vec();
            pool.data_mut()[b * width..(b + 1) * width].copy_from_slice(&src);
            p = Tensor::new(vec![lp, d], src).unwrap();
            // every earlier element must lose, so the lowest tied index is `a`
            expected = Some(a);
            ties += 1;
        } else if trial % 4 == 1 && n >= 2 {
            // symmetric tie: p halfway between two elements that are mirror images
            let a = rng.random_range(0..n - 1);
            let b = n - 1;
            let center = p.data().to_vec();
            let offset: Vec<f64> = (0..width).map(|_| rng.random_range(-0.25..0.25)).collect();
            let plus: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            let minus: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c - o).collect();
            pool.data_mut()[a * width..(a + 1) * width].copy_from_slice(&plus);
            pool.data_mut()[b * width..(b + 1) * width].copy_from_slice(&minus);
            let mut g = Graph::new();
            let pv = g.constant(pool.clone());
            let cv = g.constant(p.clone());
            let k = quantize_prompt(&mut g, pv, cv).unwrap().indices[0];
            let oracle = brute_argmin(pool.data(), width, p.data());
            if k != oracle {
                return Err(format!("trial {trial}: index {k}, oracle {oracle}"));
            }
            continue;
        }
        let mut g = Graph::new();
        let pv = g.constant(pool.clone());
        let cv = g.constant(p.clone());
        let k = quantize_prompt(&mut g, pv, cv).unwrap().indices[0];
        let oracle = brute_argmin(pool.data(), width, p.data());
        if k != oracle {
            return Err(format!("trial {trial}: index {k}, oracle {oracle}"));
        }
        if let Some(e) = expected {
            let earlier_exact = (0..e).any(|i| pool.row(i) == p.data());
            if !earlier_exact && k != e {
                return Err(format!("trial {trial}: tie resolved to {k}, expected {e}"));
            }
        }
    }
    check(true, format!("10000 pools match brute force, {ties} constructed exact ties"))
}

// ---------------------------------------------------------------------------
// metrics oracle

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=8);
        let a: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| rng.random_range(0.0..=1.0)).collect()).collect();
        let columns: Vec<Vec<f64>> = (0..t).map(|j| (0..=j).map(|i| a[i][j]).collect()).collect();
        let m = AccuracyMatrix::from_columns(&columns).unwrap();
        let faa: f64 = (0..t).map(|i| a[i][t - 1]).sum::<f64>() / t as f64;
        let mut caa = 0.0;
        for j in 0..t {
            let mut s = 0.0;
            for row in a.iter().take(j + 1) {
                s += row[j];
            }
            caa += s / (j + 1) as f64;
        }
        caa /= t as f64;
        worst = worst.max((m.faa().unwrap() - faa).abs()).max((m.caa().unwrap() - caa).abs());
    }
    let hand = AccuracyMatrix::from_columns(&[vec![0.8], vec![0.6, 0.7]]).unwrap();
    let (f, c) = (hand.faa().unwrap(), hand.caa().unwrap());
    check(
        worst < 1e-12 && (f - 0.65).abs() < 1e-12 && (c - 0.725).abs() < 1e-12,
        format!("1000 matrices, max deviation {worst:.1e}; hand case FAA {f:.4} CAA {c:.4}"),
    )
}

// ---------------------------------------------------------------------------
// prefix tuning

fn prefix_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let d = 16;
    let block = MsaBlockParams::init(d, 32, &mut rng);
    for len in [1, 4, 17] {
        let h = Tensor::uniform(vec![2, len, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = block.bind(&mut g);
        let hv = g.constant(h.clone());
        let empty = g.constant(Tensor::zeros(vec![2, 0, d]));
        let prefixed = prefix_tuned_msa(&mut g, empty, hv, &vars, 4).unwrap();
        let plain = msa_forward(&mut g, hv, hv, hv, &vars, 4).unwrap();
        let same_bits = g
            .data(prefixed)
            .iter()
            .zip(g.data(plain))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_bits {
            return Err(format!("empty prefix differs from plain attention at length {len}"));
        }
        for lp in [2, 4, 8, 16] {
            let p = g.constant(Tensor::uniform(vec![2, lp, d], 1.0, &mut rng));
            let out = prefix_tuned_msa(&mut g, p, hv, &vars, 4).unwrap();
            if g.shape(out) != [2, len, d] {
                return Err(format!("length {len} with prefix {lp} gave {:?}", g.shape(out)));
            }
        }
    }
    check(true, "empty prefix bit-equal to plain attention; output length preserved".into())
}

// ---------------------------------------------------------------------------
// desk-scale experiment, also feeding the freeze checks

struct Desk {
    faa: BTreeMap<RunMode, Vec<f64>>,
    backbone_constant: bool,
    calibration_head_only: bool,
    elapsed: Duration,
}

fn desk_experiment() -> Desk {
    let start = Instant::now();
    let mut faa: BTreeMap<RunMode, Vec<f64>> = BTreeMap::new();
    let mut backbone_constant = true;
    let mut calibration_head_only = true;
    for seed in 0..3 {
        let config = ExperimentConfig::with_seed(seed);
        let bench = generate_benchmark(&config.benchmark_params()).unwrap();
        let (backbone, _) = pretrain_backbone(
            &bench.pretrain_train,
            None,
            config.backbone_config(),
            &config.pretrain_config(),
        )
        .unwrap();
        let before = backbone.checksum();
        for mode in RunMode::ALL {
            let mut c = config.clone();
            c.train.mode = mode;
            let run = run_continual(&backbone, &bench.sequence, &c.train_config()).unwrap();
            backbone_constant &= run.backbone_checksum == before && backbone.checksum() == before;
            let f = run.matrix.faa().unwrap();
            println!("    seed {seed} {:<5} FAA {:.4} CAA {:.4}", mode.name(), f, run.matrix.caa().unwrap());
            faa.entry(mode).or_default().push(f);
        }

        // calibration after the first task may only move the head
        let mut learner = Learner::new(backbone.clone(), bench.sequence.num_classes, config.train_config()).unwrap();
        let task = &bench.sequence.tasks[0];
        learner.train_task(&task.train, task.classes.clone()).unwrap();
        learner.collect_class_statistics(&task.train).unwrap();
        let pool = learner.pool.as_ref().unwrap().checksum();
        let head = learner.head.checksum();
        learner.calibrate().unwrap();
        calibration_head_only &= learner.pool.as_ref().unwrap().checksum() == pool
            && learner.backbone().checksum() == before
            && learner.head.checksum() != head;
    }
    Desk {
        faa,
        backbone_constant,
        calibration_head_only,
        elapsed: start.elapsed(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn freeze_contracts(desk: &Desk) -> Outcome {
    check(
        desk.backbone_constant && desk.calibration_head_only,
        format!(
            "backbone checksum constant over 12 five-task runs: {}; calibration moved only the head: {}",
            desk.backbone_constant, desk.calibration_head_only
        ),
    )
}

fn desk_scale(desk: &Desk) -> Outcome {
    let vq = mean(&desk.faa[&RunMode::Vq]);
    let vq_s = mean(&desk.faa[&RunMode::VqS]);
    let soft = mean(&desk.faa[&RunMode::Soft]);
    let none = mean(&desk.faa[&RunMode::None]);
    let minutes = desk.elapsed.as_secs_f64() / 60.0;
    let gap = 100.0 * (vq - none);
    let ok = gap >= 10.0 && vq >= vq_s - 0.01 && soft.is_finite() && minutes < 15.0;
    check(
        ok,
        format!(
            "mean FAA over 3 seeds: vq {:.2}, vq-s {:.2}, soft {:.2}, none {:.2}; vq - none = {gap:.2} points; {minutes:.1} min",
            100.0 * vq,
            100.0 * vq_s,
            100.0 * soft,
            100.0 * none
        ),
    )
}

// ---------------------------------------------------------------------------
// calibration bias

fn calibration_bias() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let d = 16;
    let classes: BTreeMap<u32, ClassGaussian> = (0..4)
        .map(|c| {
            (
                c,
                ClassGaussian {
                    mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    variance: vec![0.1; d],
                    count: 80,
                },
            )
        })
        .collect();
    let stats = ClassStatistics { classes };
    let second_task = ClassStatistics {
        classes: stats.classes.iter().filter(|(c, _)| **c >= 2).map(|(c, g)| (*c, g.clone())).collect(),
    };
    let first_task = ClassStatistics {
        classes: stats.classes.iter().filter(|(c, _)| **c < 2).map(|(c, g)| (*c, g.clone())).collect(),
    };

    // a head trained only on the second task's data
    let mut head = ClassifierHead::init(4, d, &mut rng);
    let (x, y) = sample_pseudo_features(&second_task, 100, 1).unwrap();
    let targets: Vec<usize> = y.iter().map(|&c| c as usize).collect();
    let mut opt = AdamW::new(AdamWConfig::default());
    for _ in 0..100 {
        let mut g = Graph::new();
        let vars = head.bind(&mut g);
        let xv = g.constant(x.clone());
        let logits = ClassifierHead::logits(&mut g, vars, xv).unwrap();
        let loss = g.masked_cross_entropy(logits, &targets, &[true; 4]).unwrap();
        g.backward(loss).unwrap();
        head.accumulate_grads(&g, vars).unwrap();
        opt.step(&mut head.parameters_mut(), 0.02);
    }

    let (probe, labels) = sample_pseudo_features(&first_task, 500, 2).unwrap();
    let all = [0, 1, 2, 3];
    let accuracy = |h: &ClassifierHead| {
        (0..labels.len()).filter(|&i| h.predict(probe.row(i), &all) == labels[i]).count() as f64 / labels.len() as f64
    };
    let before = accuracy(&head);
    calibrate_classifier(&mut head, &stats, &CalibrationConfig::default(), AdamWConfig::default(), 3).unwrap();
    let after = accuracy(&head);
    check(
        after > before,
        format!("task-1 pseudo-feature accuracy {:.3} -> {:.3}", before, after),
    )
}

// ---------------------------------------------------------------------------
// reproducibility through the binary

fn vqprompt(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vqprompt"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn pipeline(root: &Path, config: &Path) -> Result<(), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, ckpt, run) = (root.join("data"), root.join("backbone.ckpt"), root.join("run"));
    let c = s(config);
    vqprompt(&["generate", "--config", &c, "--out", &s(&data)])?;
    vqprompt(&["pretrain", "--config", &c, "--data", &s(&data), "--out", &s(&ckpt)])?;
    vqprompt(&["run", "--config", &c, "--data", &s(&data), "--backbone", &s(&ckpt), "--out", &s(&run)])
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("experiment.toml");
    std::fs::write(
        &config,
        "seed = 11\n\n[data]\ntasks = 3\n\n[backbone]\npretrain_epochs = 1\n\n[train]\nepochs = 3\n",
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a, &config)?;
    pipeline(&b, &config)?;
    let mut compared = Vec::new();
    for file in ["metrics.csv", "accuracy_matrix.csv", "forgetting.csv", "loss_task0.csv"] {
        let x = std::fs::read(a.join("run").join(file)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join("run").join(file)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{file} differs between invocations"));
        }
        compared.push(file);
    }
    check(true, format!("two generate/pretrain/run pipelines: identical {}", compared.join(", ")))
}

// ---------------------------------------------------------------------------

fn report(index: usize, name: &str, outcome: Outcome, elapsed: Duration) -> bool {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {index} PASS  {name} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {index} FAIL  {name} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed())
}

fn main() {
    let mut passed = Vec::new();

    let (o, t) = timed(gradient_routing);
    let o = o.and_then(|d| check(t < Duration::from_secs(10), format!("{d}; budget 10s")));
    passed.push(report(1, "gradient routing", o, t));

    let (o, t) = timed(straight_through_identity);
    let o = o.and_then(|d| check(t < Duration::from_secs(5), format!("{d}; budget 5s")));
    passed.push(report(2, "straight-through identity", o, t));

    let (o, t) = timed(quantization_oracle);
    let o = o.and_then(|d| check(t < Duration::from_secs(10), format!("{d}; budget 10s")));
    passed.push(report(3, "quantization oracle", o, t));

    let (o, t) = timed(metric_oracle);
    passed.push(report(4, "metric oracle", o, t));

    let (o, t) = timed(prefix_contract);
    passed.push(report(5, "prefix-tuning contract", o, t));

    println!("    running the desk-scale experiment (3 seeds x 4 modes)");
    let desk = desk_experiment();
    passed.push(report(6, "freeze contracts", freeze_contracts(&desk), desk.elapsed));
    passed.push(report(7, "desk-scale continual experiment", desk_scale(&desk), desk.elapsed));

    let (o, t) = timed(calibration_bias);
    passed.push(report(8, "calibration bias", o, t));

    let (o, t) = timed(reproducibility);
    passed.push(report(9, "reproducibility", o, t));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
