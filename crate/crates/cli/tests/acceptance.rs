//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test -p cmim-cli --test acceptance -- 1 4`.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cmim_cli::{cmd_train, ExperimentConfig};
use cmim_core::autograd::Graph;
use cmim_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use cmim_core::critic::{critic_bound, fit_critic, Critic, CriticFit, CriticKind};
use cmim_core::data::{
    generate_synthetic_classification, generate_synthetic_segmentation, SyntheticConfig,
    SEGMENTATION_MODALITIES,
};
use cmim_core::encoders::{ImageEncoderConfig, TextEncoderConfig, UNetConfig};
use cmim_core::evaluation::{auc, dice, evaluate_full, evaluate_modality_dropping};
use cmim_core::gradcheck::check_gradients;
use cmim_core::losses::{
    classification_loss, loss_global_global, loss_local_global, loss_local_local, segmentation_loss, LossWeights,
    MiLossConfig,
};
use cmim_core::mi::{
    discrete_mi_oracle, gaussian_mi_oracle, jsd_mi_lower_bound, make_marginal_pairing, EstimatorKind, ScorePair,
};
use cmim_core::model::{ClassifierConfig, Model, ModelConfig, SegmenterConfig};
use cmim_core::params::{ParamId, ParamStore};
use cmim_core::training::{train, TrainConfig};
use ndarray::{array, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(start: Instant, budget: Duration, lines: &mut Vec<String>) -> bool {
    let took = start.elapsed();
    lines.push(format!("runtime {:.1}s (budget {}s)", took.as_secs_f64(), budget.as_secs()));
    took <= budget
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    let s = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let b: f64 = StandardNormal.sample(&mut r);
        x[[i, 0]] = a;
        y[[i, 0]] = rho * a + s * b;
    }
    (x, y)
}

/// One-hot samples `(x, y)` drawn from a joint table.
fn table_pairs(joint: &Array2<f64>, n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let (kx, ky) = joint.dim();
    let cells: Vec<((usize, usize), f64)> = joint.indexed_iter().map(|(ij, p)| (ij, *p)).collect();
    let mut r = rng(seed);
    let mut x = Array2::zeros((n, kx));
    let mut y = Array2::zeros((n, ky));
    for k in 0..n {
        let mut u: f64 = r.random();
        let mut pick = cells[cells.len() - 1].0;
        for &(ij, p) in &cells {
            if u < p {
                pick = ij;
                break;
            }
            u -= p;
        }
        x[[k, pick.0]] = 1.0;
        y[[k, pick.1]] = 1.0;
    }
    (x, y)
}

fn estimate(x: &Array2<f64>, y: &Array2<f64>, held: &(Array2<f64>, Array2<f64>), fit: &CriticFit) -> f64 {
    let (store, critic) = fit_critic(x.view(), y.view(), fit).unwrap();
    critic_bound(&store, &critic, held.0.view(), held.1.view(), fit.estimator, 99)
        .unwrap()
        .value
}

fn mi_estimator_recovery() -> Verdict {
    let start = Instant::now();
    let n = 100_000;
    let mut lines = Vec::new();
    let mut ok = true;
    for (rho, tol) in [(0.8, 0.10), (0.0, 0.03)] {
        let truth = gaussian_mi_oracle(rho).unwrap();
        let (x, y) = gaussian_pairs(rho, n, 1);
        let held = gaussian_pairs(rho, n, 2);
        let est = estimate(&x, &y, &held, &CriticFit::default());
        let good = (est - truth).abs() <= tol;
        ok &= good;
        lines.push(format!("rho {rho}: DV {est:.4} vs {truth:.4} (±{tol})"));
    }
    ok &= within_budget(start, Duration::from_secs(180), &mut lines);
    verdict(ok, lines.join("; "))
}

fn jsd_sanity() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let fit = CriticFit {
        estimator: EstimatorKind::Jsd,
        steps: 600,
        batch_size: 256,
        hidden: 32,
        learning_rate: 3e-3,
        seed: 3,
    };
    let floor = -2.0 * 2f64.ln();
    let (x, y) = gaussian_pairs(0.0, 20_000, 5);
    let held = gaussian_pairs(0.0, 20_000, 6);
    let independent = estimate(&x, &y, &held, &fit);
    let ok_ind = (independent - floor).abs() <= 0.05;
    lines.push(format!("independent {independent:.4} vs {floor:.4} (±0.05)"));

    let k = 64;
    let diagonal = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 / k as f64 } else { 0.0 });
    let (x, y) = table_pairs(&diagonal, 20_000, 7);
    let held = table_pairs(&diagonal, 20_000, 8);
    let coupled = estimate(&x, &y, &held, &fit);
    let ok_cpl = coupled > -0.2;
    lines.push(format!("coupled K={k} {coupled:.4} (> -0.2)"));
    let ok_time = within_budget(start, Duration::from_secs(60), &mut lines);
    verdict(ok_ind && ok_cpl && ok_time, lines.join("; "))
}

fn discrete_lower_bound() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut r = rng(11);
    let fit = CriticFit {
        hidden: 32,
        steps: 1500,
        ..CriticFit::default()
    };
    for t in 0..5 {
        let raw = Array2::from_shape_fn((4, 4), |_| r.random::<f64>().powi(3));
        let joint = &raw / raw.sum();
        let truth = discrete_mi_oracle(&joint).unwrap();
        let (x, y) = table_pairs(&joint, 100_000, 20 + t);
        let held = table_pairs(&joint, 100_000, 40 + t);
        let est = estimate(&x, &y, &held, &CriticFit { seed: t, ..fit });
        ok &= est <= truth + 0.05;
        lines.push(format!("table {t}: DV {est:.4} <= {truth:.4} + 0.05"));
    }
    verdict(ok, lines.join("; "))
}

fn jitter(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
    // keeps zero-initialized biases off relu kinks
    let mut r = rng(seed);
    for &id in ids {
        store.get_mut(id).mapv_inplace(|v| v + r.random_range(-0.05..0.05));
    }
}

fn randt(r: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(r))
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut r = rng(5);
    let (bs, ni, nm, d) = (3, 2, 3, 3);
    let pairing = make_marginal_pairing(bs, 1).unwrap();
    let w = LossWeights::default();
    let mut store = ParamStore::new();
    let ll_critic = Critic::new(&mut store, "ll", CriticKind::LocalLocal, d, d, 4, &mut r);
    let lg_critic = Critic::new(&mut store, "lg", CriticKind::LocalGlobal, d, d, 4, &mut r);
    let gg_critic = Critic::new(&mut store, "gg", CriticKind::GlobalGlobal, d, d, 4, &mut r);
    let mut ids: Vec<ParamId> = store.ids().collect();
    jitter(&mut store, &ids, 2);
    let mut leaf = |name: &str, shape: &[usize]| {
        let id = store.add(name, randt(&mut r, shape), true);
        ids.push(id);
        id
    };
    let local = leaf("local", &[bs, ni, d]);
    let fused = leaf("fused_local", &[bs, nm, d]);
    let global = leaf("global", &[bs, d]);
    let fused_global = leaf("fused_global", &[bs, d]);
    let logits = leaf("logits", &[bs, 4]);
    let pixel_logits = leaf("pixel_logits", &[bs, 2, 2, 2]);
    let labels = [0, 3, 1];
    let masks = Array3::from_shape_fn((bs, 2, 2), |(b, y, x)| (b + y + x) % 2);

    let mut results = Vec::new();
    for name in ["L_ll", "L_lg", "L_gg", "L_C", "L_S"] {
        let report = check_gradients(&mut store, &ids, 1e-5, |g, s| {
            let (l, f, gl, fg) = (g.param(s, local), g.param(s, fused), g.param(s, global), g.param(s, fused_global));
            let ll = loss_local_local(g, s, &ll_critic, l, f, &pairing, &MiLossConfig::default(), 0).unwrap();
            let lg = loss_local_global(g, s, &lg_critic, l, fg, &pairing, EstimatorKind::Jsd).unwrap();
            let gg = loss_global_global(g, s, &gg_critic, gl, fg, &pairing, EstimatorKind::Jsd).unwrap();
            match name {
                "L_ll" => ll,
                "L_lg" => lg,
                "L_gg" => gg,
                "L_C" => {
                    let z = g.param(s, logits);
                    let ce = classification_loss(g, z, &labels).unwrap();
                    let terms = [g.scale(lg, w.lambda_lg), g.scale(ll, w.lambda_ll), g.scale(ce, w.lambda_task)];
                    let t = g.add(terms[0], terms[1]);
                    g.add(t, terms[2])
                }
                _ => {
                    let z = g.param(s, pixel_logits);
                    let seg = segmentation_loss(g, z, &masks).unwrap();
                    let (a, b) = (g.scale(ll, w.lambda_ll), g.scale(seg, w.lambda_task));
                    g.add(a, b)
                }
            }
        });
        results.push((name, report.checked, report.max_rel_error));
    }

    let mut lines: Vec<String> = results
        .iter()
        .map(|(n, k, e)| format!("{n} {k} entries, max rel err {e:.2e}"))
        .collect();
    let ok = results.iter().all(|(_, _, e)| *e < 1e-4);
    let ok_time = within_budget(start, Duration::from_secs(10), &mut lines);
    verdict(ok && ok_time, lines.join("; "))
}

fn structural_reductions() -> Verdict {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let critic = Critic::new(&mut store, "c", CriticKind::LocalLocal, 3, 4, 8, &mut r);
    jitter(&mut store, &critic.params(), 9);
    let row = |t: &ArrayD<f64>, b: usize, n: usize| -> Vec<f64> { t.slice(ndarray::s![b, n, ..]).to_vec() };
    // independent loop over location pairs, one critic call per sample
    let brute = |a: &ArrayD<f64>, f: &ArrayD<f64>, pairing: &[usize]| -> f64 {
        let (bs, ni, nm) = (a.shape()[0], a.shape()[1], f.shape()[1]);
        let mut total = 0.0;
        for n in 0..ni {
            for m in 0..nm {
                let joint = (0..bs)
                    .map(|b| critic.score_local_local(&store, &row(a, b, n), &row(f, b, m)).unwrap())
                    .collect();
                let marginal = (0..bs)
                    .map(|b| critic.score_local_local(&store, &row(a, b, n), &row(f, pairing[b], m)).unwrap())
                    .collect();
                total += jsd_mi_lower_bound(&ScorePair::new(joint, marginal).unwrap()).value;
            }
        }
        -total / (ni * nm) as f64
    };
    let run = |a: &ArrayD<f64>, f: &ArrayD<f64>, pairing: &[usize]| {
        let mut g = Graph::new();
        let (av, fv) = (g.constant(a.clone()), g.constant(f.clone()));
        let l = loss_local_local(&mut g, &store, &critic, av, fv, pairing, &MiLossConfig::default(), 0).unwrap();
        g.scalar(l)
    };

    let pairing = make_marginal_pairing(5, 2).unwrap();
    let a = randt(&mut r, &[5, 1, 3]);
    let f = randt(&mut r, &[5, 1, 4]);
    let single = run(&a, &f, &pairing);
    let single_ref = brute(&a, &f, &pairing);
    let ok1 = single == single_ref;

    let pairing = make_marginal_pairing(4, 3).unwrap();
    let a = randt(&mut r, &[4, 2, 3]);
    let f = randt(&mut r, &[4, 3, 4]);
    let grid = run(&a, &f, &pairing);
    let grid_ref = brute(&a, &f, &pairing);
    let ok2 = (grid - grid_ref).abs() <= 1e-9;
    verdict(
        ok1 && ok2,
        format!(
            "N=1: {single} vs -jsd {single_ref} (exact); N_i=2,N_M=3: diff {:.2e} (<= 1e-9)",
            (grid - grid_ref).abs()
        ),
    )
}

fn metric_oracles() -> Verdict {
    let l = [true, true, false, false];
    let mut ok = auc(&[0.9, 0.8, 0.3, 0.2], &l).unwrap() == 1.0
        && auc(&[0.2, 0.3, 0.8, 0.9], &l).unwrap() == 0.0
        && auc(&[0.7, 0.5, 0.5, 0.2], &[true, false, true, false]).unwrap() == 0.875;
    let a = array![[1usize, 1], [0, 0]];
    let b = array![[0usize, 0], [1, 1]];
    let p = array![[1usize, 1, 1, 1, 0, 0]];
    let t = array![[0usize, 0, 1, 1, 1, 1]];
    ok &= dice(a.view(), a.view()).unwrap() == 1.0
        && dice(a.view(), b.view()).unwrap() == 0.0
        && dice(p.view(), t.view()).unwrap() == 0.5;

    let mut r = rng(12);
    let mut invariant = 0;
    for _ in 0..100 {
        let n = r.random_range(4..60);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse grid so ties occur
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 20.0).round() / 10.0 - 1.0).collect();
        let base = auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s - 2.0).collect();
        if auc(&exp, &labels).unwrap() == base && auc(&affine, &labels).unwrap() == base {
            invariant += 1;
        }
    }
    ok &= invariant == 100;
    verdict(ok, format!("hand examples exact; monotone invariance {invariant}/100"))
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn seg_run(seed: u64, lambda_ll: f64) -> (f64, f64) {
    let size = 24;
    let data = generate_synthetic_segmentation(&SyntheticConfig {
        num_samples: 300,
        image_size: size,
        seed: 100 + seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (tr, va, te) = data.split(0.6, 0.15).unwrap();
    let cfg = ModelConfig::Segmentation(SegmenterConfig {
        unet: UNetConfig {
            input_size: size,
            widths: [4, 8, 8, 16],
            num_labels: 2,
        },
        ..SegmenterConfig::default()
    });
    let train_cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        max_epochs: 40,
        patience: 100,
        seed,
        weights: LossWeights {
            lambda_ll,
            lambda_lg: 0.0,
            lambda_gg: 0.0,
            lambda_task: 1.0,
        },
        train_modality_dropout: 0.5,
        ..TrainConfig::default()
    };
    let out = train(Model::new(&cfg, seed).unwrap(), &tr, &va, &train_cfg).unwrap();
    let all: Vec<String> = SEGMENTATION_MODALITIES.iter().map(|m| m.to_string()).collect();
    let rep = evaluate_modality_dropping(&out.best.model, &te, &[vec!["t1".to_string()], all]).unwrap();
    (rep.rows[0].value, rep.rows[1].value)
}

fn cls_run(seed: u64, lambda: f64) -> f64 {
    let (size, w) = (16, 8);
    let data = generate_synthetic_classification(&SyntheticConfig {
        num_samples: 300,
        image_size: size,
        modality_noise: [("image".to_string(), 0.5), ("text".to_string(), 0.3)].into(),
        seed: 100 + seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (tr, va, te) = data.split(0.6, 0.15).unwrap();
    let cfg = ModelConfig::Classification(ClassifierConfig {
        image: ImageEncoderConfig {
            input_size: size,
            in_channels: 1,
            width: w,
            stages: 2,
        },
        text: TextEncoderConfig {
            vocab_size: 64,
            max_len: 16,
            embed_dim: w,
            width: w,
            blocks: 1,
        },
        fused_local_dim: w,
        bilinear_rank: 4,
        fused_global_dim: 2 * w,
        critic_hidden: 2 * w,
        ..ClassifierConfig::default()
    });
    let train_cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        max_epochs: 40,
        patience: 100,
        seed,
        weights: LossWeights {
            lambda_ll: lambda,
            lambda_lg: lambda,
            lambda_gg: 0.0,
            lambda_task: 1.0,
        },
        train_modality_dropout: 0.5,
        ..TrainConfig::default()
    };
    let out = train(Model::new(&cfg, seed).unwrap(), &tr, &va, &train_cfg).unwrap();
    evaluate_modality_dropping(&out.best.model, &te, &[vec!["image".to_string()]])
        .unwrap()
        .rows[0]
        .value
}

fn weak_modality_benefit() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();

    let mut seg_wins = 0;
    for seed in SEEDS {
        let (t1_cmim, full_cmim) = seg_run(seed, 1.0);
        let (t1_base, full_base) = seg_run(seed, 0.0);
        let gain = t1_cmim - t1_base;
        let drop = full_base - full_cmim;
        if gain >= 0.05 && drop < 0.02 {
            seg_wins += 1;
        }
        lines.push(format!("seg seed {seed}: t1 Dice {t1_cmim:.3} vs {t1_base:.3} ({gain:+.3}), full {full_cmim:.3} vs {full_base:.3} ({:+.3})", -drop));
    }
    let mut cls_wins = 0;
    for seed in SEEDS {
        let cmim = cls_run(seed, 1.0);
        let base = cls_run(seed, 0.0);
        if cmim - base >= 0.03 {
            cls_wins += 1;
        }
        lines.push(format!("cls seed {seed}: image AUC {cmim:.3} vs {base:.3} ({:+.3})", cmim - base));
    }
    lines.push(format!("segmentation {seg_wins}/3, classification {cls_wins}/3 (need 2)"));
    let ok_time = within_budget(start, Duration::from_secs(20 * 60), &mut lines);
    verdict(seg_wins >= 2 && cls_wins >= 2 && ok_time, lines.join("\n      "))
}

const PROTOCOL_CONFIG: &str = r#"
task = "segmentation"
seed = 4

[data.synthetic]
num_samples = 24
image_size = 16

[segmenter.unet]
input_size = 16
widths = [2, 4, 4, 4]

[train]
learning_rate = 0.003
batch_size = 6
max_epochs = 3
train_modality_dropout = 0.3
"#;

fn protocol_identity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::from_toml(PROTOCOL_CONFIG).unwrap();
    let run = |name: &str| {
        let cfg = base.clone().resolve(None, Some(dir.path().join(name))).unwrap();
        cmd_train(&cfg).unwrap();
        cfg
    };
    let cfg = run("a");
    run("b");
    let metrics_a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let metrics_b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    let same_metrics = metrics_a == metrics_b;

    let ckpt = load_checkpoint(&dir.path().join("a/best.ckpt")).unwrap();
    let model = ckpt.to_model().unwrap();
    let copy = dir.path().join("copy.ckpt");
    save_checkpoint(&Checkpoint::from_model(&model, None, ckpt.epoch, ckpt.best_metric, &ckpt.fingerprint), &copy).unwrap();
    let reloaded = load_checkpoint(&copy).unwrap().to_model().unwrap();
    let bytes = encode_checkpoint(&ckpt);
    let round_trip = decode_checkpoint(&bytes).unwrap() == ckpt
        && encode_checkpoint(&decode_checkpoint(&bytes).unwrap()) == bytes
        && reloaded == model;

    let (_, _, te) = cmim_cli::commands::load_splits(&cfg).unwrap();
    let full = evaluate_full(&model, &te).unwrap();
    let dropped = evaluate_modality_dropping(&model, &te, &[model.modalities().to_vec()]).unwrap();
    let same_eval = dropped.rows[0] == full && dropped.rows[0].value.to_bits() == full.value.to_bits();
    verdict(
        same_metrics && round_trip && same_eval,
        format!(
            "full-subset eval bit-identical: {same_eval}; checkpoint round trip: {round_trip}; metrics.csv reruns identical: {same_metrics}"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 8] = [
    (1, "MI estimator recovery", mi_estimator_recovery),
    (2, "JSD sanity", jsd_sanity),
    (3, "discrete lower-bound property", discrete_lower_bound),
    (4, "gradient correctness", gradient_correctness),
    (5, "structural reductions", structural_reductions),
    (6, "metric oracles", metric_oracles),
    (7, "weak-modality benefit", weak_modality_benefit),
    (8, "protocol identity", protocol_identity),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // `cargo test --list` and friends expect no output from a custom harness
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id}. {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
