//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (visible with `cargo test --test acceptance -- --nocapture`).

mod common;

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use csra::backbone::{BackboneConfig, FeatureMap};
use csra::checkpoint::Checkpoint;
use csra::config::TrainConfig;
use csra::gradcheck::grad_check;
use csra::head::{
    csra_single_head, default_heads, spatial_attention, class_score_map, AttentionHeadConfig,
    ClassifierMatrix, Temperature,
};
use csra::metrics::{
    average_precision, mean_average_precision, overall_metrics, EvaluationBatch,
};
use csra::model::build_model;
use csra::graph::Graph;
use csra::train::{train_model, RunRecord};
use csra::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let cfg = BackboneConfig::desk();
    let mut model = build_model(&cfg, 4, default_heads(), 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = rand_tensor(&mut rng, vec![2, 3, 32, 32]);
    let truths = Tensor::new(
        vec![2, 4],
        (0..8).map(|_| f64::from(rng.gen_range(0u8..2))).collect(),
    )
    .unwrap();
    let check = grad_check(&mut model, &batch, &truths, 100, 1e-5, 1e-4, 3).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "1 (gradient correctness)",
        check.passed && elapsed < 120.0,
        &format!(
            "100 params, max rel err {:.2e} at {}[{}], {:.1} s",
            check.max_rel_error, check.worst_param, check.worst_index, elapsed
        ),
    );
}

#[test]
fn criterion_2_csra_reductions() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst_gap = 0.0f64;
    let mut worst_perm = 0.0f64;
    for _ in 0..200 {
        let c = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=10);
        let h = rng.gen_range(1..=4);
        let w = rng.gen_range(1..=4);
        let l = h * w;
        let x = FeatureMap::new(rand_tensor(&mut rng, vec![d, h, w])).unwrap();
        let m = ClassifierMatrix::new(
            rand_tensor(&mut rng, vec![c, d]),
            rand_tensor(&mut rng, vec![c]),
        )
        .unwrap();

        // (a) lambda = 0 equals the GAP classifier
        let logits = csra_single_head(
            &x,
            &m,
            &AttentionHeadConfig {
                temperature: Temperature::Finite(rng.gen_range(0.2..8.0)),
                lambda: 0.0,
            },
        )
        .unwrap();
        for i in 0..c {
            let mut gap = m.bias().data()[i];
            for j in 0..d {
                let g: f64 =
                    x.values().data()[j * l..(j + 1) * l].iter().sum::<f64>() / l as f64;
                gap += m.weights().data()[i * d + j] * g;
            }
            worst_gap = worst_gap.max((logits[i] - gap).abs());
        }

        // (b) T=INF attention recovers the max class score exactly
        let scores = class_score_map(&x, &m).unwrap();
        for i in 0..c {
            let plane = &scores.data()[i * l..(i + 1) * l];
            let att = spatial_attention(
                &Tensor::new(vec![l], plane.to_vec()).unwrap(),
                Temperature::Infinite,
            )
            .unwrap();
            let dot: f64 = (0..l)
                .map(|k| {
                    att.data()[k]
                        * (0..d)
                            .map(|j| m.weights().data()[i * d + j] * x.values().data()[j * l + k])
                            .sum::<f64>()
                })
                .sum();
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(dot, max, "T=INF must equal the max exactly");
        }

        // (c) spatial-permutation invariance of fused logits
        let heads = default_heads();
        let base = csra::head::fuse_heads(&x, &m, &heads).unwrap();
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = vec![0.0; d * l];
        for j in 0..d {
            for k in 0..l {
                shuffled[j * l + perm[k]] = x.values().data()[j * l + k];
            }
        }
        let xp = FeatureMap::new(Tensor::new(vec![d, h, w], shuffled).unwrap()).unwrap();
        let permuted = csra::head::fuse_heads(&xp, &m, &heads).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "2 (CSRA reductions)",
        worst_gap < 1e-9 && worst_perm < 1e-9 && elapsed < 30.0,
        &format!(
            "200 instances, gap dev {worst_gap:.2e}, perm dev {worst_perm:.2e}, {elapsed:.1} s"
        ),
    );
}

#[test]
fn criterion_3_convolution_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst = 0.0f64;
    let mut count = 0;
    'outer: loop {
        for &stride in &[1usize, 2] {
            for &pad in &[0usize, 1] {
                for &k in &[1usize, 3, 7] {
                    let n = rng.gen_range(1..=2);
                    let cin = rng.gen_range(1..=4);
                    let cout = rng.gen_range(1..=4);
                    let min_side = if k > pad * 2 { k - pad * 2 } else { 1 };
                    let h = rng.gen_range(min_side..=min_side + 6);
                    let w = rng.gen_range(min_side..=min_side + 6);
                    let x = rand_tensor(&mut rng, vec![n, cin, h, w]);
                    let wt = rand_tensor(&mut rng, vec![cout, cin, k, k]);
                    let want = common::naive_conv2d(&x, &wt, stride, pad);
                    let mut g = Graph::new();
                    let xn = g.constant(x);
                    let wn = g.constant(wt);
                    let y = g.conv2d(xn, wn, stride, pad).unwrap();
                    assert_eq!(g.value(y).shape(), want.shape());
                    worst = worst.max(csra::tensor::max_abs_diff(g.value(y), &want));
                    count += 1;
                    if count >= 200 {
                        break 'outer;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "3 (convolution oracle)",
        worst < 1e-9 && elapsed < 60.0,
        &format!("{count} instances, max abs dev {worst:.2e}, {elapsed:.1} s"),
    );
}

#[test]
fn criterion_4_metrics_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.gen_range(1..=8);
        let c = rng.gen_range(1..=6);
        let scores: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let truths: Vec<f64> = (0..n * c).map(|_| f64::from(rng.gen_range(0u8..2))).collect();
        let preds: Vec<f64> = (0..n * c).map(|_| f64::from(rng.gen_range(0u8..2))).collect();
        let batch =
            EvaluationBatch::new(n, c, scores.clone(), truths.clone(), preds.clone()).unwrap();

        // per-class AP and mAP via brute force
        let mut defined = Vec::new();
        for j in 0..c {
            let s: Vec<f64> = (0..n).map(|i| scores[i * c + j]).collect();
            let t: Vec<u8> = (0..n).map(|i| truths[i * c + j] as u8).collect();
            if let Some(want) = brute_force_ap(&s, &t) {
                let got = average_precision(&s, &t).unwrap();
                worst = worst.max((got - want).abs());
                defined.push(want);
            } else {
                assert!(average_precision(&s, &t).is_err());
            }
        }
        match mean_average_precision(&batch) {
            Ok((map, _)) => {
                let want = defined.iter().sum::<f64>() / defined.len() as f64;
                worst = worst.max((map - want).abs());
            }
            Err(_) => assert!(defined.is_empty()),
        }

        // micro metrics via direct counting
        let pb: Vec<u8> = preds.iter().map(|&p| p as u8).collect();
        let tb: Vec<u8> = truths.iter().map(|&t| t as u8).collect();
        let tp = pb.iter().zip(&tb).filter(|(&p, &t)| p == 1 && t == 1).count() as f64;
        let pp = pb.iter().filter(|&&p| p == 1).count() as f64;
        let tpos = tb.iter().filter(|&&t| t == 1).count() as f64;
        let m = overall_metrics(&pb, &tb).unwrap();
        let op = if pp > 0.0 { tp / pp } else { 0.0 };
        let or_ = if tpos > 0.0 { tp / tpos } else { 0.0 };
        let of1 = if op + or_ > 0.0 { 2.0 * op * or_ / (op + or_) } else { 0.0 };
        worst = worst
            .max((m.op - op).abs())
            .max((m.or_ - or_).abs())
            .max((m.of1 - of1).abs());
    }

    // fixed hand-count fixture: tp=2, predicted=3, truth=3
    let fixture = overall_metrics(&[1, 1, 0, 1], &[1, 1, 1, 0]).unwrap();
    let fixture_exact = (fixture.op - 2.0 / 3.0).abs() < 1e-15
        && (fixture.or_ - 2.0 / 3.0).abs() < 1e-15
        && (fixture.of1 - 2.0 / 3.0).abs() < 1e-15;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        "4 (metrics oracle)",
        worst < 1e-9 && fixture_exact && elapsed < 10.0,
        &format!("300 batches, max dev {worst:.2e}, fixture 2/3 exact: {fixture_exact}, {elapsed:.1} s"),
    );
}

fn brute_force_ap(scores: &[f64], truths: &[u8]) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let positives: Vec<usize> = (0..n).filter(|&r| truths[order[r]] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let ap: f64 = positives
        .iter()
        .map(|&r| {
            let hits = (0..=r).filter(|&q| truths[order[q]] == 1).count();
            hits as f64 / (r + 1) as f64
        })
        .sum();
    Some(ap / positives.len() as f64)
}

struct TrainedRun {
    _dataset: common::SyntheticDataset,
    _out_dir: tempfile::TempDir,
    record: RunRecord,
    elapsed: f64,
}

fn learning_config() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        ..TrainConfig::desk()
    }
}

fn shared_run() -> &'static Mutex<TrainedRun> {
    static RUN: OnceLock<Mutex<TrainedRun>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dataset = common::quadrant_blob_dataset(400, 123);
        let out_dir = tempfile::TempDir::new().unwrap();
        let start = Instant::now();
        let record =
            train_model(&learning_config(), &dataset.manifest, Some(out_dir.path())).unwrap();
        Mutex::new(TrainedRun {
            _dataset: dataset,
            _out_dir: out_dir,
            record,
            elapsed: start.elapsed().as_secs_f64(),
        })
    })
}

#[test]
fn criterion_5_end_to_end_learning() {
    let run = shared_run().lock().unwrap();
    let last = run.record.epoch_reports.last().unwrap();
    let passed = last.map >= 0.95 && last.overall.of1 >= 0.85 && run.elapsed < 300.0;
    report(
        "5 (end-to-end learning)",
        passed,
        &format!(
            "held-out mAP {:.4}, OF1 {:.4} after {} epochs, {:.0} s",
            last.map,
            last.overall.of1,
            run.record.train_losses.len(),
            run.elapsed
        ),
    );
}

#[test]
fn criterion_6_desk_ablation() {
    let datasets = common::quadrant_blob_dataset(400, 123);
    let ablation_config = |heads: Vec<AttentionHeadConfig>, seed: u64| TrainConfig {
        epochs: 5,
        seed,
        heads,
        ..TrainConfig::desk()
    };
    let baseline_heads = vec![AttentionHeadConfig {
        temperature: Temperature::Finite(1.0),
        lambda: 0.0,
    }];
    let mut csra_maps = Vec::new();
    let mut base_maps = Vec::new();
    for seed in 0..5u64 {
        let csra_rec = train_model(
            &ablation_config(default_heads(), seed),
            &datasets.manifest,
            None,
        )
        .unwrap();
        let base_rec = train_model(
            &ablation_config(baseline_heads.clone(), seed),
            &datasets.manifest,
            None,
        )
        .unwrap();
        csra_maps.push(csra_rec.epoch_reports.last().unwrap().map);
        base_maps.push(base_rec.epoch_reports.last().unwrap().map);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let m_csra = median(&mut csra_maps);
    let m_base = median(&mut base_maps);
    report(
        "6 (desk ablation)",
        m_csra >= m_base - 0.01,
        &format!(
            "median-of-5 mAP: CSRA {m_csra:.4} vs GAP baseline {m_base:.4} (delta {:+.4})",
            m_csra - m_base
        ),
    );
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let run = shared_run().lock().unwrap();
    let dataset = common::quadrant_blob_dataset(400, 123);
    let repeat = train_model(&learning_config(), &dataset.manifest, None).unwrap();

    let losses_identical = run.record.train_losses == repeat.train_losses;
    let reports_identical =
        run.record.epoch_reports.last().unwrap() == repeat.epoch_reports.last().unwrap();

    // checkpoint round trip reproduces the final report exactly
    let last_ckpt = run.record.checkpoints.last().unwrap();
    let ckpt = Checkpoint::load(last_ckpt).unwrap();
    let (_, eval_manifest) =
        csra::data::split_dataset(&dataset.manifest, learning_config().train_fraction, learning_config().seed)
            .map(|(t, e)| (t, e))
            .unwrap();
    let (ckpt_report, _) =
        csra::train::evaluate_checkpoint(&ckpt, &eval_manifest, learning_config().threshold).unwrap();
    let ckpt_identical = &ckpt_report == run.record.epoch_reports.last().unwrap();

    report(
        "7 (determinism and persistence)",
        losses_identical && reports_identical && ckpt_identical,
        &format!(
            "losses bitwise identical: {losses_identical}, reports identical: {reports_identical}, checkpoint reproduces report: {ckpt_identical}"
        ),
    );
}
