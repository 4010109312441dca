//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use adpd::eval::{average_precision, Top1, DEFAULT_IOU_THRESHOLDS};
use adpd::experiment::{
    bench_data, evaluate_params, run_seed, train_config, BenchConfig, BoxSource,
};
use adpd::fusion::{fuse_clusters, weighted_box_fusion, FusionConfig, ScoredBox};
use adpd::geometry::iou;
use adpd::gradcheck::run_suite;
use adpd::head::{train, TrainMode};
use adpd::inference::{apply_class_mapping, RegionDetection};
use adpd::io::load_mapping;
use adpd::losses::{asl, lse_pool, AslParams, LsePoolParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{ap_oracle, nudged, random_box};

type Outcome = Result<String, String>;

const GRAD_TOL: f64 = 1e-4;
const GRAD_POINTS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const AP_TOL: f64 = 1e-9;
const AP_INSTANCES: usize = 1000;
const FUSION_INSTANCES: usize = 1000;
const BCE_TOL: f64 = 1e-12;
const LSE_VECTORS: usize = 10_000;
/// Slack for `mean <= LSE`: the two sides are computed along different
/// floating-point paths and coincide for constant vectors.
const LSE_MEAN_SLACK: f64 = 1e-12;
const BENCH_SEEDS: u64 = 5;
const BENCH_RUN_BUDGET: Duration = Duration::from_secs(120);
const MAPPING_TOL: f64 = 1e-15;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = run_suite(GRAD_POINTS, 0, GRAD_TOL).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.1e}", r.name, r.max_rel_error))
        .collect();
    let detail = format!("{} in {:.2}s", summary.join(", "), elapsed.as_secs_f64());
    if results.iter().all(|r| r.passed()) && elapsed < GRAD_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for instance in 0..AP_INSTANCES {
        let n_images = rng.random_range(1..=5);
        let n_classes = rng.random_range(1..=4);
        for _ in 0..n_classes {
            let gt: Vec<Option<[f64; 4]>> = (0..n_images)
                .map(|_| rng.random_bool(0.6).then(|| random_box(&mut rng).coords()))
                .collect();
            let preds: Vec<Option<([f64; 4], f64)>> = gt
                .iter()
                .map(|g| {
                    if !rng.random_bool(0.8) {
                        return None;
                    }
                    let b = match g {
                        Some(g) if rng.random_bool(0.7) => {
                            let gb = adpd::geometry::BBox::clamped(g[0], g[1], g[2], g[3]);
                            nudged(&gb, 0.1, &mut rng)
                        }
                        _ => random_box(&mut rng),
                    };
                    Some((b.coords(), rng.random_range(0.0..1.0)))
                })
                .collect();
            let lib_preds: Vec<Option<Top1>> = preds
                .iter()
                .map(|p| {
                    p.map(|(c, s)| Top1 {
                        bbox: adpd::geometry::BBox::clamped(c[0], c[1], c[2], c[3]),
                        score: s,
                    })
                })
                .collect();
            let lib_gt: Vec<_> = gt
                .iter()
                .map(|g| g.map(|c| adpd::geometry::BBox::clamped(c[0], c[1], c[2], c[3])))
                .collect();
            let mut previous = f64::INFINITY;
            for &t in &DEFAULT_IOU_THRESHOLDS {
                let got = average_precision(&lib_preds, &lib_gt, t);
                let want = ap_oracle(&preds, &gt, t);
                match (got, want) {
                    (None, None) => continue,
                    (Some(a), Some(b)) => {
                        worst = worst.max((a - b).abs());
                        if (a - b).abs() > AP_TOL {
                            return Err(format!("instance {instance}, IoU {t}: {a} vs oracle {b}"));
                        }
                        if a > previous {
                            return Err(format!("instance {instance}: AP rises at IoU {t}"));
                        }
                        previous = a;
                        checked += 1;
                    }
                    _ => return Err(format!("instance {instance}: definedness differs")),
                }
            }
        }
    }
    Ok(format!(
        "{AP_INSTANCES} instances, {checked} AP values, max |diff| {worst:.1e}, monotone in IoU"
    ))
}

fn fusion_instance(rng: &mut ChaCha8Rng, distinct: bool) -> Vec<ScoredBox> {
    let n = rng.random_range(1..=10);
    let centers: Vec<_> = (0..rng.random_range(1..=3))
        .map(|_| random_box(rng))
        .collect();
    (0..n)
        .map(|i| {
            let c = centers[rng.random_range(0..centers.len())];
            let score = if distinct || rng.random_bool(0.7) {
                rng.random_range(0.0..1.0)
            } else {
                0.5
            };
            ScoredBox::new(nudged(&c, 0.08, rng), score, i)
        })
        .collect()
}

fn random_fusion_cfg(rng: &mut ChaCha8Rng) -> FusionConfig {
    if rng.random_bool(0.5) {
        FusionConfig::default()
    } else {
        FusionConfig::with_iou(rng.random_range(0.0..0.9))
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = Vec::new();

    for _ in 0..FUSION_INSTANCES {
        let b = ScoredBox::new(random_box(&mut rng), rng.random_range(0.0..1.0), 0);
        if weighted_box_fusion(&[b], &random_fusion_cfg(&mut rng)) != vec![b] {
            violations.push("singleton");
        }
    }

    for _ in 0..FUSION_INSTANCES {
        let boxes = fusion_instance(&mut rng, false);
        let cfg = random_fusion_cfg(&mut rng);
        let clusters = fuse_clusters(&boxes, &cfg);
        let mut seen: Vec<usize> = clusters.iter().flat_map(|c| c.members.clone()).collect();
        seen.sort_unstable();
        if clusters.len() > boxes.len() || seen != (0..boxes.len()).collect::<Vec<_>>() {
            violations.push("partition");
        }
        for c in &clusters {
            let f = c.fused.bbox.coords();
            for (k, &fk) in f.iter().enumerate() {
                let vals = c.members.iter().map(|&i| boxes[i].bbox.coords()[k]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                    (l.min(v), h.max(v))
                });
                if fk < lo || fk > hi {
                    violations.push("hull");
                }
            }
            let scores = c.members.iter().map(|&i| boxes[i].score);
            let (lo, hi) = scores.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                (l.min(v), h.max(v))
            });
            if c.fused.score < lo || c.fused.score > hi {
                violations.push("score-mean");
            }
        }
    }

    for _ in 0..FUSION_INSTANCES {
        let boxes = fusion_instance(&mut rng, true);
        let cfg = random_fusion_cfg(&mut rng);
        let mut shuffled = boxes.clone();
        shuffled.shuffle(&mut rng);
        if weighted_box_fusion(&boxes, &cfg) != weighted_box_fusion(&shuffled, &cfg) {
            violations.push("permutation");
        }
    }

    let mut fixed_points = 0;
    for _ in 0..FUSION_INSTANCES {
        let boxes = fusion_instance(&mut rng, false);
        let cfg = random_fusion_cfg(&mut rng);
        let out = weighted_box_fusion(&boxes, &cfg);
        let separated = out.iter().enumerate().all(|(i, a)| {
            out[i + 1..]
                .iter()
                .all(|b| iou(&a.bbox, &b.bbox) <= cfg.iou_threshold)
        });
        if separated {
            fixed_points += 1;
            if weighted_box_fusion(&out, &cfg) != out {
                violations.push("idempotence");
            }
        }
    }

    if violations.is_empty() {
        Ok(format!(
            "5 properties x {FUSION_INSTANCES} instances, 0 violations ({fixed_points} separated outputs re-fused)"
        ))
    } else {
        Err(format!(
            "{} violations, first: {}",
            violations.len(),
            violations[0]
        ))
    }
}

fn criterion_4() -> Outcome {
    let clipped = AslParams {
        clip: 0.05,
        ..AslParams::default()
    };
    let at_clip = asl(0.05, false, &clipped);
    if at_clip != 0.0 {
        return Err(format!("asl(y=0, p=0.05) = {at_clip:e}"));
    }

    let plain = AslParams {
        gamma_pos: 0.0,
        gamma_neg: 0.0,
        clip: 0.0,
        ..AslParams::default()
    };
    let mut worst: f64 = 0.0;
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        for positive in [true, false] {
            let bce = if positive { -p.ln() } else { -(1.0 - p).ln() };
            worst = worst.max((asl(p, positive, &plain) - bce).abs());
        }
    }
    if worst > BCE_TOL {
        return Err(format!("ASL(0,0,0) differs from BCE by {worst:e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..LSE_VECTORS {
        let n = rng.random_range(1..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let params = if k % 2 == 0 {
            LsePoolParams::default()
        } else {
            LsePoolParams {
                r: rng.random_range(0.1..50.0),
            }
        };
        let v = lse_pool(&x, &params).map_err(|e| e.to_string())?;
        let mean = x.iter().sum::<f64>() / n as f64;
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if v < mean - LSE_MEAN_SLACK || v > max {
            return Err(format!("vector {k}: mean {mean}, LSE {v}, max {max}"));
        }
    }
    Ok(format!(
        "asl at clip = 0 exactly, |ASL(0,0,0) - BCE| <= {worst:.1e} on 999 points, LSE bounds on {LSE_VECTORS} vectors"
    ))
}

fn criterion_5() -> Outcome {
    let bench = BenchConfig::default();
    let (mut loc_wins, mut loc_wbf, mut mil_wbf) = (0, 0, 0);
    let mut slowest = Duration::ZERO;
    let mut rows = Vec::new();
    for seed in 0..BENCH_SEEDS {
        let start = Instant::now();
        let r = run_seed(&bench, seed).map_err(|e| e.to_string())?;
        // one seed trains both modes; halve for the per-run figure
        slowest = slowest.max(start.elapsed() / 2);
        loc_wins += (r.loc.map_wbf > r.mil.map_wbf) as u32;
        loc_wbf += (r.loc.map_wbf >= r.loc.map_no_wbf) as u32;
        mil_wbf += (r.mil.map_wbf >= r.mil.map_no_wbf) as u32;
        rows.push(format!(
            "[{seed}] loc {:.3}/{:.3} mil {:.3}/{:.3}",
            r.loc.map_wbf, r.loc.map_no_wbf, r.mil.map_wbf, r.mil.map_no_wbf
        ));
    }
    let detail = format!(
        "loc>mil {loc_wins}/5, WBF>=noWBF loc {loc_wbf}/5 mil {mil_wbf}/5, slowest run {:.1}s; mAP with/without WBF {}",
        slowest.as_secs_f64(),
        rows.join(" ")
    );
    if loc_wins >= 4 && loc_wbf >= 4 && mil_wbf >= 4 && slowest < BENCH_RUN_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let mut bench = BenchConfig::default();
    bench.synth.noise_sigma = 0.0;
    bench.synth.prevalence = 1.0;
    bench.synth.shrink = (1.0, 1.0);
    bench.synth.single_region = true;
    bench.inference.probability_threshold = 0.5;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let (train_set, eval_set) = bench_data(&bench, seed).map_err(|e| e.to_string())?;
        let outcome = train(&train_set, &train_config(TrainMode::Loc, &bench, seed))
            .map_err(|e| e.to_string())?;
        let report = evaluate_params(
            &outcome.params,
            &eval_set,
            &bench.inference,
            BoxSource::Predicted,
            &bench.eval,
        )
        .map_err(|e| e.to_string())?;
        if report.ap_per_threshold.iter().any(|v| *v != Some(1.0)) {
            return Err(format!(
                "seed {seed}: AP per threshold {:?}",
                report.ap_per_threshold
            ));
        }
        detail.push(format!("seed {seed}"));
    }
    Ok(format!("AP = 1 at IoU 0.1..0.7 for {}", detail.join(", ")))
}

fn run_pipeline(dir: &Path, threads: Option<usize>) -> Result<Vec<(String, Vec<u8>)>, String> {
    let bin = env!("CARGO_BIN_EXE_adpd");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth",
            "--n-images",
            "300",
            "--seed",
            "7",
            "--out",
            &p("train.jsonl"),
        ],
        vec![
            "synth",
            "--n-images",
            "100",
            "--first-image",
            "300",
            "--seed",
            "7",
            "--out",
            &p("eval.jsonl"),
        ],
        vec![
            "train",
            "--data",
            &p("train.jsonl"),
            "--mode",
            "loc-mil",
            "--lr",
            "1e-2",
            "--max-steps",
            "300",
            "--batch-size",
            "64",
            "--seed",
            "7",
            "--checkpoint-out",
            &p("model.ckpt"),
            "--history-out",
            &p("history.csv"),
        ],
        vec![
            "infer",
            "--data",
            &p("eval.jsonl"),
            "--checkpoint",
            &p("model.ckpt"),
            "--out",
            &p("pred.jsonl"),
        ],
        vec![
            "eval",
            "--pred",
            &p("pred.jsonl"),
            "--gt",
            &p("eval.jsonl"),
            "--out-json",
            &p("report.json"),
            "--out-csv",
            &p("report.csv"),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for args in steps {
        let mut cmd = Command::new(bin);
        cmd.args(&args).env_remove("ADPD_THREADS");
        if let Some(n) = threads {
            cmd.env("ADPD_THREADS", n.to_string());
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "`{}` failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    let names = [
        "train.jsonl",
        "eval.jsonl",
        "model.ckpt",
        "history.csv",
        "pred.jsonl",
        "report.json",
        "report.csv",
    ];
    names
        .iter()
        .map(|n| {
            Ok((
                n.to_string(),
                std::fs::read(dir.join(n)).map_err(|e| e.to_string())?,
            ))
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let runs = [None, None, Some(1), Some(4)];
    let mut outputs = Vec::new();
    for threads in runs {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        outputs.push(run_pipeline(dir.path(), threads)?);
    }
    for (i, other) in outputs.iter().enumerate().skip(1) {
        for ((name, a), (_, b)) in outputs[0].iter().zip(other) {
            if a != b {
                return Err(format!(
                    "{name} differs between run 1 and run {} ({:?} threads)",
                    i + 1,
                    runs[i]
                ));
            }
        }
    }
    let bytes: usize = outputs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "4 runs (default, default, 1 thread, 4 threads): 7 files, {bytes} bytes, byte-identical"
    ))
}

fn criterion_8() -> Outcome {
    let training: Vec<String> = [
        "Atelectasis",
        "Enlarged cardiac silhouette",
        "Pleural Effusion",
        "Infiltration",
        "Lung Opacity",
        "Mass/Nodule",
        "Multiple masses/nodules",
        "Lung lesion",
        "Pneumonia",
        "Pneumothorax",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let idx = |n: &str| training.iter().position(|t| t == n).unwrap();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/eval_mapping.json");
    let mapping = load_mapping(&path, &training).map_err(|e| e.to_string())?;

    type Oracle = Box<dyn Fn(&[f64]) -> f64>;
    let single = |n: &str| -> Oracle {
        let i = idx(n);
        Box::new(move |p: &[f64]| p[i])
    };
    let mean = |ns: &[&str]| -> Oracle {
        let is: Vec<usize> = ns.iter().map(|n| idx(n)).collect();
        Box::new(move |p: &[f64]| is.iter().map(|&i| p[i]).sum::<f64>() / is.len() as f64)
    };
    let max = |ns: &[&str]| -> Oracle {
        let is: Vec<usize> = ns.iter().map(|n| idx(n)).collect();
        Box::new(move |p: &[f64]| is.iter().map(|&i| p[i]).fold(f64::NEG_INFINITY, f64::max))
    };
    let expected: Vec<(&str, Oracle)> = vec![
        ("Atelectasis", single("Atelectasis")),
        ("Cardiomegaly", single("Enlarged cardiac silhouette")),
        ("Effusion", single("Pleural Effusion")),
        ("Infiltration", mean(&["Infiltration", "Lung Opacity"])),
        ("Infiltration (max)", max(&["Infiltration", "Lung Opacity"])),
        ("Mass", mean(&["Mass/Nodule", "Multiple masses/nodules"])),
        (
            "Mass (max)",
            max(&["Mass/Nodule", "Multiple masses/nodules"]),
        ),
        (
            "Mass + Lung lesion",
            mean(&["Mass/Nodule", "Multiple masses/nodules", "Lung lesion"]),
        ),
        ("Nodule", single("Mass/Nodule")),
        ("Pneumonia", single("Pneumonia")),
        ("Pneumothorax", single("Pneumothorax")),
    ];
    if mapping.class_names() != expected.iter().map(|e| e.0).collect::<Vec<_>>() {
        return Err(format!("evaluation classes {:?}", mapping.class_names()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut singletons_exact = true;
    for _ in 0..1000 {
        let probs: Vec<f64> = (0..training.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let region = RegionDetection {
            region_id: 0,
            bbox: random_box(&mut rng),
            presence: 1.0,
            pathology_probs: probs.clone(),
        };
        let mapped = apply_class_mapping(&region, &mapping).map_err(|e| e.to_string())?;
        for ((name, oracle), got) in expected.iter().zip(&mapped.pathology_probs) {
            let want = oracle(&probs);
            worst = worst.max((got - want).abs());
            if mapping
                .classes()
                .iter()
                .any(|c| c.name == *name && c.sources.len() == 1)
            {
                singletons_exact &= got.to_bits() == want.to_bits();
            }
        }
        if mapped.bbox != region.bbox || mapped.presence != region.presence {
            return Err("mapping altered the region box or presence".into());
        }
    }
    if worst <= MAPPING_TOL && singletons_exact {
        Ok(format!(
            "11 evaluation classes (mean, max, singleton), 1000 regions, max |diff| {worst:.1e}, singletons bit-exact"
        ))
    } else {
        Err(format!(
            "max |diff| {worst:e}, singletons exact: {singletons_exact}"
        ))
    }
}

type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("gradient correctness", criterion_1),
        ("AP oracle equivalence", criterion_2),
        ("fusion properties", criterion_3),
        ("analytic constants", criterion_4),
        ("end-to-end ordering", criterion_5),
        ("noise-free sanity", criterion_6),
        ("determinism", criterion_7),
        ("class-mapping semantics", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
