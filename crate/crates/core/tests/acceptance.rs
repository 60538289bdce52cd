//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refocus::env::{generate_scene, Scene, SceneSpec};
use refocus::geometry::{iou, BBox};
use refocus::grpo::{group_advantages, group_objective, surrogate_term, AdvantageVector, ClipConfig, ClipVariant, Group};
use refocus::metrics::{classification_report, classify_refocus_steps, refocus_stats, EvalRecord, RefocusConfig, RefocusLabel};
use refocus::policy::{logp_grad, rollout_logp, sample_rollout_seeded, PolicyConfig, PolicyParams, RefocusState};
use refocus::rewards::{GroundTruth, StageId};
use refocus::trainer::{evaluate_checkpoint, greedy_records, plateau_detect, train, CurriculumConfig, TrainConfig, TrainLog};
use refocus::transcript::{parse_transcript, serialize_transcript, Category, Presence, RefocusStep, StepLabel, Transcript};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

// ---------------------------------------------------------------- 1

/// Counts points of the `step` lattice (cell centers) inside `[lo, hi)` along one axis.
fn lattice_count(lo: f64, hi: f64, extent: f64, step: f64) -> usize {
    let n = (extent / step).round() as usize;
    (0..n)
        .filter(|k| {
            let c = (*k as f64 + 0.5) * step;
            c >= lo && c < hi
        })
        .count()
}

/// Rectangles are products of intervals, so the 2-D lattice count factors per axis.
fn lattice_iou(a: &BBox, b: &BBox) -> f64 {
    let (extent, step) = (32.0, 0.01);
    let ax = lattice_count(a.x, a.right(), extent, step);
    let ay = lattice_count(a.y, a.bottom(), extent, step);
    let bx = lattice_count(b.x, b.right(), extent, step);
    let by = lattice_count(b.y, b.bottom(), extent, step);
    let ix = lattice_count(a.x.max(b.x), a.right().min(b.right()), extent, step);
    let iy = lattice_count(a.y.max(b.y), a.bottom().min(b.bottom()), extent, step);
    let inter = (ix * iy) as f64;
    let union = (ax * ay + bx * by) as f64 - inter;
    inter / union
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(1..=16);
    let h = rng.gen_range(1..=16);
    BBox {
        x: rng.gen_range(0..=32 - w) as f64,
        y: rng.gen_range(0..=32 - h) as f64,
        w: w as f64,
        h: h as f64,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut overlapping = 0;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let v = iou(&a, &b);
        if v > 0.0 {
            overlapping += 1;
        }
        worst = worst.max((v - lattice_iou(&a, &b)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-3 && secs < 10.0,
        format!("max |iou - lattice| = {worst:.2e} over 1000 pairs ({overlapping} overlapping), {secs:.2}s"),
        format!("max error {worst:.2e}, runtime {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

/// Brute-force oracle over an explicit 6x6 confusion matrix (index 5 = missing prediction).
fn confusion_oracle(records: &[EvalRecord]) -> [f64; 5] {
    let n = records.len() as f64;
    let binary = records
        .iter()
        .filter(|r| matches!((r.prediction.answer, r.gt.present), (Some(Presence::Yes), true) | (Some(Presence::No), false)))
        .count() as f64
        / n;
    let mut m = [[0.0f64; 6]; 6];
    for r in records.iter().filter(|r| r.gt.present) {
        let t = r.gt.category.unwrap().index();
        let p = r.prediction.category.map_or(5, |c| c.index());
        m[t][p] += 1.0;
    }
    let total: f64 = m.iter().flatten().sum();
    let acc = (0..6).map(|k| m[k][k]).sum::<f64>() / total;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for k in 0..6 {
        let support: f64 = m[k].iter().sum();
        let predicted: f64 = (0..6).map(|t| m[t][k]).sum();
        let p = if predicted > 0.0 { m[k][k] / predicted } else { 0.0 };
        let r = if support > 0.0 { m[k][k] / support } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        wp += support * p;
        wr += support * r;
        wf += support * f;
    }
    [binary, acc, wp / total, wr / total, wf / total]
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<EvalRecord> {
    let n = rng.gen_range(1..=50);
    (0..n)
        .map(|i| {
            let present = i == 0 || rng.gen_bool(0.7);
            let gt = if present {
                let c = Category::ALL[rng.gen_range(0..5)];
                GroundTruth::positive(c, vec![BBox { x: 0.0, y: 0.0, w: 4.0, h: 4.0 }]).unwrap()
            } else {
                GroundTruth::negative()
            };
            let answer = match rng.gen_range(0..5) {
                0 => None,
                1 | 2 => Some(Presence::Yes),
                _ => Some(Presence::No),
            };
            let category = (!rng.gen_bool(0.1)).then(|| Category::ALL[rng.gen_range(0..5)]);
            EvalRecord {
                id: format!("r{i}"),
                prediction: Transcript {
                    answer,
                    category,
                    ..Transcript::default()
                },
                gt,
            }
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let recs = random_records(&mut rng);
        let r = classification_report(&recs).map_err(|e| e.to_string())?;
        let got = [r.binary_acc, r.category_acc, r.weighted_precision, r.weighted_recall, r.weighted_f1];
        for (g, o) in got.iter().zip(confusion_oracle(&recs)) {
            worst = worst.max((g - o).abs());
        }
    }
    let worked: Vec<EvalRecord> = [(Category::Aquatic, Category::Aquatic), (Category::Aquatic, Category::Terrestrial), (Category::Terrestrial, Category::Terrestrial)]
        .iter()
        .enumerate()
        .map(|(i, (t, p))| EvalRecord {
            id: i.to_string(),
            prediction: Transcript {
                category: Some(*p),
                answer: Some(Presence::Yes),
                ..Transcript::default()
            },
            gt: GroundTruth::positive(*t, vec![BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }]).unwrap(),
        })
        .collect();
    let f1 = classification_report(&worked).map_err(|e| e.to_string())?.weighted_f1;
    check(
        worst <= 1e-12 && (f1 - 2.0 / 3.0).abs() <= 1e-12,
        format!("max deviation {worst:.1e} over 200 label sets; worked weighted F1 = {f1:.6}"),
        format!("max deviation {worst:.1e}, worked F1 {f1}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    let (mut normalized, mut ties) = (0, 0);
    for i in 0..1000 {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = match i % 4 {
            0 => vec![rng.gen_range(-3.0..3.0); g],
            1 => (0..g).map(|_| rng.gen_range(0..3) as f64 * 0.5).collect(),
            _ => (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        };
        let adv = group_advantages(&rewards, 1e-8).map_err(|e| e.to_string())?;
        if adv.std_reward > 1e-8 {
            normalized += 1;
            let m = adv.values.iter().sum::<f64>() / g as f64;
            let s = (adv.values.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / g as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - 1.0).abs());
        } else {
            ties += 1;
            if adv.values.iter().any(|&a| a != 0.0) {
                return Err("tied group produced nonzero advantages".into());
            }
        }
    }
    check(
        worst_mean <= 1e-9 && worst_std <= 1e-9 && ties > 0,
        format!("{normalized} normalized groups (|mean| <= {worst_mean:.1e}, |std-1| <= {worst_std:.1e}); {ties} tied groups all zero"),
        format!("mean err {worst_mean:.1e}, std err {worst_std:.1e}, ties {ties}"),
    )
}

// ---------------------------------------------------------------- 4

fn dot(a: &PolicyParams, b: &PolicyParams) -> f64 {
    (0..a.num_params()).map(|i| a.get(i) * b.get(i)).sum()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst_policy: f64 = 0.0;
    let cfg = PolicyConfig::default();
    for i in 0..100u64 {
        let scene = generate_scene(&SceneSpec::easy(64), 40 + i).unwrap();
        let mut params = PolicyParams::random(cfg, i, 0.5);
        params.temperature = [0.7, 1.0, 1.5][i as usize % 3];
        let state = RefocusState::initial(&scene, &cfg);
        let r = sample_rollout_seeded(&params, &state, 500 + i);
        let g = logp_grad(&params, &r.choices, &state).map_err(|e| e.to_string())?;
        let dir = PolicyParams::random(cfg, 7000 + i, 1.0);
        let mut up = params.clone();
        up.axpy(h, &dir);
        let mut down = params.clone();
        down.axpy(-h, &dir);
        let fd = (rollout_logp(&up, &r.choices, &state).unwrap() - rollout_logp(&down, &r.choices, &state).unwrap()) / (2.0 * h);
        let an = dot(&g, &dir);
        worst_policy = worst_policy.max((fd - an).abs() / an.abs().max(1e-8));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_obj: f64 = 0.0;
    for i in 0..100 {
        let g = rng.gen_range(2..=8);
        let cfg = if i % 2 == 0 { ClipConfig::clip_high(0.2, 0.3) } else { ClipConfig::standard(0.2, 0.04) };
        let logp_old: Vec<f64> = (0..g).map(|_| rng.gen_range(-6.0..-0.5)).collect();
        let logp_new: Vec<f64> = logp_old.iter().map(|l| (l + rng.gen_range(-0.4..0.4f64)).min(-1e-3)).collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..4.0)).collect();
        let adv = group_advantages(&rewards, 1e-8).unwrap();
        let group = |lp: Vec<f64>| Group {
            rewards: rewards.clone(),
            logp_new: lp,
            logp_old: logp_old.clone(),
            ref_dists: None,
        };
        let obj = group_objective(&group(logp_new.clone()), &adv, &cfg).unwrap();
        for k in 0..g {
            let mut a = logp_new.clone();
            a[k] += h;
            let mut b = logp_new.clone();
            b[k] -= h;
            let fd = (group_objective(&group(a), &adv, &cfg).unwrap().loss - group_objective(&group(b), &adv, &cfg).unwrap().loss) / (2.0 * h);
            let an = obj.grad_coeff[k] / g as f64;
            let err = if an == 0.0 && fd.abs() < 1e-9 { 0.0 } else { (fd - an).abs() / an.abs().max(1e-8) };
            worst_obj = worst_obj.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_policy < 1e-4 && worst_obj < 1e-4 && secs < 60.0,
        format!("logp_grad max rel err {worst_policy:.2e}, grad_coeff max rel err {worst_obj:.2e}, {secs:.1}s"),
        format!("logp_grad {worst_policy:.2e}, grad_coeff {worst_obj:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let high = ClipConfig::clip_high(0.2, 0.4);
    let s1 = surrogate_term(1.5, 2.0, &high);
    let g1 = group_objective(
        &Group {
            rewards: vec![1.0, 0.0],
            logp_new: vec![1.5f64.ln() - 1.0, -1.0],
            logp_old: vec![-1.0, -1.0],
            ref_dists: None,
        },
        &AdvantageVector {
            values: vec![2.0, 0.0],
            mean_reward: 0.0,
            std_reward: 1.0,
        },
        &high,
    )
    .map_err(|e| e.to_string())?;
    let s2 = surrogate_term(0.5, -1.0, &ClipConfig::standard(0.2, 0.04));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g = rng.gen_range(2..=16);
        let eps = rng.gen_range(0.05..0.4);
        let logp_old: Vec<f64> = (0..g).map(|_| rng.gen_range(-8.0..-0.1)).collect();
        let group = Group {
            rewards: (0..g).map(|_| rng.gen_range(0.0..4.0)).collect(),
            logp_new: logp_old.iter().map(|l| (l + rng.gen_range(-1.0..1.0f64)).min(0.0)).collect(),
            logp_old,
            ref_dists: None,
        };
        let adv = group_advantages(&group.rewards, 1e-8).unwrap();
        let a = group_objective(&group, &adv, &ClipConfig { delta: eps, ..ClipConfig::clip_high(eps, eps + 0.1) }).unwrap();
        let b = group_objective(&group, &adv, &ClipConfig { variant: ClipVariant::StandardKl, ..ClipConfig::standard(eps, 0.0) }).unwrap();
        worst = worst.max((a.loss - b.loss).abs());
        for (x, y) in a.grad_coeff.iter().zip(&b.grad_coeff) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        (s1 - 2.8).abs() < 1e-12 && g1.grad_coeff[0] == 0.0 && (s2 + 0.8).abs() < 1e-12 && worst <= 1e-12,
        format!("surrogate(1.5, 2) = {s1}, grad coeff {}; surrogate(0.5, -1) = {s2}; variant gap {worst:.1e}", g1.grad_coeff[0]),
        format!("s1 {s1}, coeff {}, s2 {s2}, gap {worst:.1e}", g1.grad_coeff[0]),
    )
}

// ---------------------------------------------------------------- 6

const FUZZ_TOKENS: &[&str] = &[
    "<explore>", "</explore>", "<bbox>", "</bbox>", "<category>", "</category>", "<answer>", "</answer>", "<", ">", "/",
    "(x=", "y=", "w=", "h=", ")", ", ", "12", "-3", "4.5", "1e9", "NaN", "Yes", "No", "yes", "Flying", "Other", "Aquatic",
    "Overview", "Focus:", "Rethink (x=1, y=2, w=3, h=4):", "Backtracing", "Summary", "\n", "\n\n", "====", " ", "é", "🦎", "\r\n", "\t",
];

fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..40);
    let mut s = String::new();
    for _ in 0..n {
        if rng.gen_bool(0.1) {
            s.push(char::from_u32(rng.gen_range(0..0x3000)).unwrap_or('?'));
        } else {
            s.push_str(FUZZ_TOKENS[rng.gen_range(0..FUZZ_TOKENS.len())]);
        }
    }
    s
}

const WORDS: &[&str] = &["scan", "the", "left", "edge", "texture", "looks", "odd", "region", "stripes", "brighter", "zoom", "here"];

fn random_transcript(rng: &mut ChaCha8Rng) -> Transcript {
    let rbox = |rng: &mut ChaCha8Rng| BBox {
        x: rng.gen_range(0..200) as f64 + if rng.gen_bool(0.3) { 0.25 } else { 0.0 },
        y: rng.gen_range(0..200) as f64,
        w: rng.gen_range(1..100) as f64 + if rng.gen_bool(0.3) { 0.5 } else { 0.0 },
        h: rng.gen_range(1..100) as f64,
    };
    let labels = [StepLabel::Overview, StepLabel::Focus, StepLabel::Rethink, StepLabel::Backtracing, StepLabel::Summary];
    let steps = (0..rng.gen_range(0..5))
        .map(|_| {
            let words = rng.gen_range(1..6);
            let narration = (0..words).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
            RefocusStep {
                label: rng.gen_bool(0.8).then(|| labels[rng.gen_range(0..labels.len())]),
                bbox: rng.gen_bool(0.7).then(|| rbox(rng)),
                narration,
            }
        })
        .collect();
    Transcript {
        explore: steps,
        bbox: rng.gen_bool(0.8).then(|| rbox(rng)),
        category: rng.gen_bool(0.8).then(|| Category::ALL[rng.gen_range(0..5)]),
        answer: rng.gen_bool(0.8).then(|| if rng.gen_bool(0.5) { Presence::Yes } else { Presence::No }),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..100_000 {
        let s = fuzz_string(&mut rng);
        if catch_unwind(|| parse_transcript(&s)).is_err() {
            return Err(format!("parser panicked on fuzz input {i}: {s:?}"));
        }
    }
    for i in 0..1000 {
        let t = random_transcript(&mut rng);
        let s1 = serialize_transcript(&t);
        let s2 = serialize_transcript(&parse_transcript(&s1).0);
        if s1 != s2 {
            return Err(format!("transcript {i} is not a fixed point:\n{s1}\n---\n{s2}"));
        }
    }
    let (t, _) = parse_transcript("<bbox>(x=112, y=98, w=64, h=52)</bbox>");
    let expect = BBox { x: 112.0, y: 98.0, w: 64.0, h: 52.0 };
    check(
        t.bbox == Some(expect),
        "100000 fuzz inputs parsed, 1000 round trips fixed, literal box exact".into(),
        format!("literal box parsed as {:?}", t.bbox),
    )
}

// ---------------------------------------------------------------- shared training runs

fn easy_set(n: usize, base: u64) -> Vec<Scene> {
    let spec = SceneSpec::easy(64);
    (0..n as u64).map(|i| generate_scene(&spec, base + i).unwrap()).collect()
}

struct Trained {
    params: PolicyParams,
    init: PolicyParams,
    log: TrainLog,
    random_oracle: f64,
    heldout: Vec<Scene>,
    elapsed: Duration,
}

fn frozen_random_oracle(init: &PolicyParams, scenes: &[Scene], cfg: &TrainConfig) -> f64 {
    let frozen = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..cfg.clone()
    };
    let (_, log) = train(init, scenes, None, &frozen, &CurriculumConfig::default()).unwrap();
    log.epochs[0].mean_reward_stage3
}

fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let scenes = easy_set(512, 10_000);
        let heldout = easy_set(256, 90_000);
        let cfg = TrainConfig { seed: 8, ..TrainConfig::default() };
        let init = cfg.initial_params();
        let start = Instant::now();
        let (params, log) = train(&init, &scenes, None, &cfg, &CurriculumConfig::default()).unwrap();
        let elapsed = start.elapsed();
        Trained {
            random_oracle: frozen_random_oracle(&init, &scenes, &cfg),
            params,
            init,
            log,
            heldout,
            elapsed,
        }
    })
}

fn timeline_ok(log: &TrainLog) -> bool {
    log.stage_timeline().windows(2).all(|w| w[0] <= w[1])
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let tight = CurriculumConfig {
        plateau_tolerance: 0.01,
        patience: 2,
        window: 1,
        max_epochs_per_stage: 6,
    };
    let trace = [1.0, 1.5, 1.6, 1.61, 1.612];
    let fires_at = (1..=trace.len()).find(|&n| plateau_detect(&trace[..n], &tight));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut capped = true;
    for _ in 0..200 {
        let h: Vec<f64> = (0..6).map(|i| i as f64 * rng.gen_range(0.05..0.5)).collect();
        let window = rng.gen_range(1..=3);
        capped &= plateau_detect(&h, &CurriculumConfig { window, ..CurriculumConfig::default() });
    }
    let small = easy_set(48, 70_000);
    let mut monotone = timeline_ok(&trained().log);
    for (seed, max) in [(1u64, 2usize), (2, 3), (3, 6)] {
        let cfg = TrainConfig {
            seed,
            epochs: 10,
            ..TrainConfig::default()
        };
        let cur = CurriculumConfig {
            max_epochs_per_stage: max,
            ..CurriculumConfig::default()
        };
        let (_, log) = train(&cfg.initial_params(), &small, None, &cfg, &cur).unwrap();
        monotone &= timeline_ok(&log) && log.stage_timeline().iter().all(|s| *s >= StageId::Stage1);
    }
    check(
        fires_at == Some(5) && capped && monotone,
        "worked trace fires after epoch 5; cap fires by epoch 6; timelines non-decreasing".into(),
        format!("fires at {fires_at:?}, cap {capped}, monotone {monotone}"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let t = trained();
    let final_reward = t.log.epochs.last().unwrap().mean_reward_stage3;
    let ratio = final_reward / t.random_oracle;
    let (_, random_det) = evaluate_checkpoint(&t.init, &t.heldout).map_err(|e| e.to_string())?;
    let (_, trained_det) = evaluate_checkpoint(&t.params, &t.heldout).map_err(|e| e.to_string())?;
    let gain = trained_det.miou - random_det.miou;
    let secs = t.elapsed.as_secs_f64();
    let line = format!(
        "final stage-3 reward {final_reward:.3} vs frozen random {:.3} (x{ratio:.3}); held-out mIoU {:.3} vs random {:.3} (+{gain:.3}); {secs:.1}s",
        t.random_oracle, trained_det.miou, random_det.miou
    );
    check(ratio >= 1.5 && gain >= 0.15 && secs < 600.0 && timeline_ok(&t.log), line.clone(), line)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut curriculum = Vec::new();
    let mut all_at_once = Vec::new();
    for seed in 0..5u64 {
        let scenes = easy_set(512, 200_000 + seed * 1_000);
        for (no_curriculum, out) in [(false, &mut curriculum), (true, &mut all_at_once)] {
            let cfg = TrainConfig {
                seed,
                no_curriculum,
                ..TrainConfig::default()
            };
            let (_, log) = train(&cfg.initial_params(), &scenes, None, &cfg, &CurriculumConfig::default()).unwrap();
            out.push(log.epochs.last().unwrap().mean_reward_stage3);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, n) = (mean(&curriculum), mean(&all_at_once));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    let line = format!(
        "curriculum mean {c:.3} [{}] vs no-curriculum mean {n:.3} [{}]",
        fmt(&curriculum),
        fmt(&all_at_once)
    );
    check(c >= n, line.clone(), line)
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let cfg = RefocusConfig::default();
    let b = |x, y, w, h| BBox { x, y, w, h };
    let labels = [
        classify_refocus_steps(&[b(0.0, 0.0, 100.0, 100.0), b(20.0, 20.0, 40.0, 40.0)], &cfg),
        classify_refocus_steps(&[b(20.0, 20.0, 40.0, 40.0), b(0.0, 0.0, 100.0, 100.0)], &cfg),
        classify_refocus_steps(&[b(10.0, 10.0, 40.0, 40.0), b(25.0, 10.0, 40.0, 40.0)], &cfg),
    ];
    let worked = labels == [vec![RefocusLabel::Focus], vec![RefocusLabel::Backtrace], vec![RefocusLabel::Rethink]];
    let t = trained();
    let stats = refocus_stats(&greedy_records(&t.params, &t.heldout), &cfg);
    let focus = stats.count(RefocusLabel::Focus);
    let sampled: Vec<EvalRecord> = t
        .heldout
        .iter()
        .enumerate()
        .map(|(i, s)| EvalRecord {
            id: s.id.clone(),
            prediction: sample_rollout_seeded(&t.params, &RefocusState::initial(s, &t.params.config), i as u64).transcript,
            gt: s.gt.clone(),
        })
        .collect();
    let sampled_focus = refocus_stats(&sampled, &cfg).count(RefocusLabel::Focus);
    check(
        worked && focus >= 1,
        format!("worked pairs Focus/Backtrace/Rethink; greedy held-out histogram {:?}", stats.histogram),
        format!(
            "worked {labels:?}, greedy held-out histogram {:?} (sampling at the trained temperature gives {sampled_focus} Focus)",
            stats.histogram
        ),
    )
}

// ---------------------------------------------------------------- 11

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_refocus"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_11() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        let p = |name: &str| dir.join(name).display().to_string();
        run_cli(&["gen-scenes", "--n", "64", "--tier", "easy", "--seed", "7", "--out", &p("train")])?;
        run_cli(&["gen-scenes", "--n", "32", "--tier", "hard", "--seed", "8", "--out", &p("test")])?;
        run_cli(&["train", "--dataset", &p("train"), "--out", &p("run"), "--seed", "3", "--epochs", "4"])?;
        run_cli(&["eval", "--checkpoint", &p("run/checkpoint.json"), "--dataset", &p("test"), "--refocus-stats", "--report", &p("report.json")])?;
        runs.push((
            tree_bytes(&dir.join("train")),
            tree_bytes(&dir.join("test")),
            fs::read(dir.join("run/checkpoint.json")).map_err(|e| e.to_string())?,
            fs::read(dir.join("run/train_log.jsonl")).map_err(|e| e.to_string())?,
            fs::read(dir.join("report.json")).map_err(|e| e.to_string())?,
        ));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3, a.4 == b.4];
    check(
        same.iter().all(|&x| x),
        format!("{} dataset files, checkpoint, train log and report identical across reruns", a.0.len() + a.1.len()),
        format!("identical [train set, test set, checkpoint, log, report] = {same:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("IoU oracle equivalence", criterion_1),
        ("metric oracle equivalence", criterion_2),
        ("advantage normalization", criterion_3),
        ("gradient correctness", criterion_4),
        ("clip behavior", criterion_5),
        ("parser totality and round trip", criterion_6),
        ("curriculum mechanics", criterion_7),
        ("desk-scale learning", criterion_8),
        ("curriculum vs all-at-once", criterion_9),
        ("refocus taxonomy", criterion_10),
        ("end-to-end determinism", criterion_11),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match res {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
