//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the default pipeline in a temporary directory, reuses its checkpoints
//! for the model-level criteria, then reruns it from scratch to check byte
//! reproducibility. Exits non-zero when a criterion outside
//! [`KNOWN_FAILURES`] fails.

use std::path::Path;
use std::time::Instant;

use ant_lab::commands::{self, ablation_rows, eval_report, load_model, sweep_rows};
use ant_lab::config::RunConfig;
use ant_lab::stages::Workspace;
use ant_lab_core::ant_finetune::{erase_cond, prepare_batch, AblationVariant, Teacher};
use ant_lab_core::diffusion::{
    ddim_step, forward_noise, initial_noise, ladder_steps, sample, GuidanceSpec, NoiseSchedule,
};
use ant_lab_core::eval_metrics::harmonic_mean_hc;
use ant_lab_core::multi_fuse::{erase_multi, erase_sequential, fuse, FusionProblem};
use ant_lab_core::optim::AdamConfig;
use ant_lab_core::saliency::{masked_update, SaliencyMask};
use ant_lab_core::score_net::{clone_frozen, weighted_loss_and_grad, Cond, GradTarget, ModelParams, NetInput, TrainItem};
use ant_lab_core::synth_data::Dataset;
use ant_lab_core::util;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Criteria that fail at the default configuration; the README explains why.
const KNOWN_FAILURES: &[usize] = &[4, 5, 6, 9];

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, pass: bool, detail: String) -> Verdict {
    let tag = if pass { "PASS" } else { "FAIL" };
    let known = if !pass && KNOWN_FAILURES.contains(&id) { " (known)" } else { "" };
    println!("criterion {id:>2} {tag}{known}  {name}: {detail}");
    Verdict { id, name, pass, detail }
}

fn c1() -> Verdict {
    let a = harmonic_mean_hc(0.0430, 0.8807);
    let b = harmonic_mean_hc(0.0430, 0.8456);
    let pass = (a - 0.9173).abs() <= 1e-4 && (b - 0.8979).abs() <= 1e-4;
    verdict(1, "H_c arithmetic", pass, format!("{a:.5}, {b:.5}"))
}

/// Worst relative error between analytic and central-difference gradients
/// over 20 random coordinates.
fn fd_worst(loss: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], rng: &mut util::Rng) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..x.len());
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}

fn c2(ws: &Workspace, model: &ModelParams, erased: &ModelParams, data: &Dataset) -> Verdict {
    let schedule = ws.cfg.noise_schedule().unwrap();
    let mut rng = util::rng(2);
    let n = 64;
    let items: Vec<TrainItem> = data.points[..n]
        .iter()
        .map(|p| {
            let t = rng.random_range(1..=schedule.t_max());
            let eps = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            TrainItem {
                input: NetInput {
                    z: forward_noise(&schedule, p.x, t, eps).unwrap(),
                    t_norm: schedule.t_norm(t),
                    cond: Cond::with_context(p.concept, p.context),
                },
                target: eps,
                weight: 1.0 / n as f64,
            }
        })
        .collect();
    let (_, grad) = weighted_loss_and_grad(model, &items, None, GradTarget::Base).unwrap();
    let dsm = |flat: &[f64]| {
        let q = ModelParams::new(model.config.clone(), flat.to_vec()).unwrap();
        weighted_loss_and_grad(&q, &items, None, GradTarget::Base).unwrap().0
    };
    let dsm_err = fd_worst(dsm, &model.flat, &grad, &mut rng);

    let frozen = clone_frozen(model);
    let teacher = Teacher {
        frozen: &frozen,
        schedule: &schedule,
        data: None,
    };
    let cfg = ws.cfg.ant_config(&schedule);
    let batch = prepare_batch(&teacher, erase_cond(ws.cfg.ant.target), &cfg, &mut rng).unwrap();
    let (_, grad) = batch.loss_and_grad(erased, None, GradTarget::Base).unwrap();
    let tv = batch.term_values(erased, None).unwrap();
    let all_terms = tv.preserve > 0.0 && tv.erase > 0.0 && tv.uncond_early > 0.0 && tv.uncond_late > 0.0;
    let ant = |flat: &[f64]| {
        let q = ModelParams::new(erased.config.clone(), flat.to_vec()).unwrap();
        batch.term_values(&q, None).unwrap().total()
    };
    let ant_err = fd_worst(ant, &erased.flat, &grad, &mut rng);
    verdict(
        2,
        "gradient fidelity",
        dsm_err < 1e-4 && ant_err < 1e-4 && all_terms,
        format!("worst rel err DSM {dsm_err:.2e}, ANT {ant_err:.2e} (all four terms active: {all_terms})"),
    )
}

fn c3() -> Verdict {
    let s = NoiseSchedule::default();
    let mut rng = util::rng(3);
    let mut inv_err: f64 = 0.0;
    for _ in 0..1000 {
        let x0 = [4.0 * rng.random::<f64>() - 2.0, 4.0 * rng.random::<f64>() - 2.0];
        let eps = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let t = rng.random_range(1..=s.t_max());
        let z = forward_noise(&s, x0, t, eps).unwrap();
        let back = ddim_step(&s, z, t, 0, eps).unwrap();
        inv_err = inv_err.max((back[0] - x0[0]).abs()).max((back[1] - x0[1]).abs());
    }
    // data N(m, vI): the optimal noise predictor is linear in z, each DDIM
    // step is the scalar affine map z -> a z + b, and the endpoint is their
    // product
    let (m, v) = ([0.7, -1.3], 0.25);
    let eps_of = |z: [f64; 2], t: usize| {
        let ab = s.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * v + 1.0 - ab);
        [k * (z[0] - ab.sqrt() * m[0]), k * (z[1] - ab.sqrt() * m[1])]
    };
    let model = |inp: &NetInput| eps_of(inp.z, (inp.t_norm * 100.0).round() as usize);
    let g = GuidanceSpec {
        scale: 0.0,
        t_prime: 0,
        n_infer_steps: 50,
    };
    let out = sample(&model, &s, &g, Cond::NULL, 256, 7, false).unwrap();
    let (mut a, mut b) = (1.0, [0.0, 0.0]);
    for step in ladder_steps(&s, &g) {
        let ab = s.alpha_bar(step.t);
        let abn = s.alpha_bar(step.t_next);
        let k = (1.0 - ab).sqrt() / (ab * v + 1.0 - ab);
        let c = (1.0 - abn).sqrt() - (abn / ab).sqrt() * (1.0 - ab).sqrt();
        let sa = (abn / ab).sqrt() + c * k;
        let sb = -c * k * ab.sqrt();
        a *= sa;
        b = [sa * b[0] + sb * m[0], sa * b[1] + sb * m[1]];
    }
    let mut end_err: f64 = 0.0;
    for (z0, x) in initial_noise(256, 7).iter().zip(&out.points) {
        for d in 0..2 {
            end_err = end_err.max((a * z0[d] + b[d] - x[d]).abs());
        }
    }
    verdict(
        3,
        "sampler exactness",
        inv_err < 1e-12 && end_err < 1e-6,
        format!("inversion {inv_err:.1e}, 50-step endpoint {end_err:.1e}"),
    )
}

fn c4(ws: &Workspace, model: &ModelParams) -> Verdict {
    let rows = sweep_rows(ws, model).unwrap();
    let t_max = ws.cfg.schedule.n_infer_steps;
    let at = |t: usize| rows.iter().find(|r| r.0 == t).copied();
    let start = at(0).map(|r| r.2).unwrap_or(f64::NAN);
    let end_off = at(t_max).map(|r| r.3).unwrap_or(f64::NAN);
    let inner: Vec<_> = rows.iter().filter(|r| r.0 > 0 && r.0 < t_max).collect();
    // the optimum is the qualifying row with the least off-manifold mass, or
    // failing that the row with the smallest combined fraction
    let qualifying = inner
        .iter()
        .filter(|r| r.2 < 0.2 && r.3 < 0.1)
        .min_by(|a, b| a.3.total_cmp(&b.3));
    let best = qualifying
        .or_else(|| inner.iter().min_by(|a, b| (a.2 + a.3).total_cmp(&(b.2 + b.3))))
        .copied()
        .copied();
    let (a, b) = (start >= 0.95, qualifying.is_some());
    let c = best.is_some_and(|r| end_off > r.3);
    let bd = best.map_or("none".into(), |r| format!("t'={} target {:.3} off {:.3}", r.0, r.2, r.3));
    verdict(
        4,
        "reversal sweep",
        a && b && c,
        format!("(a) t'=0 target {start:.3} [{a}]; (b) best intermediate {bd} [{b}]; (c) t'={t_max} off {end_off:.3} [{c}]"),
    )
}

fn c5(ws: &Workspace, erased: &ModelParams, model: &ModelParams) -> Verdict {
    let text = ws.read(commands::SALIENCY_CURVE).unwrap();
    let curve: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let monotone = curve.windows(2).all(|w| w[1] <= w[0]);
    let n = curve.len();
    let rel = if n >= 21 && curve[n - 21] > 0.0 {
        (curve[n - 21] - curve[n - 1]) / curve[n - 21]
    } else {
        0.0
    };
    let converged = n == 100 && rel < 0.05;

    // 50 masked Adam steps on the real erasure loss
    let mask = SaliencyMask::from_text(&ws.read(commands::MASK).unwrap()).unwrap();
    let schedule = ws.cfg.noise_schedule().unwrap();
    let frozen = clone_frozen(model);
    let teacher = Teacher {
        frozen: &frozen,
        schedule: &schedule,
        data: None,
    };
    let cfg = ws.cfg.ant_config(&schedule);
    let mut rng = util::rng(5);
    let mut live = erased.clone();
    let mut opt = mask.optimizer(AdamConfig::with_lr(1e-3)).unwrap();
    for _ in 0..50 {
        let batch = prepare_batch(&teacher, erase_cond(ws.cfg.ant.target), &cfg, &mut rng).unwrap();
        let (_, g) = batch.loss_and_grad(&live, None, GradTarget::Base).unwrap();
        masked_update(&mut live.flat, &g, &mut opt).unwrap();
    }
    let untouched = live
        .flat
        .iter()
        .zip(&erased.flat)
        .zip(&mask.bits)
        .all(|((a, b), &on)| on || a.to_bits() == b.to_bits());
    let moved = live.flat.iter().zip(&erased.flat).filter(|(a, b)| a != b).count();
    verdict(
        5,
        "saliency properties",
        monotone && converged && untouched,
        format!(
            "{n} maps, monotone {monotone}, final active {}, last-20 rel change {:.3}; masked updates moved {moved} of {} active coords, unmasked untouched {untouched}",
            curve.last().copied().unwrap_or(0.0),
            rel,
            mask.active()
        ),
    )
}

fn c6(ws: &Workspace, model: &ModelParams, erased: &ModelParams) -> Verdict {
    let full = eval_report(ws, erased, &[ws.cfg.ant.target]).unwrap();
    let rows = ablation_rows(ws, model, &[AblationVariant::A, AblationVariant::C]).unwrap();
    let (a, c) = (rows[0].report.h_c, rows[1].report.h_c);
    let pass = full.acc_e < 0.10 && full.acc_p > 0.85 && full.h_c > a && full.h_c > c;
    verdict(
        6,
        "single-concept erasure",
        pass,
        format!(
            "acc_e {:.3}, acc_p {:.3}, H_c full {:.4} vs A {a:.4}, C {c:.4}",
            full.acc_e, full.acc_p, full.h_c
        ),
    )
}

fn c7(ws: &Workspace) -> Verdict {
    let text = ws.read(commands::DEVIATION).unwrap();
    let get = |k: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (early, late, uncond) = (get("cond_early"), get("cond_late"), get("uncond"));
    let ratio = late / early;
    let pass = ratio >= 5.0 && uncond < 0.1 * late;
    verdict(
        7,
        "early-trajectory preservation",
        pass,
        format!("cond late/early {ratio:.2}, uncond/late {:.3}", uncond / late),
    )
}

fn randn(rng: &mut util::Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn randv(rng: &mut util::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn c8() -> Verdict {
    let mut rng = util::rng(8);
    let mut worst_grad: f64 = 0.0;
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        let h = rng.random_range(3..10);
        let d = rng.random_range(2..7);
        let n_ad = rng.random_range(1..5);
        let p = FusionProblem {
            w: randn(&mut rng, h, d),
            deltas: (0..n_ad).map(|_| randn(&mut rng, h, d)).collect(),
            targets: (0..n_ad)
                .map(|_| {
                    let m = rng.random_range(1..5);
                    randv(&mut rng, m, d)
                })
                .collect(),
            preserve: randv(&mut rng, d, d),
            beta: rng.random_range(0.05..2.0),
        };
        let w_star = fuse(&p).unwrap().w_star;
        worst_grad = worst_grad.max(frob(&p.gradient(&w_star)) / frob(&p.gradient(&p.w)).max(1e-300));
        // gradient descent from W with step 1/L, L bounded by twice the trace
        let l: f64 = 2.0
            * (p.targets.iter().flatten().map(|e| e.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
                + p.beta * p.preserve.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>()).sum::<f64>());
        let mut w = p.w.clone();
        for _ in 0..100_000 {
            let g = p.gradient(&w);
            w.scaled_add(-1.0 / l, &g);
        }
        worst_gap = worst_gap.max(p.objective(&w_star) - p.objective(&w));
    }
    // trivial cases
    let w = randn(&mut rng, 5, 3);
    let zero = FusionProblem {
        w: w.clone(),
        deltas: vec![Array2::zeros((5, 3)); 2],
        targets: vec![randv(&mut rng, 3, 3), randv(&mut rng, 2, 3)],
        preserve: randv(&mut rng, 3, 3),
        beta: 0.3,
    };
    let zero_err = frob(&(&fuse(&zero).unwrap().w_star - &w));
    let dw = randn(&mut rng, 5, 3);
    let span = FusionProblem {
        w: w.clone(),
        deltas: vec![dw.clone()],
        targets: vec![randv(&mut rng, 4, 3)],
        preserve: vec![],
        beta: 0.0,
    };
    let span_err = frob(&(&fuse(&span).unwrap().w_star - &(&w + &dw)));
    let pass = worst_grad < 1e-8 && worst_gap <= 1e-9 && zero_err < 1e-12 && span_err < 1e-10;
    verdict(
        8,
        "fusion optimality",
        pass,
        format!(
            "worst rel grad {worst_grad:.1e}, worst closed-form minus GD {worst_gap:.1e}, zero-delta err {zero_err:.1e}, spanning err {span_err:.1e}"
        ),
    )
}

fn c9(ws: &Workspace, model: &ModelParams) -> Verdict {
    let schedule = ws.cfg.noise_schedule().unwrap();
    let concepts = ws.cfg.fuse.concepts.clone();
    let fused = erase_multi(model, &schedule, &concepts, &ws.cfg.multi_config(&schedule)).unwrap();
    let seq = erase_sequential(model, &schedule, &concepts, &ws.cfg.ant_config(&schedule)).unwrap();
    let rf = eval_report(ws, &fused.params, &concepts).unwrap();
    let rs = eval_report(ws, &seq, &concepts).unwrap();
    let pass = rf.acc_e < 0.15 && rf.acc_p > 0.80 && rf.h_c >= rs.h_c;
    verdict(
        9,
        "multi-concept erasure",
        pass,
        format!(
            "fused acc_e {:.3} acc_p {:.3} H_c {:.4}; sequential acc_e {:.3} acc_p {:.3} H_c {:.4}",
            rf.acc_e, rf.acc_p, rf.h_c, rs.acc_e, rs.acc_p, rs.h_c
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

fn c10(first: &Workspace, first_secs: f64) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = first.cfg.clone();
    cfg.run_dir = tmp.path().to_path_buf();
    let second = Workspace::new(cfg, false);
    let t = Instant::now();
    commands::pipeline(&second).unwrap();
    let second_secs = t.elapsed().as_secs_f64();
    let names = csv_files(&first.dir);
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(first.path(n)).ok() != std::fs::read(second.path(n)).ok())
        .collect();
    let same_set = names == csv_files(&second.dir);
    let pass = differing.is_empty() && same_set && first_secs < 900.0 && second_secs < 900.0;
    verdict(
        10,
        "reproducibility",
        pass,
        format!(
            "{} CSVs, {} differ, wall time {first_secs:.0} s and {second_secs:.0} s",
            names.len(),
            differing.len()
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary run directory");
    let mut cfg = RunConfig::default();
    cfg.run_dir = tmp.path().to_path_buf();
    let ws = Workspace::new(cfg, false);
    let t = Instant::now();
    commands::pipeline(&ws).expect("default pipeline");
    let pipeline_secs = t.elapsed().as_secs_f64();
    println!("default pipeline finished in {pipeline_secs:.0} s");

    let model = load_model(&ws, commands::MODEL).unwrap();
    let erased = load_model(&ws, commands::ERASED).unwrap();
    let data = Dataset::from_csv(
        &ws.read(commands::DATASET).unwrap(),
        ws.cfg.mixture().unwrap(),
        0,
    )
    .unwrap();

    let verdicts = vec![
        c1(),
        c2(&ws, &model, &erased, &data),
        c3(),
        c4(&ws, &model),
        c5(&ws, &erased, &model),
        c6(&ws, &model, &erased),
        c7(&ws),
        c8(),
        c9(&ws, &model),
        c10(&ws, pipeline_secs),
    ];
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed} of {} criteria pass", verdicts.len());
    let unexpected: Vec<&Verdict> = verdicts
        .iter()
        .filter(|v| !v.pass && !KNOWN_FAILURES.contains(&v.id))
        .collect();
    for v in &unexpected {
        eprintln!("unexpected failure: criterion {} ({}): {}", v.id, v.name, v.detail);
    }
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
