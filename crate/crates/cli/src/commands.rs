//! One function per subcommand. Each stage reads its inputs from the run
//! directory and writes its artifacts back through [`Workspace::run_stage`].

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context as _, Result};
use ant_lab_core::ant_finetune::{
    deviation_profile, erase_cond, erase_log_csv, erase_single, AblationVariant, AntLossConfig,
    DeviationProfile, LatentSource, Teacher,
};
use ant_lab_core::diffusion::{sample, samples_to_csv, GuidanceSpec, NetModel, NoiseSchedule};
use ant_lab_core::eval_metrics::{
    accuracy, classified_fraction, concept_samples, evaluate, off_manifold_fraction, EvalReport,
    EVAL_REPORT_SCHEMA,
};
use ant_lab_core::multi_fuse::{erase_multi, fusion_report_csv};
use ant_lab_core::pretrainer::pretrain;
use ant_lab_core::saliency::{build_concept_mask, SaliencyMask};
use ant_lab_core::score_net::{clone_frozen, ModelParams};
use ant_lab_core::synth_data::{bayes_classify, sample_dataset, Dataset, Point};
use ant_lab_core::util::{fmt_f64, sha256_bytes};
use ant_lab_core::Error as CoreError;
use rayon::prelude::*;

use crate::config::seeds;
use crate::plot::{self, Series, PALETTE};
use crate::stages::{exists, Outcome, Workspace};

pub const DATASET: &str = "dataset.csv";
pub const MODEL: &str = "model.ckpt";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const MASK: &str = "saliency_mask.txt";
pub const SALIENCY_CURVE: &str = "saliency_curve.csv";
pub const ERASED: &str = "erased.ckpt";
pub const ERASE_LOG: &str = "erase_log.csv";
pub const DEVIATION: &str = "deviation.csv";
pub const TEACHER_CHECKSUM: &str = "teacher_checksum.txt";
pub const FUSED: &str = "fused.ckpt";
pub const FUSION_REPORT: &str = "fusion_report.csv";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const EVAL_SCHEMA: &str = "eval_report_schema.txt";
pub const SAMPLES: &str = "samples.csv";
pub const TRAJECTORY: &str = "trajectory.csv";
pub const SWEEP: &str = "sweep_tprime.csv";
pub const SWEEP_SVG: &str = "sweep_tprime.svg";
pub const ABLATION: &str = "ablation.csv";
pub const SUMMARY: &str = "summary.csv";

const MODEL_NS: &[&str] = &["data", "net", "schedule", "pretrain"];

fn ns(extra: &[&'static str]) -> Vec<&'static str> {
    MODEL_NS.iter().copied().chain(extra.iter().copied()).collect()
}

fn art(name: impl Into<String>, text: String) -> (String, Vec<u8>) {
    (name.into(), text.into_bytes())
}

pub fn load_model(ws: &Workspace, name: &str) -> Result<ModelParams> {
    let p = ws.path(name);
    if !p.is_file() {
        bail!("missing checkpoint {}", p.display());
    }
    ModelParams::load(&p).with_context(|| format!("cannot load checkpoint {}", p.display()))
}

fn load_dataset(ws: &Workspace) -> Result<Dataset> {
    let spec = ws.cfg.mixture()?;
    let text = ws.read(DATASET)?;
    Dataset::from_csv(&text, spec, ws.cfg.stage_seed(seeds::DATA))
        .with_context(|| format!("malformed {}", ws.path(DATASET).display()))
}

fn needs_data(ws: &Workspace) -> bool {
    ws.cfg.ant.latent_source == LatentSource::NoisedData
}

/// Data points of `concept` when the loss builds latents from data.
fn concept_points(ws: &Workspace, concept: usize) -> Result<Option<Vec<Point>>> {
    if !needs_data(ws) {
        return Ok(None);
    }
    let d = load_dataset(ws)?;
    Ok(Some(
        d.points.iter().filter(|p| p.concept == concept).map(|p| p.x).collect(),
    ))
}

/// Keep the last finite parameters of a diverged run before failing.
fn keep_last_good(ws: &Workspace, stage: &str, err: CoreError) -> anyhow::Error {
    if let CoreError::Diverged { ref last_good, .. } = err {
        let name = format!("{stage}_last_good.ckpt");
        if ws.write(&name, last_good.to_checkpoint().as_bytes()).is_ok() {
            log::error!("{stage} diverged; last finite parameters saved to {name}");
        }
    }
    anyhow::Error::new(err)
}

fn final_model(ws: &Workspace) -> &'static str {
    if ws.cfg.fuse.enabled {
        FUSED
    } else {
        ERASED
    }
}

pub fn gen_data(ws: &Workspace) -> Result<Outcome> {
    ws.run_stage("gen-data", &["data"], &[], || {
        let spec = ws.cfg.mixture()?;
        let d = sample_dataset(&spec, ws.cfg.data.n_samples, ws.cfg.stage_seed(seeds::DATA))?;
        Ok(vec![art(DATASET, d.to_csv())])
    })
}

pub fn pretrain_cmd(ws: &Workspace) -> Result<Outcome> {
    ws.run_stage("pretrain", MODEL_NS, &[DATASET], || {
        let data = load_dataset(ws)?;
        let schedule = ws.cfg.noise_schedule()?;
        let out = pretrain(&ws.cfg.net_config(), &schedule, &data, &ws.cfg.pretrain_config())
            .map_err(|e| keep_last_good(ws, "pretrain", e))?;
        if let Some((_, loss)) = out.loss_curve.last() {
            log::info!("pretrain: final smoothed loss {loss:.5}");
        }
        Ok(vec![art(MODEL, out.params.to_checkpoint()), art(PRETRAIN_LOSS, out.loss_csv())])
    })
}

fn data_inputs(ws: &Workspace, base: &[&'static str]) -> Vec<&'static str> {
    let mut v = base.to_vec();
    if needs_data(ws) {
        v.push(DATASET);
    }
    v
}

pub fn saliency_cmd(ws: &Workspace) -> Result<Outcome> {
    let inputs = data_inputs(ws, &[MODEL]);
    ws.run_stage("saliency", &ns(&["saliency", "ant"]), &inputs, || {
        let model = load_model(ws, MODEL)?;
        let schedule = ws.cfg.noise_schedule()?;
        let target = ws.cfg.ant.target;
        let data = concept_points(ws, target)?;
        let frozen = clone_frozen(&model);
        let teacher = Teacher {
            frozen: &frozen,
            schedule: &schedule,
            data: data.as_deref(),
        };
        let cm = build_concept_mask(
            &model,
            &teacher,
            target,
            &ws.cfg.saliency_config(),
            &ws.cfg.saliency_loss_config(&schedule),
        )?;
        let frac = cm.mask.active() as f64 / cm.mask.len() as f64;
        log::info!(
            "saliency: {} of {} parameters active ({:.3}%)",
            cm.mask.active(),
            cm.mask.len(),
            100.0 * frac
        );
        if !(0.001..=0.1).contains(&frac) {
            log::warn!("saliency mask covers {:.3}% of parameters, outside 0.1%..10%", 100.0 * frac);
        }
        Ok(vec![art(MASK, cm.mask.to_text()), art(SALIENCY_CURVE, cm.curve_csv())])
    })
}

fn deviation_csv(d: &DeviationProfile) -> String {
    format!(
        "quantity,mean_deviation\ncond_early,{}\ncond_late,{}\nuncond,{}\n",
        fmt_f64(d.cond_early),
        fmt_f64(d.cond_late),
        fmt_f64(d.uncond)
    )
}

/// Deviation of `live` from `pretrained` on 100 probe latents per range.
pub fn measure_deviation(
    ws: &Workspace,
    live: &ModelParams,
    pretrained: &ModelParams,
    schedule: &NoiseSchedule,
    cfg: &AntLossConfig,
    data: Option<&[Point]>,
) -> Result<DeviationProfile> {
    let frozen = clone_frozen(pretrained);
    let teacher = Teacher {
        frozen: &frozen,
        schedule,
        data,
    };
    Ok(deviation_profile(
        live,
        &teacher,
        erase_cond(ws.cfg.ant.target),
        cfg,
        100,
        ws.cfg.stage_seed(seeds::DEVIATION),
    )?)
}

pub fn erase_cmd(ws: &Workspace) -> Result<Outcome> {
    let mut inputs = data_inputs(ws, &[MODEL]);
    let mut namespaces = ns(&["ant"]);
    if ws.cfg.ant.use_mask {
        inputs.push(MASK);
        namespaces.push("saliency");
    }
    ws.run_stage("erase", &namespaces, &inputs, || {
        let model = load_model(ws, MODEL)?;
        let schedule = ws.cfg.noise_schedule()?;
        let cfg = ws.cfg.ant_config(&schedule);
        let target = ws.cfg.ant.target;
        let data = concept_points(ws, target)?;
        let mask = if ws.cfg.ant.use_mask {
            let m = SaliencyMask::from_text(&ws.read(MASK)?)
                .with_context(|| format!("malformed {}", ws.path(MASK).display()))?;
            Some(m.bits)
        } else {
            None
        };
        let out = erase_single(&model, &schedule, target, &cfg, mask.as_deref(), data.as_deref())
            .map_err(|e| keep_last_good(ws, "erase", e))?;
        let dev = measure_deviation(ws, &out.params, &model, &schedule, &cfg, data.as_deref())?;
        log::info!(
            "erase: deviation early {:.4}, late {:.4}, uncond {:.4}",
            dev.cond_early,
            dev.cond_late,
            dev.uncond
        );
        let checksum = format!(
            "teacher_before {}\nteacher_after {}\n",
            out.teacher_checksum_before, out.teacher_checksum_after
        );
        Ok(vec![
            art(ERASED, out.params.to_checkpoint()),
            art(ERASE_LOG, erase_log_csv(&out.log)),
            art(DEVIATION, deviation_csv(&dev)),
            art(TEACHER_CHECKSUM, checksum),
        ])
    })
}

fn per_concept_accuracy(ws: &Workspace, params: &ModelParams, concepts: &[usize]) -> Result<Vec<f64>> {
    let schedule = ws.cfg.noise_schedule()?;
    let spec = ws.cfg.mixture()?;
    Ok(accuracy(
        &NetModel::new(params),
        &schedule,
        &ws.cfg.guidance(),
        concepts,
        ws.cfg.eval.n_samples,
        ws.cfg.stage_seed(seeds::EVAL),
        &spec,
    )?)
}

pub fn erase_multi_cmd(ws: &Workspace) -> Result<Outcome> {
    ws.run_stage("erase-multi", &ns(&["ant", "fuse", "eval"]), &[MODEL], || {
        if needs_data(ws) {
            bail!("erase-multi builds latents from the teacher; set ant.latent_source = teacher_partial_ddim");
        }
        let model = load_model(ws, MODEL)?;
        let schedule = ws.cfg.noise_schedule()?;
        let concepts = &ws.cfg.fuse.concepts;
        let out = erase_multi(&model, &schedule, concepts, &ws.cfg.multi_config(&schedule))?;
        if let Some(j) = out.fusion.jitter {
            log::warn!("fusion system needed jitter {j:e}");
        }
        let before = per_concept_accuracy(ws, &model, concepts)?;
        let after = per_concept_accuracy(ws, &out.params, concepts)?;
        let rows: Vec<(usize, f64, f64)> = concepts
            .iter()
            .zip(before.iter().zip(&after))
            .map(|(&k, (&b, &a))| (k, b, a))
            .collect();
        let mut arts = vec![
            art(FUSED, out.params.to_checkpoint()),
            art(FUSION_REPORT, fusion_report_csv(&rows)),
        ];
        for (k, adapter) in &out.adapters {
            arts.push(art(format!("adapter_{k}.txt"), adapter.to_text(*k)));
        }
        Ok(arts)
    })
}

pub fn eval_report(ws: &Workspace, params: &ModelParams, erased: &[usize]) -> Result<EvalReport> {
    let schedule = ws.cfg.noise_schedule()?;
    let spec = ws.cfg.mixture()?;
    let threshold = ws.cfg.threshold_rule().resolve(&spec)?;
    Ok(evaluate(
        &NetModel::new(params),
        &schedule,
        &ws.cfg.guidance(),
        erased,
        ws.cfg.eval.n_samples,
        ws.cfg.stage_seed(seeds::EVAL),
        &spec,
        threshold,
    )?)
}

pub fn eval_cmd(ws: &Workspace) -> Result<Outcome> {
    let input = final_model(ws);
    ws.run_stage("eval", &ns(&["ant", "fuse", "eval"]), &[input], || {
        let params = load_model(ws, input)?;
        let report = eval_report(ws, &params, &ws.cfg.erased_concepts())?;
        log::info!(
            "eval: acc_e {:.3}, acc_p {:.3}, H_c {:.4}, off-manifold {:.3}",
            report.acc_e,
            report.acc_p,
            report.h_c,
            report.off_manifold_frac
        );
        Ok(vec![art(EVAL_REPORT, report.to_csv()), art(EVAL_SCHEMA, EVAL_REPORT_SCHEMA.to_string())])
    })
}

/// Sample chains for the erased concept and record their trajectories.
/// Uses `checkpoint` if given, else the erased model, else the pretrained one.
pub fn sample_cmd(ws: &Workspace, checkpoint: Option<&str>) -> Result<Outcome> {
    let input: String = match checkpoint {
        Some(c) => c.to_string(),
        None if exists(&ws.dir, final_model(ws)) => final_model(ws).to_string(),
        None => MODEL.to_string(),
    };
    ws.run_stage("sample", &ns(&["ant", "eval"]), &[input.as_str()], || {
        let params = load_model(ws, &input)?;
        let schedule = ws.cfg.noise_schedule()?;
        let cond = erase_cond(ws.cfg.ant.target);
        let out = sample(
            &NetModel::new(&params),
            &schedule,
            &ws.cfg.guidance(),
            cond,
            ws.cfg.eval.n_chains,
            ws.cfg.stage_seed(seeds::SAMPLE),
            true,
        )?;
        let rows: Vec<(Point, _)> = out.points.iter().map(|&p| (p, cond)).collect();
        let traj = out.trajectory.ok_or_else(|| anyhow!("sampler returned no trajectory"))?;
        Ok(vec![art(SAMPLES, samples_to_csv(&rows)), art(TRAJECTORY, traj.to_csv())])
    })
}

pub fn sweep_cmd(ws: &Workspace) -> Result<Outcome> {
    ws.run_stage("sweep-tprime", &ns(&["eval"]), &[MODEL], || {
        let model = load_model(ws, MODEL)?;
        let rows = sweep_rows(ws, &model)?;
        let mut csv = String::from("t_prime,guidance_scale,frac_classified_as_target,off_manifold_frac\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.0, fmt_f64(r.1), fmt_f64(r.2), fmt_f64(r.3));
        }
        let svg = sweep_svg(&rows, ws.cfg.eval.sweep_concept);
        Ok(vec![art(SWEEP, csv), art(SWEEP_SVG, svg)])
    })
}

/// `(t′, scale, fraction classified as target, off-manifold fraction)` over
/// the configured grid, sampling the pretrained model without finetuning.
pub fn sweep_rows(ws: &Workspace, model: &ModelParams) -> Result<Vec<(usize, f64, f64, f64)>> {
    let schedule = ws.cfg.noise_schedule()?;
    let spec = ws.cfg.mixture()?;
    let threshold = ws.cfg.threshold_rule().resolve(&spec)?;
    let e = &ws.cfg.eval;
    let grid: Vec<(usize, f64)> = e
        .sweep_scales
        .iter()
        .flat_map(|&s| e.sweep_grid.iter().map(move |&t| (t, s)))
        .collect();
    let net = NetModel::new(model);
    grid.par_iter()
        .map(|&(t_prime, scale)| {
            let g = GuidanceSpec {
                scale,
                t_prime,
                n_infer_steps: ws.cfg.schedule.n_infer_steps,
            };
            let pts = concept_samples(
                &net,
                &schedule,
                &g,
                e.sweep_concept,
                e.n_samples,
                ws.cfg.stage_seed(seeds::EVAL),
            )?;
            Ok((
                t_prime,
                scale,
                classified_fraction(&pts, &spec, e.sweep_concept),
                off_manifold_fraction(&pts, &spec, threshold),
            ))
        })
        .collect()
}

fn sweep_svg(rows: &[(usize, f64, f64, f64)], concept: usize) -> String {
    let mut scales: Vec<f64> = rows.iter().map(|r| r.1).collect();
    scales.dedup();
    let mut series = Vec::new();
    for (i, &s) in scales.iter().enumerate() {
        let pick = |f: fn(&(usize, f64, f64, f64)) -> f64| -> Vec<(f64, f64)> {
            rows.iter().filter(|r| r.1 == s).map(|r| (r.0 as f64, f(r))).collect()
        };
        series.push(Series {
            name: format!("target frac, s={s}"),
            color: PALETTE[(2 * i) % PALETTE.len()],
            points: pick(|r| r.2),
        });
        series.push(Series {
            name: format!("off-manifold, s={s}"),
            color: PALETTE[(2 * i + 1) % PALETTE.len()],
            points: pick(|r| r.3),
        });
    }
    plot::line_chart(
        &format!("Reversal sweep, concept {concept}"),
        "t' (reversed rungs)",
        "fraction",
        &series,
    )
}

pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: EvalReport,
    pub deviation: DeviationProfile,
}

/// Erase the target once per variant and evaluate each result.
pub fn ablation_rows(ws: &Workspace, model: &ModelParams, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    let schedule = ws.cfg.noise_schedule()?;
    let target = ws.cfg.ant.target;
    let data = concept_points(ws, target)?;
    variants
        .par_iter()
        .map(|&variant| {
            let cfg = AntLossConfig {
                variant,
                ..ws.cfg.ant_config(&schedule)
            };
            let out = erase_single(model, &schedule, target, &cfg, None, data.as_deref())?;
            let report = eval_report(ws, &out.params, &[target])?;
            let deviation = measure_deviation(ws, &out.params, model, &schedule, &cfg, data.as_deref())?;
            Ok(AblationRow {
                variant,
                report,
                deviation,
            })
        })
        .collect()
}

pub fn ablate_cmd(ws: &Workspace) -> Result<Outcome> {
    let inputs = data_inputs(ws, &[MODEL]);
    ws.run_stage("ablate", &ns(&["ant", "eval"]), &inputs, || {
        let model = load_model(ws, MODEL)?;
        let rows = ablation_rows(ws, &model, &ws.cfg.eval.ablation_variants)?;
        let mut csv = String::from(
            "variant,acc_e,acc_p,h_c,off_manifold_frac,dev_cond_early,dev_cond_late,dev_uncond\n",
        );
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                r.variant.name(),
                fmt_f64(r.report.acc_e),
                fmt_f64(r.report.acc_p),
                fmt_f64(r.report.h_c),
                fmt_f64(r.report.off_manifold_frac),
                fmt_f64(r.deviation.cond_early),
                fmt_f64(r.deviation.cond_late),
                fmt_f64(r.deviation.uncond)
            );
        }
        Ok(vec![art(ABLATION, csv)])
    })
}

/// Parsed CSV: header names and rows of strings.
struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(dir: &Path, name: &str) -> Result<Self> {
        let p = dir.join(name);
        let file = p.display().to_string();
        let mut rdr = csv::Reader::from_path(&p).with_context(|| format!("cannot read {file}"))?;
        let headers = rdr
            .headers()
            .with_context(|| format!("malformed CSV {file}"))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .with_context(|| format!("malformed CSV {file}"))?;
        Ok(Self { file, headers, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("malformed CSV {}: no column `{name}`", self.file))
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let s = &self.rows[row][col];
        s.parse()
            .map_err(|_| anyhow!("malformed CSV {}: row {} has non-numeric {s:?}", self.file, row + 2))
    }

    fn xy(&self, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
        let (cx, cy) = (self.col(x)?, self.col(y)?);
        (0..self.rows.len()).map(|r| Ok((self.num(r, cx)?, self.num(r, cy)?))).collect()
    }
}

fn trajectory_svg(ws: &Workspace, table: &Table) -> Result<String> {
    let (cc, cs, cx, cy) = (table.col("chain")?, table.col("step")?, table.col("x")?, table.col("y")?);
    let mut chains: Vec<Vec<Point>> = Vec::new();
    for r in 0..table.rows.len() {
        let chain = table.num(r, cc)? as usize;
        let step = table.num(r, cs)? as usize;
        if chain == chains.len() && step == 0 {
            chains.push(Vec::new());
        }
        let c = chains
            .get_mut(chain)
            .ok_or_else(|| anyhow!("malformed CSV {}: chains out of order at row {}", table.file, r + 2))?;
        c.push([table.num(r, cx)?, table.num(r, cy)?]);
    }
    let spec = ws.cfg.mixture()?;
    let labels: Vec<usize> = chains
        .iter()
        .map(|c| c.last().map_or(0, |&p| bayes_classify(&spec, p)))
        .collect();
    Ok(plot::trajectory_plot(
        &format!("Sampling trajectories, concept {}", ws.cfg.ant.target),
        &chains,
        &labels,
        &spec.centers,
    ))
}

/// Render every plot whose CSV is present in the run directory.
pub fn plot_cmd(ws: &Workspace) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let simple: [(&str, &str, &str, &str, &str); 2] = [
        (PRETRAIN_LOSS, "pretrain_loss.svg", "step", "loss", "Pretraining loss"),
        (SALIENCY_CURVE, "saliency_curve.svg", "n_maps", "active_params", "Saliency intersection"),
    ];
    for (csv, svg, x, y, title) in simple {
        if exists(&ws.dir, csv) {
            let t = Table::read(&ws.dir, csv)?;
            let s = Series {
                name: y.to_string(),
                color: PALETTE[0],
                points: t.xy(x, y)?,
            };
            ws.write(svg, plot::line_chart(title, x, y, &[s]).as_bytes())?;
            written.push(svg.to_string());
        }
    }
    if exists(&ws.dir, SWEEP) {
        let t = Table::read(&ws.dir, SWEEP)?;
        let (a, b, c, d) = (
            t.col("t_prime")?,
            t.col("guidance_scale")?,
            t.col("frac_classified_as_target")?,
            t.col("off_manifold_frac")?,
        );
        let rows = (0..t.rows.len())
            .map(|r| Ok((t.num(r, a)? as usize, t.num(r, b)?, t.num(r, c)?, t.num(r, d)?)))
            .collect::<Result<Vec<_>>>()?;
        ws.write(SWEEP_SVG, sweep_svg(&rows, ws.cfg.eval.sweep_concept).as_bytes())?;
        written.push(SWEEP_SVG.to_string());
    }
    if exists(&ws.dir, TRAJECTORY) {
        let t = Table::read(&ws.dir, TRAJECTORY)?;
        ws.write("trajectories.svg", trajectory_svg(ws, &t)?.as_bytes())?;
        written.push("trajectories.svg".to_string());
    }
    if written.is_empty() {
        bail!("no CSV artifacts to plot in {}", ws.dir.display());
    }
    Ok(written)
}

fn summary(ws: &Workspace, artifacts: &[&str]) -> Result<String> {
    let mut out = String::from("key,value\n");
    let erased: Vec<String> = ws.cfg.erased_concepts().iter().map(ToString::to_string).collect();
    let _ = writeln!(out, "erased,{}", erased.join(";"));
    let t = Table::read(&ws.dir, EVAL_REPORT)?;
    let row = t
        .rows
        .iter()
        .position(|r| r.first().is_some_and(|v| v == "aggregate"))
        .ok_or_else(|| anyhow!("malformed CSV {}: no aggregate row", t.file))?;
    for (key, col) in [("acc_e", "acc"), ("acc_p", "acc_p"), ("h_c", "h_c"), ("off_manifold_frac", "off_manifold_frac")] {
        let _ = writeln!(out, "{key},{}", fmt_f64(t.num(row, t.col(col)?)?));
    }
    if exists(&ws.dir, MASK) {
        let m = SaliencyMask::from_text(&ws.read(MASK)?)?;
        let _ = writeln!(out, "mask_active_params,{}", m.active());
        let _ = writeln!(out, "mask_fraction,{}", fmt_f64(m.active() as f64 / m.len() as f64));
    }
    for name in artifacts {
        let bytes = std::fs::read(ws.path(name)).with_context(|| format!("missing artifact {name}"))?;
        let _ = writeln!(out, "sha256:{name},{}", sha256_bytes(&bytes));
    }
    Ok(out)
}

/// gen-data, pretrain, saliency, erase (or erase-multi), eval, sample, plot,
/// then `summary.csv`.
pub fn pipeline(ws: &Workspace) -> Result<()> {
    type StageFn = fn(&Workspace) -> Result<Outcome>;
    let erase: (&str, StageFn, &str) = if ws.cfg.fuse.enabled {
        ("erase-multi", erase_multi_cmd, FUSED)
    } else {
        ("erase", erase_cmd, ERASED)
    };
    let stages: [(&str, StageFn, &str); 6] = [
        ("gen-data", gen_data, DATASET),
        ("pretrain", pretrain_cmd, MODEL),
        ("saliency", saliency_cmd, MASK),
        erase,
        ("eval", eval_cmd, EVAL_REPORT),
        ("sample", |w| sample_cmd(w, None), TRAJECTORY),
    ];
    let mut last_good = "none".to_string();
    for (name, f, product) in stages {
        f(ws).with_context(|| format!("stage `{name}` failed; last good artifact: {last_good}"))?;
        last_good = product.to_string();
    }
    plot_cmd(ws).with_context(|| format!("stage `plot` failed; last good artifact: {last_good}"))?;
    let mut artifacts = vec![DATASET, MODEL, PRETRAIN_LOSS, MASK, SALIENCY_CURVE];
    if ws.cfg.fuse.enabled {
        artifacts.extend([FUSED, FUSION_REPORT]);
    } else {
        artifacts.extend([ERASED, ERASE_LOG, DEVIATION]);
    }
    artifacts.extend([EVAL_REPORT, SAMPLES, TRAJECTORY]);
    let text = summary(ws, &artifacts)?;
    ws.write(SUMMARY, text.as_bytes())?;
    Ok(())
}
