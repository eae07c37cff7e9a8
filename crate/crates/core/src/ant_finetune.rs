//! Trajectory-aware erasure loss and the single-concept finetuning driver.
//!
//! Each loss evaluation draws one timestep above the reversal point (`t1`,
//! early in the sampling trajectory) and one at or below it (`t2`, late).
//! The conditional output is pulled towards the teacher's ordinary guidance
//! direction at `t1` and towards the reversed direction at `t2`; the
//! unconditional output is pinned to the teacher at both.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffusion::{cfg_combine, ddim_step, forward_noise, map_t_prime, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::score_net::{
    clone_frozen, forward_batch, weighted_loss_and_grad, Cond, FrozenParams, GradTarget,
    LoraAdapter, ModelParams, NetInput, TrainItem,
};
use crate::synth_data::Point;
use crate::util::{self, derive_seed, fmt_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    /// Teacher CFG-DDIM from `z_T` down to the requested timestep.
    TeacherPartialDdim,
    /// A data point of the concept noised with `forward_noise`.
    NoisedData,
}

impl LatentSource {
    pub fn name(self) -> &'static str {
        match self {
            LatentSource::TeacherPartialDdim => "teacher_partial_ddim",
            LatentSource::NoisedData => "noised_data",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher_partial_ddim" => Ok(LatentSource::TeacherPartialDdim),
            "noised_data" => Ok(LatentSource::NoisedData),
            _ => Err(Error::invalid(format!("unknown latent source `{s}`"))),
        }
    }
}

/// Which loss terms are active. `erase_all` draws the erase timestep from the
/// whole range `1..=T` instead of `1..=t′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermToggles {
    pub erase_all: bool,
    pub erase_late: bool,
    pub preserve: bool,
    pub uncond_early: bool,
    pub uncond_late: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    A,
    B,
    C,
    D,
    E,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::A,
        AblationVariant::B,
        AblationVariant::C,
        AblationVariant::D,
        AblationVariant::E,
        AblationVariant::Full,
    ];

    pub fn toggles(self) -> TermToggles {
        let none = TermToggles {
            erase_all: false,
            erase_late: false,
            preserve: false,
            uncond_early: false,
            uncond_late: false,
        };
        match self {
            AblationVariant::A => TermToggles {
                erase_all: true,
                ..none
            },
            AblationVariant::B => TermToggles {
                erase_all: true,
                uncond_early: true,
                uncond_late: true,
                ..none
            },
            AblationVariant::C => TermToggles {
                erase_late: true,
                ..none
            },
            AblationVariant::D => TermToggles {
                erase_late: true,
                uncond_late: true,
                ..none
            },
            AblationVariant::E => TermToggles {
                erase_late: true,
                preserve: true,
                ..none
            },
            AblationVariant::Full => TermToggles {
                erase_all: false,
                erase_late: true,
                preserve: true,
                uncond_early: true,
                uncond_late: true,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::A => "A",
            AblationVariant::B => "B",
            AblationVariant::C => "C",
            AblationVariant::D => "D",
            AblationVariant::E => "E",
            AblationVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eta: f64,
    /// Reversal point on the training schedule.
    pub t_prime_train: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent_source: LatentSource,
    /// Latent pairs per gradient step.
    pub batch: usize,
    /// Guidance scale of the teacher sampler that produces latents.
    pub latent_scale: f64,
    pub n_infer_steps: usize,
    pub variant: AblationVariant,
}

impl AntLossConfig {
    fn preset(
        schedule: &NoiseSchedule,
        l1: f64,
        l2: f64,
        l3: f64,
        t_prime: usize,
        steps: usize,
    ) -> Self {
        let n_infer = 50;
        Self {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            eta: 1.0,
            t_prime_train: map_t_prime(t_prime, n_infer, schedule.t_max()),
            steps,
            lr: 5e-4,
            seed: 0,
            latent_source: LatentSource::TeacherPartialDdim,
            batch: 1,
            latent_scale: 3.0,
            n_infer_steps: n_infer,
            variant: AblationVariant::Full,
        }
    }

    /// λ = (1, 0.5, 0.5), t′ = 43 of 50, 250 steps.
    pub fn nsfw(schedule: &NoiseSchedule) -> Self {
        Self::preset(schedule, 1.0, 0.5, 0.5, 43, 250)
    }

    /// λ = (0.4, 0.5, 0.2), t′ = 40 of 50, 400 steps.
    pub fn celebrity(schedule: &NoiseSchedule) -> Self {
        Self::preset(schedule, 0.4, 0.5, 0.2, 40, 400)
    }

    /// λ = (0.4, 0.5, 0.2), t′ = 47 of 50, 400 steps.
    pub fn art(schedule: &NoiseSchedule) -> Self {
        Self::preset(schedule, 0.4, 0.5, 0.2, 47, 400)
    }

    /// NSFW weights and reversal point with the optimizer budget that erases
    /// on the 2-D toy: 64 latent pairs per step, 1000 steps at lr 5e-3.
    pub fn toy(schedule: &NoiseSchedule) -> Self {
        Self {
            batch: 64,
            steps: 1000,
            lr: 5e-3,
            ..Self::nsfw(schedule)
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !self.eta.is_finite() {
            return Err(Error::invalid("eta must be finite"));
        }
        if self.t_prime_train > schedule.t_max() {
            return Err(Error::invalid(format!(
                "t_prime_train {} exceeds T = {}",
                self.t_prime_train,
                schedule.t_max()
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("ant batch must be at least 1"));
        }
        if self.n_infer_steps == 0 || schedule.t_max() % self.n_infer_steps != 0 {
            return Err(Error::invalid(format!(
                "n_infer_steps {} must divide T = {}",
                self.n_infer_steps,
                schedule.t_max()
            )));
        }
        Ok(())
    }
}

/// The frozen teacher plus everything needed to build latents.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub frozen: &'a FrozenParams,
    pub schedule: &'a NoiseSchedule,
    /// Data points of the erased concept, required for [`LatentSource::NoisedData`].
    pub data: Option<&'a [Point]>,
}

fn teacher_pair(
    frozen: &ModelParams,
    schedule: &NoiseSchedule,
    z: &[Point],
    ts: &[usize],
    cond: Cond,
) -> Result<(Vec<Point>, Vec<Point>)> {
    let n = z.len();
    let mut inputs = Vec::with_capacity(2 * n);
    for (&z, &t) in z.iter().zip(ts) {
        inputs.push(NetInput {
            z,
            t_norm: schedule.t_norm(t),
            cond: Cond::NULL,
        });
    }
    for (&z, &t) in z.iter().zip(ts) {
        inputs.push(NetInput {
            z,
            t_norm: schedule.t_norm(t),
            cond,
        });
    }
    let mut out = forward_batch(frozen, &inputs, None)?;
    let cond_out = out.split_off(n);
    Ok((out, cond_out))
}

/// Teacher latents for a batch of chains. Chain `i` starts at `z_T[i]` and
/// follows the guided DDIM ladder; for every requested timestep in
/// `targets[i]` the state is taken from the rung at or above it plus one
/// DDIM step that lands exactly on it (same transitions as
/// [`crate::diffusion::partial_steps`]).
pub fn teacher_latents(
    frozen: &ModelParams,
    schedule: &NoiseSchedule,
    cond: Cond,
    scale: f64,
    n_infer_steps: usize,
    z_t: &[Point],
    targets: &[Vec<usize>],
) -> Result<Vec<Vec<Point>>> {
    let t_max = schedule.t_max();
    let stride = (t_max / n_infer_steps.max(1)).max(1);
    let mut out: Vec<Vec<Point>> = targets.iter().map(|t| vec![[0.0; 2]; t.len()]).collect();
    let lowest = targets.iter().flatten().copied().min().unwrap_or(t_max);
    if targets.iter().flatten().any(|&t| t > t_max) {
        return Err(Error::invalid("latent timestep exceeds T"));
    }
    let mut z = z_t.to_vec();
    let mut t = t_max;
    loop {
        let pending: Vec<(usize, usize, usize)> = targets
            .iter()
            .enumerate()
            .flat_map(|(i, ts)| ts.iter().enumerate().map(move |(j, &tau)| (i, j, tau)))
            .filter(|&(_, _, tau)| tau <= t && tau + stride > t)
            .collect();
        let need_step = t > lowest && t >= stride;
        if pending.iter().all(|&(_, _, tau)| tau == t) && !need_step {
            for (i, j, _) in pending {
                out[i][j] = z[i];
            }
            break;
        }
        let (u, c) = teacher_pair(frozen, schedule, &z, &vec![t; z.len()], cond)?;
        let eps: Vec<Point> = u.iter().zip(&c).map(|(&u, &c)| cfg_combine(u, c, scale, 1.0)).collect();
        for (i, j, tau) in pending {
            out[i][j] = if tau == t {
                z[i]
            } else {
                ddim_step(schedule, z[i], t, tau, eps[i])?
            };
        }
        if !need_step {
            break;
        }
        let next = t - stride;
        for (zi, e) in z.iter_mut().zip(&eps) {
            *zi = ddim_step(schedule, *zi, t, next, *e)?;
        }
        t = next;
    }
    for p in out.iter().flatten() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::NonFinite {
                stage: "make_latents",
                detail: format!("latent {p:?}"),
            });
        }
    }
    Ok(out)
}

/// One latent `z_t` for `cond`, drawn from the configured source.
pub fn make_latents(
    teacher: &Teacher<'_>,
    cond: Cond,
    t: usize,
    seed: u64,
    cfg: &AntLossConfig,
) -> Result<Point> {
    if t == 0 || t > teacher.schedule.t_max() {
        return Err(Error::invalid(format!("latent timestep {t} outside 1..=T")));
    }
    let mut rng = util::rng(seed);
    Ok(draw_latents(teacher, cond, &[vec![t]], cfg, &mut rng)?[0][0])
}

fn draw_latents(
    teacher: &Teacher<'_>,
    cond: Cond,
    targets: &[Vec<usize>],
    cfg: &AntLossConfig,
    rng: &mut util::Rng,
) -> Result<Vec<Vec<Point>>> {
    match cfg.latent_source {
        LatentSource::TeacherPartialDdim => {
            let z_t: Vec<Point> = targets
                .iter()
                .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
                .collect();
            teacher_latents(
                teacher.frozen,
                teacher.schedule,
                cond,
                cfg.latent_scale,
                cfg.n_infer_steps,
                &z_t,
                targets,
            )
        }
        LatentSource::NoisedData => {
            let data = teacher
                .data
                .filter(|d| !d.is_empty())
                .ok_or_else(|| Error::invalid("noised_data latents need concept data"))?;
            targets
                .iter()
                .map(|ts| {
                    let x0 = data[rng.random_range(0..data.len())];
                    ts.iter()
                        .map(|&t| {
                            let eps = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                            forward_noise(teacher.schedule, x0, t, eps)
                        })
                        .collect()
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Preserve,
    Erase,
    UncondEarly,
    UncondLate,
}

/// Per-term loss values (already multiplied by their λ, averaged over the batch).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermValues {
    pub preserve: f64,
    pub erase: f64,
    pub uncond_early: f64,
    pub uncond_late: f64,
}

impl TermValues {
    pub fn total(&self) -> f64 {
        self.preserve + self.erase + self.uncond_early + self.uncond_late
    }

    fn add(&mut self, term: Term, v: f64) {
        match term {
            Term::Preserve => self.preserve += v,
            Term::Erase => self.erase += v,
            Term::UncondEarly => self.uncond_early += v,
            Term::UncondLate => self.uncond_late += v,
        }
    }
}

/// A fully materialized loss evaluation: latents and stop-gradient targets are
/// constants, so the loss is a weighted regression over `items`.
#[derive(Debug, Clone, PartialEq)]
pub struct AntBatch {
    pub items: Vec<TrainItem>,
    pub terms: Vec<Term>,
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
}

impl AntBatch {
    pub fn loss_and_grad(
        &self,
        live: &ModelParams,
        adapter: Option<&LoraAdapter>,
        target: GradTarget,
    ) -> Result<(f64, Vec<f64>)> {
        weighted_loss_and_grad(live, &self.items, adapter, target)
    }

    pub fn term_values(&self, live: &ModelParams, adapter: Option<&LoraAdapter>) -> Result<TermValues> {
        let inputs: Vec<NetInput> = self.items.iter().map(|it| it.input).collect();
        let out = forward_batch(live, &inputs, adapter)?;
        let mut tv = TermValues::default();
        for ((it, term), o) in self.items.iter().zip(&self.terms).zip(&out) {
            let d0 = o[0] - it.target[0];
            let d1 = o[1] - it.target[1];
            tv.add(*term, it.weight * (d0 * d0 + d1 * d1));
        }
        Ok(tv)
    }
}

/// Build one loss evaluation for `cond`: draw `t1`, `t2`, the latents, and the
/// teacher targets.
pub fn prepare_batch(
    teacher: &Teacher<'_>,
    cond: Cond,
    cfg: &AntLossConfig,
    rng: &mut util::Rng,
) -> Result<AntBatch> {
    let t_max = teacher.schedule.t_max();
    let tp = cfg.t_prime_train;
    let tog = cfg.variant.toggles();
    let has_early = tp < t_max;
    let erase_hi = if tog.erase_all { t_max } else { tp };
    let has_late = erase_hi >= 1;
    let use_early = has_early && (tog.preserve || tog.uncond_early);
    let use_late = has_late && (tog.erase_all || tog.erase_late || tog.uncond_late);
    if !has_early && (tog.preserve || tog.uncond_early) {
        log::debug!("t′ = T: early-range terms skipped");
    }
    if !has_late && (tog.erase_late || tog.uncond_late) {
        log::debug!("t′ = 0: late-range terms skipped");
    }
    let b = cfg.batch;
    let mut t1 = Vec::with_capacity(b);
    let mut t2 = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for _ in 0..b {
        let mut ts = Vec::new();
        if use_early {
            let t = rng.random_range(tp + 1..=t_max);
            t1.push(t);
            ts.push(t);
        }
        if use_late {
            let t = rng.random_range(1..=erase_hi);
            t2.push(t);
            ts.push(t);
        }
        targets.push(ts);
    }
    if !use_early && !use_late {
        return Ok(AntBatch {
            items: Vec::new(),
            terms: Vec::new(),
            t1,
            t2,
        });
    }
    let latents = draw_latents(teacher, cond, &targets, cfg, rng)?;
    let mut zs = Vec::with_capacity(2 * b);
    let mut ts = Vec::with_capacity(2 * b);
    let mut early_slot = Vec::with_capacity(2 * b);
    for (lat, tt) in latents.iter().zip(&targets) {
        zs.extend_from_slice(lat);
        ts.extend_from_slice(tt);
        if use_early {
            early_slot.push(true);
        }
        if use_late {
            early_slot.push(false);
        }
    }
    let (eu, ec) = teacher_pair(teacher.frozen, teacher.schedule, &zs, &ts, cond)?;
    let w = 1.0 / b as f64;
    let eta = cfg.eta;
    let mut items = Vec::new();
    let mut terms = Vec::new();
    let mut push = |z: Point, t: usize, cond: Cond, target: Point, weight: f64, term: Term| {
        if weight > 0.0 {
            items.push(TrainItem {
                input: NetInput {
                    z,
                    t_norm: teacher.schedule.t_norm(t),
                    cond,
                },
                target,
                weight: weight * w,
            });
            terms.push(term);
        }
    };
    for (idx, (&z, &t)) in zs.iter().zip(&ts).enumerate() {
        let u = eu[idx];
        let c = ec[idx];
        let delta = [c[0] - u[0], c[1] - u[1]];
        let is_early = early_slot[idx];
        if is_early {
            if tog.preserve {
                push(z, t, cond, [u[0] + eta * delta[0], u[1] + eta * delta[1]], 1.0, Term::Preserve);
            }
            if tog.uncond_early {
                push(z, t, Cond::NULL, u, cfg.lambda2, Term::UncondEarly);
            }
        } else {
            if tog.erase_all || tog.erase_late {
                push(z, t, cond, [u[0] - eta * delta[0], u[1] - eta * delta[1]], cfg.lambda1, Term::Erase);
            }
            if tog.uncond_late {
                push(z, t, Cond::NULL, u, cfg.lambda3, Term::UncondLate);
            }
        }
    }
    Ok(AntBatch { items, terms, t1, t2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntLossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub terms: TermValues,
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
}

/// Draw one loss evaluation and return its value, gradient, and per-term values.
pub fn ant_loss(
    live: &ModelParams,
    adapter: Option<&LoraAdapter>,
    grad_target: GradTarget,
    teacher: &Teacher<'_>,
    cond: Cond,
    cfg: &AntLossConfig,
    rng: &mut util::Rng,
) -> Result<AntLossOutput> {
    let batch = prepare_batch(teacher, cond, cfg, rng)?;
    let (loss, grad) = if batch.items.is_empty() {
        let len = match (grad_target, adapter) {
            (GradTarget::Adapter, Some(a)) => a.n_params(),
            _ => live.len(),
        };
        (0.0, vec![0.0; len])
    } else {
        batch.loss_and_grad(live, adapter, grad_target)?
    };
    let terms = batch.term_values(live, adapter)?;
    Ok(AntLossOutput {
        loss,
        grad,
        terms,
        t1: batch.t1,
        t2: batch.t2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EraseLogRow {
    pub step: usize,
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    pub terms: TermValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EraseOutput {
    pub params: ModelParams,
    pub log: Vec<EraseLogRow>,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
}

/// `erase_log.csv`. With a batch larger than one, `t1`/`t2` are those of the
/// first latent pair.
pub fn erase_log_csv(rows: &[EraseLogRow]) -> String {
    let mut out = String::from("step,t1,t2,L_preserve,L_erase,L_uncond_early,L_uncond_late,total\n");
    let opt = |t: Option<usize>| t.map(|t| t.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            opt(r.t1),
            opt(r.t2),
            fmt_f64(r.terms.preserve),
            fmt_f64(r.terms.erase),
            fmt_f64(r.terms.uncond_early),
            fmt_f64(r.terms.uncond_late),
            fmt_f64(r.terms.total())
        );
    }
    out
}

/// The condition that erasure targets and evaluation samples with.
pub fn erase_cond(concept: usize) -> Cond {
    Cond::concept(concept)
}

/// Finetune `pretrained` so that `target_concept` is erased. With a mask, only
/// the masked coordinates are updated.
pub fn erase_single(
    pretrained: &ModelParams,
    schedule: &NoiseSchedule,
    target_concept: usize,
    cfg: &AntLossConfig,
    mask: Option<&[bool]>,
    data: Option<&[Point]>,
) -> Result<EraseOutput> {
    cfg.validate(schedule)?;
    if target_concept >= pretrained.config.n_concepts {
        return Err(Error::invalid(format!(
            "concept {target_concept} outside vocabulary of {}",
            pretrained.config.n_concepts
        )));
    }
    let frozen = clone_frozen(pretrained);
    let before = frozen.recorded_checksum().to_string();
    let teacher = Teacher {
        frozen: &frozen,
        schedule,
        data,
    };
    let mut live = pretrained.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = match mask {
        Some(m) => {
            if m.len() != live.len() {
                return Err(Error::invalid(format!(
                    "mask length {} does not match parameter count {}",
                    m.len(),
                    live.len()
                )));
            }
            Adam::masked(adam, m)?
        }
        None => Adam::new(adam, live.len())?,
    };
    let cond = erase_cond(target_concept);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut rng = util::rng(derive_seed(cfg.seed, 0xE7A5E, step as u64));
        let out = ant_loss(&live, None, GradTarget::Base, &teacher, cond, cfg, &mut rng)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: out.loss,
                last_good: Box::new(live),
            });
        }
        opt.step(&mut live.flat, &out.grad)?;
        log.push(EraseLogRow {
            step,
            t1: out.t1.first().copied(),
            t2: out.t2.first().copied(),
            terms: out.terms,
        });
    }
    let after = frozen.current_checksum();
    if after != before {
        return Err(Error::invalid("frozen teacher changed during erasure"));
    }
    Ok(EraseOutput {
        params: live,
        log,
        teacher_checksum_before: before,
        teacher_checksum_after: after,
    })
}

/// Mean output deviation from the teacher, split at the reversal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationProfile {
    /// Conditional deviation for `t > t′` (early in the sampling trajectory).
    pub cond_early: f64,
    /// Conditional deviation for `t ≤ t′` (late in the sampling trajectory).
    pub cond_late: f64,
    /// Unconditional deviation over both ranges.
    pub uncond: f64,
}

/// Measure `‖ε_θ − ε_θ*‖` on `n_probe` teacher latents per range.
pub fn deviation_profile(
    live: &ModelParams,
    teacher: &Teacher<'_>,
    cond: Cond,
    cfg: &AntLossConfig,
    n_probe: usize,
    seed: u64,
) -> Result<DeviationProfile> {
    let t_max = teacher.schedule.t_max();
    let tp = cfg.t_prime_train;
    if tp == 0 || tp >= t_max {
        return Err(Error::invalid("deviation profile needs 0 < t′ < T"));
    }
    let mut rng = util::rng(seed);
    let targets: Vec<Vec<usize>> = (0..n_probe)
        .map(|_| vec![rng.random_range(tp + 1..=t_max), rng.random_range(1..=tp)])
        .collect();
    let latents = draw_latents(teacher, cond, &targets, cfg, &mut rng)?;
    let mut inputs = Vec::new();
    for (lat, ts) in latents.iter().zip(&targets) {
        for (&z, &t) in lat.iter().zip(ts) {
            let t_norm = teacher.schedule.t_norm(t);
            inputs.push(NetInput { z, t_norm, cond });
            inputs.push(NetInput {
                z,
                t_norm,
                cond: Cond::NULL,
            });
        }
    }
    let a = forward_batch(live, &inputs, None)?;
    let b = forward_batch(teacher.frozen, &inputs, None)?;
    let dist = |i: usize| ((a[i][0] - b[i][0]).powi(2) + (a[i][1] - b[i][1]).powi(2)).sqrt();
    let (mut ce, mut cl, mut un) = (0.0, 0.0, 0.0);
    for p in 0..n_probe {
        let base = 4 * p;
        ce += dist(base);
        un += dist(base + 1);
        cl += dist(base + 2);
        un += dist(base + 3);
    }
    let n = n_probe as f64;
    Ok(DeviationProfile {
        cond_early: ce / n,
        cond_late: cl / n,
        uncond: un / (2.0 * n),
    })
}
