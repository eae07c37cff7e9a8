//! Gradient saliency masks over the flat parameter vector.
//!
//! A single map keeps the coordinates whose erasure-loss gradient magnitude is
//! in the top `1 − q` fraction for one (context, seed) pair. The concept mask
//! is the intersection of such maps over many contexts and seeds.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::ant_finetune::{ant_loss, AntLossConfig, Teacher};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::score_net::{Cond, GradTarget, ModelParams};
use crate::util::{self, derive_seed};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskMeta {
    pub n_maps: usize,
    pub gamma_rule: String,
    /// `(concept, context)` pairs the maps were built from.
    pub prompts: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
    /// True when the intersection was empty and the pooled fallback was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    pub bits: Vec<bool>,
    pub meta: MaskMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyConfig {
    pub n_prompts: usize,
    pub n_seeds: usize,
    pub gamma_quantile: f64,
    pub seed: u64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            n_prompts: 20,
            n_seeds: 5,
            gamma_quantile: 0.9,
            seed: 0,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 || self.n_seeds == 0 {
            return Err(Error::invalid("saliency needs at least one prompt and one seed"));
        }
        if !(self.gamma_quantile > 0.0 && self.gamma_quantile < 1.0) {
            return Err(Error::invalid(format!(
                "gamma_quantile must lie in (0, 1), got {}",
                self.gamma_quantile
            )));
        }
        Ok(())
    }
}

impl SaliencyMask {
    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Adam whose state covers only the masked coordinates.
    pub fn optimizer(&self, cfg: AdamConfig) -> Result<Adam> {
        Adam::masked(cfg, &self.bits)
    }
}

/// `1(|g_i| ≥ γ)` for an absolute threshold.
pub fn threshold_mask(grad: &[f64], gamma: f64) -> Vec<bool> {
    grad.iter().map(|g| g.abs() >= gamma).collect()
}

/// Threshold at the `q`-quantile of `|g|`: the `⌈(1−q)·P⌉` largest magnitudes
/// (plus ties) are kept. Exact zeros are never kept.
pub fn quantile_mask(grad: &[f64], q: f64) -> Result<(Vec<bool>, f64)> {
    if grad.is_empty() {
        return Err(Error::invalid("empty gradient"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            stage: "saliency",
            detail: "gradient has non-finite entries".into(),
        });
    }
    if grad.iter().all(|&g| g == 0.0) {
        return Err(Error::DegenerateMask("gradient is identically zero".into()));
    }
    let mut mags: Vec<f64> = grad.iter().map(|g| g.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let p = mags.len();
    let keep = (((1.0 - q) * p as f64).ceil() as usize).clamp(1, p);
    let gamma = mags[p - keep];
    let bits = grad.iter().map(|g| g.abs() >= gamma && *g != 0.0).collect();
    Ok((bits, gamma))
}

fn map_gradient(
    params: &ModelParams,
    teacher: &Teacher<'_>,
    cond: Cond,
    seed: u64,
    loss_cfg: &AntLossConfig,
) -> Result<Vec<f64>> {
    let mut rng = util::rng(seed);
    Ok(ant_loss(params, None, GradTarget::Base, teacher, cond, loss_cfg, &mut rng)?.grad)
}

/// One map for `(target_concept, context)` under `seed`.
pub fn single_map(
    params: &ModelParams,
    teacher: &Teacher<'_>,
    target_concept: usize,
    context: usize,
    seed: u64,
    loss_cfg: &AntLossConfig,
    q: f64,
) -> Result<SaliencyMask> {
    let cond = Cond::with_context(target_concept, context);
    let grad = map_gradient(params, teacher, cond, seed, loss_cfg)?;
    let (bits, _) = quantile_mask(&grad, q)?;
    Ok(SaliencyMask {
        bits,
        meta: MaskMeta {
            n_maps: 1,
            gamma_rule: gamma_rule(q),
            prompts: vec![(target_concept, context)],
            seeds: vec![seed],
            fallback: false,
        },
    })
}

fn gamma_rule(q: f64) -> String {
    format!("quantile q={q}")
}

/// Bitwise AND of all masks.
pub fn intersect(masks: &[SaliencyMask]) -> Result<SaliencyMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("intersect needs at least one mask"))?;
    let mut bits = first.bits.clone();
    let mut prompts = Vec::new();
    let mut seeds = Vec::new();
    let mut n_maps = 0;
    for m in masks {
        if m.bits.len() != bits.len() {
            return Err(Error::invalid(format!(
                "mask lengths differ: {} vs {}",
                m.bits.len(),
                bits.len()
            )));
        }
        for (b, &o) in bits.iter_mut().zip(&m.bits) {
            *b &= o;
        }
        n_maps += m.meta.n_maps;
        prompts.extend_from_slice(&m.meta.prompts);
        seeds.extend_from_slice(&m.meta.seeds);
    }
    Ok(SaliencyMask {
        bits,
        meta: MaskMeta {
            n_maps,
            gamma_rule: first.meta.gamma_rule.clone(),
            prompts,
            seeds,
            fallback: false,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub mask: SaliencyMask,
    /// Active count after intersecting the first `n` maps, `n = 1..`.
    pub curve: Vec<(usize, usize)>,
    pub per_map_active: Vec<usize>,
}

impl ConceptMask {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("n_maps,active_params\n");
        for (n, a) in &self.curve {
            let _ = writeln!(out, "{n},{a}");
        }
        out
    }
}

/// Seed of map `(context index, seed index)`.
pub fn map_seed(base: u64, context: usize, seed_index: usize) -> u64 {
    derive_seed(base, 0x5A11 + context as u64, seed_index as u64)
}

/// Intersect `n_prompts × n_seeds` single maps for `target_concept`, contexts
/// `0..n_prompts`. Maps are ordered context-major. If the intersection comes
/// out empty, the fallback keeps the top `1 − q` coordinates of the mean
/// gradient magnitude over all maps.
pub fn build_concept_mask(
    params: &ModelParams,
    teacher: &Teacher<'_>,
    target_concept: usize,
    cfg: &SaliencyConfig,
    loss_cfg: &AntLossConfig,
) -> Result<ConceptMask> {
    cfg.validate()?;
    let n_ctx = params.config.n_contexts;
    if n_ctx < cfg.n_prompts {
        return Err(Error::invalid(format!(
            "saliency needs {} contexts but the vocabulary has {n_ctx}",
            cfg.n_prompts
        )));
    }
    let jobs: Vec<(usize, u64)> = (0..cfg.n_prompts)
        .flat_map(|c| (0..cfg.n_seeds).map(move |j| (c, map_seed(cfg.seed, c, j))))
        .collect();
    let grads: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            map_gradient(params, teacher, Cond::with_context(target_concept, c), seed, loss_cfg)
        })
        .collect::<Result<_>>()?;
    let mut bits = vec![true; params.len()];
    let mut curve = Vec::with_capacity(grads.len());
    let mut per_map_active = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        let (m, _) = quantile_mask(g, cfg.gamma_quantile)?;
        per_map_active.push(m.iter().filter(|&&b| b).count());
        for (b, o) in bits.iter_mut().zip(&m) {
            *b &= *o;
        }
        curve.push((i + 1, bits.iter().filter(|&&b| b).count()));
    }
    let mut fallback = false;
    if bits.iter().all(|&b| !b) {
        log::warn!("saliency intersection is empty; using the pooled top-(1-q) fallback");
        let mut mean = vec![0.0; params.len()];
        for g in &grads {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v.abs();
            }
        }
        bits = quantile_mask(&mean, cfg.gamma_quantile)?.0;
        fallback = true;
    }
    Ok(ConceptMask {
        mask: SaliencyMask {
            bits,
            meta: MaskMeta {
                n_maps: jobs.len(),
                gamma_rule: gamma_rule(cfg.gamma_quantile),
                prompts: jobs.iter().map(|&(c, _)| (target_concept, c)).collect(),
                seeds: jobs.iter().map(|&(_, s)| s).collect(),
                fallback,
            },
        },
        curve,
        per_map_active,
    })
}

/// One optimizer step restricted to the mask the optimizer was built with.
pub fn masked_update(params: &mut [f64], grad: &[f64], opt: &mut Adam) -> Result<()> {
    opt.step(params, grad)
}

const MASK_MAGIC: &str = "# ant-lab saliency mask v1";

impl SaliencyMask {
    /// Run-length text format: header lines, then one `start length` line per
    /// run of active coordinates.
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "{MASK_MAGIC}");
        let _ = writeln!(out, "len={}", self.bits.len());
        let _ = writeln!(out, "active={}", self.active());
        let _ = writeln!(out, "n_maps={}", m.n_maps);
        let _ = writeln!(out, "gamma_rule={}", m.gamma_rule);
        let prompts: Vec<String> = m.prompts.iter().map(|(k, c)| format!("{k}:{c}")).collect();
        let _ = writeln!(out, "prompts={}", prompts.join(","));
        let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds={}", seeds.join(","));
        let _ = writeln!(out, "fallback={}", m.fallback);
        let _ = writeln!(out, "runs");
        let mut i = 0;
        while i < self.bits.len() {
            if self.bits[i] {
                let start = i;
                while i < self.bits.len() && self.bits[i] {
                    i += 1;
                }
                let _ = writeln!(out, "{start} {}", i - start);
            } else {
                i += 1;
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let what = "saliency mask";
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MASK_MAGIC => {}
            _ => return Err(Error::parse(what, 1, "missing header")),
        }
        let mut len = None;
        let mut active = None;
        let mut meta = MaskMeta {
            n_maps: 0,
            gamma_rule: String::new(),
            prompts: Vec::new(),
            seeds: Vec::new(),
            fallback: false,
        };
        let num = |v: &str, line: usize| -> Result<usize> {
            v.parse().map_err(|_| Error::parse(what, line, format!("bad number `{v}`")))
        };
        let mut in_runs = false;
        let mut bits = Vec::new();
        for (idx, line) in lines {
            let ln = idx + 1;
            if in_runs {
                let mut parts = line.split_whitespace();
                let (Some(s), Some(n), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::parse(what, ln, "expected `start length`"));
                };
                let (s, n) = (num(s, ln)?, num(n, ln)?);
                let end = s.checked_add(n).filter(|&e| e <= bits.len() && n > 0);
                let Some(end) = end else {
                    return Err(Error::parse(what, ln, "run outside mask"));
                };
                bits[s..end].iter_mut().for_each(|b| *b = true);
                continue;
            }
            if line == "runs" {
                let l = len.ok_or_else(|| Error::parse(what, ln, "runs before len"))?;
                bits = vec![false; l];
                in_runs = true;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(what, ln, "expected key=value"))?;
            match k {
                "len" => len = Some(num(v, ln)?),
                "active" => active = Some(num(v, ln)?),
                "n_maps" => meta.n_maps = num(v, ln)?,
                "gamma_rule" => meta.gamma_rule = v.to_string(),
                "prompts" => {
                    meta.prompts = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|p| {
                            let (a, b) = p
                                .split_once(':')
                                .ok_or_else(|| Error::parse(what, ln, "bad prompt"))?;
                            Ok((num(a, ln)?, num(b, ln)?))
                        })
                        .collect::<Result<_>>()?
                }
                "seeds" => {
                    meta.seeds = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| Error::parse(what, ln, "bad seed")))
                        .collect::<Result<_>>()?
                }
                "fallback" => {
                    meta.fallback = v
                        .parse()
                        .map_err(|_| Error::parse(what, ln, "bad fallback flag"))?
                }
                _ => return Err(Error::parse(what, ln, format!("unknown key `{k}`"))),
            }
        }
        if !in_runs {
            return Err(Error::parse(what, 0, "missing runs section"));
        }
        let mask = SaliencyMask { bits, meta };
        if let Some(a) = active {
            if a != mask.active() {
                return Err(Error::parse(what, 0, format!("active={a} but runs give {}", mask.active())));
            }
        }
        Ok(mask)
    }
}
