//! Erasure and preservation metrics.
//!
//! The concept detector is the Bayes oracle of the known mixture. Image
//! quality metrics are replaced by two stand-ins: the fraction of samples
//! whose true log-density falls below a data-calibrated percentile
//! ("off-manifold"), and the closed-form 2-Wasserstein distance between
//! Gaussian fits.

use std::fmt::Write as _;

use crate::diffusion::{self, EpsModel, GuidanceSpec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::score_net::Cond;
use crate::synth_data::{bayes_classify, log_density, sample_dataset, MixtureSpec, Point};
use crate::util::{derive_seed, fmt_f64};

const ACCURACY_STREAM: u64 = 0xACC;

/// Seed used for the samples of concept `k` in an accuracy run.
pub fn concept_seed(seed: u64, concept: usize) -> u64 {
    derive_seed(seed, ACCURACY_STREAM, concept as u64)
}

/// Samples for concept `k` drawn with the seed that [`accuracy`] uses.
pub fn concept_samples(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    concept: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    Ok(diffusion::sample(
        model,
        schedule,
        guidance,
        Cond::concept(concept),
        n,
        concept_seed(seed, concept),
        false,
    )?
    .points)
}

/// Fraction of points the oracle assigns to `concept`.
pub fn classified_fraction(points: &[Point], oracle: &MixtureSpec, concept: usize) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let hits = points
        .iter()
        .filter(|&&p| bayes_classify(oracle, p) == concept)
        .count();
    hits as f64 / points.len() as f64
}

/// Per-concept accuracy: sample `n` points conditioned on each concept and
/// report the fraction the oracle assigns to that concept.
pub fn accuracy(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    concepts: &[usize],
    n: usize,
    seed: u64,
    oracle: &MixtureSpec,
) -> Result<Vec<f64>> {
    if n < 100 {
        return Err(Error::invalid(format!("accuracy needs at least 100 samples, got {n}")));
    }
    concepts
        .iter()
        .map(|&k| {
            let pts = concept_samples(model, schedule, guidance, k, n, seed)?;
            Ok(classified_fraction(&pts, oracle, k))
        })
        .collect()
}

/// Harmonic mean of erasure success `1 − acc_e` and preservation `acc_p`:
/// `2 / ((1 − acc_e)⁻¹ + acc_p⁻¹)`. Defined as 0 when either side is 0.
pub fn harmonic_mean_hc(acc_e: f64, acc_p: f64) -> f64 {
    let erased = 1.0 - acc_e;
    if erased <= 0.0 || acc_p <= 0.0 {
        return 0.0;
    }
    2.0 / (1.0 / erased + 1.0 / acc_p)
}

/// How the off-manifold log-density cutoff is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// The `quantile` of log-density over `n` fresh oracle draws.
    OraclePercentile { quantile: f64, n: usize, seed: u64 },
    Absolute(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::OraclePercentile {
            quantile: 0.01,
            n: 100_000,
            seed: 0x0FF_0FF,
        }
    }
}

impl ThresholdRule {
    pub fn resolve(&self, oracle: &MixtureSpec) -> Result<f64> {
        match *self {
            ThresholdRule::Absolute(v) => Ok(v),
            ThresholdRule::OraclePercentile { quantile, n, seed } => {
                if !(0.0 < quantile && quantile < 1.0) || n == 0 {
                    return Err(Error::invalid("percentile rule needs 0 < q < 1 and n > 0"));
                }
                let data = sample_dataset(oracle, n, seed)?;
                let mut ld: Vec<f64> = data.points.iter().map(|p| log_density(oracle, p.x)).collect();
                ld.sort_by(f64::total_cmp);
                let rank = ((quantile * n as f64).ceil() as usize).clamp(1, n);
                Ok(ld[rank - 1])
            }
        }
    }
}

/// Fraction of samples whose oracle log-density lies strictly below `threshold`.
pub fn off_manifold_fraction(samples: &[Point], oracle: &MixtureSpec, threshold: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let below = samples
        .iter()
        .filter(|&&p| log_density(oracle, p) < threshold)
        .count();
    below as f64 / samples.len() as f64
}

fn mean_cov(points: &[Point]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = points.len() as f64;
    let mut mu = [0.0; 2];
    for p in points {
        mu[0] += p[0];
        mu[1] += p[1];
    }
    mu[0] /= n;
    mu[1] /= n;
    let mut c = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - mu[0], p[1] - mu[1]];
        c[0][0] += d[0] * d[0];
        c[0][1] += d[0] * d[1];
        c[1][1] += d[1] * d[1];
    }
    let denom = n - 1.0;
    c[0][0] /= denom;
    c[0][1] /= denom;
    c[1][1] /= denom;
    c[1][0] = c[0][1];
    (mu, c)
}

fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// 2-Wasserstein distance (squared form, as in FID) between Gaussian fits of two
/// 2-D sample sets:
/// `‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2 tr (Σ₂^{1/2} Σ₁ Σ₂^{1/2})^{1/2}`.
///
/// For 2×2 SPD `A`, `tr √A = √(tr A + 2 √det A)`, and here
/// `tr A = tr(Σ₁Σ₂)`, `det A = det Σ₁ det Σ₂`.
pub fn w2_gaussian(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("w2_gaussian needs at least 2 samples per side"));
    }
    let (mu1, mut s1) = mean_cov(a);
    let (mu2, mut s2) = mean_cov(b);
    for (name, s) in [("first", &mut s1), ("second", &mut s2)] {
        let scale = (s[0][0] + s[1][1]).max(1.0);
        if det2(s) <= 1e-12 * scale * scale {
            log::warn!("w2_gaussian: {name} covariance is degenerate; adding 1e-9 I");
            s[0][0] += 1e-9;
            s[1][1] += 1e-9;
        }
    }
    let tr_prod = s1[0][0] * s2[0][0] + s1[0][1] * s2[1][0] + s1[1][0] * s2[0][1] + s1[1][1] * s2[1][1];
    let det_prod = (det2(&s1) * det2(&s2)).max(0.0);
    let tr_sqrt = (tr_prod + 2.0 * det_prod.sqrt()).max(0.0).sqrt();
    let dm = (mu1[0] - mu2[0]).powi(2) + (mu1[1] - mu2[1]).powi(2);
    let val = dm + s1[0][0] + s1[1][1] + s2[0][0] + s2[1][1] - 2.0 * tr_sqrt;
    Ok(val.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptRow {
    pub concept: usize,
    pub erased: bool,
    pub acc: f64,
    pub off_manifold_frac: f64,
    /// W2 to oracle draws of the same concept; only reported for preserved concepts.
    pub w2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ConceptRow>,
    pub acc_e: f64,
    pub acc_p: f64,
    pub h_c: f64,
    pub off_manifold_frac: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub guidance: GuidanceSpec,
}

/// Full evaluation of a model against the oracle for a given erased set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    erased: &[usize],
    n: usize,
    seed: u64,
    oracle: &MixtureSpec,
    threshold: f64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(oracle.n_concepts);
    let mut all = Vec::new();
    for k in 0..oracle.n_concepts {
        let pts = concept_samples(model, schedule, guidance, k, n, seed)?;
        let is_erased = erased.contains(&k);
        let w2 = if is_erased {
            None
        } else {
            let reference = concept_reference(oracle, k, n, derive_seed(seed, 0x32, k as u64))?;
            Some(w2_gaussian(&pts, &reference)?)
        };
        rows.push(ConceptRow {
            concept: k,
            erased: is_erased,
            acc: classified_fraction(&pts, oracle, k),
            off_manifold_frac: off_manifold_fraction(&pts, oracle, threshold),
            w2,
        });
        all.extend(pts);
    }
    Ok(summarize(rows, &all, oracle, threshold, n, seed, *guidance))
}

fn summarize(
    rows: Vec<ConceptRow>,
    all: &[Point],
    oracle: &MixtureSpec,
    threshold: f64,
    n: usize,
    seed: u64,
    guidance: GuidanceSpec,
) -> EvalReport {
    let mean = |it: Vec<f64>| {
        if it.is_empty() {
            f64::NAN
        } else {
            it.iter().sum::<f64>() / it.len() as f64
        }
    };
    let acc_e = mean(rows.iter().filter(|r| r.erased).map(|r| r.acc).collect());
    let acc_p = mean(rows.iter().filter(|r| !r.erased).map(|r| r.acc).collect());
    let h_c = if acc_e.is_nan() || acc_p.is_nan() {
        f64::NAN
    } else {
        harmonic_mean_hc(acc_e, acc_p)
    };
    EvalReport {
        acc_e,
        acc_p,
        h_c,
        off_manifold_frac: off_manifold_fraction(all, oracle, threshold),
        rows,
        n_samples: n,
        seed,
        guidance,
    }
}

/// Oracle draws of one concept (all contexts), used as the W2 reference.
fn concept_reference(oracle: &MixtureSpec, concept: usize, n: usize, seed: u64) -> Result<Vec<Point>> {
    let mut weights = vec![0.0; oracle.n_modes()];
    let total: f64 = (0..oracle.n_contexts)
        .map(|c| oracle.weights[oracle.mode_index(concept, c)])
        .sum();
    for c in 0..oracle.n_contexts {
        let i = oracle.mode_index(concept, c);
        weights[i] = oracle.weights[i] / total;
    }
    // Renormalize exactly so the mixture validates.
    let s: f64 = weights.iter().sum();
    let last = (0..oracle.n_contexts)
        .map(|c| oracle.mode_index(concept, c))
        .last()
        .expect("at least one context");
    weights[last] += 1.0 - s;
    let sub = MixtureSpec::from_parts(
        oracle.n_concepts,
        oracle.n_contexts,
        oracle.centers.clone(),
        oracle.std,
        weights,
    )?;
    Ok(sample_dataset(&sub, n, seed)?.points.into_iter().map(|p| p.x).collect())
}

pub const EVAL_REPORT_SCHEMA: &str = "\
eval_report.csv columns
  row               concept id, or `aggregate`
  role              erased | preserved | all
  acc               fraction of samples the Bayes oracle assigns to the row's concept
                    (aggregate row: mean over erased concepts = acc_e)
  acc_p             aggregate row only: mean accuracy over preserved concepts
  h_c               aggregate row only: harmonic mean of (1 - acc_e) and acc_p, factor 2
  off_manifold_frac fraction of samples with oracle log-density below the 1st percentile
                    of fresh oracle draws (stand-in for visual-artifact rates)
  w2                preserved rows: Gaussian 2-Wasserstein (squared) to oracle draws of
                    the same concept (stand-in for FID); empty otherwise
  n_samples         samples per concept
  seed              evaluation seed
  guidance_scale    CFG scale used for sampling
  t_prime           reversal rung used for sampling (0 = ordinary CFG)
";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,role,acc,acc_p,h_c,off_manifold_frac,w2,n_samples,seed,guidance_scale,t_prime\n",
        );
        let g = &self.guidance;
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},,,{},{},{},{},{},{}",
                r.concept,
                if r.erased { "erased" } else { "preserved" },
                fmt_f64(r.acc),
                fmt_f64(r.off_manifold_frac),
                r.w2.map(fmt_f64).unwrap_or_default(),
                self.n_samples,
                self.seed,
                fmt_f64(g.scale),
                g.t_prime
            );
        }
        let _ = writeln!(
            out,
            "aggregate,all,{},{},{},{},,{},{},{},{}",
            fmt_f64(self.acc_e),
            fmt_f64(self.acc_p),
            fmt_f64(self.h_c),
            fmt_f64(self.off_manifold_frac),
            self.n_samples,
            self.seed,
            fmt_f64(g.scale),
            g.t_prime
        );
        out
    }
}
