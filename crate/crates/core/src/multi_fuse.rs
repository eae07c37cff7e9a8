//! Per-concept LoRA adapters on the condition projection and their
//! closed-form fusion.
//!
//! Fusion solves
//! `min_W Σ_i Σ_j ‖W e_ij − (W₀ + ΔW_i) e_ij‖² + β Σ_j ‖W e_j^p − W₀ e_j^p‖²`
//! whose normal equations give
//! `W* = [Σ_i (W₀ + ΔW_i) G_i + β W₀ G_p] [Σ_i G_i + β G_p]⁻¹`
//! with `G_i = Σ_j e_ij e_ijᵀ` and `G_p = Σ_j e_j^p e_j^pᵀ`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;

use crate::ant_finetune::{ant_loss, erase_cond, erase_single, AntLossConfig, Teacher};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::score_net::{clone_frozen, Cond, GradTarget, LoraAdapter, ModelParams};
use crate::synth_data::Point;
use crate::util::{self, derive_seed, fmt_f64};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            steps: 50,
            lr: 5e-4,
            seed: 0,
        }
    }
}

/// Train one adapter for `concept`; only adapter entries change.
pub fn train_concept_lora(
    pretrained: &ModelParams,
    schedule: &NoiseSchedule,
    concept: usize,
    loss_cfg: &AntLossConfig,
    lora: &LoraConfig,
    data: Option<&[Point]>,
) -> Result<LoraAdapter> {
    loss_cfg.validate(schedule)?;
    if concept >= pretrained.config.n_concepts {
        return Err(Error::invalid(format!("concept {concept} outside vocabulary")));
    }
    let frozen = clone_frozen(pretrained);
    let teacher = Teacher {
        frozen: &frozen,
        schedule,
        data,
    };
    let seed = derive_seed(lora.seed, 0x10_4A, concept as u64);
    let mut adapter = LoraAdapter::new(&pretrained.config, lora.rank, seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(lora.lr), adapter.n_params())?;
    let cond = erase_cond(concept);
    let mut flat = adapter.to_flat();
    for step in 1..=lora.steps {
        let mut rng = util::rng(derive_seed(seed, 0x57E9, step as u64));
        let out = ant_loss(
            pretrained,
            Some(&adapter),
            GradTarget::Adapter,
            &teacher,
            cond,
            loss_cfg,
            &mut rng,
        )?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: out.loss,
                last_good: Box::new(pretrained.merge_adapter(&adapter)?),
            });
        }
        opt.step(&mut flat, &out.grad)?;
        adapter.set_flat(&flat);
    }
    Ok(adapter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionProblem {
    /// Base matrix, `h × d_e`.
    pub w: Array2<f64>,
    pub deltas: Vec<Array2<f64>>,
    /// `targets[i]` lists the embeddings adapter `i` must reproduce.
    pub targets: Vec<Vec<Vec<f64>>>,
    pub preserve: Vec<Vec<f64>>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutput {
    pub w_star: Array2<f64>,
    /// Diagonal jitter added to make the system solvable, if any.
    pub jitter: Option<f64>,
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn gram(vectors: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(d, d);
    for v in vectors {
        for a in 0..d {
            for b in 0..d {
                g[(a, b)] += v[a] * v[b];
            }
        }
    }
    g
}

impl FusionProblem {
    pub fn validate(&self) -> Result<()> {
        let (h, d) = self.w.dim();
        if self.deltas.is_empty() {
            return Err(Error::invalid("fusion needs at least one adapter"));
        }
        if self.deltas.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "{} deltas but {} target sets",
                self.deltas.len(),
                self.targets.len()
            )));
        }
        if self.deltas.iter().any(|dw| dw.dim() != (h, d)) {
            return Err(Error::invalid(format!("every delta must be {h}x{d}")));
        }
        if self.targets.iter().flatten().chain(&self.preserve).any(|e| e.len() != d) {
            return Err(Error::invalid(format!("every embedding must have length {d}")));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }

    /// `(A, B)` of the normal equations `W B = A`.
    fn normal_equations(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.w.ncols();
        let w0 = to_na(&self.w);
        let gp = gram(&self.preserve, d);
        let mut a = &w0 * &gp * self.beta;
        let mut b = gp * self.beta;
        for (dw, es) in self.deltas.iter().zip(&self.targets) {
            let gi = gram(es, d);
            a += (&w0 + to_na(dw)) * &gi;
            b += gi;
        }
        (a, b)
    }

    pub fn objective(&self, w: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        let resid = |m: &Array2<f64>, e: &[f64]| -> f64 {
            m.rows()
                .into_iter()
                .map(|r| r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>().powi(2))
                .sum()
        };
        for (dw, es) in self.deltas.iter().zip(&self.targets) {
            let diff = w - &(&self.w + dw);
            total += es.iter().map(|e| resid(&diff, e)).sum::<f64>();
        }
        let diff = w - &self.w;
        total + self.beta * self.preserve.iter().map(|e| resid(&diff, e)).sum::<f64>()
    }

    /// `∂/∂W = 2 (W B − A)`.
    pub fn gradient(&self, w: &Array2<f64>) -> Array2<f64> {
        let (a, b) = self.normal_equations();
        from_na(&((to_na(w) * b - a) * 2.0))
    }
}

const SINGULAR_RTOL: f64 = 1e-12;

/// Closed-form minimizer. The system `B` is solved by Cholesky; if it is
/// numerically singular, `1e-10 · tr(B)/d` is added to the diagonal once.
pub fn fuse(problem: &FusionProblem) -> Result<FuseOutput> {
    problem.validate()?;
    let (a, b) = problem.normal_equations();
    let d = b.nrows();
    let trace = b.trace();
    let solve = |m: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let chol = m.clone().cholesky()?;
        let l = chol.l();
        let max_pivot = (0..d).map(|i| l[(i, i)].powi(2)).fold(0.0, f64::max);
        let min_pivot = (0..d).map(|i| l[(i, i)].powi(2)).fold(f64::INFINITY, f64::min);
        if !(min_pivot > SINGULAR_RTOL * max_pivot) {
            return None;
        }
        // W B = A  ⇔  B Wᵀ = Aᵀ  (B symmetric)
        Some(chol.solve(&a.transpose()).transpose())
    };
    if let Some(w) = solve(&b) {
        return Ok(FuseOutput {
            w_star: from_na(&w),
            jitter: None,
        });
    }
    let jitter = 1e-10 * trace / d as f64;
    if jitter > 0.0 {
        let mut bj = b.clone();
        for i in 0..d {
            bj[(i, i)] += jitter;
        }
        if let Some(w) = solve(&bj) {
            log::warn!("fusion system is singular; added jitter {jitter:e}");
            return Ok(FuseOutput {
                w_star: from_na(&w),
                jitter: Some(jitter),
            });
        }
    }
    let eig = SymmetricEigen::new(b);
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let rank = eig
        .eigenvalues
        .iter()
        .filter(|v| v.abs() > SINGULAR_RTOL * max_ev.max(f64::MIN_POSITIVE))
        .count();
    Err(Error::SingularSystem { rank, dim: d })
}

/// Condition embeddings for every context of `concept`, plus the concept-only one.
pub fn concept_embeddings(params: &ModelParams, concept: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(params.config.n_contexts + 1);
    for c in 0..params.config.n_contexts {
        out.push(params.cond_embedding(Cond::with_context(concept, c))?);
    }
    out.push(params.cond_embedding(Cond::concept(concept))?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiConfig {
    pub loss: AntLossConfig,
    pub lora: LoraConfig,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiOutput {
    pub params: ModelParams,
    pub adapters: Vec<(usize, LoraAdapter)>,
    pub fusion: FuseOutput,
}

/// Train one adapter per concept in parallel and fuse them into `w_cond`.
/// The preserve set holds every other concept's embeddings and the
/// unconditional one.
pub fn erase_multi(
    pretrained: &ModelParams,
    schedule: &NoiseSchedule,
    concepts: &[usize],
    cfg: &MultiConfig,
) -> Result<MultiOutput> {
    if concepts.is_empty() {
        return Err(Error::invalid("erase_multi needs at least one concept"));
    }
    let mut sorted = concepts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != concepts.len() {
        return Err(Error::invalid("erase_multi concepts must be distinct"));
    }
    let adapters: Vec<LoraAdapter> = concepts
        .par_iter()
        .map(|&k| train_concept_lora(pretrained, schedule, k, &cfg.loss, &cfg.lora, None))
        .collect::<Result<_>>()?;
    let mut preserve = vec![pretrained.cond_embedding(Cond::NULL)?];
    for k in 0..pretrained.config.n_concepts {
        if !concepts.contains(&k) {
            preserve.extend(concept_embeddings(pretrained, k)?);
        }
    }
    let problem = FusionProblem {
        w: pretrained.w_cond(),
        deltas: adapters.iter().map(LoraAdapter::delta).collect(),
        targets: concepts
            .iter()
            .map(|&k| concept_embeddings(pretrained, k))
            .collect::<Result<_>>()?,
        preserve,
        beta: cfg.beta,
    };
    let fusion = fuse(&problem)?;
    let mut params = pretrained.clone();
    params.set_w_cond(&fusion.w_star)?;
    Ok(MultiOutput {
        params,
        adapters: concepts.iter().copied().zip(adapters).collect(),
        fusion,
    })
}

/// Baseline: erase the concepts one after another with [`erase_single`], each
/// run using the previous result as its teacher.
pub fn erase_sequential(
    pretrained: &ModelParams,
    schedule: &NoiseSchedule,
    concepts: &[usize],
    cfg: &AntLossConfig,
) -> Result<ModelParams> {
    let mut current = pretrained.clone();
    for (i, &k) in concepts.iter().enumerate() {
        let run_cfg = AntLossConfig {
            seed: derive_seed(cfg.seed, 0x5E0, i as u64),
            ..cfg.clone()
        };
        current = erase_single(&current, schedule, k, &run_cfg, None, None)?.params;
    }
    Ok(current)
}

/// `concept,acc_e_before,acc_e_after`.
pub fn fusion_report_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("concept,acc_e_before,acc_e_after\n");
    for (k, b, a) in rows {
        let _ = writeln!(out, "{k},{},{}", fmt_f64(*b), fmt_f64(*a));
    }
    out
}
