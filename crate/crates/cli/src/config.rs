//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Keys are namespaced by the
//! stage that consumes them (`data.*`, `net.*`, `schedule.*`, `pretrain.*`,
//! `saliency.*`, `ant.*`, `fuse.*`, `eval.*`); `seed` and `run_dir` are
//! global. Unknown keys are rejected.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use ant_lab_core::ant_finetune::{AblationVariant, AntLossConfig, LatentSource};
use ant_lab_core::diffusion::{map_t_prime, GuidanceSpec, NoiseSchedule};
use ant_lab_core::eval_metrics::ThresholdRule;
use ant_lab_core::multi_fuse::{LoraConfig, MultiConfig};
use ant_lab_core::optim::AdamConfig;
use ant_lab_core::pretrainer::PretrainConfig;
use ant_lab_core::saliency::SaliencyConfig;
use ant_lab_core::score_net::{Activation, NetConfig};
use ant_lab_core::synth_data::{make_mixture_spaced, MixtureSpec};
use ant_lab_core::util::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub n_concepts: usize,
    pub n_contexts: usize,
    pub radius_base: f64,
    pub std: f64,
    /// Radius step between consecutive contexts, relative to `radius_base`.
    pub context_spacing: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSection {
    pub hidden_width: usize,
    pub n_hidden_layers: usize,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_infer_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub context_dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencySection {
    pub n_prompts: usize,
    pub n_seeds: usize,
    pub gamma_quantile: f64,
    /// Latent pairs behind each single map.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntSection {
    pub target: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eta: f64,
    /// Reversal rung on the inference ladder.
    pub t_prime: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub latent_source: LatentSource,
    pub latent_scale: f64,
    pub variant: AblationVariant,
    pub use_mask: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseSection {
    /// Run `erase-multi` instead of `erase` in the pipeline.
    pub enabled: bool,
    pub concepts: Vec<usize>,
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub n_samples: usize,
    pub guidance_scale: f64,
    pub t_prime: usize,
    pub threshold_quantile: f64,
    pub threshold_draws: usize,
    pub sweep_grid: Vec<usize>,
    pub sweep_scales: Vec<f64>,
    pub sweep_concept: usize,
    pub n_chains: usize,
    pub ablation_variants: Vec<AblationVariant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataSection,
    pub net: NetSection,
    pub schedule: ScheduleSection,
    pub pretrain: PretrainSection,
    pub saliency: SaliencySection,
    pub ant: AntSection,
    pub fuse: FuseSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            data: DataSection {
                n_concepts: 8,
                n_contexts: 20,
                radius_base: 2.0,
                std: 0.1,
                context_spacing: 0.025,
                n_samples: 50_000,
            },
            net: NetSection {
                hidden_width: 128,
                n_hidden_layers: 2,
                time_embed_dim: 16,
                cond_embed_dim: 8,
                activation: Activation::Swish,
            },
            schedule: ScheduleSection {
                t_max: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
                n_infer_steps: 50,
            },
            pretrain: PretrainSection {
                steps: 20_000,
                batch: 256,
                lr: 1e-3,
                cond_dropout: 0.1,
                context_dropout: 0.5,
            },
            saliency: SaliencySection {
                n_prompts: 20,
                n_seeds: 5,
                gamma_quantile: 0.9,
                batch: 1,
            },
            ant: AntSection {
                target: 0,
                lambda1: 1.0,
                lambda2: 0.5,
                lambda3: 0.5,
                eta: 1.0,
                t_prime: 43,
                steps: 1000,
                lr: 5e-3,
                batch: 64,
                latent_source: LatentSource::TeacherPartialDdim,
                latent_scale: 3.0,
                variant: AblationVariant::Full,
                use_mask: false,
            },
            fuse: FuseSection {
                enabled: false,
                concepts: vec![0, 3, 5],
                rank: 4,
                steps: 300,
                lr: 1e-2,
                beta: 0.1,
            },
            eval: EvalSection {
                n_samples: 1000,
                guidance_scale: 3.0,
                t_prime: 0,
                threshold_quantile: 0.01,
                threshold_draws: 100_000,
                sweep_grid: vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 43, 45, 50],
                sweep_scales: vec![3.0],
                sweep_concept: 0,
                n_chains: 16,
                ablation_variants: AblationVariant::ALL.to_vec(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_with<T>(
    key: &str,
    value: &str,
    f: impl Fn(&str) -> ant_lab_core::Result<T>,
) -> Result<T, ConfigError> {
    f(value).map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let n = &self.net;
        let s = &self.schedule;
        let p = &self.pretrain;
        let sa = &self.saliency;
        let a = &self.ant;
        let f = &self.fuse;
        let e = &self.eval;
        vec![
            ("seed", self.seed.to_string()),
            ("run_dir", self.run_dir.display().to_string()),
            ("data.n_concepts", d.n_concepts.to_string()),
            ("data.n_contexts", d.n_contexts.to_string()),
            ("data.radius_base", d.radius_base.to_string()),
            ("data.std", d.std.to_string()),
            ("data.context_spacing", d.context_spacing.to_string()),
            ("data.n_samples", d.n_samples.to_string()),
            ("net.hidden_width", n.hidden_width.to_string()),
            ("net.n_hidden_layers", n.n_hidden_layers.to_string()),
            ("net.time_embed_dim", n.time_embed_dim.to_string()),
            ("net.cond_embed_dim", n.cond_embed_dim.to_string()),
            ("net.activation", n.activation.name().to_string()),
            ("schedule.t_max", s.t_max.to_string()),
            ("schedule.beta_start", s.beta_start.to_string()),
            ("schedule.beta_end", s.beta_end.to_string()),
            ("schedule.n_infer_steps", s.n_infer_steps.to_string()),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.batch", p.batch.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.cond_dropout", p.cond_dropout.to_string()),
            ("pretrain.context_dropout", p.context_dropout.to_string()),
            ("saliency.n_prompts", sa.n_prompts.to_string()),
            ("saliency.n_seeds", sa.n_seeds.to_string()),
            ("saliency.gamma_quantile", sa.gamma_quantile.to_string()),
            ("saliency.batch", sa.batch.to_string()),
            ("ant.target", a.target.to_string()),
            ("ant.lambda1", a.lambda1.to_string()),
            ("ant.lambda2", a.lambda2.to_string()),
            ("ant.lambda3", a.lambda3.to_string()),
            ("ant.eta", a.eta.to_string()),
            ("ant.t_prime", a.t_prime.to_string()),
            ("ant.steps", a.steps.to_string()),
            ("ant.lr", a.lr.to_string()),
            ("ant.batch", a.batch.to_string()),
            ("ant.latent_source", a.latent_source.name().to_string()),
            ("ant.latent_scale", a.latent_scale.to_string()),
            ("ant.variant", a.variant.name().to_string()),
            ("ant.use_mask", a.use_mask.to_string()),
            ("fuse.enabled", f.enabled.to_string()),
            ("fuse.concepts", join(&f.concepts)),
            ("fuse.rank", f.rank.to_string()),
            ("fuse.steps", f.steps.to_string()),
            ("fuse.lr", f.lr.to_string()),
            ("fuse.beta", f.beta.to_string()),
            ("eval.n_samples", e.n_samples.to_string()),
            ("eval.guidance_scale", e.guidance_scale.to_string()),
            ("eval.t_prime", e.t_prime.to_string()),
            ("eval.threshold_quantile", e.threshold_quantile.to_string()),
            ("eval.threshold_draws", e.threshold_draws.to_string()),
            ("eval.sweep_grid", join(&e.sweep_grid)),
            ("eval.sweep_scales", join(&e.sweep_scales)),
            ("eval.sweep_concept", e.sweep_concept.to_string()),
            ("eval.n_chains", e.n_chains.to_string()),
            (
                "eval.ablation_variants",
                e.ablation_variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
            ),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "run_dir" => self.run_dir = PathBuf::from(v),
            "data.n_concepts" => self.data.n_concepts = parse(key, v)?,
            "data.n_contexts" => self.data.n_contexts = parse(key, v)?,
            "data.radius_base" => self.data.radius_base = parse(key, v)?,
            "data.std" => self.data.std = parse(key, v)?,
            "data.context_spacing" => self.data.context_spacing = parse(key, v)?,
            "data.n_samples" => self.data.n_samples = parse(key, v)?,
            "net.hidden_width" => self.net.hidden_width = parse(key, v)?,
            "net.n_hidden_layers" => self.net.n_hidden_layers = parse(key, v)?,
            "net.time_embed_dim" => self.net.time_embed_dim = parse(key, v)?,
            "net.cond_embed_dim" => self.net.cond_embed_dim = parse(key, v)?,
            "net.activation" => self.net.activation = parse_with(key, v, Activation::parse)?,
            "schedule.t_max" => self.schedule.t_max = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "schedule.n_infer_steps" => self.schedule.n_infer_steps = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.cond_dropout" => self.pretrain.cond_dropout = parse(key, v)?,
            "pretrain.context_dropout" => self.pretrain.context_dropout = parse(key, v)?,
            "saliency.n_prompts" => self.saliency.n_prompts = parse(key, v)?,
            "saliency.n_seeds" => self.saliency.n_seeds = parse(key, v)?,
            "saliency.gamma_quantile" => self.saliency.gamma_quantile = parse(key, v)?,
            "saliency.batch" => self.saliency.batch = parse(key, v)?,
            "ant.target" => self.ant.target = parse(key, v)?,
            "ant.lambda1" => self.ant.lambda1 = parse(key, v)?,
            "ant.lambda2" => self.ant.lambda2 = parse(key, v)?,
            "ant.lambda3" => self.ant.lambda3 = parse(key, v)?,
            "ant.eta" => self.ant.eta = parse(key, v)?,
            "ant.t_prime" => self.ant.t_prime = parse(key, v)?,
            "ant.steps" => self.ant.steps = parse(key, v)?,
            "ant.lr" => self.ant.lr = parse(key, v)?,
            "ant.batch" => self.ant.batch = parse(key, v)?,
            "ant.latent_source" => self.ant.latent_source = parse_with(key, v, LatentSource::parse)?,
            "ant.latent_scale" => self.ant.latent_scale = parse(key, v)?,
            "ant.variant" => self.ant.variant = parse_with(key, v, AblationVariant::parse)?,
            "ant.use_mask" => self.ant.use_mask = parse(key, v)?,
            "fuse.enabled" => self.fuse.enabled = parse(key, v)?,
            "fuse.concepts" => self.fuse.concepts = parse_list(key, v)?,
            "fuse.rank" => self.fuse.rank = parse(key, v)?,
            "fuse.steps" => self.fuse.steps = parse(key, v)?,
            "fuse.lr" => self.fuse.lr = parse(key, v)?,
            "fuse.beta" => self.fuse.beta = parse(key, v)?,
            "eval.n_samples" => self.eval.n_samples = parse(key, v)?,
            "eval.guidance_scale" => self.eval.guidance_scale = parse(key, v)?,
            "eval.t_prime" => self.eval.t_prime = parse(key, v)?,
            "eval.threshold_quantile" => self.eval.threshold_quantile = parse(key, v)?,
            "eval.threshold_draws" => self.eval.threshold_draws = parse(key, v)?,
            "eval.sweep_grid" => self.eval.sweep_grid = parse_list(key, v)?,
            "eval.sweep_scales" => self.eval.sweep_scales = parse_list(key, v)?,
            "eval.sweep_concept" => self.eval.sweep_concept = parse(key, v)?,
            "eval.n_chains" => self.eval.n_chains = parse(key, v)?,
            "eval.ablation_variants" => {
                self.eval.ablation_variants = v
                    .split(',')
                    .map(|s| parse_with(key, s.trim(), AblationVariant::parse))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply a config file's lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# ant-lab resolved configuration\n");
        let mut last_ns = "";
        for (k, v) in self.entries() {
            let ns = k.split_once('.').map_or("", |(ns, _)| ns);
            if ns != last_ns {
                out.push('\n');
                last_ns = ns;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Lines of the resolved config belonging to the given namespaces.
    pub fn fingerprint(&self, namespaces: &[&str]) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| {
                *k == "seed" || namespaces.iter().any(|ns| k.split_once('.').is_some_and(|(p, _)| p == *ns))
            })
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let k = self.data.n_concepts;
        if self.ant.target >= k {
            return bad(format!("ant.target {} outside 0..{k}", self.ant.target));
        }
        if self.eval.sweep_concept >= k {
            return bad(format!("eval.sweep_concept {} outside 0..{k}", self.eval.sweep_concept));
        }
        if let Some(c) = self.fuse.concepts.iter().find(|&&c| c >= k) {
            return bad(format!("fuse.concepts entry {c} outside 0..{k}"));
        }
        if self.ant.t_prime > self.schedule.n_infer_steps {
            return bad(format!(
                "ant.t_prime {} exceeds schedule.n_infer_steps {}",
                self.ant.t_prime, self.schedule.n_infer_steps
            ));
        }
        if let Some(t) = self.eval.sweep_grid.iter().find(|&&t| t > self.schedule.n_infer_steps) {
            return bad(format!("eval.sweep_grid entry {t} exceeds schedule.n_infer_steps"));
        }
        if self.eval.sweep_grid.is_empty() || self.eval.sweep_scales.is_empty() {
            return bad("eval.sweep_grid and eval.sweep_scales must not be empty".into());
        }
        if self.eval.n_chains == 0 {
            return bad("eval.n_chains must be at least 1".into());
        }
        if !(self.eval.threshold_quantile > 0.0 && self.eval.threshold_quantile < 1.0) {
            return bad("eval.threshold_quantile must lie in (0, 1)".into());
        }
        if self.data.n_samples == 0 {
            return bad("data.n_samples must be at least 1".into());
        }
        if self.fuse.enabled && self.ant.latent_source == LatentSource::NoisedData {
            return bad("fuse.enabled requires ant.latent_source = teacher_partial_ddim".into());
        }
        let wrap = |r: ant_lab_core::Result<()>| r.map_err(|e| ConfigError::Invalid(e.to_string()));
        wrap(self.net_config().validate())?;
        let schedule = self.noise_schedule().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        wrap(self.guidance().validate(&schedule))?;
        wrap(self.ant_config(&schedule).validate(&schedule))?;
        wrap(self.pretrain_config().validate())?;
        wrap(self.saliency_config().validate())?;
        self.mixture().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag, 0)
    }

    pub fn mixture(&self) -> ant_lab_core::Result<MixtureSpec> {
        let d = &self.data;
        make_mixture_spaced(d.n_concepts, d.n_contexts, d.radius_base, d.std, d.context_spacing)
    }

    pub fn net_config(&self) -> NetConfig {
        let n = &self.net;
        NetConfig {
            hidden_width: n.hidden_width,
            n_hidden_layers: n.n_hidden_layers,
            time_embed_dim: n.time_embed_dim,
            cond_embed_dim: n.cond_embed_dim,
            activation: n.activation,
            ..NetConfig::new(self.data.n_concepts, self.data.n_contexts)
        }
    }

    pub fn noise_schedule(&self) -> ant_lab_core::Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.t_max, s.beta_start, s.beta_end)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch: p.batch,
            adam: AdamConfig::with_lr(p.lr),
            cond_dropout: p.cond_dropout,
            context_dropout: p.context_dropout,
            seed: self.stage_seed(seeds::PRETRAIN),
            init_seed: self.stage_seed(seeds::INIT),
        }
    }

    pub fn ant_config(&self, schedule: &NoiseSchedule) -> AntLossConfig {
        let a = &self.ant;
        let n_infer = self.schedule.n_infer_steps;
        AntLossConfig {
            lambda1: a.lambda1,
            lambda2: a.lambda2,
            lambda3: a.lambda3,
            eta: a.eta,
            t_prime_train: map_t_prime(a.t_prime, n_infer, schedule.t_max()),
            steps: a.steps,
            lr: a.lr,
            seed: self.stage_seed(seeds::ERASE),
            latent_source: a.latent_source,
            batch: a.batch,
            latent_scale: a.latent_scale,
            n_infer_steps: n_infer,
            variant: a.variant,
        }
    }

    pub fn saliency_config(&self) -> SaliencyConfig {
        let s = &self.saliency;
        SaliencyConfig {
            n_prompts: s.n_prompts,
            n_seeds: s.n_seeds,
            gamma_quantile: s.gamma_quantile,
            seed: self.stage_seed(seeds::SALIENCY),
        }
    }

    /// Loss configuration behind each saliency map.
    pub fn saliency_loss_config(&self, schedule: &NoiseSchedule) -> AntLossConfig {
        AntLossConfig {
            batch: self.saliency.batch,
            ..self.ant_config(schedule)
        }
    }

    pub fn multi_config(&self, schedule: &NoiseSchedule) -> MultiConfig {
        let f = &self.fuse;
        MultiConfig {
            loss: self.ant_config(schedule),
            lora: LoraConfig {
                rank: f.rank,
                steps: f.steps,
                lr: f.lr,
                seed: self.stage_seed(seeds::LORA),
            },
            beta: f.beta,
        }
    }

    pub fn guidance(&self) -> GuidanceSpec {
        GuidanceSpec {
            scale: self.eval.guidance_scale,
            t_prime: self.eval.t_prime,
            n_infer_steps: self.schedule.n_infer_steps,
        }
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        ThresholdRule::OraclePercentile {
            quantile: self.eval.threshold_quantile,
            n: self.eval.threshold_draws,
            seed: self.stage_seed(seeds::THRESHOLD),
        }
    }

    /// Concepts erased by the configured pipeline.
    pub fn erased_concepts(&self) -> Vec<usize> {
        if self.fuse.enabled {
            self.fuse.concepts.clone()
        } else {
            vec![self.ant.target]
        }
    }
}

/// Stream tags that turn the global seed into per-stage seeds.
pub mod seeds {
    pub const DATA: u64 = 0xDA7A;
    pub const INIT: u64 = 0x1417;
    pub const PRETRAIN: u64 = 0x9E7;
    pub const SALIENCY: u64 = 0x5A1;
    pub const ERASE: u64 = 0xE7A;
    pub const LORA: u64 = 0x10A;
    pub const EVAL: u64 = 0xE7A1;
    pub const THRESHOLD: u64 = 0x7E5;
    pub const SAMPLE: u64 = 0x5A3;
    pub const DEVIATION: u64 = 0xDE7;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("fuse.concepts", "1, 2").unwrap();
        cfg.set("ant.variant", "c").unwrap();
        cfg.set("pretrain.lr", "0.00031").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(
            RunConfig::from_text("ant.lambda4 = 1"),
            Err(ConfigError::UnknownKey(k)) if k == "ant.lambda4"
        ));
        assert!(matches!(
            RunConfig::from_text("# ok\nant.lambda1 1"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::from_text("ant.steps = many"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::from_text("\n# note\nseed = 7 # trailing\n\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn defaults_validate_and_map_t_prime() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let s = cfg.noise_schedule().unwrap();
        assert_eq!(cfg.ant_config(&s).t_prime_train, 86);
        assert_eq!(cfg.erased_concepts(), vec![0]);
    }

    #[test]
    fn validation_catches_out_of_range_ids() {
        let mut cfg = RunConfig::default();
        cfg.ant.target = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval.sweep_grid = vec![0, 51];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_filters_namespaces() {
        let cfg = RunConfig::default();
        let fp = cfg.fingerprint(&["data"]);
        assert!(fp.starts_with("seed=0\n"));
        assert!(fp.lines().skip(1).all(|l| l.starts_with("data.")));
    }
}
