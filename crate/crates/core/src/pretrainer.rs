//! Denoising score matching with condition dropout.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::score_net::{self, Cond, GradTarget, ModelParams, NetConfig, NetInput};
use crate::synth_data::Dataset;
use crate::util::{self, fmt_f64};

/// Steps per smoothing window of the reported loss curve.
pub const LOSS_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Probability of replacing the whole condition by null.
    pub cond_dropout: f64,
    /// Probability of keeping the concept but nulling the context, so that
    /// concept-only conditions are in-distribution.
    pub context_dropout: f64,
    pub seed: u64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            adam: AdamConfig::with_lr(1e-3),
            cond_dropout: 0.1,
            context_dropout: 0.5,
            seed: 0,
            init_seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!(
                "cond_dropout must lie in [0, 1), got {}",
                self.cond_dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.context_dropout) {
            return Err(Error::invalid("context_dropout must lie in [0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("pretrain batch must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub params: ModelParams,
    /// `(last step of window, mean loss over window)`.
    pub loss_curve: Vec<(usize, f64)>,
}

impl PretrainOutput {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in &self.loss_curve {
            let _ = writeln!(out, "{step},{}", fmt_f64(*loss));
        }
        out
    }
}

pub fn pretrain(
    net_config: &NetConfig,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    config: &PretrainConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    if dataset.points.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if dataset.spec.n_concepts != net_config.n_concepts
        || dataset.spec.n_contexts != net_config.n_contexts
    {
        return Err(Error::invalid(format!(
            "dataset vocabulary {}x{} does not match network {}x{}",
            dataset.spec.n_concepts,
            dataset.spec.n_contexts,
            net_config.n_concepts,
            net_config.n_contexts
        )));
    }
    let mut params = net_config.init(config.init_seed)?;
    let mut opt = Adam::new(config.adam, params.len())?;
    let mut rng = util::rng(config.seed);
    let t_max = schedule.t_max();
    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;

    for step in 1..=config.steps {
        let batch: Vec<(NetInput, [f64; 2])> = (0..config.batch)
            .map(|_| {
                let p = dataset.points[rng.random_range(0..dataset.points.len())];
                let t = rng.random_range(1..=t_max);
                let eps = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let u: f64 = rng.random();
                let cond = if u < config.cond_dropout {
                    Cond::NULL
                } else if rng.random::<f64>() < config.context_dropout {
                    Cond::concept(p.concept)
                } else {
                    Cond::with_context(p.concept, p.context)
                };
                let z = forward_noise(schedule, p.x, t, eps).expect("t within schedule");
                (
                    NetInput {
                        z,
                        t_norm: schedule.t_norm(t),
                        cond,
                    },
                    eps,
                )
            })
            .collect();
        let (loss, grad) = score_net::backward(&params, &batch, None, GradTarget::Base)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                last_good: Box::new(params),
            });
        }
        opt.step(&mut params.flat, &grad)?;
        window += loss;
        window_len += 1;
        if window_len == LOSS_WINDOW || step == config.steps {
            curve.push((step, window / window_len as f64));
            if step % (LOSS_WINDOW * 20) == 0 {
                log::info!("pretrain step {step}: loss {:.5}", window / window_len as f64);
            }
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(PretrainOutput {
        params,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{make_mixture, sample_dataset, LabeledPoint};

    fn small() -> (NetConfig, NoiseSchedule, Dataset) {
        let spec = make_mixture(4, 2, 2.0, 0.1).unwrap();
        let data = sample_dataset(&spec, 2000, 3).unwrap();
        (NetConfig::new(4, 2), NoiseSchedule::default(), data)
    }

    fn quick(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            batch: 32,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (net, sched, data) = small();
        let cfg = quick(0);
        let out = pretrain(&net, &sched, &data, &cfg).unwrap();
        assert_eq!(out.params, net.init(cfg.init_seed).unwrap());
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (net, sched, data) = small();
        let a = pretrain(&net, &sched, &data, &quick(50)).unwrap();
        let b = pretrain(&net, &sched, &data, &quick(50)).unwrap();
        assert_eq!(a.params.flat, b.params.flat);
        let c = pretrain(&net, &sched, &data, &PretrainConfig { seed: 1, ..quick(50) }).unwrap();
        assert_ne!(a.params.flat, c.params.flat);
    }

    #[test]
    fn loss_curve_is_finite_and_falls() {
        let (net, sched, data) = small();
        let out = pretrain(&net, &sched, &data, &quick(1500)).unwrap();
        assert_eq!(out.loss_curve.len(), 15);
        assert!(out.loss_curve.iter().all(|(_, l)| l.is_finite()));
        assert!(out.loss_curve.last().unwrap().1 < out.loss_curve[0].1);
        assert!(out.loss_csv().starts_with("step,loss\n100,"));
    }

    #[test]
    fn overfits_a_single_point() {
        let (net, sched, data) = small();
        let p = LabeledPoint {
            x: [1.5, -0.5],
            concept: 2,
            context: 1,
        };
        let single = Dataset {
            points: vec![p; 64],
            spec: data.spec.clone(),
            seed: 0,
        };
        let cfg = PretrainConfig {
            steps: 2000,
            ..Default::default()
        };
        let out = pretrain(&net, &sched, &single, &cfg).unwrap();
        let last = out.loss_curve.last().unwrap().1;
        assert!(last < 0.05, "final smoothed loss {last}");
    }

    #[test]
    fn rejects_mismatched_vocabulary() {
        let (_, sched, data) = small();
        let err = pretrain(&NetConfig::new(5, 2), &sched, &data, &quick(1)).unwrap_err();
        assert!(err.is_validation());
    }
}
