//! KL-regularized group-decoupled policy optimization.
//!
//! Each update draws N stochastic rollouts for a batch of prompts under
//! the current bias, normalizes every reward component within its group,
//! whitens the summed scores over the update minibatch, and takes one
//! dual-clipped policy-gradient step (PPO epochs = 1) with the token-mean
//! KL penalty against the frozen reference policy. The latent logit bias
//! decays as the exponential moving average of the latent reward rises.

use crate::advantage::{group_decoupled_advantages, grpo_advantages, AdvantageMap, GroupRewards};
use crate::encoding::encode_task;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{MetricRecord, MetricsWriter};
use crate::model::Model;
use crate::optim::{clip_global_norm, optimizer_step, AdamwConfig, OptState};
use crate::rewards::RewardConfig;
use crate::rollout::{collect_group, write_rollout_dump, BiasScheduler, GroupBatch, SamplerConfig};
use crate::taskgen::TaskInstance;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Advantage estimator selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlMode {
    /// Per-component group normalization + minibatch whitening.
    Lagdpo,
    /// Total-reward group normalization only.
    GrpoLike,
}

/// RL phase parameters.
#[derive(Debug, Clone)]
pub struct RlConfig {
    pub mode: RlMode,
    pub kl_beta: f64,
    pub ppo_epochs: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub dual_clip: f64,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    /// Prompts per update minibatch.
    pub update_prompts: usize,
    /// Number of optimization updates to run.
    pub updates: usize,
    pub sampler: SamplerConfig,
    pub reward: RewardConfig,
    pub bias_rho: f64,
    pub bias_b0: f64,
    pub bias_lambda: f64,
    pub bias_min: f64,
    pub bias_enabled: bool,
    pub adv_eps: f64,
    pub text_only: bool,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            mode: RlMode::Lagdpo,
            kl_beta: 0.03,
            ppo_epochs: 1,
            eps_low: 0.2,
            eps_high: 0.3,
            dual_clip: 3.0,
            lr: 1e-7,
            warmup_ratio: 0.15,
            max_grad_norm: 2.0,
            update_prompts: 16,
            updates: 0,
            sampler: SamplerConfig::default(),
            reward: RewardConfig::default(),
            bias_rho: 0.9,
            bias_b0: 10.0,
            bias_lambda: 1.0,
            bias_min: 0.0,
            bias_enabled: true,
            adv_eps: 1e-6,
            text_only: false,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.dual_clip <= 1.0 + self.eps_high {
            return Err(Error::Config(format!(
                "dual clip {} must exceed 1 + eps_high = {}",
                self.dual_clip,
                1.0 + self.eps_high
            )));
        }
        if self.ppo_epochs != 1 {
            return Err(Error::Config("this trainer takes one optimization pass per rollout batch".into()));
        }
        if self.update_prompts == 0 {
            return Err(Error::Config("update batch needs at least one prompt".into()));
        }
        Ok(())
    }
}

/// Aggregates of one RL run.
#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub updates_done: usize,
    pub skipped_updates: usize,
    pub rollouts_collected: usize,
    /// Fraction of all collected rollouts with exactly one latent segment.
    pub one_segment_rate: f64,
    /// Mean reward components over the final update's rollouts.
    pub final_mean_total: f64,
    pub final_bias: f64,
}

fn reward_groups(batches: &[GroupBatch]) -> Vec<GroupRewards> {
    batches
        .iter()
        .map(|b| GroupRewards {
            prompt_id: b.prompt_id,
            rewards: b.rollouts.iter().map(|r| r.reward).collect(),
        })
        .collect()
}

/// One optimization pass over a collected rollout minibatch. Returns the
/// (pg, kl) means, or `None` when a non-finite loss skipped the update.
fn lagdpo_update(
    model: &mut Model,
    state: &mut OptState,
    groups: &[GroupBatch],
    advantages: &AdvantageMap,
    cfg: &RlConfig,
    lr_now: f64,
) -> Result<Option<(f64, f64, f64)>> {
    let total_tokens: usize = groups
        .iter()
        .flat_map(|g| g.rollouts.iter())
        .map(|r| r.tokens.len())
        .sum();
    if total_tokens == 0 {
        return Ok(None);
    }
    let inv = 1.0 / total_tokens as f64;
    model.params.zero_grads();
    let mut pg_total = 0.0;
    let mut kl_total = 0.0;
    for (gi, group) in groups.iter().enumerate() {
        for (ri, rollout) in group.rollouts.iter().enumerate() {
            if rollout.tokens.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let bp = model.bind(&mut g);
            let mut full = group.prompt.clone();
            full.extend_from_slice(&rollout.tokens);
            let built = (|| -> Result<(crate::graph::NodeId, f64, f64)> {
                let out = model.forward(&mut g, &bp, &full, group.prefix.as_ref())?;
                let plen = group.prefix.as_ref().map(|p| p.rows()).unwrap_or(0);
                let base = plen + group.prompt.len();
                let idx: Vec<(usize, usize)> = rollout
                    .tokens
                    .iter()
                    .enumerate()
                    .map(|(t, &tok)| (base + t - 1, tok as usize))
                    .collect();
                let actor_lp = g.gather_log_softmax(out.logits, &idx)?;
                let adv = advantages.broadcast(gi, ri, rollout.tokens.len());
                let pg = g.pg_sum(
                    actor_lp,
                    &rollout.logp_old,
                    &adv,
                    cfg.eps_low,
                    cfg.eps_high,
                    cfg.dual_clip,
                )?;
                let kl = g.kl_sum(actor_lp, &rollout.logp_ref)?;
                let kl_term = g.scale(kl, cfg.kl_beta)?;
                let loss = g.add(pg, kl_term)?;
                let scaled = g.scale(loss, inv)?;
                Ok((scaled, g.value(pg).item(), g.value(kl).item()))
            })();
            let (scaled, pg_v, kl_v) = match built {
                Ok(v) => v,
                Err(Error::NonFinite { op, index }) => {
                    log::warn!("rl update skipped: non-finite loss from {op} at {index}");
                    model.params.zero_grads();
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            pg_total += pg_v;
            kl_total += kl_v;
            g.backward(scaled)?;
            bp.apply_grads(&g, &mut model.params)?;
        }
    }
    let scale = clip_global_norm(&mut model.params, cfg.max_grad_norm)?;
    let adamw = AdamwConfig {
        lr: lr_now,
        weight_decay: 0.0,
        ..Default::default()
    };
    optimizer_step(&mut model.params, state, &adamw)?;
    Ok(Some((pg_total * inv, kl_total * inv, scale)))
}

/// Run the RL phase over a prompt set, cycling prompts round-robin.
pub fn run_rl(
    model: &mut Model,
    ref_model: &Model,
    tasks: &[TaskInstance],
    cfg: &RlConfig,
    dump_to: Option<&Path>,
    metrics: &mut MetricsWriter,
) -> Result<RlOutcome> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Data("rl phase requires a non-empty task set".into()));
    }
    let mut scheduler = BiasScheduler::new(cfg.bias_rho, cfg.bias_b0, cfg.bias_lambda, cfg.bias_min, cfg.bias_enabled);
    let mut state = OptState::new(&model.params);
    let warmup_updates = ((cfg.updates as f64) * cfg.warmup_ratio).ceil().max(1.0);
    let mut dump = match dump_to {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };

    let mut outcome = RlOutcome {
        updates_done: 0,
        skipped_updates: 0,
        rollouts_collected: 0,
        one_segment_rate: 0.0,
        final_mean_total: 0.0,
        final_bias: scheduler.bias(),
    };
    let mut one_segment = 0usize;
    let markers = crate::rewards::LatentMarkers {
        start: model.vocab.latent_start(),
        pad: model.vocab.latent_pad(),
        end: model.vocab.latent_end(),
    };

    for update in 0..cfg.updates {
        let bias = scheduler.bias();
        let mut groups = Vec::with_capacity(cfg.update_prompts);
        for i in 0..cfg.update_prompts {
            let inst = &tasks[(update * cfg.update_prompts + i) % tasks.len()];
            let enc = encode_task(&model.vocab, inst)?;
            let prefix = model.encode_image(&inst.question_raster)?;
            groups.push(collect_group(
                model,
                ref_model,
                inst.id,
                &enc.question,
                Some(&prefix),
                &inst.answer,
                &cfg.sampler,
                bias,
                &cfg.reward,
                &[cfg.seed, update as u64, i as u64],
                cfg.text_only,
            )?);
        }
        let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
        outcome.rollouts_collected += n_rollouts;
        one_segment += groups
            .iter()
            .flat_map(|g| g.rollouts.iter())
            .filter(|r| r.n_lat(markers) == 1)
            .count();

        let reward_stats = reward_groups(&groups);
        let mean_of = |f: &dyn Fn(&crate::rewards::RewardBreakdown) -> f64| -> f64 {
            reward_stats
                .iter()
                .flat_map(|g| g.rewards.iter())
                .map(f)
                .sum::<f64>()
                / n_rollouts as f64
        };
        let mean_lat = mean_of(&|r| r.lat);
        let mean_acc = mean_of(&|r| r.acc);
        let mean_total = mean_of(&|r| r.total);

        let advantages = match cfg.mode {
            RlMode::Lagdpo => group_decoupled_advantages(&reward_stats, cfg.adv_eps)?,
            RlMode::GrpoLike => grpo_advantages(&reward_stats, cfg.adv_eps)?,
        };

        let lr_now = cfg.lr * (((update + 1) as f64) / warmup_updates).min(1.0);
        let step_result = lagdpo_update(model, &mut state, &groups, &advantages, cfg, lr_now)?;
        let (pg, kl, grad_scale) = match step_result {
            Some(v) => {
                outcome.updates_done += 1;
                v
            }
            None => {
                outcome.skipped_updates += 1;
                (f64::NAN, f64::NAN, 1.0)
            }
        };

        if let Some(w) = dump.as_mut() {
            write_rollout_dump(w, &groups)?;
        }

        // one scheduler update per optimization step, on the batch mean
        let new_bias = scheduler.update(mean_lat);
        outcome.final_bias = new_bias;
        outcome.final_mean_total = mean_total;

        let mut m = BTreeMap::new();
        m.insert("bias".to_string(), bias);
        m.insert("mean_acc".to_string(), mean_acc);
        m.insert("mean_lat".to_string(), mean_lat);
        m.insert("mean_total".to_string(), mean_total);
        m.insert("grad_scale".to_string(), grad_scale);
        if pg.is_finite() {
            m.insert("pg".to_string(), pg);
            m.insert("kl".to_string(), kl);
        }
        m.insert("lr".to_string(), lr_now);
        metrics.log(&MetricRecord {
            phase: "rl",
            stage: 4,
            epoch: 0,
            step: update + 1,
            metrics: m,
            wall_ms: metrics.elapsed_ms(),
        })?;
    }
    if let Some(mut w) = dump {
        w.flush()?;
    }
    metrics.flush()?;
    outcome.one_segment_rate = if outcome.rollouts_collected > 0 {
        one_segment as f64 / outcome.rollouts_collected as f64
    } else {
        0.0
    };
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::generate_dataset;

    fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig {
            hidden_size: 16,
            n_layers: 1,
            n_heads: 2,
            k_latent: 2,
            max_seq_len: 96,
            raster_size: 16,
            patch_size: 4,
            d_vis: 6,
            seed,
        })
        .unwrap()
    }

    fn quick_cfg(updates: usize) -> RlConfig {
        RlConfig {
            updates,
            update_prompts: 2,
            lr: 1e-3,
            sampler: SamplerConfig {
                n_samples: 3,
                max_response_len: 16,
                seed: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = quick_cfg(1);
        cfg.dual_clip = 1.2;
        assert!(cfg.validate().is_err());
        let mut cfg2 = quick_cfg(1);
        cfg2.ppo_epochs = 2;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn zero_advantages_with_actor_as_ref_barely_move_params() {
        // all rollouts in a group get identical rewards under a constant
        // reward surface only if sampling is degenerate; instead check the
        // KL-only direction: with actor == ref at collection, the KL term
        // starts at zero so the first update is driven by advantages only.
        let mut m = tiny_model(3);
        let refm = tiny_model(3);
        let data = generate_dataset(4, 11).unwrap();
        let mut mw = MetricsWriter::disabled();
        let out = run_rl(&mut m, &refm, &data, &quick_cfg(2), None, &mut mw).unwrap();
        assert_eq!(out.updates_done + out.skipped_updates, 2);
        assert_eq!(out.rollouts_collected, 2 * 2 * 3);
        assert!(out.one_segment_rate >= 0.0 && out.one_segment_rate <= 1.0);
    }

    #[test]
    fn rl_runs_are_deterministic() {
        let data = generate_dataset(4, 12).unwrap();
        let run = || {
            let mut m = tiny_model(5);
            let refm = tiny_model(5);
            let mut mw = MetricsWriter::disabled();
            run_rl(&mut m, &refm, &data, &quick_cfg(2), None, &mut mw).unwrap();
            m.params
                .iter()
                .flat_map(|(_, p)| p.value.data().iter().copied())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_positive_rollout_gains_probability() {
        // one group, one rollout with positive advantage: after a small-lr
        // update its tokens' log-prob must rise
        let mut m = tiny_model(7);
        let refm = tiny_model(7);
        let data = generate_dataset(2, 13).unwrap();
        let enc = encode_task(&m.vocab, &data[0]).unwrap();
        let prefix = m.encode_image(&data[0].question_raster).unwrap();
        let sampler = SamplerConfig {
            n_samples: 3,
            max_response_len: 12,
            seed: 8,
            ..Default::default()
        };
        let group = collect_group(
            &m,
            &refm,
            0,
            &enc.question,
            Some(&prefix),
            &data[0].answer,
            &sampler,
            0.0,
            &RewardConfig::default(),
            &[1],
            false,
        )
        .unwrap();
        // pick rollout 0 as the winner
        let adv = AdvantageMap {
            scalars: vec![vec![1.0, 0.0, 0.0]],
        };
        let prompt_len = group.prompt.len();
        let mut full = group.prompt.clone();
        full.extend_from_slice(&group.rollouts[0].tokens);
        let before: f64 = m
            .score_tokens(&full, Some(&prefix), prompt_len)
            .unwrap()
            .iter()
            .sum();
        let cfg = quick_cfg(1);
        let mut state = OptState::new(&m.params);
        lagdpo_update(&mut m, &mut state, &[group], &adv, &cfg, 1e-3)
            .unwrap()
            .unwrap();
        let after: f64 = m
            .score_tokens(&full, Some(&prefix), prompt_len)
            .unwrap()
            .iter()
            .sum();
        assert!(after > before, "log-prob should rise: {before} -> {after}");
    }
}
