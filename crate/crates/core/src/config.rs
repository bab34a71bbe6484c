//! Flat `key = value` run configuration.
//!
//! Every key defaults to the published hyperparameter tables, so an empty
//! file reproduces those settings at toy scale. Unknown keys are rejected;
//! the effective configuration is echoed verbatim into the run directory.

use crate::align::AlignWeights;
use crate::curriculum::StageConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rewards::{LenOnset, RepCombination, RewardConfig};
use crate::rl::{RlConfig, RlMode};
use crate::rollout::SamplerConfig;
use std::path::Path;

/// `rl_mode` key values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlModeOpt {
    Lagdpo,
    GrpoLike,
    None,
}

trait ConfigValue: Sized {
    fn parse_cfg(key: &str, value: &str) -> Result<Self>;
    fn display_cfg(&self) -> String;
}

macro_rules! plain_value {
    ($($ty:ty),*) => {$(
        impl ConfigValue for $ty {
            fn parse_cfg(key: &str, value: &str) -> Result<Self> {
                value.parse().map_err(|_| {
                    Error::Config(format!("invalid value {value:?} for key {key}"))
                })
            }
            fn display_cfg(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

impl ConfigValue for String {
    fn parse_cfg(_key: &str, value: &str) -> Result<Self> {
        Ok(value.to_string())
    }
    fn display_cfg(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for RepCombination {
    fn parse_cfg(key: &str, value: &str) -> Result<Self> {
        match value {
            "sum" => Ok(RepCombination::Sum),
            "literal_max" => Ok(RepCombination::LiteralMax),
            _ => Err(Error::Config(format!(
                "invalid value {value:?} for key {key}; expected sum or literal_max"
            ))),
        }
    }
    fn display_cfg(&self) -> String {
        match self {
            RepCombination::Sum => "sum".into(),
            RepCombination::LiteralMax => "literal_max".into(),
        }
    }
}

impl ConfigValue for LenOnset {
    fn parse_cfg(key: &str, value: &str) -> Result<Self> {
        match value {
            "literal" => Ok(LenOnset::Literal),
            "lt" => Ok(LenOnset::TargetLength),
            _ => Err(Error::Config(format!(
                "invalid value {value:?} for key {key}; expected literal or lt"
            ))),
        }
    }
    fn display_cfg(&self) -> String {
        match self {
            LenOnset::Literal => "literal".into(),
            LenOnset::TargetLength => "lt".into(),
        }
    }
}

impl ConfigValue for RlModeOpt {
    fn parse_cfg(key: &str, value: &str) -> Result<Self> {
        match value {
            "lagdpo" => Ok(RlModeOpt::Lagdpo),
            "grpo_like" => Ok(RlModeOpt::GrpoLike),
            "none" => Ok(RlModeOpt::None),
            _ => Err(Error::Config(format!(
                "invalid value {value:?} for key {key}; expected lagdpo, grpo_like or none"
            ))),
        }
    }
    fn display_cfg(&self) -> String {
        match self {
            RlModeOpt::Lagdpo => "lagdpo".into(),
            RlModeOpt::GrpoLike => "grpo_like".into(),
            RlModeOpt::None => "none".into(),
        }
    }
}

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr),* $(,)?) => {
        /// All run settings as named keys.
        #[derive(Debug, Clone)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// Apply one `key = value` assignment; unknown keys are errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_cfg(key, value)?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }

            /// Effective configuration as `key = value` lines.
            pub fn echo(&self) -> String {
                let mut s = String::new();
                $(
                    s.push_str(stringify!($key));
                    s.push_str(" = ");
                    s.push_str(&self.$key.display_cfg());
                    s.push('\n');
                )*
                s
            }
        }
    };
}

run_config! {
    // model
    hidden_size: usize = 128,
    n_layers: usize = 4,
    n_heads: usize = 4,
    k_latent: usize = 10,
    max_seq_len: usize = 1024,
    raster_size: usize = 16,
    patch_size: usize = 4,
    d_vis: usize = 32,
    // supervised stages
    sft_lr: f64 = 1e-5,
    weight_decay: f64 = 0.01,
    batch_size: usize = 8,
    stage1_epochs: usize = 5,
    stage2_epochs: usize = 2,
    stage3_epochs: usize = 5,
    stage1_align_weight: f64 = 1.0,
    stage2_align_weight: f64 = 2.0,
    stage3_align_weight: f64 = 2.0,
    lambda_cos: f64 = 1.0,
    lambda_mse: f64 = 1.0,
    stage1_ce: bool = false,
    // rl phase
    rl_lr: f64 = 1e-7,
    kl_beta: f64 = 0.03,
    ppo_epochs: usize = 1,
    clip_eps_low: f64 = 0.2,
    clip_eps_high: f64 = 0.3,
    dual_clip: f64 = 3.0,
    warmup_ratio: f64 = 0.15,
    max_grad_norm: f64 = 2.0,
    update_prompts: usize = 16,
    samples_per_prompt: usize = 8,
    max_prompt_len: usize = 4096,
    max_response_len: usize = 2048,
    temperature: f64 = 0.9,
    top_p: f64 = 0.99,
    rl_updates: usize = 0,
    // rewards
    lambda_len: f64 = 0.2,
    lambda_rep: f64 = 1.2,
    tau3: f64 = 0.18,
    tau4: f64 = 0.12,
    m0: usize = 6,
    rep_max_penalty: f64 = 2.0,
    numeric_tol: f64 = 0.02,
    rep_combination: RepCombination = RepCombination::Sum,
    len_onset: LenOnset = LenOnset::Literal,
    // latent bias scheduler
    latent_bias: f64 = 10.0,
    latent_bias_decay: f64 = 1.0,
    latent_reward_ema: f64 = 0.9,
    latent_bias_min: f64 = 0.0,
    latent_bias_enabled: bool = true,
    // ablation toggles
    skip_stage2: bool = false,
    skip_stage3: bool = false,
    rl_mode: RlModeOpt = RlModeOpt::Lagdpo,
    text_only: bool = false,
    // run plumbing
    seed: u64 = 0,
    dataset: String = String::new(),
    rl_dataset: String = String::new(),
    dump_rollouts: bool = false,
}

impl RunConfig {
    /// Parse the flat text format: `key = value` lines, `#` comments.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.rl_config().validate()?;
        if self.text_only && self.k_latent == 0 {
            return Err(Error::Config("text_only already removes latent blocks; k_latent 0 is redundant".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_size: self.hidden_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            k_latent: self.k_latent,
            max_seq_len: self.max_seq_len,
            raster_size: self.raster_size,
            patch_size: self.patch_size,
            d_vis: self.d_vis,
            seed: self.seed,
        }
    }

    pub fn stage_config(&self, stage: u8) -> StageConfig {
        StageConfig {
            stage,
            epochs: match stage {
                1 => self.stage1_epochs,
                2 => self.stage2_epochs,
                _ => self.stage3_epochs,
            },
            lr: self.sft_lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            align_weight: match stage {
                1 => self.stage1_align_weight,
                2 => self.stage2_align_weight,
                _ => self.stage3_align_weight,
            },
            align: AlignWeights {
                lambda_cos: self.lambda_cos,
                lambda_mse: self.lambda_mse,
            },
            stage1_ce: self.stage1_ce,
            text_only: self.text_only,
            force: false,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            lambda_len: self.lambda_len,
            lambda_rep: self.lambda_rep,
            tau3: self.tau3,
            tau4: self.tau4,
            m0: self.m0,
            r_max: self.rep_max_penalty,
            numeric_tol: self.numeric_tol,
            l_max: self.max_response_len,
            rep_combination: self.rep_combination,
            len_onset: self.len_onset,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_response_len: self.max_response_len,
            n_samples: self.samples_per_prompt,
            seed: self.seed,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            mode: match self.rl_mode {
                RlModeOpt::GrpoLike => RlMode::GrpoLike,
                _ => RlMode::Lagdpo,
            },
            kl_beta: self.kl_beta,
            ppo_epochs: self.ppo_epochs,
            eps_low: self.clip_eps_low,
            eps_high: self.clip_eps_high,
            dual_clip: self.dual_clip,
            lr: self.rl_lr,
            warmup_ratio: self.warmup_ratio,
            max_grad_norm: self.max_grad_norm,
            update_prompts: self.update_prompts,
            updates: self.rl_updates,
            sampler: self.sampler_config(),
            reward: self.reward_config(),
            bias_rho: self.latent_reward_ema,
            bias_b0: self.latent_bias,
            bias_lambda: self.latent_bias_decay,
            bias_min: self.latent_bias_min,
            bias_enabled: self.latent_bias_enabled,
            adv_eps: crate::advantage::ADV_EPS,
            text_only: self.text_only,
            seed: self.seed,
        }
    }
}
