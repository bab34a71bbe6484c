//! Harness operations behind the CLI: train, eval, reward-check, gen-data.

use crate::checkpoint::{self, StageTag};
use crate::config::{RlModeOpt, RunConfig};
use crate::curriculum::{run_stage1, run_stage2, run_stage3, StageSummary};
use crate::encoding::encode_task;
use crate::error::{Error, Result};
use crate::infer::GenParams;
use crate::metrics::{MetricRecord, MetricsWriter};
use crate::model::Model;
use crate::rewards::{
    answer_equivalent, count_latent_segments, has_closed_box, parse_answer, total_reward,
    LatentMarkers, Response, RewardBreakdown, RewardConfig,
};
use crate::rl::{run_rl, RlOutcome};
use crate::taskgen::{self, TaskInstance};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Everything cmd_train leaves behind.
pub struct TrainOutputs {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub stage1: Option<StageSummary>,
    pub stage2: Option<StageSummary>,
    pub stage3: Option<StageSummary>,
    pub rl: Option<RlOutcome>,
}

/// Execute stages 1-3 and the RL phase per the config toggles.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutputs> {
    cfg.validate()?;
    if cfg.dataset.is_empty() {
        return Err(Error::Config("dataset path is required".into()));
    }
    let data = taskgen::read_dataset(Path::new(&cfg.dataset))?;
    let rl_data = if cfg.rl_dataset.is_empty() {
        data.clone()
    } else {
        taskgen::read_dataset(Path::new(&cfg.rl_dataset))?
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.echo"), cfg.echo())?;
    let mut metrics = MetricsWriter::to_file(&out_dir.join("metrics.jsonl"))?;

    let mut model = Model::new(cfg.model_config())?;
    checkpoint::save(&model, StageTag::Init, &out_dir.join("init.bin"))?;
    let mut tag = StageTag::Init;

    let mut stage1 = None;
    let mut stage2 = None;
    let mut stage3 = None;

    if !cfg.text_only {
        let s1 = run_stage1(&mut model, &data, &cfg.stage_config(1), tag, Some(out_dir), &mut metrics)?;
        tag = StageTag::Stage1;
        checkpoint::save(&model, tag, &out_dir.join("stage1_final.bin"))?;
        stage1 = Some(s1);

        if !cfg.skip_stage2 {
            let s2 = run_stage2(&mut model, &data, &cfg.stage_config(2), tag, Some(out_dir), &mut metrics)?;
            tag = StageTag::Stage2;
            checkpoint::save(&model, tag, &out_dir.join("stage2_final.bin"))?;
            stage2 = Some(s2);
        }
    }

    if !cfg.skip_stage3 {
        let mut sc = cfg.stage_config(3);
        // skip toggles are the explicit stage-gate override
        sc.force = cfg.skip_stage2 || cfg.text_only;
        let s3 = run_stage3(&mut model, &data, &sc, tag, Some(out_dir), &mut metrics)?;
        tag = StageTag::Stage3;
        checkpoint::save(&model, tag, &out_dir.join("stage3_final.bin"))?;
        stage3 = Some(s3);
    }

    let mut rl = None;
    if cfg.rl_mode != RlModeOpt::None {
        let reference = model.clone();
        let mut rl_config = cfg.rl_config();
        if rl_config.updates == 0 {
            // one pass over the prompt set
            rl_config.updates = rl_data.len().div_ceil(rl_config.update_prompts);
        }
        let dump_path = out_dir.join("rollouts.jsonl");
        let dump = cfg.dump_rollouts.then_some(dump_path.as_path());
        let outcome = run_rl(&mut model, &reference, &rl_data, &rl_config, dump, &mut metrics)?;
        tag = StageTag::Rl;
        checkpoint::save(&model, tag, &out_dir.join("rl_final.bin"))?;
        rl = Some(outcome);
    }

    let final_path = out_dir.join("final.bin");
    checkpoint::save(&model, tag, &final_path)?;
    metrics.flush()?;
    Ok(TrainOutputs {
        run_dir: out_dir.to_path_buf(),
        final_checkpoint: final_path,
        stage1,
        stage2,
        stage3,
        rl,
    })
}

/// Accuracy report of greedy evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_template: BTreeMap<String, TemplateAccuracy>,
    /// Fraction of generations with exactly one well-formed latent segment.
    pub one_latent_rate: f64,
    /// Fraction with a syntactically closed boxed region.
    pub boxed_rate: f64,
    /// Fraction satisfying both format conditions at once.
    pub boxed_and_one_latent_rate: f64,
    pub mean_response_len: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TemplateAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Greedy generation + deterministic extraction and judging over a task
/// set. Generation failures count as incorrect and are logged.
pub fn evaluate(model: &Model, tasks: &[TaskInstance], cfg: &RunConfig) -> Result<EvalReport> {
    let reward_cfg = cfg.reward_config();
    let markers = LatentMarkers {
        start: model.vocab.latent_start(),
        pad: model.vocab.latent_pad(),
        end: model.vocab.latent_end(),
    };
    let mut correct = 0usize;
    let mut per_template: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut one_latent = 0usize;
    let mut boxed = 0usize;
    let mut both = 0usize;
    let mut total_len = 0usize;
    for inst in tasks {
        let entry = per_template.entry(inst.kind.name().to_string()).or_insert((0, 0));
        entry.1 += 1;
        let generated = (|| -> Result<(Vec<u32>, String)> {
            let enc = encode_task(&model.vocab, inst)?;
            let prefix = model.encode_image(&inst.question_raster)?;
            if prefix.rows() + enc.question.len() > cfg.max_prompt_len {
                return Err(Error::InvalidArgument("prompt exceeds max_prompt_len".into()));
            }
            let mut params = GenParams::greedy(cfg.max_response_len);
            params.ban_latent = cfg.text_only;
            let gen = model.generate(&enc.question, Some(&prefix), &params)?;
            let text = model.vocab.decode(&gen.tokens);
            Ok((gen.tokens, text))
        })();
        match generated {
            Ok((tokens, text)) => {
                total_len += tokens.len();
                let is_correct = parse_answer(&text)
                    .map(|p| answer_equivalent(&p, &inst.answer, reward_cfg.numeric_tol))
                    .unwrap_or(false);
                if is_correct {
                    correct += 1;
                    entry.0 += 1;
                }
                let one = count_latent_segments(&tokens, markers) == 1;
                let boxed_ok = has_closed_box(&text);
                one_latent += usize::from(one);
                boxed += usize::from(boxed_ok);
                both += usize::from(one && boxed_ok);
            }
            Err(e) => {
                log::warn!("generation failed for task {}: {e}; counted incorrect", inst.id);
            }
        }
    }
    let n = tasks.len().max(1) as f64;
    Ok(EvalReport {
        total: tasks.len(),
        correct,
        accuracy: correct as f64 / n,
        per_template: per_template
            .into_iter()
            .map(|(k, (c, t))| {
                (
                    k,
                    TemplateAccuracy {
                        correct: c,
                        total: t,
                        accuracy: c as f64 / t.max(1) as f64,
                    },
                )
            })
            .collect(),
        one_latent_rate: one_latent as f64 / n,
        boxed_rate: boxed as f64 / n,
        boxed_and_one_latent_rate: both as f64 / n,
        mean_response_len: total_len as f64 / n,
    })
}

/// Load a checkpoint and evaluate it on a dataset.
pub fn cmd_eval(checkpoint_path: &Path, dataset: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let (model, _tag) = checkpoint::load(checkpoint_path)?;
    let tasks = taskgen::read_dataset(dataset)?;
    evaluate(&model, &tasks, cfg)
}

/// One reward-check fixture line: a response with the expected breakdown.
#[derive(Debug, Deserialize)]
pub struct RewardCase {
    pub response_text: String,
    pub truth: String,
    pub l_max: usize,
    /// When present, the computed breakdown must match to 1e-9.
    #[serde(default)]
    pub expected: Option<RewardBreakdown>,
}

#[derive(Debug, Serialize)]
pub struct RewardCaseResult {
    pub line: usize,
    pub computed: RewardBreakdown,
    pub pass: bool,
    pub diffs: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct RewardCheckReport {
    pub cases: Vec<RewardCaseResult>,
    pub passed: usize,
    pub failed: usize,
}

const REWARD_CHECK_TOL: f64 = 1e-9;

/// Recompute every fixture breakdown and diff against expectations.
pub fn cmd_reward_check(fixture: &Path, base_cfg: &RewardConfig) -> Result<RewardCheckReport> {
    let file = std::io::BufReader::new(std::fs::File::open(fixture)?);
    let mut cases = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: RewardCase = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", fixture.display(), lineno + 1)))?;
        let cfg = RewardConfig {
            l_max: case.l_max,
            ..*base_cfg
        };
        let response = Response::from_text(&case.response_text);
        let computed = total_reward(&response, &case.truth, &cfg)?;
        let mut diffs = Vec::new();
        if let Some(exp) = &case.expected {
            for (name, got, want) in [
                ("acc", computed.acc, exp.acc),
                ("fmt", computed.fmt, exp.fmt),
                ("lat", computed.lat, exp.lat),
                ("len", computed.len, exp.len),
                ("rep", computed.rep, exp.rep),
                ("total", computed.total, exp.total),
            ] {
                if (got - want).abs() > REWARD_CHECK_TOL {
                    diffs.push(format!("{name}: computed {got} expected {want}"));
                }
            }
        }
        cases.push(RewardCaseResult {
            line: lineno + 1,
            pass: diffs.is_empty(),
            computed,
            diffs,
        });
    }
    if cases.is_empty() {
        return Err(Error::Data(format!("fixture {} is empty", fixture.display())));
    }
    let passed = cases.iter().filter(|c| c.pass).count();
    let failed = cases.len() - passed;
    Ok(RewardCheckReport { cases, passed, failed })
}

/// Write breakdown JSONL next to a reward-check run.
pub fn write_reward_check(w: &mut impl Write, report: &RewardCheckReport) -> Result<()> {
    for case in &report.cases {
        serde_json::to_writer(&mut *w, &case)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Generate a dataset file (and an optional held-out split).
pub fn cmd_gen_data(
    count: usize,
    seed: u64,
    out: &Path,
    split: Option<(f64, &Path)>,
) -> Result<usize> {
    let data = taskgen::generate_dataset(count, seed)?;
    match split {
        Some((train_fraction, eval_path)) => {
            let (train, eval) = taskgen::split_dataset(&data, (train_fraction, 1.0 - train_fraction), seed)?;
            taskgen::write_dataset(out, &train)?;
            taskgen::write_dataset(eval_path, &eval)?;
            Ok(train.len())
        }
        None => {
            taskgen::write_dataset(out, &data)?;
            Ok(data.len())
        }
    }
}

/// Log an eval report into the metrics stream.
pub fn log_eval(metrics: &mut MetricsWriter, phase: &'static str, step: usize, report: &EvalReport) -> Result<()> {
    let mut m = BTreeMap::new();
    m.insert("accuracy".to_string(), report.accuracy);
    m.insert("one_latent_rate".to_string(), report.one_latent_rate);
    m.insert("boxed_rate".to_string(), report.boxed_rate);
    m.insert("mean_response_len".to_string(), report.mean_response_len);
    metrics.log(&MetricRecord {
        phase,
        stage: 0,
        epoch: 0,
        step,
        metrics: m,
        wall_ms: metrics.elapsed_ms(),
    })
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        }
    }
}
