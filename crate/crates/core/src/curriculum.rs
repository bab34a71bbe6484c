//! Three-stage supervised curriculum.
//!
//! Stage 1 grounds the latent positions against the auxiliary image
//! (alignment loss only, stub frozen). Stage 2 runs two forward passes per
//! instance — image-conditioned and plan-only — supervising both against
//! the same target, tying them with the asymmetric consistency loss, and
//! stabilizing language with a small cross-entropy term. Stage 3 drops all
//! alignment supervision and trains pure cross-entropy over the complete
//! assistant output, latent tokens included.

use crate::align::{align_loss, consistency_loss, stage2_loss, stage3_ce, AlignWeights};
use crate::checkpoint::{self, StageTag};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{MetricRecord, MetricsWriter};
use crate::model::{BoundParams, Model};
use crate::optim::{optimizer_step, AdamwConfig, OptState};
use crate::rng::rng_for;
use crate::taskgen::TaskInstance;
use crate::encoding::{assemble_sequence, encode_task};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::Path;

/// Per-stage training parameters.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Overall multiplier on alignment terms (stages 2-3 default 2.0).
    pub align_weight: f64,
    pub align: AlignWeights,
    /// Optional small CE term during stage 1.
    pub stage1_ce: bool,
    /// Train/evaluate without latent blocks (stage 3 only).
    pub text_only: bool,
    /// Override the stage-ordering gate (for ablations).
    pub force: bool,
}

impl StageConfig {
    pub fn defaults_for(stage: u8) -> Self {
        StageConfig {
            stage,
            epochs: match stage {
                2 => 2,
                _ => 5,
            },
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
            align_weight: if stage == 1 { 1.0 } else { 2.0 },
            align: AlignWeights::default(),
            stage1_ce: false,
            text_only: false,
            force: false,
        }
    }
}

/// Per-stage outcome: epoch-mean metrics plus the skipped-instance count.
#[derive(Debug, Clone)]
pub struct StageSummary {
    /// `epoch_means[0]` is the pre-training evaluation pass; entries
    /// `1..=epochs` are training epochs.
    pub epoch_means: Vec<BTreeMap<String, f64>>,
    pub skipped_instances: usize,
}

impl StageSummary {
    pub fn mean(&self, epoch: usize, key: &str) -> f64 {
        self.epoch_means[epoch].get(key).copied().unwrap_or(f64::NAN)
    }
}

fn require_stage(prev: StageTag, needed: StageTag, stage: u8, force: bool) -> Result<()> {
    if force || prev >= needed {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "stage {stage} requires a checkpoint from stage {needed:?} or later (got {prev:?}); set the override flag to skip"
        )))
    }
}

struct InstanceLoss {
    loss: NodeId,
    parts: Vec<(&'static str, f64)>,
}

type LossBuilder<'a> = dyn Fn(&Model, &mut Graph, &BoundParams, &TaskInstance) -> Result<Option<InstanceLoss>> + 'a;

/// Shared epoch/batch loop: per-instance graphs, batch-mean gradients,
/// one optimizer step per batch.
#[allow(clippy::too_many_arguments)]
fn run_stage_loop(
    model: &mut Model,
    data: &[TaskInstance],
    cfg: &StageConfig,
    tag: StageTag,
    phase: &'static str,
    run_dir: Option<&Path>,
    metrics: &mut MetricsWriter,
    build: &LossBuilder<'_>,
) -> Result<StageSummary> {
    let adamw = AdamwConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = OptState::new(&model.params);
    let mut skipped_total = 0usize;
    let mut epoch_means = Vec::with_capacity(cfg.epochs + 1);

    // pre-training evaluation pass ("initialization" reference)
    epoch_means.push(evaluate_means(model, data, build)?);

    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = rng_for(cfg.seed, &[cfg.stage as u64, epoch as u64]);
        order.shuffle(&mut rng);

        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_parts: BTreeMap<String, f64> = BTreeMap::new();
            let mut used = 0usize;
            let mut graphs: Vec<(Graph, BoundParams, NodeId)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut g = Graph::new();
                let bp = model.bind(&mut g);
                match build(model, &mut g, &bp, &data[i])? {
                    Some(il) => {
                        for (k, v) in &il.parts {
                            *batch_parts.entry((*k).to_string()).or_insert(0.0) += v;
                        }
                        used += 1;
                        graphs.push((g, bp, il.loss));
                    }
                    None => skipped_total += 1,
                }
            }
            if used == 0 {
                continue;
            }
            model.params.zero_grads();
            for (mut g, bp, loss) in graphs {
                let scaled = g.scale(loss, 1.0 / used as f64)?;
                g.backward(scaled)?;
                bp.apply_grads(&g, &mut model.params)?;
            }
            optimizer_step(&mut model.params, &mut state, &adamw)?;

            let mut record_metrics = BTreeMap::new();
            for (k, v) in &batch_parts {
                let mean = v / used as f64;
                record_metrics.insert(k.clone(), mean);
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
            count += used;
            step += 1;
            metrics.log(&MetricRecord {
                phase,
                stage: cfg.stage,
                epoch,
                step,
                metrics: record_metrics,
                wall_ms: metrics.elapsed_ms(),
            })?;
        }
        let means: BTreeMap<String, f64> = sums
            .into_iter()
            .map(|(k, v)| (k, v / count.max(1) as f64))
            .collect();
        epoch_means.push(means);

        if let Some(dir) = run_dir {
            checkpoint::save(model, tag, &dir.join(format!("stage{}_epoch{epoch}.bin", cfg.stage)))?;
        }
    }
    metrics.flush()?;
    Ok(StageSummary {
        epoch_means,
        skipped_instances: skipped_total,
    })
}

fn evaluate_means(
    model: &Model,
    data: &[TaskInstance],
    build: &LossBuilder<'_>,
) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut count = 0usize;
    for inst in data {
        let mut g = Graph::new();
        let bp = model.bind(&mut g);
        if let Some(il) = build(model, &mut g, &bp, inst)? {
            for (k, v) in &il.parts {
                *sums.entry((*k).to_string()).or_insert(0.0) += v;
            }
            count += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, v)| (k, v / count.max(1) as f64))
        .collect())
}

/// Stage 1: visual-latent alignment with image + plan inputs.
pub fn run_stage1(
    model: &mut Model,
    data: &[TaskInstance],
    cfg: &StageConfig,
    prev: StageTag,
    run_dir: Option<&Path>,
    metrics: &mut MetricsWriter,
) -> Result<StageSummary> {
    require_stage(prev, StageTag::Init, 1, cfg.force)?;
    let k = model.cfg.k_latent;
    let align_w = cfg.align;
    let stage_w = cfg.align_weight;
    let with_ce = cfg.stage1_ce;
    let build = move |model: &Model, g: &mut Graph, bp: &BoundParams, inst: &TaskInstance| -> Result<Option<InstanceLoss>> {
        let Some(aux) = inst.aux_raster.as_ref() else {
            return Ok(None);
        };
        let enc = encode_task(&model.vocab, inst)?;
        let prefix = model.encode_image(&inst.question_raster)?;
        let (tokens, layout) = assemble_sequence(&enc, &model.vocab, prefix.rows(), Some(k), false);
        let h_target = model.project_target(g, bp, aux)?;
        let out = model.forward(g, bp, &tokens, Some(&prefix))?;
        let h_gen = model
            .latent_hidden(g, out.hidden, &layout)?
            .expect("stage-1 layout carries a latent block");
        let align = align_loss(g, h_gen, h_target, &align_w)?;
        let mut loss = g.scale(align, stage_w)?;
        let mut parts = vec![("align", g.value(align).item())];
        if with_ce {
            let span = layout.plan.start..layout.latent.end;
            let ce = stage3_ce(g, out.logits, &tokens, layout.prefix.len(), span)?;
            parts.push(("ce", g.value(ce).item()));
            let ce_term = g.scale(ce, 0.1)?;
            loss = g.add(loss, ce_term)?;
        }
        parts.push(("loss", g.value(loss).item()));
        Ok(Some(InstanceLoss { loss, parts }))
    };
    run_stage_loop(model, data, cfg, StageTag::Stage1, "stage1", run_dir, metrics, &build)
}

/// Stage 2: plan-guided internalization with parallel image-conditioned
/// and plan-only streams.
pub fn run_stage2(
    model: &mut Model,
    data: &[TaskInstance],
    cfg: &StageConfig,
    prev: StageTag,
    run_dir: Option<&Path>,
    metrics: &mut MetricsWriter,
) -> Result<StageSummary> {
    require_stage(prev, StageTag::Stage1, 2, cfg.force)?;
    let k = model.cfg.k_latent;
    let align_w = cfg.align;
    let stage_w = cfg.align_weight;
    let build = move |model: &Model, g: &mut Graph, bp: &BoundParams, inst: &TaskInstance| -> Result<Option<InstanceLoss>> {
        let Some(aux) = inst.aux_raster.as_ref() else {
            return Ok(None);
        };
        let enc = encode_task(&model.vocab, inst)?;
        let h_target = model.project_target(g, bp, aux)?;

        // image-conditioned stream (reference signal + CE)
        let prefix = model.encode_image(&inst.question_raster)?;
        let (tokens_img, layout_img) = assemble_sequence(&enc, &model.vocab, prefix.rows(), Some(k), true);
        let out_img = model.forward(g, bp, &tokens_img, Some(&prefix))?;
        let h_img = model
            .latent_hidden(g, out_img.hidden, &layout_img)?
            .expect("latent block present");
        let sim_img_raw = align_loss(g, h_img, h_target, &align_w)?;
        let ce = stage3_ce(
            g,
            out_img.logits,
            &tokens_img,
            layout_img.prefix.len(),
            layout_img.output(),
        )?;

        // plan-only stream: no image prefix at all
        let (tokens_txt, layout_txt) = assemble_sequence(&enc, &model.vocab, 0, Some(k), false);
        let out_txt = model.forward(g, bp, &tokens_txt, None)?;
        let h_txt = model
            .latent_hidden(g, out_txt.hidden, &layout_txt)?
            .expect("latent block present");
        let sim_txt_raw = align_loss(g, h_txt, h_target, &align_w)?;

        let cons = consistency_loss(g, h_txt, h_img)?;
        let sim_img = g.scale(sim_img_raw, stage_w)?;
        let sim_txt = g.scale(sim_txt_raw, stage_w)?;
        let loss = stage2_loss(g, ce, sim_img, sim_txt, cons)?;
        let parts = vec![
            ("ce", g.value(ce).item()),
            ("sim_img", g.value(sim_img_raw).item()),
            ("sim_txt", g.value(sim_txt_raw).item()),
            ("cons", g.value(cons).item()),
            ("loss", g.value(loss).item()),
        ];
        Ok(Some(InstanceLoss { loss, parts }))
    };
    run_stage_loop(model, data, cfg, StageTag::Stage2, "stage2", run_dir, metrics, &build)
}

/// Stage 3: end-to-end cross-entropy over plan, latent block, and answer.
pub fn run_stage3(
    model: &mut Model,
    data: &[TaskInstance],
    cfg: &StageConfig,
    prev: StageTag,
    run_dir: Option<&Path>,
    metrics: &mut MetricsWriter,
) -> Result<StageSummary> {
    require_stage(prev, StageTag::Stage2, 3, cfg.force)?;
    let latent = if cfg.text_only {
        None
    } else {
        Some(model.cfg.k_latent)
    };
    let build = move |model: &Model, g: &mut Graph, bp: &BoundParams, inst: &TaskInstance| -> Result<Option<InstanceLoss>> {
        let enc = encode_task(&model.vocab, inst)?;
        let prefix = model.encode_image(&inst.question_raster)?;
        let (tokens, layout) = assemble_sequence(&enc, &model.vocab, prefix.rows(), latent, true);
        let out = model.forward(g, bp, &tokens, Some(&prefix))?;
        let ce = stage3_ce(g, out.logits, &tokens, layout.prefix.len(), layout.output())?;
        let parts = vec![("ce", g.value(ce).item()), ("loss", g.value(ce).item())];
        Ok(Some(InstanceLoss { loss: ce, parts }))
    };
    run_stage_loop(model, data, cfg, StageTag::Stage3, "stage3", run_dir, metrics, &build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::generate_dataset;

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            hidden_size: 16,
            n_layers: 1,
            n_heads: 2,
            k_latent: 2,
            max_seq_len: 96,
            raster_size: 16,
            patch_size: 4,
            d_vis: 6,
            seed: 5,
        })
        .unwrap()
    }

    fn quick_cfg(stage: u8, epochs: usize) -> StageConfig {
        StageConfig {
            epochs,
            lr: 1e-3,
            batch_size: 4,
            ..StageConfig::defaults_for(stage)
        }
    }

    #[test]
    fn stage_gate_enforced_and_overridable() {
        let mut m = tiny_model();
        let data = generate_dataset(4, 2).unwrap();
        let mut mw = MetricsWriter::disabled();
        let err = run_stage2(&mut m, &data, &quick_cfg(2, 0), StageTag::Init, None, &mut mw);
        assert!(err.is_err());
        let mut forced = quick_cfg(2, 0);
        forced.force = true;
        run_stage2(&mut m, &data, &forced, StageTag::Init, None, &mut mw).unwrap();
        let err3 = run_stage3(&mut m, &data, &quick_cfg(3, 0), StageTag::Stage1, None, &mut mw);
        assert!(err3.is_err());
    }

    #[test]
    fn zero_epochs_leave_model_at_init() {
        let mut m = tiny_model();
        let before: Vec<Vec<f64>> = m.params.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        let data = generate_dataset(4, 3).unwrap();
        let mut mw = MetricsWriter::disabled();
        run_stage1(&mut m, &data, &quick_cfg(1, 0), StageTag::Init, None, &mut mw).unwrap();
        let after: Vec<Vec<f64>> = m.params.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn stage1_trains_and_keeps_stub_frozen() {
        let mut m = tiny_model();
        let stub_before: Vec<f64> = m.params.get("stub.weight").unwrap().value.data().to_vec();
        let data = generate_dataset(8, 4).unwrap();
        let mut mw = MetricsWriter::disabled();
        let summary = run_stage1(&mut m, &data, &quick_cfg(1, 2), StageTag::Init, None, &mut mw).unwrap();
        assert_eq!(summary.skipped_instances, 0);
        assert_eq!(summary.epoch_means.len(), 3);
        // alignment falls from its initialization value
        assert!(summary.mean(2, "align") < summary.mean(0, "align"));
        let stub_after: Vec<f64> = m.params.get("stub.weight").unwrap().value.data().to_vec();
        assert_eq!(stub_before, stub_after);
    }

    #[test]
    fn stage1_skips_instances_without_aux() {
        let mut m = tiny_model();
        let mut data = generate_dataset(6, 5).unwrap();
        data[1].aux_raster = None;
        data[4].aux_raster = None;
        let mut mw = MetricsWriter::disabled();
        let summary = run_stage1(&mut m, &data, &quick_cfg(1, 1), StageTag::Init, None, &mut mw).unwrap();
        // two instances skipped once per training epoch
        assert_eq!(summary.skipped_instances, 2);
    }

    #[test]
    fn stage2_runs_both_streams() {
        let mut m = tiny_model();
        let data = generate_dataset(6, 6).unwrap();
        let mut mw = MetricsWriter::disabled();
        let summary = run_stage2(&mut m, &data, &quick_cfg(2, 1), StageTag::Stage1, None, &mut mw).unwrap();
        let keys: Vec<&str> = summary.epoch_means[1].keys().map(|s| s.as_str()).collect();
        assert_eq!(keys, vec!["ce", "cons", "loss", "sim_img", "sim_txt"]);
    }

    #[test]
    fn stage3_ce_decreases_on_tiny_set() {
        let mut m = tiny_model();
        let data = generate_dataset(6, 7).unwrap();
        let mut mw = MetricsWriter::disabled();
        let summary = run_stage3(&mut m, &data, &quick_cfg(3, 3), StageTag::Stage2, None, &mut mw).unwrap();
        assert!(summary.mean(3, "ce") < summary.mean(0, "ce"));
    }
}
