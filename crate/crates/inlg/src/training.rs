//! Mapping-network pretraining and downstream two-phase finetuning, plus
//! perplexity evaluation.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{group_of, Model, ParamGroup, ParamNodes};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::optim::{clip_global_norm, AdamConfig, LrSchedule, OptimizerState};
use crate::numcore::rng::{Rng, SeedSplitter};
use crate::numcore::tensor::Tensor;
use crate::objectives::{
    contrastive_loss_node, teacher_loss_node, ContrastiveConfig, LossBreakdown, LossReduction,
};
use crate::textdata::batching::{make_batches, Batch};
use crate::textdata::corpus::Example;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    /// Global-norm gradient clip; None disables.
    pub clip_norm: Option<f32>,
    pub contrastive: ContrastiveConfig,
    pub loss_reduction: LossReduction,
    pub seed: u64,
    pub tune_lm: bool,
    pub pretrain_map: bool,
    pub tune_map: bool,
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 400,
            clip_norm: Some(1.0),
            contrastive: ContrastiveConfig::default(),
            loss_reduction: LossReduction::Mean,
            seed: 0,
            tune_lm: true,
            pretrain_map: false,
            tune_map: true,
            drop_last: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    pub clip_norm: Option<f32>,
    pub loss_reduction: LossReduction,
    pub seed: u64,
    /// Tune the LM jointly during mapping pretraining (off: captioning
    /// against a frozen LM).
    pub tune_lm: bool,
    pub drop_last: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 5000,
            clip_norm: Some(1.0),
            loss_reduction: LossReduction::Mean,
            seed: 0,
            tune_lm: false,
            drop_last: false,
        }
    }
}

/// One line of train.log.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub ep: usize,
    pub teacher: f32,
    pub contrastive: f32,
    pub lambda_effective: f32,
    pub lr: f32,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    /// Per-epoch validation cross-entropy (token mean), when a validation
    /// corpus was supplied.
    pub val_ce: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Which loss a batch graph should end in.
#[derive(Debug, Clone)]
pub enum BatchObjective<'a> {
    /// Teacher forcing only (phase 1, pretraining, perplexity).
    Teacher {
        reduction: LossReduction,
        force_empty_context: bool,
    },
    /// Teacher plus lambda-weighted InfoNCE (phase 2).
    Combined {
        reduction: LossReduction,
        contrastive: &'a ContrastiveConfig,
    },
    /// The InfoNCE term alone (gradient verification).
    ContrastiveOnly { contrastive: &'a ContrastiveConfig },
}

pub struct BatchLoss {
    pub total: NodeId,
    pub teacher: Option<f64>,
    pub contrastive: Option<f64>,
}

/// Assemble the full batch loss into an existing graph whose parameter
/// leaves are already registered in `nodes`. Shared by the training loops
/// and the finite-difference harnesses.
pub fn build_batch_loss(
    model: &Model,
    g: &mut Graph,
    nodes: &ParamNodes,
    examples: &[Example],
    objective: &BatchObjective,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<BatchLoss> {
    let use_prefix = model.cfg.prefix_len > 0;
    let (want_teacher, want_contrastive, reduction, force_empty, ccfg) = match objective {
        BatchObjective::Teacher {
            reduction,
            force_empty_context,
        } => (true, false, *reduction, *force_empty_context, None),
        BatchObjective::Combined {
            reduction,
            contrastive,
        } => (true, true, *reduction, false, Some(*contrastive)),
        BatchObjective::ContrastiveOnly { contrastive } => (
            false,
            true,
            LossReduction::Mean,
            false,
            Some(*contrastive),
        ),
    };
    if want_contrastive && examples.len() < 2 {
        return Err(Error::contract(
            "contrastive objective needs a batch of at least 2",
        ));
    }

    let mut logits = Vec::with_capacity(examples.len());
    let mut slots = Vec::with_capacity(examples.len());
    let mut reps = Vec::with_capacity(examples.len());
    for e in examples {
        let prefix = if use_prefix {
            Some(model.map_features_node(g, nodes, &e.feature)?)
        } else {
            None
        };
        let context: &[u32] = if force_empty { &[] } else { &e.context_ids };
        let fwd = model.lm_forward_node(
            g,
            nodes,
            prefix,
            context,
            &e.target_ids,
            &e.id,
            dropout_rng.as_deref_mut(),
        )?;
        logits.push(fwd.logits);
        if want_contrastive {
            reps.push(model.sentence_rep_node(g, nodes, fwd.hidden, &fwd.target_rows)?);
        }
        slots.push(fwd.loss_slots);
    }

    let teacher = if want_teacher {
        Some(teacher_loss_node(g, &logits, &slots, reduction)?)
    } else {
        None
    };
    let closs = if want_contrastive {
        let ccfg = ccfg.expect("contrastive objective carries its config");
        let rep_mat = g.concat_rows(&reps);
        let mut data = Vec::with_capacity(examples.len() * model.cfg.d_v);
        for e in examples {
            if e.feature.len() != model.cfg.d_v {
                return Err(Error::contract(format!(
                    "example {} feature dim {} does not match model d_v {}",
                    e.id,
                    e.feature.len(),
                    model.cfg.d_v
                )));
            }
            data.extend_from_slice(&e.feature);
        }
        let feats = Tensor::from_vec(vec![examples.len(), model.cfg.d_v], data)?;
        let feat_node = g.input(&feats);
        Some(contrastive_loss_node(g, feat_node, rep_mat, ccfg)?)
    } else {
        None
    };

    let total = match (teacher, closs) {
        (Some(t), Some(c)) => {
            let lambda = ccfg.expect("combined objective").lambda;
            let scaled = g.scale(c, lambda as f64);
            g.add(t, scaled)
        }
        (Some(t), None) => t,
        (None, Some(c)) => c,
        (None, None) => unreachable!("an objective always has at least one term"),
    };
    Ok(BatchLoss {
        total,
        teacher: teacher.map(|t| g.scalar_value(t)),
        contrastive: closs.map(|c| g.scalar_value(c)),
    })
}

/// Forward + backward + update for one batch. Returns the loss components.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &Batch,
    epoch: usize,
    lr: f32,
    contrastive: Option<&ContrastiveConfig>,
    reduction: LossReduction,
    clip_norm: Option<f32>,
    trainable: &dyn Fn(&str) -> bool,
    force_empty_context: bool,
    dropout_rng: Option<&mut Rng>,
) -> Result<LossBreakdown> {
    let use_prefix = model.cfg.prefix_len > 0;
    let want_contrastive = contrastive.is_some_and(|c| c.contrastive_active(epoch));
    let phase2 = want_contrastive && batch.len() >= 2;

    let mut g = Graph::new();
    let nodes = model.register(&mut g, use_prefix, phase2);
    let objective = if phase2 {
        BatchObjective::Combined {
            reduction,
            contrastive: contrastive.expect("phase2 implies a contrastive config"),
        }
    } else {
        BatchObjective::Teacher {
            reduction,
            force_empty_context,
        }
    };
    let loss = build_batch_loss(model, &mut g, &nodes, &batch.examples, &objective, dropout_rng)?;
    let breakdown = match (loss.teacher, loss.contrastive) {
        (Some(t), Some(c)) => {
            let lambda = contrastive.expect("phase2").lambda;
            LossBreakdown {
                teacher: t as f32,
                contrastive: c as f32,
                lambda_effective: lambda,
                total: t as f32 + lambda * (c as f32),
                batch_size: batch.len(),
                contrastive_skipped: false,
            }
        }
        (Some(t), None) => LossBreakdown::teacher_only(t, batch.len()),
        _ => unreachable!("training always has a teacher term"),
    };
    let total = loss.total;

    let mut grads = g.backward(total)?;
    if let Some(max_norm) = clip_norm {
        let mut clip_refs: Vec<&mut Tensor> = grads
            .iter_mut()
            .filter(|(name, _)| trainable(name))
            .map(|(_, t)| t)
            .collect();
        clip_global_norm(&mut clip_refs, max_norm);
    }
    let mut triples: Vec<(&str, &mut Tensor, &Tensor)> = Vec::new();
    for (name, tensor) in model.params.iter_mut() {
        if !trainable(name) {
            continue;
        }
        if let Some(grad) = grads.get(name) {
            triples.push((name, tensor, grad));
        }
    }
    opt.step(&mut triples, lr)?;
    Ok(breakdown)
}

/// Token-mean cross-entropy and perplexity over a corpus.
#[derive(Debug, Clone, Serialize)]
pub struct PerplexityReport {
    pub mean_ce: f64,
    pub perplexity: f64,
    pub tokens: usize,
    pub texts: usize,
}

pub fn evaluate_perplexity(model: &Model, corpus: &[Example]) -> Result<PerplexityReport> {
    if corpus.is_empty() {
        return Err(Error::contract("perplexity over an empty corpus"));
    }
    let use_prefix = model.cfg.prefix_len > 0;
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for e in corpus {
        let mut g = Graph::new();
        let nodes = model.register(&mut g, use_prefix, false);
        let prefix = if use_prefix {
            Some(model.map_features_node(&mut g, &nodes, &e.feature)?)
        } else {
            None
        };
        let fwd =
            model.lm_forward_node(&mut g, &nodes, prefix, &e.context_ids, &e.target_ids, &e.id, None)?;
        let (sum, count) = g.cross_entropy_sum(fwd.logits, &fwd.loss_slots);
        total += g.scalar_value(sum);
        tokens += count;
    }
    let mean_ce = total / tokens as f64;
    Ok(PerplexityReport {
        mean_ce,
        perplexity: mean_ce.exp(),
        tokens,
        texts: corpus.len(),
    })
}

fn write_log_line(file: &mut Option<File>, record: &StepRecord) -> Result<()> {
    if let Some(f) = file {
        serde_json::to_writer(&mut *f, record)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn checkpoint_path(run_dir: &Path, name: &str) -> std::path::PathBuf {
    run_dir.join("ckpt").join(name)
}

/// Task-agnostic mapping pretraining: teacher forcing with the prefix as the
/// sole conditioning (the text context is forced empty). By default only the
/// mapping network trains.
pub fn pretrain_mapping(
    mut model: Model,
    pairs: &[Example],
    cfg: &PretrainConfig,
    out_ckpt: Option<&Path>,
) -> Result<Model> {
    if model.cfg.prefix_len == 0 {
        return Err(Error::contract("mapping pretraining needs prefix_len > 0"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("mapping pretraining needs a corpus"));
    }
    if let Some(e) = pairs.iter().find(|e| e.feature.len() != model.cfg.d_v) {
        return Err(Error::contract(format!(
            "pretraining pair {} has feature dim {} but model d_v is {}",
            e.id,
            e.feature.len(),
            model.cfg.d_v
        )));
    }

    let splitter = SeedSplitter::new(cfg.seed);
    let mut opt = OptimizerState::new(AdamConfig {
        weight_decay: cfg.weight_decay as f64,
        ..AdamConfig::default()
    });
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
    };
    let tune_lm = cfg.tune_lm;
    let trainable = move |name: &str| match group_of(name) {
        ParamGroup::Mapping => true,
        ParamGroup::Lm => tune_lm,
        ParamGroup::Projection => false,
    };

    let mut step = 0u64;
    for ep in 0..cfg.epochs {
        let batches = make_batches(
            pairs,
            cfg.batch_size,
            splitter.derive(&format!("data/ep{ep}")),
            cfg.drop_last,
        );
        for (bi, batch) in batches.iter().enumerate() {
            let lr = schedule.lr_at(step);
            let mut dropout = if model.cfg.dropout > 0.0 {
                Some(splitter.stream(&format!("dropout/ep{ep}/step{bi}")))
            } else {
                None
            };
            train_step(
                &mut model,
                &mut opt,
                batch,
                ep,
                lr,
                None,
                cfg.loss_reduction,
                cfg.clip_norm,
                &trainable,
                true,
                dropout.as_mut(),
            )?;
            step += 1;
        }
    }
    if let Some(path) = out_ckpt {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        model.save_checkpoint(path)?;
    }
    Ok(model)
}

/// Downstream finetuning: teacher-only for the first `n_no_contra` epochs,
/// the weighted combination afterwards. Parameter groups with their tune
/// flag off stay bit-identical. When `run_dir` is given, writes
/// `train.log.jsonl` and per-epoch checkpoints under `ckpt/`.
pub fn finetune(
    mut model: Model,
    train: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
    mapping_ckpt: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::contract("finetune needs at least one epoch"));
    }
    if train.is_empty() {
        return Err(Error::contract("finetune needs a training corpus"));
    }
    cfg.contrastive.validate()?;

    if cfg.pretrain_map {
        let Some(path) = mapping_ckpt else {
            return Err(Error::Config(
                "pretrain_map is set but no mapping checkpoint was supplied".to_string(),
            ));
        };
        let source = Model::from_checkpoint(path)?;
        model.load_group(&source.params, ParamGroup::Mapping)?;
    }

    let mut log_file = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("ckpt"))?;
            Some(File::create(dir.join("train.log.jsonl"))?)
        }
        None => None,
    };

    let splitter = SeedSplitter::new(cfg.seed);
    let mut opt = OptimizerState::new(AdamConfig {
        weight_decay: cfg.weight_decay as f64,
        ..AdamConfig::default()
    });
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
    };

    let mut log = Vec::new();
    let mut val_ce = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0u64;

    for ep in 0..cfg.epochs {
        let phase2 = cfg.contrastive.contrastive_active(ep);
        let tune_lm = cfg.tune_lm;
        let tune_map = cfg.tune_map;
        let trainable = move |name: &str| match group_of(name) {
            ParamGroup::Lm => tune_lm,
            ParamGroup::Mapping => tune_map,
            // The projection head exists for the contrastive term; it
            // trains exactly when that term does.
            ParamGroup::Projection => phase2,
        };

        let batches = make_batches(
            train,
            cfg.batch_size,
            splitter.derive(&format!("data/ep{ep}")),
            cfg.drop_last,
        );
        for (bi, batch) in batches.iter().enumerate() {
            let lr = schedule.lr_at(step);
            let mut dropout = if model.cfg.dropout > 0.0 {
                Some(splitter.stream(&format!("dropout/ep{ep}/step{bi}")))
            } else {
                None
            };
            let breakdown = train_step(
                &mut model,
                &mut opt,
                batch,
                ep,
                lr,
                Some(&cfg.contrastive),
                cfg.loss_reduction,
                cfg.clip_norm,
                &trainable,
                false,
                dropout.as_mut(),
            )?;
            let record = StepRecord {
                step,
                ep,
                teacher: breakdown.teacher,
                contrastive: breakdown.contrastive,
                lambda_effective: breakdown.lambda_effective,
                lr,
            };
            write_log_line(&mut log_file, &record)?;
            log.push(record);
            step += 1;
        }

        if let Some(dir) = run_dir {
            model.save_checkpoint(&checkpoint_path(dir, &format!("ep{:03}.inlgckpt", ep + 1)))?;
        }
        if let Some(v) = val {
            let report = evaluate_perplexity(&model, v)?;
            val_ce.push(report.mean_ce);
            let improved = best.is_none_or(|(_, b)| report.mean_ce < b);
            if improved {
                best = Some((ep, report.mean_ce));
                if let Some(dir) = run_dir {
                    model.save_checkpoint(&checkpoint_path(dir, "best.inlgckpt"))?;
                }
            }
        }
    }
    if let Some(f) = &mut log_file {
        f.flush()?;
    }

    Ok(TrainOutcome {
        model,
        log,
        val_ce,
        best_epoch: best.map(|(ep, _)| ep),
    })
}

/// Total optimizer steps a run of `epochs` over `examples` items makes.
pub fn expected_steps(examples: usize, batch_size: usize, epochs: usize, drop_last: bool) -> u64 {
    let per_epoch = if drop_last {
        examples / batch_size
    } else {
        examples.div_ceil(batch_size)
    };
    (per_epoch * epochs) as u64
}
