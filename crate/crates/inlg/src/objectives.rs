//! Training objectives: teacher forcing, the InfoNCE contrastive term, and
//! their epoch-gated combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, InfoNceMode, NodeId};
use crate::numcore::tensor::Tensor;

/// How the per-sample InfoNCE denominator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Sum over all j including the positive pair (the cited formulation).
    Standard,
    /// Sum over j != i only, as the loss is printed.
    Paper,
}

impl From<DenominatorMode> for InfoNceMode {
    fn from(m: DenominatorMode) -> InfoNceMode {
        match m {
            DenominatorMode::Standard => InfoNceMode::Standard,
            DenominatorMode::Paper => InfoNceMode::ExcludePositive,
        }
    }
}

impl std::str::FromStr for DenominatorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DenominatorMode::Standard),
            "paper" => Ok(DenominatorMode::Paper),
            other => Err(Error::Config(format!(
                "unknown denominator mode {other:?} (expected standard|paper)"
            ))),
        }
    }
}

impl std::fmt::Display for DenominatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DenominatorMode::Standard => "standard",
            DenominatorMode::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over target tokens (decouples the lr from sequence length).
    Mean,
    /// Plain sum, the objective as written.
    Sum,
}

impl std::str::FromStr for LossReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            other => Err(Error::Config(format!(
                "unknown loss reduction {other:?} (expected mean|sum)"
            ))),
        }
    }
}

impl std::fmt::Display for LossReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    /// Temperature tau > 0.
    pub tau: f32,
    pub denominator: DenominatorMode,
    /// Weight lambda >= 0 of the contrastive term in phase 2.
    pub lambda: f32,
    /// Epochs trained with the teacher objective only.
    pub n_no_contra: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            denominator: DenominatorMode::Standard,
            lambda: 1.0,
            n_no_contra: 10,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::contract(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::contract(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Phase 2 starts at epoch `n_no_contra` (the boundary epoch included).
    pub fn contrastive_active(&self, epoch: usize) -> bool {
        self.lambda > 0.0 && epoch >= self.n_no_contra
    }
}

/// The loss components of one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub teacher: f32,
    pub contrastive: f32,
    pub lambda_effective: f32,
    pub total: f32,
    /// Batch size the in-batch negatives were drawn from.
    pub batch_size: usize,
    /// True when the contrastive term was gated off or the batch was too
    /// small to provide negatives.
    pub contrastive_skipped: bool,
}

impl LossBreakdown {
    pub fn teacher_only(teacher: f64, batch_size: usize) -> Self {
        LossBreakdown {
            teacher: teacher as f32,
            contrastive: 0.0,
            lambda_effective: 0.0,
            total: teacher as f32,
            batch_size,
            contrastive_skipped: true,
        }
    }
}

/// Graph-level teacher loss over per-example logit nodes.
///
/// `loss_slots[i][row]` names the target token row `row` must predict, or
/// None for prefix/context/pad rows. Reduction `Mean` divides by the total
/// number of target tokens in the batch; `Sum` leaves the raw sum.
pub fn teacher_loss_node(
    g: &mut Graph,
    logits: &[NodeId],
    loss_slots: &[Vec<Option<usize>>],
    reduction: LossReduction,
) -> Result<NodeId> {
    assert_eq!(logits.len(), loss_slots.len());
    let mut parts = Vec::with_capacity(logits.len());
    let mut total_count = 0usize;
    for (&node, slots) in logits.iter().zip(loss_slots) {
        let (sum, count) = g.cross_entropy_sum(node, slots);
        if count == 0 {
            return Err(Error::contract(
                "an example contributes no target positions to the teacher loss",
            ));
        }
        total_count += count;
        parts.push(sum);
    }
    let total = g.add_n(&parts);
    Ok(match reduction {
        LossReduction::Mean => g.scale(total, 1.0 / total_count as f64),
        LossReduction::Sum => total,
    })
}

/// Value-level teacher loss for one example's logits.
pub fn teacher_loss(
    logits: &Tensor,
    target_ids: &[u32],
    target_mask: &[bool],
    reduction: LossReduction,
) -> Result<f64> {
    let rows = logits.shape()[0];
    if target_mask.len() != rows {
        return Err(Error::contract(format!(
            "mask length {} does not match {rows} logit rows",
            target_mask.len()
        )));
    }
    let mut slots = vec![None; rows];
    let mut next = target_ids.iter();
    for (row, &selected) in target_mask.iter().enumerate() {
        if selected {
            let Some(&y) = next.next() else {
                return Err(Error::contract("mask selects more rows than targets"));
            };
            slots[row] = Some(y as usize);
        }
    }
    if next.next().is_some() {
        return Err(Error::contract("mask selects fewer rows than targets"));
    }
    let mut g = Graph::new();
    let node = g.input(logits);
    let loss = teacher_loss_node(&mut g, &[node], &[slots], reduction)?;
    Ok(g.scalar_value(loss))
}

/// Graph-level InfoNCE between feature rows and sentence-representation rows.
/// `features` and `reps` are (B, d_v) nodes; similarity is cosine, scaled by
/// 1/tau.
pub fn contrastive_loss_node(
    g: &mut Graph,
    features: NodeId,
    reps: NodeId,
    cfg: &ContrastiveConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let b = g.rows(features);
    if b < 2 {
        return Err(Error::contract(format!(
            "contrastive loss needs batch >= 2, got {b}"
        )));
    }
    assert_eq!(b, g.rows(reps), "feature/rep batch mismatch");
    assert_eq!(g.cols(features), g.cols(reps), "feature/rep dim mismatch");
    let vn = g.row_l2_normalize(features)?;
    let tn = g.row_l2_normalize(reps)?;
    let sim = g.matmul_bt(vn, tn);
    let scaled = g.scale(sim, 1.0 / cfg.tau as f64);
    Ok(g.info_nce(scaled, cfg.denominator.into()))
}

/// Value-level InfoNCE between matching rows of two (B, d_v) tensors.
/// Batches below 2 yield the contrastive-skipped signal: zero loss, flagged.
pub fn contrastive_loss(v: &Tensor, t_hat: &Tensor, cfg: &ContrastiveConfig) -> Result<(f64, bool)> {
    cfg.validate()?;
    if v.shape() != t_hat.shape() || v.rank() != 2 {
        return Err(Error::contract(format!(
            "feature/rep shapes differ: {:?} vs {:?}",
            v.shape(),
            t_hat.shape()
        )));
    }
    if v.shape()[0] < 2 {
        return Ok((0.0, true));
    }
    let mut g = Graph::new();
    let vn = g.input(v);
    let tn = g.input(t_hat);
    let loss = contrastive_loss_node(&mut g, vn, tn, cfg)?;
    Ok((g.scalar_value(loss), false))
}

/// The epoch-gated weighted sum of the two terms.
pub fn combined_loss(
    teacher: f64,
    contrastive: Option<f64>,
    epoch: usize,
    cfg: &ContrastiveConfig,
    batch_size: usize,
) -> LossBreakdown {
    if !cfg.contrastive_active(epoch) {
        return LossBreakdown::teacher_only(teacher, batch_size);
    }
    match contrastive {
        Some(c) => LossBreakdown {
            teacher: teacher as f32,
            contrastive: c as f32,
            lambda_effective: cfg.lambda,
            total: (teacher as f32) + cfg.lambda * (c as f32),
            batch_size,
            contrastive_skipped: false,
        },
        None => LossBreakdown::teacher_only(teacher, batch_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_logits(rows: usize, vocab: usize) -> Tensor {
        Tensor::from_vec(vec![rows, vocab], vec![0.25; rows * vocab]).unwrap()
    }

    #[test]
    fn uniform_cross_entropy_is_ln_vocab() {
        // uniform logits, vocab 4, one target token -> ln 4
        let logits = uniform_logits(3, 4);
        let mask = [false, true, false];
        let loss = teacher_loss(&logits, &[2], &mask, LossReduction::Mean).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn huge_margin_drives_loss_to_zero() {
        let mut data = vec![0.0f32; 5];
        data[3] = 60.0;
        let logits = Tensor::from_vec(vec![1, 5], data).unwrap();
        let loss = teacher_loss(&logits, &[3], &[true], LossReduction::Mean).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn token_mean_over_unequal_lengths() {
        // two targets of lengths 3 and 5 with equal per-token loss c:
        // batch loss = c under token-mean reduction
        let vocab = 6;
        let row = vec![0.0f32; vocab]; // uniform -> per-token loss ln 6
        let mk = |n: usize| {
            Tensor::from_vec(vec![n, vocab], row.iter().cycle().take(n * vocab).cloned().collect())
                .unwrap()
        };
        let mut g = Graph::new();
        let l1 = mk(3);
        let l2 = mk(5);
        let n1 = g.input(&l1);
        let n2 = g.input(&l2);
        let slots1 = vec![Some(1), Some(2), Some(3)];
        let slots2 = vec![Some(1), Some(2), Some(3), Some(4), Some(5)];
        let loss =
            teacher_loss_node(&mut g, &[n1, n2], &[slots1, slots2], LossReduction::Mean).unwrap();
        let c = (vocab as f64).ln();
        assert!((g.scalar_value(loss) - c).abs() < 1e-9);
    }

    fn orthonormal_pair() -> (Tensor, Tensor) {
        let v = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        (v.clone(), v)
    }

    #[test]
    fn infonce_closed_form_standard() {
        // B=2 orthonormal matched pairs, tau=1: loss = log(1 + e^-1)
        let (v, t) = orthonormal_pair();
        let cfg = ContrastiveConfig {
            tau: 1.0,
            denominator: DenominatorMode::Standard,
            ..ContrastiveConfig::default()
        };
        let (loss, skipped) = contrastive_loss(&v, &t, &cfg).unwrap();
        assert!(!skipped);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs {expected}");
        assert!((loss - 0.31326).abs() < 1e-5);
        assert!(loss > 0.0, "standard-mode loss is strictly positive");
    }

    #[test]
    fn infonce_closed_form_paper_literal() {
        // same setup, denominator over j != i: loss = -1
        let (v, t) = orthonormal_pair();
        let cfg = ContrastiveConfig {
            tau: 1.0,
            denominator: DenominatorMode::Paper,
            ..ContrastiveConfig::default()
        };
        let (loss, _) = contrastive_loss(&v, &t, &cfg).unwrap();
        assert!((loss + 1.0).abs() < 1e-9, "loss {loss}");
        assert!(loss < 0.0, "paper-literal mode can go negative");
    }

    #[test]
    fn cosine_makes_the_loss_scale_invariant() {
        let v = Tensor::from_vec(vec![3, 4], vec![
            0.3, -0.2, 0.9, 0.1, //
            -0.5, 0.4, 0.2, 0.8, //
            0.7, 0.7, -0.1, 0.2,
        ])
        .unwrap();
        let t = Tensor::from_vec(vec![3, 4], vec![
            0.1, 0.2, 0.8, -0.3, //
            -0.4, 0.5, 0.1, 0.6, //
            0.6, 0.5, 0.0, 0.4,
        ])
        .unwrap();
        let cfg = ContrastiveConfig::default();
        let (base, _) = contrastive_loss(&v, &t, &cfg).unwrap();
        let scale = |t: &Tensor, c: f32| {
            Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).unwrap()
        };
        let (scaled, _) = contrastive_loss(&scale(&v, 5.0), &scale(&t, 5.0), &cfg).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn batch_permutation_invariance() {
        let v = Tensor::from_vec(vec![3, 2], vec![1.0, 0.1, -0.3, 0.9, 0.5, 0.5]).unwrap();
        let t = Tensor::from_vec(vec![3, 2], vec![0.9, 0.2, -0.1, 1.0, 0.4, 0.6]).unwrap();
        let permute = |t: &Tensor, order: &[usize]| {
            let d = t.shape()[1];
            let mut data = Vec::new();
            for &i in order {
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::from_vec(t.shape().to_vec(), data).unwrap()
        };
        for mode in [DenominatorMode::Standard, DenominatorMode::Paper] {
            let cfg = ContrastiveConfig {
                denominator: mode,
                ..ContrastiveConfig::default()
            };
            let (a, _) = contrastive_loss(&v, &t, &cfg).unwrap();
            let order = [2usize, 0, 1];
            let (b, _) = contrastive_loss(&permute(&v, &order), &permute(&t, &order), &cfg).unwrap();
            assert!((a - b).abs() < 1e-9, "{mode:?}: {a} vs {b}");
        }
    }

    #[test]
    fn small_batch_is_skipped_not_an_error() {
        let v = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let (loss, skipped) = contrastive_loss(&v, &v, &ContrastiveConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(skipped);
    }

    #[test]
    fn zero_norm_vector_is_a_contract_violation() {
        let v = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            contrastive_loss(&v, &t, &ContrastiveConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gating_before_the_boundary() {
        // n_no_contra=10, ep=5: total == teacher, contrastive not consulted
        let cfg = ContrastiveConfig {
            lambda: 1.0,
            n_no_contra: 10,
            ..ContrastiveConfig::default()
        };
        assert!(!cfg.contrastive_active(5));
        let b = combined_loss(2.5, None, 5, &cfg, 8);
        assert_eq!(b.total, 2.5);
        assert_eq!(b.lambda_effective, 0.0);
        assert!(b.contrastive_skipped);
    }

    #[test]
    fn boundary_epoch_is_phase_two() {
        // n_no_contra=10, ep=10, teacher=2.0, contrastive=0.5, lambda=1.5 -> 2.75
        let cfg = ContrastiveConfig {
            lambda: 1.5,
            n_no_contra: 10,
            ..ContrastiveConfig::default()
        };
        assert!(cfg.contrastive_active(10));
        let b = combined_loss(2.0, Some(0.5), 10, &cfg, 8);
        assert!((b.total - 2.75).abs() < 1e-6);
        assert_eq!(b.lambda_effective, 1.5);
        assert!((b.total - (b.teacher + b.lambda_effective * b.contrastive)).abs() < 1e-6);
    }

    #[test]
    fn lambda_zero_never_activates() {
        let cfg = ContrastiveConfig {
            lambda: 0.0,
            n_no_contra: 0,
            ..ContrastiveConfig::default()
        };
        for ep in 0..30 {
            assert!(!cfg.contrastive_active(ep));
        }
    }

    #[test]
    fn mask_must_match_target_count() {
        let logits = uniform_logits(3, 4);
        assert!(teacher_loss(&logits, &[1, 2], &[false, true, false], LossReduction::Mean).is_err());
        assert!(teacher_loss(&logits, &[1], &[true, true, false], LossReduction::Mean).is_err());
    }
}
