//! Beam-search decoding and batch generation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::graph::Graph;
use crate::textdata::corpus::Prompt;
use crate::textdata::vocab::{Vocab, EOS_ID};

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Maximum generated tokens per hypothesis, the terminating EOS included.
    pub max_output_len: usize,
    /// Length-normalization exponent; 0 scores by raw log-probability.
    pub alpha: f32,
    pub eos_id: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 10,
            max_output_len: 100,
            alpha: 0.0,
            eos_id: EOS_ID,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::contract("beam_width must be at least 1"));
        }
        if self.max_output_len == 0 {
            return Err(Error::contract("max_output_len must be at least 1"));
        }
        Ok(())
    }
}

/// A (partial) decode: generated ids, their joint log-probability, and
/// whether the hypothesis has terminated (EOS or length cap).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn score(&self, alpha: f32) -> f64 {
        if alpha > 0.0 {
            let len = self.tokens.len().max(1) as f64;
            self.log_prob / len.powf(alpha as f64)
        } else {
            self.log_prob
        }
    }
}

/// Next-token distribution source. Implemented by the prefix-conditioned
/// model and by table-based toy scorers in tests.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary given the generated ids so far.
    fn log_probs(&self, generated: &[u32]) -> Vec<f64>;
}

/// Standard beam search. Hypotheses producing EOS retire into a completed
/// pool; live ones hitting the length cap are force-finished and scored
/// as-is. Ties break by token id, then by the order hypotheses entered the
/// beam.
pub fn beam_search(scorer: &dyn NextTokenScorer, cfg: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut completed: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        // (cumulative log-prob, token, parent index)
        let mut candidates: Vec<(f64, u32, usize)> = Vec::with_capacity(live.len() * vocab);
        for (hi, hyp) in live.iter().enumerate() {
            let lp = scorer.log_probs(&hyp.tokens);
            assert_eq!(lp.len(), vocab, "scorer must cover the whole vocabulary");
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((hyp.log_prob + l, tok as u32, hi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next_live = Vec::with_capacity(cfg.beam_width);
        for &(log_prob, tok, hi) in candidates.iter().take(cfg.beam_width) {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let finished = tok == cfg.eos_id || tokens.len() >= cfg.max_output_len;
            let hyp = BeamHypothesis {
                tokens,
                log_prob,
                finished,
            };
            if finished {
                completed.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    completed.sort_by(|a, b| {
        b.score(cfg.alpha)
            .partial_cmp(&a.score(cfg.alpha))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.tokens.cmp(&b.tokens))
    });
    completed.truncate(cfg.beam_width);
    Ok(completed)
}

/// Greedy rollout: the beam-width-1 special case, spelled out.
pub fn greedy(scorer: &dyn NextTokenScorer, cfg: &DecodeConfig) -> Result<BeamHypothesis> {
    cfg.validate()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = scorer.log_probs(&tokens);
        let (tok, l) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal)
                .then(b.0.cmp(&a.0)))
            .map(|(t, &l)| (t as u32, l))
            .expect("non-empty vocabulary");
        tokens.push(tok);
        log_prob += l;
        if tok == cfg.eos_id || tokens.len() >= cfg.max_output_len {
            return Ok(BeamHypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
    }
}

/// The model + one prompt, viewed as a next-token distribution.
pub struct ModelScorer<'a> {
    model: &'a Model,
    context: &'a [u32],
    feature: Option<&'a [f32]>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, context: &'a [u32], feature: Option<&'a [f32]>) -> Result<Self> {
        if model.cfg.prefix_len > 0 && feature.is_none() {
            return Err(Error::contract(
                "model expects a visual prefix but no feature was supplied",
            ));
        }
        Ok(ModelScorer {
            model,
            context,
            feature,
        })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn log_probs(&self, generated: &[u32]) -> Vec<f64> {
        let mut g = Graph::new();
        let use_prefix = self.model.cfg.prefix_len > 0;
        let nodes = self.model.register(&mut g, use_prefix, false);
        let prefix = if use_prefix {
            let f = self.feature.expect("checked at construction");
            Some(
                self.model
                    .map_features_node(&mut g, &nodes, f)
                    .expect("feature validated at construction"),
            )
        } else {
            None
        };
        let fwd = self
            .model
            .lm_forward_node(&mut g, &nodes, prefix, self.context, generated, "decode", None)
            .expect("decode length is bounded by the caller");
        let vocab = self.model.cfg.vocab_size;
        let rows = g.rows(fwd.logits);
        let last = &g.value(fwd.logits)[(rows - 1) * vocab..rows * vocab];
        // stable log-softmax
        let mx = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + last.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        last.iter().map(|&x| x - lse).collect()
    }
}

/// One line of the generation output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Decode every prompt independently (so results do not depend on batch
/// composition) and in parallel; records come back in input order. Prompts
/// with unresolved features produce per-example error records.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    prompts: &[Prompt],
    cfg: &DecodeConfig,
) -> Result<Vec<GenRecord>> {
    cfg.validate()?;
    let needs_feature = model.cfg.prefix_len > 0;
    let max_context = model
        .cfg
        .max_positions
        .saturating_sub(model.cfg.prefix_len + 1 + cfg.max_output_len);
    let records: Vec<GenRecord> = prompts
        .par_iter()
        .map(|p| {
            let fail = |msg: String| GenRecord {
                id: p.id.clone(),
                text: None,
                logprob: None,
                finished: None,
                error: Some(msg),
            };
            if needs_feature {
                if let Some(fid) = &p.missing_feature {
                    return fail(format!("missing feature {fid}"));
                }
                if p.feature.is_none() {
                    return fail("prompt carries no feature".to_string());
                }
                if let Some(f) = &p.feature {
                    if f.len() != model.cfg.d_v {
                        return fail(format!(
                            "feature dim {} does not match model d_v {}",
                            f.len(),
                            model.cfg.d_v
                        ));
                    }
                }
            }
            if p.context_ids.len() > max_context {
                return fail(format!(
                    "context length {} leaves no room for {} output tokens",
                    p.context_ids.len(),
                    cfg.max_output_len
                ));
            }
            let scorer = ModelScorer::new(
                model,
                &p.context_ids,
                if needs_feature { p.feature.as_deref() } else { None },
            )
            .expect("feature presence checked above");
            match beam_search(&scorer, cfg) {
                Ok(hyps) => match hyps.first() {
                    Some(best) => GenRecord {
                        id: p.id.clone(),
                        text: Some(vocab.decode_text(&best.tokens)),
                        logprob: Some(best.log_prob),
                        finished: Some(best.finished),
                        error: None,
                    },
                    None => fail("beam search returned no hypotheses".to_string()),
                },
                Err(e) => fail(e.to_string()),
            }
        })
        .collect();
    Ok(records)
}

pub fn write_generation_jsonl(records: &[GenRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::Rng;
    use std::collections::HashMap;

    /// Table-driven scorer: explicit distribution per prefix, uniform over
    /// non-EOS tokens when a prefix is missing.
    struct TableScorer {
        vocab: usize,
        table: HashMap<Vec<u32>, Vec<f64>>,
    }

    impl NextTokenScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn log_probs(&self, generated: &[u32]) -> Vec<f64> {
            match self.table.get(generated) {
                Some(p) => p.iter().map(|&x| x.max(1e-300).ln()).collect(),
                None => {
                    let p = 1.0 / (self.vocab as f64);
                    vec![p.ln(); self.vocab]
                }
            }
        }
    }

    /// Deterministic pseudo-random scorer: the distribution depends on the
    /// generated prefix through a seeded hash.
    struct FuzzScorer {
        vocab: usize,
        seed: u64,
    }

    impl NextTokenScorer for FuzzScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn log_probs(&self, generated: &[u32]) -> Vec<f64> {
            let mut h = self.seed;
            for &t in generated {
                h = h.wrapping_mul(0x100000001B3).wrapping_add(t as u64 + 1);
            }
            let mut rng = Rng::seed_from_u64(h);
            let raw: Vec<f64> = (0..self.vocab).map(|_| rng.next_f64() * 4.0).collect();
            let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + raw.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            raw.iter().map(|&x| x - lse).collect()
        }
    }

    /// Exhaustive enumeration of every terminated sequence of length <=
    /// max_len, by raw log-probability.
    fn enumerate_all(scorer: &dyn NextTokenScorer, cfg: &DecodeConfig) -> Vec<BeamHypothesis> {
        let mut out = Vec::new();
        let mut stack: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let probs = scorer.log_probs(&prefix);
            for (tok, &l) in probs.iter().enumerate() {
                let mut seq = prefix.clone();
                seq.push(tok as u32);
                let cum = lp + l;
                if tok as u32 == cfg.eos_id || seq.len() >= cfg.max_output_len {
                    out.push(BeamHypothesis {
                        tokens: seq,
                        log_prob: cum,
                        finished: true,
                    });
                } else {
                    stack.push((seq, cum));
                }
            }
        }
        out.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then(a.tokens.cmp(&b.tokens))
        });
        out
    }

    fn garden_path() -> TableScorer {
        // vocab {EOS=2, a=3, b=4}; greedy takes `a` first but `b EOS` wins.
        let mut table = HashMap::new();
        let dist = |eos: f64, a: f64, b: f64| {
            let mut v = vec![1e-12; 5];
            v[2] = eos;
            v[3] = a;
            v[4] = b;
            v
        };
        table.insert(vec![], dist(1e-12, 0.6, 0.4));
        table.insert(vec![3], dist(0.1, 0.45, 0.45));
        table.insert(vec![4], dist(0.9, 0.05, 0.05));
        TableScorer { vocab: 5, table }
    }

    #[test]
    fn garden_path_beam_beats_greedy() {
        let scorer = garden_path();
        let cfg = DecodeConfig {
            beam_width: 2,
            max_output_len: 2,
            ..DecodeConfig::default()
        };
        let hyps = beam_search(&scorer, &cfg).unwrap();
        assert_eq!(hyps[0].tokens, vec![4, 2], "expected `b EOS`");
        assert!((hyps[0].log_prob - (0.4f64 * 0.9).ln()).abs() < 1e-9);

        // greedy garden-paths into `a ...`
        let g = greedy(&scorer, &cfg).unwrap();
        assert_eq!(g.tokens[0], 3);
        assert!(g.log_prob < hyps[0].log_prob);

        // and `b EOS` ranks above `a EOS`
        let a_eos = hyps.iter().find(|h| h.tokens == vec![3, 2]);
        if let Some(a) = a_eos {
            assert!(a.log_prob < hyps[0].log_prob);
        }
    }

    #[test]
    fn width_one_equals_greedy_on_fuzz_prompts() {
        for seed in 0..100 {
            let scorer = FuzzScorer { vocab: 7, seed };
            let cfg = DecodeConfig {
                beam_width: 1,
                max_output_len: 8,
                ..DecodeConfig::default()
            };
            let beam = beam_search(&scorer, &cfg).unwrap();
            let g = greedy(&scorer, &cfg).unwrap();
            assert_eq!(beam[0].tokens, g.tokens, "seed {seed}");
            assert!((beam[0].log_prob - g.log_prob).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn exhaustive_width_recovers_the_global_optimum() {
        for seed in 0..20 {
            let vocab = 5usize;
            let max_len = 3usize;
            let scorer = FuzzScorer { vocab, seed };
            let cfg = DecodeConfig {
                beam_width: vocab.pow(max_len as u32),
                max_output_len: max_len,
                ..DecodeConfig::default()
            };
            let beam = beam_search(&scorer, &cfg).unwrap();
            let oracle = enumerate_all(&scorer, &cfg);
            assert!(
                (beam[0].log_prob - oracle[0].log_prob).abs() < 1e-9,
                "seed {seed}: beam {} vs oracle {}",
                beam[0].log_prob,
                oracle[0].log_prob
            );
            assert_eq!(beam[0].tokens, oracle[0].tokens, "seed {seed}");
        }
    }

    #[test]
    fn best_score_is_monotone_in_width() {
        for seed in 0..50 {
            let scorer = FuzzScorer { vocab: 6, seed };
            let mut prev = f64::NEG_INFINITY;
            for width in [1usize, 2, 4, 10] {
                let cfg = DecodeConfig {
                    beam_width: width,
                    max_output_len: 6,
                    ..DecodeConfig::default()
                };
                let best = beam_search(&scorer, &cfg).unwrap()[0].log_prob;
                assert!(
                    best >= prev - 1e-12,
                    "seed {seed}: width {width} got {best} < {prev}"
                );
                prev = best;
            }
        }
    }

    #[test]
    fn beam_never_scores_below_greedy_on_fuzz() {
        for seed in 0..100 {
            let scorer = FuzzScorer { vocab: 6, seed };
            let cfg = DecodeConfig {
                beam_width: 10,
                max_output_len: 6,
                ..DecodeConfig::default()
            };
            let beam = beam_search(&scorer, &cfg).unwrap();
            let g = greedy(&scorer, &cfg).unwrap();
            assert!(
                beam[0].log_prob >= g.log_prob - 1e-12,
                "seed {seed}: beam {} < greedy {}",
                beam[0].log_prob,
                g.log_prob
            );
        }
    }

    #[test]
    fn log_prob_is_non_increasing_along_a_hypothesis() {
        let scorer = FuzzScorer { vocab: 6, seed: 5 };
        let cfg = DecodeConfig {
            beam_width: 4,
            max_output_len: 8,
            ..DecodeConfig::default()
        };
        for hyp in beam_search(&scorer, &cfg).unwrap() {
            // rebuild the cumulative scores along the prefix
            let mut cum = 0.0;
            let mut prev = 0.0;
            for i in 0..hyp.tokens.len() {
                let lp = scorer.log_probs(&hyp.tokens[..i]);
                cum += lp[hyp.tokens[i] as usize];
                assert!(cum <= prev + 1e-12);
                prev = cum;
            }
            assert!((cum - hyp.log_prob).abs() < 1e-9);
            assert!(hyp.finished);
            let last = *hyp.tokens.last().unwrap();
            assert!(last == cfg.eos_id || hyp.tokens.len() == cfg.max_output_len);
        }
    }

    #[test]
    fn length_normalization_orders_by_normalized_score() {
        let mut table = HashMap::new();
        // short likely ending vs a longer, individually less likely one
        let mut step0 = vec![1e-12; 4];
        step0[2] = 0.5; // EOS now: p = 0.5
        step0[3] = 0.25;
        table.insert(vec![], step0);
        let mut step1 = vec![1e-12; 4];
        step1[2] = 0.5; // [3, EOS]: p = 0.125
        table.insert(vec![3], step1);
        let scorer = TableScorer { vocab: 4, table };

        // raw log-prob prefers the short ending
        let cfg_raw = DecodeConfig {
            beam_width: 4,
            max_output_len: 2,
            alpha: 0.0,
            ..DecodeConfig::default()
        };
        let raw = beam_search(&scorer, &cfg_raw).unwrap();
        assert_eq!(raw[0].tokens, vec![2]);

        // alpha=2 divides ln(0.125) by 4, flipping the order
        let cfg_norm = DecodeConfig {
            alpha: 2.0,
            ..cfg_raw
        };
        let norm = beam_search(&scorer, &cfg_norm).unwrap();
        assert_eq!(norm[0].tokens, vec![3, 2]);
    }
}
