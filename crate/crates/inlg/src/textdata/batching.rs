//! Epoch shuffling and batch assembly.
//!
//! Text is laid out as [BOS, context, target] per example and end-padded to
//! the widest sequence in the batch. Masks mark context positions, target
//! positions, and padding; the loss mask (which depends on the prefix
//! length) marks the rows whose next-token prediction is a real target
//! token.

use crate::numcore::rng::Rng;
use crate::textdata::corpus::Example;
use crate::textdata::vocab::{BOS_ID, PAD_ID};

#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<Example>,
    /// Widest context / target in this batch.
    pub m_max: usize,
    pub n_max: usize,
    /// (B, 1 + m_max + n_max): BOS + context + target, end-padded with PAD.
    pub tokens: Vec<Vec<u32>>,
    pub context_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
    pub pad_mask: Vec<Vec<bool>>,
}

impl Batch {
    fn from_examples(examples: Vec<Example>) -> Batch {
        let m_max = examples.iter().map(|e| e.context_ids.len()).max().unwrap_or(0);
        let n_max = examples.iter().map(|e| e.target_ids.len()).max().unwrap_or(0);
        let width = 1 + m_max + n_max;
        let mut tokens = Vec::with_capacity(examples.len());
        let mut context_mask = Vec::with_capacity(examples.len());
        let mut target_mask = Vec::with_capacity(examples.len());
        let mut pad_mask = Vec::with_capacity(examples.len());
        for e in &examples {
            let (m, n) = (e.context_ids.len(), e.target_ids.len());
            let mut row = Vec::with_capacity(width);
            row.push(BOS_ID);
            row.extend_from_slice(&e.context_ids);
            row.extend_from_slice(&e.target_ids);
            row.resize(width, PAD_ID);
            tokens.push(row);

            let mut cm = vec![false; width];
            let mut tm = vec![false; width];
            let mut pm = vec![false; width];
            for p in 1..1 + m {
                cm[p] = true;
            }
            for p in 1 + m..1 + m + n {
                tm[p] = true;
            }
            for p in 1 + m + n..width {
                pm[p] = true;
            }
            context_mask.push(cm);
            target_mask.push(tm);
            pad_mask.push(pm);
        }
        Batch {
            examples,
            m_max,
            n_max,
            tokens,
            context_mask,
            target_mask,
            pad_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Rows (over the full `prefix + BOS + context + target` input of a
    /// model with prefix length `l`) whose next-token prediction is a real
    /// target token: positions `l+m .. l+m+n` per example.
    pub fn loss_mask(&self, prefix_len: usize) -> Vec<Vec<bool>> {
        let width = prefix_len + 1 + self.m_max + self.n_max;
        self.examples
            .iter()
            .map(|e| {
                let (m, n) = (e.context_ids.len(), e.target_ids.len());
                let mut mask = vec![false; width];
                for p in prefix_len + m..prefix_len + m + n {
                    mask[p] = true;
                }
                mask
            })
            .collect()
    }
}

/// Shuffle the corpus with the given seed and split it into batches.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.shuffle(&mut order);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if drop_last && chunk.len() < batch_size {
            break;
        }
        let items: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
        batches.push(Batch::from_examples(items));
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::vocab::EOS_ID;

    fn example(id: &str, m: usize, n_body: usize) -> Example {
        let mut target_ids: Vec<u32> = (0..n_body as u32).map(|i| 4 + i).collect();
        target_ids.push(EOS_ID);
        Example {
            id: id.to_string(),
            context_ids: (0..m as u32).map(|i| 10 + i).collect(),
            target_ids,
            feature: vec![0.0; 4],
        }
    }

    fn corpus(n: usize) -> Vec<Example> {
        (0..n).map(|i| example(&format!("e{i}"), 3, 3)).collect()
    }

    #[test]
    fn ten_examples_batch_eight() {
        let batches = make_batches(&corpus(10), 8, 1, false);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 8);
        assert_eq!(batches[1].len(), 2);

        let dropped = make_batches(&corpus(10), 8, 1, true);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].len(), 8);
    }

    #[test]
    fn same_seed_same_order() {
        let c = corpus(23);
        let ids = |bs: &[Batch]| -> Vec<String> {
            bs.iter()
                .flat_map(|b| b.examples.iter().map(|e| e.id.clone()))
                .collect()
        };
        let a = make_batches(&c, 4, 7, false);
        let b = make_batches(&c, 4, 7, false);
        assert_eq!(ids(&a), ids(&b));
        let c2 = make_batches(&c, 4, 8, false);
        assert_ne!(ids(&a), ids(&c2), "different seed should reorder");
    }

    #[test]
    fn batching_partitions_the_epoch() {
        let c = corpus(13);
        let batches = make_batches(&c, 5, 3, false);
        let mut seen: Vec<String> = batches
            .iter()
            .flat_map(|b| b.examples.iter().map(|e| e.id.clone()))
            .collect();
        seen.sort();
        let mut all: Vec<String> = c.iter().map(|e| e.id.clone()).collect();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn loss_mask_selects_exactly_target_rows() {
        // m=3, n=4, l=20, max widths (3,4) -> 4 selected positions
        let e = example("a", 3, 3); // 3 body tokens + EOS = n = 4
        assert_eq!(e.target_ids.len(), 4);
        let batch = Batch::from_examples(vec![e]);
        assert_eq!((batch.m_max, batch.n_max), (3, 4));
        let mask = batch.loss_mask(20);
        assert_eq!(mask[0].len(), 20 + 1 + 3 + 4);
        let selected: Vec<usize> = mask[0]
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(selected, vec![23, 24, 25, 26]);
    }

    #[test]
    fn masks_tile_the_text_row() {
        let batch = Batch::from_examples(vec![example("a", 2, 3), example("b", 4, 1)]);
        let width = 1 + batch.m_max + batch.n_max;
        for b in 0..2 {
            assert_eq!(batch.tokens[b].len(), width);
            assert_eq!(batch.tokens[b][0], BOS_ID);
            for p in 1..width {
                let flags = [
                    batch.context_mask[b][p],
                    batch.target_mask[b][p],
                    batch.pad_mask[b][p],
                ];
                assert_eq!(
                    flags.iter().filter(|&&f| f).count(),
                    1,
                    "position {p} of row {b} must be exactly one of context/target/pad"
                );
                if batch.pad_mask[b][p] {
                    assert_eq!(batch.tokens[b][p], PAD_ID);
                }
            }
        }
    }
}
