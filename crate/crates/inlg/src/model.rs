//! The visually-guided language model: a decoder-only transformer over
//! `[prefix; BOS; context; target]`, two mapping-network variants that turn a
//! feature vector into the prefix, and the projection head producing the
//! sentence representation compared against the feature.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::rng::{Rng, SeedSplitter};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingVariant {
    Mlp,
    Transformer,
}

impl std::str::FromStr for MappingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(MappingVariant::Mlp),
            "transformer" => Ok(MappingVariant::Transformer),
            other => Err(Error::Config(format!(
                "unknown mapping variant {other:?} (expected mlp|transformer)"
            ))),
        }
    }
}

impl std::fmt::Display for MappingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MappingVariant::Mlp => "mlp",
            MappingVariant::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Visual prefix length l; 0 disables the prefix path entirely.
    pub prefix_len: usize,
    pub d_v: usize,
    pub mapping_variant: MappingVariant,
    pub mapping_layers: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            max_positions: 256,
            prefix_len: 20,
            d_v: 16,
            mapping_variant: MappingVariant::Mlp,
            mapping_layers: 2,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::contract(format!(
                "vocab_size {} too small (reserved ids alone need 4)",
                self.vocab_size
            )));
        }
        if self.mapping_variant == MappingVariant::Transformer && self.mapping_layers == 0 {
            return Err(Error::contract(
                "transformer mapping needs at least one layer",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn mlp_hidden(&self) -> usize {
        (self.d_v + self.prefix_len * self.d_model + 1) / 2
    }

    /// key=value block stored in the checkpoint header.
    pub fn to_kv(&self) -> String {
        format!(
            "d_model={}\nn_layers={}\nn_heads={}\nd_ff={}\nvocab_size={}\nmax_positions={}\nprefix_len={}\nd_v={}\nmapping={}\nmapping_layers={}\ndropout={}\n",
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_positions,
            self.prefix_len,
            self.d_v,
            self.mapping_variant,
            self.mapping_layers,
            self.dropout
        )
    }

    pub fn from_kv(block: &str) -> Result<ModelConfig> {
        let mut kv = HashMap::new();
        for line in block.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad config line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::format(format!("checkpoint config missing key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("config key {k} is not an integer")))
        };
        let cfg = ModelConfig {
            d_model: parse_usize("d_model")?,
            n_layers: parse_usize("n_layers")?,
            n_heads: parse_usize("n_heads")?,
            d_ff: parse_usize("d_ff")?,
            vocab_size: parse_usize("vocab_size")?,
            max_positions: parse_usize("max_positions")?,
            prefix_len: parse_usize("prefix_len")?,
            d_v: parse_usize("d_v")?,
            mapping_variant: get("mapping")?.parse()?,
            mapping_layers: parse_usize("mapping_layers")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::format("config key dropout is not a float"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors in a stable insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    map: HashMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            map: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.map.insert(name.to_string(), t).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Name-sorted snapshot, the canonical checkpoint order.
    pub fn sorted(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .map
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter groups for the trainability switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Lm,
    Mapping,
    Projection,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("lm.") {
        ParamGroup::Lm
    } else if name.starts_with("map.") {
        ParamGroup::Mapping
    } else if name.starts_with("proj.") {
        ParamGroup::Projection
    } else {
        panic!("parameter {name} belongs to no group")
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Node ids of registered parameters within one graph.
pub struct ParamNodes(HashMap<String, NodeId>);

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered in this graph"))
    }

    /// Bind externally created leaves (finite-difference harnesses register
    /// the parameters themselves and hand the ids in).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        ParamNodes(pairs.into_iter().collect())
    }
}

/// Everything the objectives need from one example's forward pass.
pub struct ForwardNodes {
    /// (l+m+n+1, vocab) next-token logits, one row per input position.
    pub logits: NodeId,
    /// (l+m+n+1, d_model) final-layer-norm hidden states.
    pub hidden: NodeId,
    pub seq_len: usize,
    /// Input rows holding target tokens (used for sentence pooling).
    pub target_rows: Vec<usize>,
    /// Per logit row, the id of the target token it should predict.
    pub loss_slots: Vec<Option<usize>>,
}

impl Model {
    /// Fresh parameters. Each tensor draws from its own named seed stream,
    /// so the LM init is identical across models that differ only in the
    /// mapping network (or in whether one exists at all).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let splitter = SeedSplitter::new(seed);
        let mut params = ParamStore::new();

        let weight = |params: &mut ParamStore, name: &str, rows: usize, cols: usize, std: f64| {
            let mut rng = splitter.stream(&format!("init/{name}"));
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| (rng.normal() * std) as f32)
                .collect();
            params.insert(name, Tensor::from_vec(vec![rows, cols], data).unwrap());
        };
        let zeros = |params: &mut ParamStore, name: &str, n: usize| {
            params.insert(name, Tensor::zeros(vec![n]));
        };
        let ones = |params: &mut ParamStore, name: &str, n: usize| {
            params.insert(name, Tensor::from_vec(vec![n], vec![1.0; n]).unwrap());
        };

        let d = cfg.d_model;
        weight(&mut params, "lm.tok_embed", cfg.vocab_size, d, 0.02);
        weight(&mut params, "lm.pos_embed", cfg.max_positions, d, 0.01);
        for i in 0..cfg.n_layers {
            let p = format!("lm.l{i}");
            ones(&mut params, &format!("{p}.ln1.g"), d);
            zeros(&mut params, &format!("{p}.ln1.b"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                weight(&mut params, &format!("{p}.attn.{w}"), d, d, 0.02);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                zeros(&mut params, &format!("{p}.attn.{b}"), d);
            }
            ones(&mut params, &format!("{p}.ln2.g"), d);
            zeros(&mut params, &format!("{p}.ln2.b"), d);
            weight(&mut params, &format!("{p}.ff.w1"), d, cfg.d_ff, 0.02);
            zeros(&mut params, &format!("{p}.ff.b1"), cfg.d_ff);
            weight(&mut params, &format!("{p}.ff.w2"), cfg.d_ff, d, 0.02);
            zeros(&mut params, &format!("{p}.ff.b2"), d);
        }
        ones(&mut params, "lm.final_ln.g", d);
        zeros(&mut params, "lm.final_ln.b", d);

        if cfg.prefix_len > 0 {
            match cfg.mapping_variant {
                MappingVariant::Mlp => {
                    let hidden = cfg.mlp_hidden();
                    weight(&mut params, "map.mlp.w1", cfg.d_v, hidden, 0.02);
                    zeros(&mut params, "map.mlp.b1", hidden);
                    weight(&mut params, "map.mlp.w2", hidden, cfg.prefix_len * d, 0.02);
                    zeros(&mut params, "map.mlp.b2", cfg.prefix_len * d);
                }
                MappingVariant::Transformer => {
                    weight(&mut params, "map.tr.expand.w", cfg.d_v, cfg.prefix_len * d, 0.02);
                    zeros(&mut params, "map.tr.expand.b", cfg.prefix_len * d);
                    weight(&mut params, "map.tr.const", cfg.prefix_len, d, 0.02);
                    for i in 0..cfg.mapping_layers {
                        let p = format!("map.tr.l{i}");
                        ones(&mut params, &format!("{p}.ln1.g"), d);
                        zeros(&mut params, &format!("{p}.ln1.b"), d);
                        for w in ["wq", "wk", "wv", "wo"] {
                            weight(&mut params, &format!("{p}.attn.{w}"), d, d, 0.02);
                        }
                        for b in ["bq", "bk", "bv", "bo"] {
                            zeros(&mut params, &format!("{p}.attn.{b}"), d);
                        }
                        ones(&mut params, &format!("{p}.ln2.g"), d);
                        zeros(&mut params, &format!("{p}.ln2.b"), d);
                        weight(&mut params, &format!("{p}.ff.w1"), d, cfg.d_ff, 0.02);
                        zeros(&mut params, &format!("{p}.ff.b1"), cfg.d_ff);
                        weight(&mut params, &format!("{p}.ff.w2"), cfg.d_ff, d, 0.02);
                        zeros(&mut params, &format!("{p}.ff.b2"), d);
                    }
                }
            }
        }
        weight(&mut params, "proj.w", d, cfg.d_v, 0.02);
        zeros(&mut params, "proj.b", cfg.d_v);

        Ok(Model { cfg, params })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.cfg.to_kv(), &self.params.sorted())
    }

    pub fn from_checkpoint(path: &Path) -> Result<Model> {
        let ck = read_checkpoint(path)?;
        let cfg = ModelConfig::from_kv(&ck.config)?;
        let mut params = ParamStore::new();
        for (name, t) in ck.tensors {
            params.insert(&name, t);
        }
        Ok(Model { cfg, params })
    }

    /// Overwrite one parameter group from another store (used to load a
    /// pretrained mapping into a fresh model).
    pub fn load_group(&mut self, source: &ParamStore, group: ParamGroup) -> Result<usize> {
        let mut loaded = 0;
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| group_of(n) == group)
            .cloned()
            .collect();
        for name in names {
            if !source.contains(&name) {
                return Err(Error::contract(format!(
                    "source checkpoint missing parameter {name}"
                )));
            }
            let src = source.get(&name).clone();
            if src.shape() != self.params.get(&name).shape() {
                return Err(Error::contract(format!(
                    "parameter {name} shape {:?} does not match checkpoint {:?}",
                    self.params.get(&name).shape(),
                    src.shape()
                )));
            }
            *self.params.get_mut(&name) = src;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Register parameters in a graph. `with_mapping` / `with_proj` control
    /// whether those groups join (and hence appear in the gradient map).
    pub fn register(&self, g: &mut Graph, with_mapping: bool, with_proj: bool) -> ParamNodes {
        let mut nodes = HashMap::new();
        for name in self.params.names() {
            let grp = group_of(name);
            if grp == ParamGroup::Mapping && !with_mapping {
                continue;
            }
            if grp == ParamGroup::Projection && !with_proj {
                continue;
            }
            nodes.insert(name.clone(), g.param(name, self.params.get(name)));
        }
        ParamNodes(nodes)
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        prefix: &str,
        h: NodeId,
        causal_mask: Option<NodeId>,
        dropout_rng: &mut Option<&mut Rng>,
    ) -> NodeId {
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;

        let ln1 = g.layer_norm(
            h,
            nodes.id(&format!("{prefix}.ln1.g")),
            nodes.id(&format!("{prefix}.ln1.b")),
        );
        let q0 = g.matmul(ln1, nodes.id(&format!("{prefix}.attn.wq")));
        let q = g.add_row(q0, nodes.id(&format!("{prefix}.attn.bq")));
        let k0 = g.matmul(ln1, nodes.id(&format!("{prefix}.attn.wk")));
        let k = g.add_row(k0, nodes.id(&format!("{prefix}.attn.bk")));
        let v0 = g.matmul(ln1, nodes.id(&format!("{prefix}.attn.wv")));
        let v = g.add_row(v0, nodes.id(&format!("{prefix}.attn.bv")));

        let mut heads = Vec::with_capacity(nh);
        for hh in 0..nh {
            let qh = g.slice_cols(q, hh * dh, dh);
            let kh = g.slice_cols(k, hh * dh, dh);
            let vh = g.slice_cols(v, hh * dh, dh);
            let scores0 = g.matmul_bt(qh, kh);
            let mut scores = g.scale(scores0, 1.0 / (dh as f64).sqrt());
            if let Some(mask) = causal_mask {
                scores = g.add(scores, mask);
            }
            let att = g.softmax_rows(scores);
            heads.push(g.matmul(att, vh));
        }
        let merged = g.concat_cols(&heads);
        let o0 = g.matmul(merged, nodes.id(&format!("{prefix}.attn.wo")));
        let mut o = g.add_row(o0, nodes.id(&format!("{prefix}.attn.bo")));
        o = self.maybe_dropout(g, o, dropout_rng);
        let h = g.add(h, o);

        let ln2 = g.layer_norm(
            h,
            nodes.id(&format!("{prefix}.ln2.g")),
            nodes.id(&format!("{prefix}.ln2.b")),
        );
        let f0 = g.matmul(ln2, nodes.id(&format!("{prefix}.ff.w1")));
        let f1 = g.add_row(f0, nodes.id(&format!("{prefix}.ff.b1")));
        let f2 = g.gelu(f1);
        let f3 = g.matmul(f2, nodes.id(&format!("{prefix}.ff.w2")));
        let mut f = g.add_row(f3, nodes.id(&format!("{prefix}.ff.b2")));
        f = self.maybe_dropout(g, f, dropout_rng);
        g.add(h, f)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: NodeId, rng: &mut Option<&mut Rng>) -> NodeId {
        let p = self.cfg.dropout as f64;
        let Some(rng) = rng else { return x };
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let (rows, cols) = (g.rows(x), g.cols(x));
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.input_rows(rows, cols, mask);
        g.mul(x, m)
    }

    fn causal_mask(&self, g: &mut Graph, s: usize) -> NodeId {
        let mut mask = vec![0.0f64; s * s];
        for i in 0..s {
            for j in i + 1..s {
                mask[i * s + j] = -1e9;
            }
        }
        g.input_rows(s, s, mask)
    }

    /// Map a feature vector to the (l, d_model) visual prefix.
    pub fn map_features_node(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        feature: &[f32],
    ) -> Result<NodeId> {
        if self.cfg.prefix_len == 0 {
            return Err(Error::contract(
                "prefix_len is 0; this model has no mapping network",
            ));
        }
        if feature.len() != self.cfg.d_v {
            return Err(Error::contract(format!(
                "feature has dim {} but model d_v is {}",
                feature.len(),
                self.cfg.d_v
            )));
        }
        if let Some(i) = feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "feature element {i} is not finite"
            )));
        }
        let (l, d) = (self.cfg.prefix_len, self.cfg.d_model);
        let v = g.input_rows(1, self.cfg.d_v, feature.iter().map(|&x| x as f64).collect());

        let flat_to_rows = |g: &mut Graph, flat: NodeId| -> NodeId {
            let slots: Vec<NodeId> = (0..l).map(|s| g.slice_cols(flat, s * d, d)).collect();
            g.concat_rows(&slots)
        };

        match self.cfg.mapping_variant {
            MappingVariant::Mlp => {
                let h0 = g.matmul(v, nodes.id("map.mlp.w1"));
                let h1 = g.add_row(h0, nodes.id("map.mlp.b1"));
                let h2 = g.tanh(h1);
                let f0 = g.matmul(h2, nodes.id("map.mlp.w2"));
                let flat = g.add_row(f0, nodes.id("map.mlp.b2"));
                Ok(flat_to_rows(g, flat))
            }
            MappingVariant::Transformer => {
                let e0 = g.matmul(v, nodes.id("map.tr.expand.w"));
                let flat = g.add_row(e0, nodes.id("map.tr.expand.b"));
                let slots = flat_to_rows(g, flat);
                // l feature slots followed by l learned constants, full
                // (bidirectional) self-attention, keep the first l outputs.
                let mut h = g.concat_rows(&[slots, nodes.id("map.tr.const")]);
                for i in 0..self.cfg.mapping_layers {
                    h = self.attention_block(g, nodes, &format!("map.tr.l{i}"), h, None, &mut None);
                }
                Ok(g.slice_rows(h, 0, l))
            }
        }
    }

    /// Forward over `[prefix?; BOS; context; target]`, returning per-position
    /// next-token logits and final hidden states.
    #[allow(clippy::too_many_arguments)]
    pub fn lm_forward_node(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        prefix: Option<NodeId>,
        context: &[u32],
        target: &[u32],
        example_id: &str,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<ForwardNodes> {
        let l = match prefix {
            Some(p) => {
                assert_eq!(
                    (g.rows(p), g.cols(p)),
                    (self.cfg.prefix_len, self.cfg.d_model),
                    "prefix node shape"
                );
                self.cfg.prefix_len
            }
            None => 0,
        };
        let (m, n) = (context.len(), target.len());
        let seq_len = l + 1 + m + n;
        if seq_len > self.cfg.max_positions {
            return Err(Error::LengthOverflow {
                example: example_id.to_string(),
                required: seq_len,
                max: self.cfg.max_positions,
            });
        }
        for &t in context.iter().chain(target.iter()) {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::contract(format!(
                    "token id {t} out of vocab {} in example {example_id}",
                    self.cfg.vocab_size
                )));
            }
        }

        let mut text_ids: Vec<usize> = Vec::with_capacity(1 + m + n);
        text_ids.push(crate::textdata::vocab::BOS_ID as usize);
        text_ids.extend(context.iter().map(|&t| t as usize));
        text_ids.extend(target.iter().map(|&t| t as usize));
        let tok = g.embedding(nodes.id("lm.tok_embed"), &text_ids);

        let embedded = match prefix {
            Some(p) => g.concat_rows(&[p, tok]),
            None => tok,
        };
        let positions: Vec<usize> = (0..seq_len).collect();
        let pos = g.embedding(nodes.id("lm.pos_embed"), &positions);
        let mut h = g.add(embedded, pos);
        h = self.maybe_dropout(g, h, &mut dropout_rng);

        let mask = self.causal_mask(g, seq_len);
        for i in 0..self.cfg.n_layers {
            h = self.attention_block(g, nodes, &format!("lm.l{i}"), h, Some(mask), &mut dropout_rng);
        }
        let hidden = g.layer_norm(h, nodes.id("lm.final_ln.g"), nodes.id("lm.final_ln.b"));
        let logits = g.matmul_bt(hidden, nodes.id("lm.tok_embed"));

        let mut loss_slots = vec![None; seq_len];
        for (j, &y) in target.iter().enumerate() {
            // row l+m+j predicts target token j (0-based)
            loss_slots[l + m + j] = Some(y as usize);
        }
        let target_rows: Vec<usize> = (0..n).map(|j| l + m + 1 + j).collect();

        Ok(ForwardNodes {
            logits,
            hidden,
            seq_len,
            target_rows,
            loss_slots,
        })
    }

    /// Sentence representation: mean-pool final hidden states over target
    /// rows, then the projection head. Pooling over no rows is a contract
    /// violation.
    pub fn sentence_rep_node(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        hidden: NodeId,
        target_rows: &[usize],
    ) -> Result<NodeId> {
        if target_rows.is_empty() {
            return Err(Error::contract(
                "sentence representation needs at least one target position",
            ));
        }
        let pooled = g.mean_rows(hidden, target_rows);
        let p0 = g.matmul(pooled, nodes.id("proj.w"));
        Ok(g.add_row(p0, nodes.id("proj.b")))
    }

    // ── eager value-level wrappers ───────────────────────────────────

    /// Value-level prefix computation.
    pub fn map_features(&self, feature: &[f32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g, true, false);
        let c = self.map_features_node(&mut g, &nodes, feature)?;
        Tensor::from_f64(vec![self.cfg.prefix_len, self.cfg.d_model], g.value(c))
    }

    /// Value-level forward; `feature` None (or prefix_len 0) runs text-only.
    pub fn lm_forward(
        &self,
        feature: Option<&[f32]>,
        context: &[u32],
        target: &[u32],
        example_id: &str,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let use_prefix = self.cfg.prefix_len > 0 && feature.is_some();
        let nodes = self.register(&mut g, use_prefix, false);
        let prefix = match (use_prefix, feature) {
            (true, Some(f)) => Some(self.map_features_node(&mut g, &nodes, f)?),
            _ => None,
        };
        let fwd = self.lm_forward_node(&mut g, &nodes, prefix, context, target, example_id, None)?;
        let logits = Tensor::from_f64(
            vec![fwd.seq_len, self.cfg.vocab_size],
            g.value(fwd.logits),
        )?;
        let hidden = Tensor::from_f64(vec![fwd.seq_len, self.cfg.d_model], g.value(fwd.hidden))?;
        Ok((logits, hidden))
    }

    /// Parameter names of a group, in store order.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| group_of(n) == group)
            .cloned()
            .collect()
    }

    /// Byte-level digest of all parameters, for bit-identity assertions.
    pub fn param_fingerprint(&self) -> BTreeMap<String, Vec<u32>> {
        self.params
            .sorted()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }
}
