//! Toy decoder-only multimodal transformer with a latent-token block.
//!
//! Generation follows a plan -> latent block -> answer protocol: the
//! image prefix and question tokens condition a symbolic plan, a block of
//! `K` latent pads whose hidden states carry the imagined construction,
//! and finally the boxed answer. Latent positions are fed the learned
//! `<|latent_pad|>` embedding as input; their content reaches later
//! positions through attention over the hidden states at those positions.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::ParamStore;
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::vision::{pool_patches, Raster, VisualStub, STUB_BIAS, STUB_WEIGHT};
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

/// Model dimensions and seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Latent slots per construction block.
    pub k_latent: usize,
    pub max_seq_len: usize,
    pub raster_size: usize,
    pub patch_size: usize,
    pub d_vis: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 128,
            n_layers: 4,
            n_heads: 4,
            k_latent: 10,
            max_seq_len: 1024,
            raster_size: 16,
            patch_size: 4,
            d_vis: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.n_heads == 0 || self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be divisible by head count {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.raster_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "raster size {} not divisible by patch size {}",
                self.raster_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        let g = self.raster_size / self.patch_size;
        g * g
    }
}

/// Position spans of one assembled sequence, in full-sequence coordinates
/// (image-prefix rows included). Spans are contiguous, non-overlapping and
/// ordered prefix, question, plan, latent, answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prefix: Range<usize>,
    pub question: Range<usize>,
    pub plan: Range<usize>,
    /// Empty when the sequence carries no latent block; otherwise exactly
    /// `K + 2` positions (start marker, K pads, end marker).
    pub latent: Range<usize>,
    pub answer: Range<usize>,
}

impl SequenceLayout {
    pub fn build(
        prefix_len: usize,
        question_len: usize,
        plan_len: usize,
        latent_k: Option<usize>,
        answer_len: usize,
    ) -> Self {
        let q0 = prefix_len;
        let p0 = q0 + question_len;
        let l0 = p0 + plan_len;
        let llen = latent_k.map(|k| k + 2).unwrap_or(0);
        let a0 = l0 + llen;
        SequenceLayout {
            prefix: 0..prefix_len,
            question: q0..p0,
            plan: p0..l0,
            latent: l0..a0,
            answer: a0..a0 + answer_len,
        }
    }

    pub fn total_len(&self) -> usize {
        self.answer.end
    }

    /// Positions of the K latent pads, when a block is present.
    pub fn latent_pads(&self) -> Option<Range<usize>> {
        if self.latent.is_empty() {
            None
        } else {
            Some(self.latent.start + 1..self.latent.end - 1)
        }
    }

    /// Prompt length: everything before the assistant output.
    pub fn prompt_len(&self) -> usize {
        self.plan.start
    }

    /// The assistant output span (plan through answer).
    pub fn output(&self) -> Range<usize> {
        self.plan.start..self.answer.end
    }

    pub fn validate(&self, k_latent: usize) -> Result<()> {
        let ordered = self.prefix.end == self.question.start
            && self.question.end == self.plan.start
            && self.plan.end == self.latent.start
            && self.latent.end == self.answer.start;
        if !ordered {
            return Err(Error::InvalidArgument("layout spans must be contiguous and ordered".into()));
        }
        if !self.latent.is_empty() && self.latent.len() != k_latent + 2 {
            return Err(Error::InvalidArgument(format!(
                "latent block length {} != K + 2 = {}",
                self.latent.len(),
                k_latent + 2
            )));
        }
        Ok(())
    }
}

/// Leaf bindings of every model parameter inside one graph.
pub struct BoundParams {
    ids: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    /// Fold accumulated leaf gradients back into the store.
    pub fn apply_grads(&self, graph: &Graph, params: &mut ParamStore) -> Result<()> {
        for (name, node) in &self.ids {
            if let Some(grad) = graph.grad(*node) {
                params.accumulate_grad(name, grad)?;
            }
        }
        Ok(())
    }
}

/// Graph-mode forward output.
pub struct ForwardOut {
    /// `[L, V]` logits over the vocabulary.
    pub logits: NodeId,
    /// `[L, D]` final-layer hidden states (after the last layer norm).
    pub hidden: NodeId,
}

/// The model: config, vocabulary and a named parameter store.
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl Model {
    /// Initialize all parameters from the config seed. The visual stub is
    /// registered frozen.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new();
        let mut params = ParamStore::new();
        let d = cfg.hidden_size;
        let v = vocab.size();
        let pp = cfg.patch_size * cfg.patch_size;
        let ph = cfg.d_vis * 2; // projector hidden width
        let mut rng = rng_for(cfg.seed, &[0x11]);
        let mut randn = |shape: &[usize], std: f64| Tensor::randn(shape, std, &mut rng);

        params.insert(STUB_WEIGHT, randn(&[pp, cfg.d_vis], 0.5), false)?;
        params.insert(STUB_BIAS, randn(&[cfg.d_vis], 0.1), false)?;

        for proj in ["target_proj", "prefix_proj"] {
            params.insert(&format!("{proj}.w1"), randn(&[cfg.d_vis, ph], 0.08), true)?;
            params.insert(&format!("{proj}.b1"), Tensor::zeros(&[ph]), true)?;
            params.insert(&format!("{proj}.w2"), randn(&[ph, d], 0.08), true)?;
            params.insert(&format!("{proj}.b2"), Tensor::zeros(&[d]), true)?;
        }

        params.insert("tok_emb", randn(&[v, d], 0.02), true)?;
        params.insert("pos_emb", randn(&[cfg.max_seq_len, d], 0.02), true)?;
        for i in 0..cfg.n_layers {
            let l = format!("layer{i}");
            params.insert(&format!("{l}.ln1.g"), Tensor::full(&[d], 1.0), true)?;
            params.insert(&format!("{l}.ln1.b"), Tensor::zeros(&[d]), true)?;
            for m in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("{l}.{m}"), randn(&[d, d], 0.02), true)?;
            }
            for m in ["bq", "bk", "bv", "bo"] {
                params.insert(&format!("{l}.{m}"), Tensor::zeros(&[d]), true)?;
            }
            params.insert(&format!("{l}.ln2.g"), Tensor::full(&[d], 1.0), true)?;
            params.insert(&format!("{l}.ln2.b"), Tensor::zeros(&[d]), true)?;
            params.insert(&format!("{l}.mlp.w1"), randn(&[d, 4 * d], 0.02), true)?;
            params.insert(&format!("{l}.mlp.b1"), Tensor::zeros(&[4 * d]), true)?;
            params.insert(&format!("{l}.mlp.w2"), randn(&[4 * d, d], 0.02), true)?;
            params.insert(&format!("{l}.mlp.b2"), Tensor::zeros(&[d]), true)?;
        }
        params.insert("final_ln.g", Tensor::full(&[d], 1.0), true)?;
        params.insert("final_ln.b", Tensor::zeros(&[d]), true)?;
        params.insert("head.w", randn(&[d, v], 0.02), true)?;
        params.insert("head.b", Tensor::zeros(&[v]), true)?;

        Ok(Model { cfg, vocab, params })
    }

    pub fn stub(&self) -> VisualStub {
        VisualStub {
            patch_size: self.cfg.patch_size,
            d_vis: self.cfg.d_vis,
        }
    }

    /// Deterministic patch features of a raster through the frozen stub.
    pub fn encode_image(&self, raster: &Raster) -> Result<Tensor> {
        self.stub().encode_image(&self.params, raster)
    }

    /// Bind every parameter as a graph leaf (frozen ones as constants).
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut ids = HashMap::new();
        for (name, p) in self.params.iter() {
            ids.insert(name.to_string(), g.leaf(p.value.clone(), p.trainable));
        }
        BoundParams { ids }
    }

    /// Affine map through a two-layer projector with tanh between.
    fn projector(&self, g: &mut Graph, bp: &BoundParams, name: &str, input: NodeId) -> Result<NodeId> {
        let h = g.matmul(input, bp.id(&format!("{name}.w1")))?;
        let h = g.add_row(h, bp.id(&format!("{name}.b1")))?;
        let h = g.tanh(h)?;
        let h = g.matmul(h, bp.id(&format!("{name}.w2")))?;
        g.add_row(h, bp.id(&format!("{name}.b2")))
    }

    /// `H_target`: auxiliary raster -> frozen stub -> pooled bins ->
    /// trainable projector, shape `[K, D]`. Gradient reaches only the
    /// projector.
    pub fn project_target(&self, g: &mut Graph, bp: &BoundParams, aux: &Raster) -> Result<NodeId> {
        let features = self.encode_image(aux)?;
        let pooled = pool_patches(&features, self.cfg.k_latent)?;
        let pooled = g.constant(pooled);
        self.projector(g, bp, "target_proj", pooled)
    }

    /// Graph-mode forward over an assembled sequence.
    ///
    /// `prefix` carries raw patch features (`[P, d_vis]`) when the call is
    /// image-conditioned; `None` is the plan-only mode. Returns per-position
    /// logits and final hidden states.
    pub fn forward(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        tokens: &[u32],
        prefix: Option<&Tensor>,
    ) -> Result<ForwardOut> {
        let prefix_len = prefix.map(|p| p.rows()).unwrap_or(0);
        let total = prefix_len + tokens.len();
        if total > self.cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {total} exceeds maximum {}",
                self.cfg.max_seq_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.embedding(bp.id("tok_emb"), &ids)?;
        let mut x = match prefix {
            Some(features) => {
                let feat = g.constant(features.clone());
                let projected = self.projector(g, bp, "prefix_proj", feat)?;
                g.concat_rows(projected, tok)?
            }
            None => tok,
        };
        let pos_ids: Vec<usize> = (0..total).collect();
        let pos = g.embedding(bp.id("pos_emb"), &pos_ids)?;
        x = g.add(x, pos)?;

        for i in 0..self.cfg.n_layers {
            let l = format!("layer{i}");
            let n = g.layer_norm(x)?;
            let n = g.mul_row(n, bp.id(&format!("{l}.ln1.g")))?;
            let n = g.add_row(n, bp.id(&format!("{l}.ln1.b")))?;
            let q = g.matmul(n, bp.id(&format!("{l}.wq")))?;
            let q = g.add_row(q, bp.id(&format!("{l}.bq")))?;
            let k = g.matmul(n, bp.id(&format!("{l}.wk")))?;
            let k = g.add_row(k, bp.id(&format!("{l}.bk")))?;
            let v = g.matmul(n, bp.id(&format!("{l}.wv")))?;
            let v = g.add_row(v, bp.id(&format!("{l}.bv")))?;
            let a = g.attention(q, k, v, self.cfg.n_heads)?;
            let a = g.matmul(a, bp.id(&format!("{l}.wo")))?;
            let a = g.add_row(a, bp.id(&format!("{l}.bo")))?;
            x = g.add(x, a)?;

            let n2 = g.layer_norm(x)?;
            let n2 = g.mul_row(n2, bp.id(&format!("{l}.ln2.g")))?;
            let n2 = g.add_row(n2, bp.id(&format!("{l}.ln2.b")))?;
            let h = g.matmul(n2, bp.id(&format!("{l}.mlp.w1")))?;
            let h = g.add_row(h, bp.id(&format!("{l}.mlp.b1")))?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, bp.id(&format!("{l}.mlp.w2")))?;
            let h = g.add_row(h, bp.id(&format!("{l}.mlp.b2")))?;
            x = g.add(x, h)?;
        }

        let hn = g.layer_norm(x)?;
        let hn = g.mul_row(hn, bp.id("final_ln.g"))?;
        let hidden = g.add_row(hn, bp.id("final_ln.b"))?;
        let logits = g.matmul(hidden, bp.id("head.w"))?;
        let logits = g.add_row(logits, bp.id("head.b"))?;
        Ok(ForwardOut { logits, hidden })
    }

    /// `H_gen`: hidden-state rows at the K latent pad positions, or `None`
    /// when the layout has no latent block.
    pub fn latent_hidden(
        &self,
        g: &mut Graph,
        hidden: NodeId,
        layout: &SequenceLayout,
    ) -> Result<Option<NodeId>> {
        match layout.latent_pads() {
            Some(pads) => Ok(Some(g.slice_rows(hidden, pads.start, pads.len())?)),
            None => Ok(None),
        }
    }
}
