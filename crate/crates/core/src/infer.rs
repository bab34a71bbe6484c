//! No-grad inference: full teacher-forced scoring and incremental
//! KV-cached decoding with the forced latent block.
//!
//! The decode loop implements the generation protocol: when
//! `<|latent_start|>` is emitted, the next `K` emissions are forced to
//! `<|latent_pad|>` and the following one to `<|latent_end|>`, so every
//! opened latent block is well-formed. Chosen-token log-probabilities are
//! recorded under the unbiased model distribution; the latent logit bias
//! shapes exploration only.

use crate::error::{Error, Result};
use crate::graph::{gelu_fwd, softmax_in_place, LAYERNORM_EPS};
use crate::model::Model;
use crate::rng::rng_for;
use crate::tensor::{gemm, Tensor};
use rand::Rng;

/// How the next free token is selected.
#[derive(Debug, Clone, Copy)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, top_p: f64, seed: u64 },
}

/// Decode-loop knobs.
#[derive(Debug, Clone, Copy)]
pub struct GenParams {
    pub mode: DecodeMode,
    /// Added to the `<|latent_start|>` / `<|latent_end|>` logits before
    /// temperature scaling.
    pub latent_bias: f64,
    pub max_new_tokens: usize,
    /// Text-only ablation: latent specials are masked out of decoding.
    pub ban_latent: bool,
}

impl GenParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenParams {
            mode: DecodeMode::Greedy,
            latent_bias: 0.0,
            max_new_tokens,
            ban_latent: false,
        }
    }
}

/// One decoded continuation.
#[derive(Debug, Clone)]
pub struct Generation {
    /// Generated tokens only (prompt excluded); ends with `<eos>` unless
    /// truncated.
    pub tokens: Vec<u32>,
    /// Log-probability of each generated token under the unbiased
    /// distribution of the decoding model.
    pub logps: Vec<f64>,
    /// Whether each token came from latent-block forcing.
    pub forced: Vec<bool>,
    pub truncated: bool,
}

/// Per-layer key/value rows accumulated during decoding.
pub struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

struct LayerWeights<'a> {
    ln1_g: &'a [f64],
    ln1_b: &'a [f64],
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    ln2_g: &'a [f64],
    ln2_b: &'a [f64],
    mw1: &'a [f64],
    mb1: &'a [f64],
    mw2: &'a [f64],
    mb2: &'a [f64],
}

impl Model {
    fn p(&self, name: &str) -> &[f64] {
        self.params.get(name).expect("parameter present").value.data()
    }

    fn layer_weights(&self, i: usize) -> LayerWeights<'_> {
        let l = format!("layer{i}");
        LayerWeights {
            ln1_g: self.p(&format!("{l}.ln1.g")),
            ln1_b: self.p(&format!("{l}.ln1.b")),
            wq: self.p(&format!("{l}.wq")),
            bq: self.p(&format!("{l}.bq")),
            wk: self.p(&format!("{l}.wk")),
            bk: self.p(&format!("{l}.bk")),
            wv: self.p(&format!("{l}.wv")),
            bv: self.p(&format!("{l}.bv")),
            wo: self.p(&format!("{l}.wo")),
            bo: self.p(&format!("{l}.bo")),
            ln2_g: self.p(&format!("{l}.ln2.g")),
            ln2_b: self.p(&format!("{l}.ln2.b")),
            mw1: self.p(&format!("{l}.mlp.w1")),
            mb1: self.p(&format!("{l}.mlp.b1")),
            mw2: self.p(&format!("{l}.mlp.w2")),
            mb2: self.p(&format!("{l}.mlp.b2")),
        }
    }

    /// Two-layer tanh projector applied without a graph.
    fn plain_projector(&self, name: &str, input: &Tensor) -> Result<Tensor> {
        let w1 = &self.params.get(&format!("{name}.w1")).unwrap().value;
        let b1 = self.p(&format!("{name}.b1"));
        let w2 = &self.params.get(&format!("{name}.w2")).unwrap().value;
        let b2 = self.p(&format!("{name}.b2"));
        let mut h = input.matmul(w1)?;
        let cols = h.cols();
        for (i, x) in h.data_mut().iter_mut().enumerate() {
            *x = (*x + b1[i % cols]).tanh();
        }
        let mut out = h.matmul(w2)?;
        let cols = out.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += b2[i % cols];
        }
        Ok(out)
    }

    /// Input rows (token embeddings behind an optional projected image
    /// prefix, plus positions) for positions `0..L`.
    fn input_rows(&self, tokens: &[u32], prefix: Option<&Tensor>) -> Result<Vec<f64>> {
        let d = self.cfg.hidden_size;
        let prefix_rows = match prefix {
            Some(features) => Some(self.plain_projector("prefix_proj", features)?),
            None => None,
        };
        let plen = prefix_rows.as_ref().map(|t| t.rows()).unwrap_or(0);
        let total = plen + tokens.len();
        if total > self.cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {total} exceeds maximum {}",
                self.cfg.max_seq_len
            )));
        }
        let tok_emb = self.p("tok_emb");
        let pos_emb = self.p("pos_emb");
        let mut x = vec![0.0; total * d];
        if let Some(pr) = &prefix_rows {
            x[..plen * d].copy_from_slice(pr.data());
        }
        for (i, &t) in tokens.iter().enumerate() {
            let dst = &mut x[(plen + i) * d..(plen + i + 1) * d];
            dst.copy_from_slice(&tok_emb[t as usize * d..(t as usize + 1) * d]);
        }
        for pos in 0..total {
            let row = &mut x[pos * d..(pos + 1) * d];
            for (a, b) in row.iter_mut().zip(&pos_emb[pos * d..(pos + 1) * d]) {
                *a += b;
            }
        }
        Ok(x)
    }

    /// Full forward without gradients; returns `[L, V]` logits and the
    /// key/value cache for continuing the sequence.
    pub fn infer_prefill(&self, tokens: &[u32], prefix: Option<&Tensor>) -> Result<(Tensor, KvCache)> {
        let d = self.cfg.hidden_size;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.input_rows(tokens, prefix)?;
        let t = x.len() / d;
        let mut cache = KvCache {
            k: Vec::with_capacity(self.cfg.n_layers),
            v: Vec::with_capacity(self.cfg.n_layers),
            len: t,
        };
        let mut n = vec![0.0; t * d];
        let mut q = vec![0.0; t * d];
        let mut att = vec![0.0; t * d];
        let mut proj = vec![0.0; t * d];
        let mut mlp_h;
        for i in 0..self.cfg.n_layers {
            let lw = self.layer_weights(i);
            ln_affine(&x, &mut n, d, lw.ln1_g, lw.ln1_b);
            let mut k = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            affine(&n, lw.wq, lw.bq, &mut q, t, d, d);
            affine(&n, lw.wk, lw.bk, &mut k, t, d, d);
            affine(&n, lw.wv, lw.bv, &mut v, t, d, d);
            causal_attention(&q, &k, &v, &mut att, t, d, heads, scale);
            affine(&att, lw.wo, lw.bo, &mut proj, t, d, d);
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
            ln_affine(&x, &mut n, d, lw.ln2_g, lw.ln2_b);
            mlp_h = vec![0.0; t * 4 * d];
            affine(&n, lw.mw1, lw.mb1, &mut mlp_h, t, d, 4 * d);
            for h in mlp_h.iter_mut() {
                *h = gelu_fwd(*h);
            }
            affine(&mlp_h, lw.mw2, lw.mb2, &mut proj, t, 4 * d, d);
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
            cache.k.push(k);
            cache.v.push(v);
        }
        ln_affine(&x, &mut n, d, self.p("final_ln.g"), self.p("final_ln.b"));
        let vsz = self.vocab.size();
        let mut logits = vec![0.0; t * vsz];
        affine(&n, self.p("head.w"), self.p("head.b"), &mut logits, t, d, vsz);
        let logits = Tensor::new(vec![t, vsz], logits)?;
        Ok((logits, cache))
    }

    /// Teacher-forced logits over a full sequence.
    pub fn infer_logits(&self, tokens: &[u32], prefix: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.infer_prefill(tokens, prefix)?.0)
    }

    /// Extend the cache by one token at sequence position `pos`;
    /// returns the next-token logits row.
    pub fn infer_step(&self, cache: &mut KvCache, token: u32, pos: usize) -> Result<Vec<f64>> {
        let d = self.cfg.hidden_size;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        if pos != cache.len {
            return Err(Error::InvalidArgument(format!(
                "decode position {pos} does not match cache length {}",
                cache.len
            )));
        }
        if pos >= self.cfg.max_seq_len {
            return Err(Error::InvalidArgument("decode past maximum sequence length".into()));
        }
        let tok_emb = self.p("tok_emb");
        let pos_emb = self.p("pos_emb");
        let mut x = vec![0.0; d];
        let te = &tok_emb[token as usize * d..(token as usize + 1) * d];
        let pe = &pos_emb[pos * d..(pos + 1) * d];
        for j in 0..d {
            x[j] = te[j] + pe[j];
        }
        let t_new = pos + 1;
        let mut n = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut krow = vec![0.0; d];
        let mut vrow = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut proj = vec![0.0; d];
        for i in 0..self.cfg.n_layers {
            let lw = self.layer_weights(i);
            ln_affine(&x, &mut n, d, lw.ln1_g, lw.ln1_b);
            affine(&n, lw.wq, lw.bq, &mut q, 1, d, d);
            affine(&n, lw.wk, lw.bk, &mut krow, 1, d, d);
            affine(&n, lw.wv, lw.bv, &mut vrow, 1, d, d);
            cache.k[i].extend_from_slice(&krow);
            cache.v[i].extend_from_slice(&vrow);
            let kcache = &cache.k[i];
            let vcache = &cache.v[i];
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                let mut scores = Vec::with_capacity(t_new);
                for j in 0..t_new {
                    let kj = &kcache[j * d + h * dh..j * d + (h + 1) * dh];
                    scores.push(scale * qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                softmax_in_place(&mut scores);
                let out = &mut att[h * dh..(h + 1) * dh];
                out.fill(0.0);
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &vcache[j * d + h * dh..j * d + (h + 1) * dh];
                    for c in 0..dh {
                        out[c] += p * vj[c];
                    }
                }
            }
            affine(&att, lw.wo, lw.bo, &mut proj, 1, d, d);
            for j in 0..d {
                x[j] += proj[j];
            }
            ln_affine(&x, &mut n, d, lw.ln2_g, lw.ln2_b);
            let mut h4 = vec![0.0; 4 * d];
            affine(&n, lw.mw1, lw.mb1, &mut h4, 1, d, 4 * d);
            for h in h4.iter_mut() {
                *h = gelu_fwd(*h);
            }
            affine(&h4, lw.mw2, lw.mb2, &mut proj, 1, 4 * d, d);
            for j in 0..d {
                x[j] += proj[j];
            }
        }
        cache.len = t_new;
        ln_affine(&x, &mut n, d, self.p("final_ln.g"), self.p("final_ln.b"));
        let vsz = self.vocab.size();
        let mut logits = vec![0.0; vsz];
        affine(&n, self.p("head.w"), self.p("head.b"), &mut logits, 1, d, vsz);
        Ok(logits)
    }

    /// Autoregressive decoding with forced latent blocks.
    pub fn generate(&self, prompt: &[u32], prefix: Option<&Tensor>, params: &GenParams) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("generate requires a non-empty prompt".into()));
        }
        let (logits, mut cache) = self.infer_prefill(prompt, prefix)?;
        let mut row = logits.row(logits.rows() - 1).to_vec();
        let mut pos = cache.len;
        let mut rng = match params.mode {
            DecodeMode::Sample { seed, .. } => Some(rng_for(seed, &[0x5a])),
            DecodeMode::Greedy => None,
        };
        let vocab = &self.vocab;
        let k = self.cfg.k_latent;
        let mut gen = Generation {
            tokens: Vec::new(),
            logps: Vec::new(),
            forced: Vec::new(),
            truncated: false,
        };
        // Remaining forced emissions: pads counted down, then the end marker.
        let mut forced_pads = 0usize;
        let mut forced_end = false;
        loop {
            if gen.tokens.len() >= params.max_new_tokens {
                gen.truncated = true;
                break;
            }
            let lse = log_sum_exp(&row);
            let (token, was_forced) = if forced_pads > 0 {
                forced_pads -= 1;
                (vocab.latent_pad(), true)
            } else if forced_end {
                forced_end = false;
                (vocab.latent_end(), true)
            } else {
                (self.select_token(&row, params, &mut rng), false)
            };
            gen.logps.push(row[token as usize] - lse);
            gen.tokens.push(token);
            gen.forced.push(was_forced);
            if token == vocab.eos() {
                break;
            }
            if token == vocab.latent_start() && !was_forced {
                forced_pads = k;
                forced_end = true;
            }
            if pos + 1 >= self.cfg.max_seq_len {
                gen.truncated = true;
                break;
            }
            row = self.infer_step(&mut cache, token, pos)?;
            pos += 1;
        }
        Ok(gen)
    }

    fn select_token(&self, raw: &[f64], params: &GenParams, rng: &mut Option<rand_chacha::ChaCha12Rng>) -> u32 {
        let vocab = &self.vocab;
        let mut work = raw.to_vec();
        if params.ban_latent {
            work[vocab.latent_start() as usize] = f64::NEG_INFINITY;
            work[vocab.latent_pad() as usize] = f64::NEG_INFINITY;
            work[vocab.latent_end() as usize] = f64::NEG_INFINITY;
        }
        if params.latent_bias != 0.0 && !params.ban_latent {
            work[vocab.latent_start() as usize] += params.latent_bias;
            work[vocab.latent_end() as usize] += params.latent_bias;
        }
        match params.mode {
            DecodeMode::Greedy => argmax(&work) as u32,
            DecodeMode::Sample { temperature, top_p, .. } => {
                let rng = rng.as_mut().expect("sampling rng");
                nucleus_sample(&work, temperature, top_p, rng) as u32
            }
        }
    }

    /// Log-probabilities of `tokens[first_response..]` under this model,
    /// teacher-forced over the full sequence.
    pub fn score_tokens(&self, tokens: &[u32], prefix: Option<&Tensor>, first_response: usize) -> Result<Vec<f64>> {
        if first_response == 0 || first_response > tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "response start {first_response} out of range for {} tokens",
                tokens.len()
            )));
        }
        let plen = prefix.map(|p| p.rows()).unwrap_or(0);
        let logits = self.infer_logits(tokens, prefix)?;
        let mut out = Vec::with_capacity(tokens.len() - first_response);
        for i in first_response..tokens.len() {
            let row = logits.row(plen + i - 1);
            let lse = log_sum_exp(row);
            out.push(row[tokens[i] as usize] - lse);
        }
        Ok(out)
    }
}

/// Temperature-scaled nucleus sampling over raw logits: softmax after
/// dividing by `temperature`, restrict to the smallest probability-ordered
/// set whose mass reaches `top_p` (ties broken by index), then draw.
pub fn nucleus_sample(logits: &[f64], temperature: f64, top_p: f64, rng: &mut rand_chacha::ChaCha12Rng) -> usize {
    let mut work: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    softmax_in_place(&mut work);
    let mut order: Vec<usize> = (0..work.len()).collect();
    order.sort_unstable_by(|&a, &b| work[b].partial_cmp(&work[a]).unwrap().then(a.cmp(&b)));
    let mut kept = 0usize;
    let mut mass = 0.0;
    for &idx in &order {
        kept += 1;
        mass += work[idx];
        if mass >= top_p {
            break;
        }
    }
    let u: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    let mut pick = order[kept - 1];
    for &idx in &order[..kept] {
        acc += work[idx];
        if u < acc {
            pick = idx;
            break;
        }
    }
    pick
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `out[t] = x[t] @ w + b` for row-major `x [t, din]`, `w [din, dout]`.
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], t: usize, din: usize, dout: usize) {
    gemm(t, din, dout, 1.0, x, w, 0.0, out);
    for (i, o) in out.iter_mut().enumerate() {
        *o += b[i % dout];
    }
}

fn ln_affine(x: &[f64], out: &mut [f64], d: usize, gain: &[f64], bias: &[f64]) {
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for c in 0..d {
            orow[c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
    }
}

fn causal_attention(q: &[f64], k: &[f64], v: &[f64], out: &mut [f64], t: usize, d: usize, heads: usize, scale: f64) {
    let dh = d / heads;
    for h in 0..heads {
        for i in 0..t {
            let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                scores.push(scale * qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
            }
            softmax_in_place(&mut scores);
            let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            orow.fill(0.0);
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    orow[c] += p * vj[c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::model::ModelConfig;
    use crate::vision::Raster;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            hidden_size: 16,
            n_layers: 2,
            n_heads: 2,
            k_latent: 3,
            max_seq_len: 64,
            raster_size: 8,
            patch_size: 4,
            d_vis: 6,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn plain_forward_matches_graph_forward() {
        let m = tiny();
        let tokens: Vec<u32> = vec![10, 11, 12, 13, 14];
        let mut raster = Raster::new(8);
        raster.line(0, 0, 7, 3).unwrap();
        let feats = m.encode_image(&raster).unwrap();

        let plain = m.infer_logits(&tokens, Some(&feats)).unwrap();
        let mut g = Graph::new();
        let bp = m.bind(&mut g);
        let out = m.forward(&mut g, &bp, &tokens, Some(&feats)).unwrap();
        let graph_logits = g.value(out.logits);
        assert_eq!(plain.shape(), graph_logits.shape());
        for (a, b) in plain.data().iter().zip(graph_logits.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let m = tiny();
        let tokens: Vec<u32> = vec![10, 11, 12, 13, 14, 15];
        let full = m.infer_logits(&tokens, None).unwrap();

        let (pre, mut cache) = m.infer_prefill(&tokens[..3], None).unwrap();
        let mut row = pre.row(2).to_vec();
        for (i, &t) in tokens[3..].iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(2 + i)) {
                assert!((a - b).abs() < 1e-10);
            }
            row = m.infer_step(&mut cache, t, 3 + i).unwrap();
        }
        for (a, b) in row.iter().zip(full.row(5)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = tiny();
        let prompt = vec![10u32, 11, 12];
        let p = GenParams::greedy(12);
        let a = m.generate(&prompt, None, &p).unwrap();
        let b = m.generate(&prompt, None, &p).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.logps, b.logps);
    }

    #[test]
    fn sampled_generation_is_seed_deterministic() {
        let m = tiny();
        let prompt = vec![10u32, 11, 12];
        let p = GenParams {
            mode: DecodeMode::Sample {
                temperature: 0.9,
                top_p: 0.99,
                seed: 42,
            },
            latent_bias: 1.0,
            max_new_tokens: 12,
            ban_latent: false,
        };
        let a = m.generate(&prompt, None, &p).unwrap();
        let b = m.generate(&prompt, None, &p).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn huge_bias_opens_block_immediately_and_block_is_wellformed() {
        let m = tiny();
        let prompt = vec![10u32, 11];
        let p = GenParams {
            mode: DecodeMode::Sample {
                temperature: 0.9,
                top_p: 0.99,
                seed: 7,
            },
            latent_bias: 1e6,
            max_new_tokens: 16,
            ban_latent: false,
        };
        let g = m.generate(&prompt, None, &p).unwrap();
        let v = &m.vocab;
        assert_eq!(g.tokens[0], v.latent_start());
        assert_eq!(&g.tokens[1..4], &[v.latent_pad(), v.latent_pad(), v.latent_pad()]);
        assert_eq!(g.tokens[4], v.latent_end());
        assert!(g.forced[1] && g.forced[2] && g.forced[3] && g.forced[4]);
    }

    #[test]
    fn ban_latent_never_emits_specials() {
        let m = tiny();
        let prompt = vec![10u32, 11];
        let p = GenParams {
            mode: DecodeMode::Sample {
                temperature: 1.5,
                top_p: 1.0,
                seed: 9,
            },
            latent_bias: 0.0,
            max_new_tokens: 40,
            ban_latent: true,
        };
        let g = m.generate(&prompt, None, &p).unwrap();
        let v = &m.vocab;
        for t in &g.tokens {
            assert_ne!(*t, v.latent_start());
            assert_ne!(*t, v.latent_pad());
            assert_ne!(*t, v.latent_end());
        }
    }

    #[test]
    fn recorded_logps_match_teacher_forced_scoring() {
        let m = tiny();
        let prompt = vec![10u32, 11, 12];
        let p = GenParams {
            mode: DecodeMode::Sample {
                temperature: 0.9,
                top_p: 0.99,
                seed: 5,
            },
            latent_bias: 3.0,
            max_new_tokens: 10,
            ban_latent: false,
        };
        let g = m.generate(&prompt, None, &p).unwrap();
        let mut full = prompt.clone();
        full.extend_from_slice(&g.tokens);
        let scored = m.score_tokens(&full, None, prompt.len()).unwrap();
        assert_eq!(scored.len(), g.logps.len());
        for (a, b) in scored.iter().zip(&g.logps) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
