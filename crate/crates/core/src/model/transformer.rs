//! Pre-layer-norm decoder with multi-head causal attention, GELU feed-forward
//! blocks and learned absolute positions, in `f32`.
//!
//! Positions are processed one at a time against per-layer key/value caches,
//! so every position sees exactly the same arithmetic whatever the sequence
//! length. The recorded hidden state is the final layer-norm output, the
//! exact input of the unembedding head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{argmax, UnembeddingHead};
use crate::trajectory::{Notes, Trajectory};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    /// `n_out x n_in`, row-major.
    weight: Vec<f32>,
    bias: Vec<f32>,
    n_in: usize,
}

impl Linear {
    fn forward(&self, x: &[f32]) -> Vec<f32> {
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
                row.iter().zip(x).fold(0.0f32, |acc, (w, v)| acc + w * v) + b
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gain: Vec<f32>,
    bias: Vec<f32>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() as f32;
        let mean = x.iter().fold(0.0f32, |a, v| a + v) / n;
        let var = x.iter().fold(0.0f32, |a, v| a + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_f32(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
    let sum = e.iter().fold(0.0f32, |a, v| a + v);
    e.into_iter().map(|v| v / sum).collect()
}

/// A randomly initialized decoder-only transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    token_embedding: Vec<f32>,
    position_embedding: Vec<f32>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: UnembeddingHead,
}

struct Sampler {
    rng: ChaCha8Rng,
    normal: Option<Normal<f32>>,
}

impl Sampler {
    fn draw(&mut self, n: usize) -> Vec<f32> {
        match &self.normal {
            Some(normal) => (0..n).map(|_| normal.sample(&mut self.rng)).collect(),
            None => vec![0.0; n],
        }
    }

    fn linear(&mut self, n_in: usize, n_out: usize) -> Linear {
        Linear {
            weight: self.draw(n_in * n_out),
            bias: vec![0.0; n_out],
            n_in,
        }
    }
}

/// Draws every weight matrix from `N(0, init_std^2)` with a ChaCha8 stream
/// seeded from `config.seed`. Biases are zero; layer norms have gain 1 and
/// bias 0.
///
/// Draw order: token embedding, position embedding, then per block query,
/// key, value, attention output, feed-forward in, feed-forward out, and
/// finally the unembedding matrix.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let d = config.d_model;
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        normal: (config.init_std > 0.0).then(|| Normal::new(0.0, config.init_std).expect("validated std")),
    };
    let token_embedding = sampler.draw(config.vocab * d);
    let position_embedding = sampler.draw(config.max_seq * d);
    let blocks = (0..config.n_layers)
        .map(|_| Block {
            ln_attn: LayerNorm::identity(d),
            query: sampler.linear(d, d),
            key: sampler.linear(d, d),
            value: sampler.linear(d, d),
            attn_out: sampler.linear(d, d),
            ln_ff: LayerNorm::identity(d),
            ff_in: sampler.linear(d, config.d_ff),
            ff_out: sampler.linear(config.d_ff, d),
        })
        .collect();
    let head = UnembeddingHead::new(sampler.draw(config.vocab * d), vec![0.0; config.vocab], config.vocab, d)?;
    Ok(Model {
        config: config.clone(),
        token_embedding,
        position_embedding,
        blocks,
        final_norm: LayerNorm::identity(d),
        head,
    })
}

/// Per-layer keys and values of the positions processed so far.
struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &UnembeddingHead {
        &self.head
    }

    /// Label written into trajectories generated by this model.
    pub fn model_id(&self) -> String {
        let c = &self.config;
        format!("toy-d{}-h{}-l{}-seed{}", c.d_model, c.n_heads, c.n_layers, c.seed)
    }

    /// Every parameter in a fixed order, for checksums and comparisons.
    pub fn parameters(&self) -> Vec<f32> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.token_embedding);
        out.extend_from_slice(&self.position_embedding);
        for b in &self.blocks {
            for ln in [&b.ln_attn, &b.ln_ff] {
                out.extend_from_slice(&ln.gain);
                out.extend_from_slice(&ln.bias);
            }
            for lin in [&b.query, &b.key, &b.value, &b.attn_out, &b.ff_in, &b.ff_out] {
                out.extend_from_slice(&lin.weight);
                out.extend_from_slice(&lin.bias);
            }
        }
        out.extend_from_slice(&self.final_norm.gain);
        out.extend_from_slice(&self.final_norm.bias);
        out.extend_from_slice(self.head.weights());
        out.extend_from_slice(self.head.bias());
        out
    }

    fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    fn check_token(&self, id: u32) -> Result<()> {
        if (id as usize) < self.config.vocab {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            })
        }
    }

    /// Feeds one token at the next position and returns its final hidden state.
    fn step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
        self.check_token(token)?;
        let pos = cache.len;
        if pos >= self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: self.config.max_seq,
            });
        }
        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let head_dim = d / n_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let tok = &self.token_embedding[token as usize * d..(token as usize + 1) * d];
        let posv = &self.position_embedding[pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = tok.iter().zip(posv).map(|(a, b)| a + b).collect();

        for (layer, block) in self.blocks.iter().enumerate() {
            let a = block.ln_attn.forward(&x);
            let q = block.query.forward(&a);
            cache.keys[layer].extend(block.key.forward(&a));
            cache.values[layer].extend(block.value.forward(&a));
            let keys = &cache.keys[layer];
            let values = &cache.values[layer];

            let mut mixed = vec![0.0f32; d];
            for h in 0..n_heads {
                let lo = h * head_dim;
                let qh = &q[lo..lo + head_dim];
                let scores: Vec<f32> = (0..=pos)
                    .map(|s| {
                        let kh = &keys[s * d + lo..s * d + lo + head_dim];
                        qh.iter().zip(kh).fold(0.0f32, |acc, (a, b)| acc + a * b) * scale
                    })
                    .collect();
                let weights = softmax_f32(&scores);
                for (s, w) in weights.iter().enumerate() {
                    let vh = &values[s * d + lo..s * d + lo + head_dim];
                    for (m, v) in mixed[lo..lo + head_dim].iter_mut().zip(vh) {
                        *m += w * v;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(block.attn_out.forward(&mixed)) {
                *xi += o;
            }

            let m = block.ln_ff.forward(&x);
            let inner: Vec<f32> = block.ff_in.forward(&m).into_iter().map(gelu).collect();
            for (xi, o) in x.iter_mut().zip(block.ff_out.forward(&inner)) {
                *xi += o;
            }
        }
        cache.len += 1;
        Ok(self.final_norm.forward(&x))
    }
}

/// Per-position rows, outer index is the position.
pub type Rows = Vec<Vec<f32>>;

/// Final hidden state and logits at every position. `logits[t]` is
/// `head.logits_f32(&hidden[t])`.
pub fn forward_hidden(model: &Model, token_ids: &[u32]) -> Result<(Rows, Rows)> {
    if token_ids.is_empty() {
        return Err(Error::TooShort {
            what: "input tokens",
            needed: 1,
            got: 0,
        });
    }
    if token_ids.len() > model.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: token_ids.len(),
            max: model.config.max_seq,
        });
    }
    for &id in token_ids {
        model.check_token(id)?;
    }
    let mut cache = model.new_cache();
    let hidden = token_ids
        .iter()
        .map(|&id| model.step(&mut cache, id))
        .collect::<Result<Vec<_>>>()?;
    let logits = hidden.iter().map(|h| model.head.logits_f32(h)).collect();
    Ok((hidden, logits))
}

/// Greedy decoding. Records, for each generated token, the hidden state at
/// the position that produced it, the token (argmax, lowest id on ties) and
/// its softmax probability. The head, the config and the prompt ids are
/// attached so the model can be rebuilt from the trajectory alone.
pub fn generate_greedy(model: &Model, prompt: &[u32], steps: usize) -> Result<Trajectory> {
    if prompt.is_empty() {
        return Err(Error::TooShort {
            what: "prompt tokens",
            needed: 1,
            got: 0,
        });
    }
    if steps == 0 {
        return Err(Error::TooShort {
            what: "generation steps",
            needed: 1,
            got: 0,
        });
    }
    if prompt.len() + steps > model.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + steps,
            max: model.config.max_seq,
        });
    }
    for &id in prompt {
        model.check_token(id)?;
    }

    let mut cache = model.new_cache();
    let mut h = Vec::new();
    for &id in prompt {
        h = model.step(&mut cache, id)?;
    }
    let mut hidden = Vec::with_capacity(steps);
    let mut tokens = Vec::with_capacity(steps);
    let mut probs = Vec::with_capacity(steps);
    for i in 0..steps {
        let logits = model.head.logits_f32(&h);
        let next = argmax(&logits);
        let p = softmax_f32(&logits)[next];
        hidden.push(h);
        tokens.push(next as u32);
        probs.push(p);
        h = if i + 1 < steps {
            model.step(&mut cache, next as u32)?
        } else {
            Vec::new()
        };
    }

    let mut notes = Notes::new();
    notes.insert(
        "toy_config".into(),
        serde_json::to_value(&model.config).expect("config serializes"),
    );
    notes.insert("prompt_ids".into(), serde_json::json!(prompt));
    let context_len = u32::try_from(prompt.len()).expect("bounded by max_seq");
    Trajectory::new(model.model_id(), context_len, hidden, tokens, probs)?
        .with_notes(notes)
        .with_head(model.head.clone())
}

/// Rebuilds the generating model and prompt from a trajectory written by
/// [`generate_greedy`].
pub fn model_from_trajectory(traj: &Trajectory) -> Result<(Model, Vec<u32>)> {
    let config = traj
        .notes()
        .get("toy_config")
        .ok_or_else(|| Error::Header("trajectory carries no toy_config note".into()))?;
    let config: ModelConfig =
        serde_json::from_value(config.clone()).map_err(|e| Error::Header(format!("toy_config: {e}")))?;
    let prompt = traj
        .notes()
        .get("prompt_ids")
        .ok_or_else(|| Error::Header("trajectory carries no prompt_ids note".into()))?;
    let prompt: Vec<u32> =
        serde_json::from_value(prompt.clone()).map_err(|e| Error::Header(format!("prompt_ids: {e}")))?;
    Ok((init_model(&config)?, prompt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::encode_bytes;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            vocab: 257,
            max_seq: 32,
            seed: 42,
            init_std: 0.02,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(a, b);
        let bits = |m: &Model| m.parameters().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = init_model(&ModelConfig { seed: 43, ..small() }).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn zero_std_gives_zero_weights_and_flat_logits() {
        let m = init_model(&ModelConfig {
            init_std: 0.0,
            ..small()
        })
        .unwrap();
        assert!(m.head.weights().iter().all(|&w| w == 0.0));
        let (_, logits) = forward_hidden(&m, &encode_bytes(b"abc")).unwrap();
        assert!(logits.iter().flatten().all(|&z| z == logits[0][0]));
        let traj = generate_greedy(&m, &encode_bytes(b"x"), 5).unwrap();
        assert_eq!(traj.token_ids(), &[0; 5]);
    }

    #[test]
    fn logits_are_the_head_applied_to_hidden() {
        let m = init_model(&small()).unwrap();
        let (hidden, logits) = forward_hidden(&m, &encode_bytes(b"hello")).unwrap();
        for (h, z) in hidden.iter().zip(&logits) {
            assert_eq!(&m.head.logits_f32(h), z);
        }
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let m = init_model(&small()).unwrap();
        let ids = encode_bytes(b"causal mask");
        let (full, _) = forward_hidden(&m, &ids).unwrap();
        for len in 1..ids.len() {
            let (prefix, _) = forward_hidden(&m, &ids[..len]).unwrap();
            assert_eq!(prefix[..], full[..len]);
        }
    }

    #[test]
    fn empty_stack_is_normed_embedding() {
        let m = init_model(&ModelConfig { n_layers: 0, ..small() }).unwrap();
        let ids = [3u32, 9];
        let (hidden, _) = forward_hidden(&m, &ids).unwrap();
        let d = 16;
        for (t, &id) in ids.iter().enumerate() {
            let x: Vec<f32> = (0..d)
                .map(|k| m.token_embedding[id as usize * d + k] + m.position_embedding[t * d + k])
                .collect();
            assert_eq!(hidden[t], m.final_norm.forward(&x));
        }
    }

    #[test]
    fn input_validation() {
        let m = init_model(&small()).unwrap();
        assert!(matches!(
            forward_hidden(&m, &[300]),
            Err(Error::TokenOutOfRange { id: 300, .. })
        ));
        assert!(matches!(
            forward_hidden(&m, &[1; 33]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(forward_hidden(&m, &[]).is_err());
        assert!(matches!(
            generate_greedy(&m, &[1; 30], 3),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(generate_greedy(&m, &[], 3).is_err());
        assert!(generate_greedy(&m, &[1], 0).is_err());
    }

    #[test]
    fn single_step_records_max_probability() {
        let m = init_model(&small()).unwrap();
        let prompt = encode_bytes(b"one");
        let traj = generate_greedy(&m, &prompt, 1).unwrap();
        assert_eq!(traj.len(), 1);
        let (hidden, logits) = forward_hidden(&m, &prompt).unwrap();
        let last = logits.last().unwrap();
        let p = softmax_f32(last);
        let max = p.iter().copied().fold(0.0f32, f32::max);
        assert_eq!(traj.p_realized()[0], max);
        assert_eq!(&traj.hidden()[0], hidden.last().unwrap());
        assert_eq!(traj.context_len(), 4);
    }

    #[test]
    fn generation_matches_forward_on_realized_sequence() {
        let m = init_model(&small()).unwrap();
        let prompt = encode_bytes(b"ab");
        let traj = generate_greedy(&m, &prompt, 6).unwrap();
        let mut seq = prompt.clone();
        seq.extend_from_slice(&traj.token_ids()[..5]);
        let (hidden, _) = forward_hidden(&m, &seq).unwrap();
        assert_eq!(traj.hidden(), &hidden[prompt.len() - 1..]);
        let (rebuilt, p) = model_from_trajectory(&traj).unwrap();
        assert_eq!(rebuilt, m);
        assert_eq!(p, prompt);
    }
}
