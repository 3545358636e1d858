//! The concept-embedding encoder, label predictor and domain discriminator.
//!
//! Per concept `i` a linear head maps backbone features to `[v⁺ᵢ, v⁻ᵢ]`; a
//! shared scorer turns that concatenation into `ĉᵢ`; the concept embedding is
//! `vᵢ = ĉᵢ·v⁺ᵢ + (1−ĉᵢ)·v⁻ᵢ`. Replacing `ĉ` with ground-truth concepts in the
//! same assembly gives the ideal embedding.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::Scalar;

/// What the discriminator reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscInput {
    /// The assembled concept embedding `v`.
    #[default]
    Embedding,
    /// Backbone features `Φ(x)`, as in a plain adversarial baseline.
    Backbone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub n_concepts: usize,
    /// Per-concept sub-embedding width `d`; the embedding has `n_concepts · d` entries.
    pub emb_dim: usize,
    pub n_classes: usize,
    pub backbone_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    #[serde(default)]
    pub disc_input: DiscInput,
}

impl ModelConfig {
    /// Network sized for [`ShiftSpec::benchmark`](crate::datagen::ShiftSpec::benchmark) data.
    pub fn benchmark() -> Self {
        Self {
            input_dim: 10,
            n_concepts: 6,
            emb_dim: 4,
            n_classes: 2,
            backbone_widths: vec![32],
            predictor_widths: vec![16],
            discriminator_widths: vec![16],
            disc_input: DiscInput::Embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.n_concepts, self.emb_dim, self.n_classes];
        let widths = self.backbone_widths.iter().chain(&self.predictor_widths).chain(&self.discriminator_widths);
        if dims.iter().chain(widths).any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        self.n_concepts * self.emb_dim
    }

    pub fn feature_width(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.input_dim)
    }

    fn disc_in(&self) -> usize {
        match self.disc_input {
            DiscInput::Embedding => self.embedding_width(),
            DiscInput::Backbone => self.feature_width(),
        }
    }
}

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        Self {
            w: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Tensor::zeros(&[fan_in, fan_out]), b: Tensor::zeros(&[fan_out]) }
    }
}

/// Relu MLP. `activate_last` decides whether the final layer is followed by relu.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub activate_last: bool,
}

impl<T: Scalar> Mlp<T> {
    pub(crate) fn new(dims: &[usize], activate_last: bool, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect();
        Self { layers, activate_last }
    }
}

/// Which player a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Backbone, concept heads and shared concept scorer.
    Encoder,
    Predictor,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub phi: Mlp<T>,
    pub heads: Vec<Linear<T>>,
    pub g_concept: Linear<T>,
    pub predictor: Mlp<T>,
    pub discriminator: Mlp<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.backbone_widths);
        let phi = Mlp::new(&dims, true, &mut rng);
        let feat = cfg.feature_width();
        let heads = (0..cfg.n_concepts).map(|_| Linear::glorot(feat, 2 * cfg.emb_dim, &mut rng)).collect();
        let g_concept = Linear::glorot(2 * cfg.emb_dim, 1, &mut rng);
        let mut dims = vec![cfg.embedding_width()];
        dims.extend(&cfg.predictor_widths);
        dims.push(cfg.n_classes);
        let predictor = Mlp::new(&dims, false, &mut rng);
        let mut dims = vec![cfg.disc_in()];
        dims.extend(&cfg.discriminator_widths);
        dims.push(1);
        let discriminator = Mlp::new(&dims, false, &mut rng);
        Ok(Self { config: cfg.clone(), phi, heads, g_concept, predictor, discriminator })
    }

    /// Parameter blocks in checkpoint order with their owning player.
    pub fn blocks(&self) -> Vec<(Group, &Tensor<T>)> {
        let mut out = Vec::new();
        let encoder = self.phi.layers.iter().chain(&self.heads).chain(std::iter::once(&self.g_concept));
        for l in encoder {
            out.push((Group::Encoder, &l.w));
            out.push((Group::Encoder, &l.b));
        }
        for l in &self.predictor.layers {
            out.push((Group::Predictor, &l.w));
            out.push((Group::Predictor, &l.b));
        }
        for l in &self.discriminator.layers {
            out.push((Group::Discriminator, &l.w));
            out.push((Group::Discriminator, &l.b));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(Group, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for l in self.phi.layers.iter_mut().chain(self.heads.iter_mut()).chain(std::iter::once(&mut self.g_concept)) {
            out.push((Group::Encoder, &mut l.w));
            out.push((Group::Encoder, &mut l.b));
        }
        for l in &mut self.predictor.layers {
            out.push((Group::Predictor, &mut l.w));
            out.push((Group::Predictor, &mut l.b));
        }
        for l in &mut self.discriminator.layers {
            out.push((Group::Discriminator, &mut l.w));
            out.push((Group::Discriminator, &mut l.b));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Record every block on `tape`; blocks in `trainable` become differentiable leaves.
    pub fn register(&self, tape: &mut Tape<T>, trainable: &[Group]) -> ParamNodes {
        let blocks = self.blocks();
        let mut ids = Vec::with_capacity(blocks.len());
        let mut groups = Vec::with_capacity(blocks.len());
        for (g, t) in blocks {
            let id = if trainable.contains(&g) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            ids.push(id);
            groups.push(g);
        }
        self.bind(ids, groups).expect("one id per block")
    }

    /// Tape handles from ids already recorded in checkpoint block order.
    pub fn bind(&self, ids: Vec<NodeId>, groups: Vec<Group>) -> Result<ParamNodes> {
        let n = self.blocks().len();
        if ids.len() != n || groups.len() != n {
            return Err(Error::dim("bind", format!("{} ids for {n} blocks", ids.len())));
        }
        let cfg = &self.config;
        let mut it = ids.iter().copied();
        let mut pair = || (it.next().expect("block"), it.next().expect("block"));
        let phi = (0..self.phi.layers.len()).map(|_| pair()).collect();
        let heads = (0..cfg.n_concepts).map(|_| pair()).collect();
        let g_concept = pair();
        let predictor = (0..self.predictor.layers.len()).map(|_| pair()).collect();
        let discriminator = (0..self.discriminator.layers.len()).map(|_| pair()).collect();
        Ok(ParamNodes { all: ids, groups, phi, heads, g_concept, predictor, discriminator })
    }

    /// Encoder forward on recorded parameters.
    pub fn encode(&self, tape: &mut Tape<T>, nodes: &ParamNodes, x: NodeId) -> Result<Encoded> {
        let cfg = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != cfg.input_dim {
            return Err(Error::dim("encode", format!("x {:?}, expected width {}", xs, cfg.input_dim)));
        }
        let batch = xs[0];
        let (k, d) = (cfg.n_concepts, cfg.emb_dim);
        let features = mlp_forward(tape, &nodes.phi, x, self.phi.activate_last)?;
        let ws: Vec<NodeId> = nodes.heads.iter().map(|h| h.0).collect();
        let bs: Vec<NodeId> = nodes.heads.iter().map(|h| h.1).collect();
        let w = tape.concat(&ws)?;
        let b = tape.concat(&bs)?;
        let heads = tape.affine(features, w, b)?;
        let per_concept = tape.reshape(heads, &[batch * k, 2 * d])?;
        let v_plus = tape.slice_last(per_concept, 0, d)?;
        let v_minus = tape.slice_last(per_concept, d, 2 * d)?;
        let v_plus = tape.reshape(v_plus, &[batch, k, d])?;
        let v_minus = tape.reshape(v_minus, &[batch, k, d])?;
        let score = tape.affine(per_concept, nodes.g_concept.0, nodes.g_concept.1)?;
        let prob = tape.sigmoid(score);
        let c_hat = tape.reshape(prob, &[batch, k])?;
        Ok(Encoded { features, v_plus, v_minus, c_hat })
    }

    /// Concept embedding from explicit weights (predicted or ground-truth concepts).
    pub fn assemble(&self, tape: &mut Tape<T>, weights: NodeId, enc: &Encoded) -> Result<NodeId> {
        tape.mix(weights, enc.v_plus, enc.v_minus)
    }

    pub fn predict_label(&self, tape: &mut Tape<T>, nodes: &ParamNodes, v: NodeId) -> Result<NodeId> {
        self.check_width("predict_label", tape, v, self.config.embedding_width())?;
        mlp_forward(tape, &nodes.predictor, v, false)
    }

    /// Probability that each row comes from the target domain, shape `[B]`.
    pub fn discriminate(&self, tape: &mut Tape<T>, nodes: &ParamNodes, input: NodeId) -> Result<NodeId> {
        self.check_width("discriminate", tape, input, self.config.disc_in())?;
        let logit = mlp_forward(tape, &nodes.discriminator, input, false)?;
        let p = tape.sigmoid(logit);
        let b = tape.shape(p)[0];
        tape.reshape(p, &[b])
    }

    fn check_width(&self, op: &'static str, tape: &Tape<T>, v: NodeId, want: usize) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != want {
            return Err(Error::dim(op, format!("input {s:?}, expected width {want}")));
        }
        Ok(())
    }

    /// Value-level `(v⁺, v⁻)`, each `[B × K × d]`.
    pub fn concept_heads_forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut tape, nodes, xi) = self.frozen_tape(x);
        let enc = self.encode(&mut tape, &nodes, xi)?;
        Ok((tape.tensor(enc.v_plus).detached(), tape.tensor(enc.v_minus).detached()))
    }

    /// Value-level `ĉ = G([v⁺ᵢ, v⁻ᵢ])`, shape `[B × K]`.
    pub fn concept_prob_forward(&self, v_plus: &Tensor<T>, v_minus: &Tensor<T>) -> Result<Tensor<T>> {
        let s = v_plus.shape().to_vec();
        if s.len() != 3 || v_minus.shape() != &s[..] || s[2] != self.config.emb_dim {
            return Err(Error::dim("concept_prob_forward", format!("{s:?} / {:?}", v_minus.shape())));
        }
        let (b, k, d) = (s[0], s[1], s[2]);
        let mut tape = Tape::new();
        let p = tape.constant(v_plus.clone().reshaped(vec![b * k, d])?);
        let m = tape.constant(v_minus.clone().reshaped(vec![b * k, d])?);
        let cat = tape.concat(&[p, m])?;
        let w = tape.constant(self.g_concept.w.clone());
        let bias = tape.constant(self.g_concept.b.clone());
        let score = tape.affine(cat, w, bias)?;
        let prob = tape.sigmoid(score);
        let c = tape.reshape(prob, &[b, k])?;
        Ok(tape.tensor(c).detached())
    }

    fn frozen_tape(&self, x: &Tensor<T>) -> (Tape<T>, ParamNodes, NodeId) {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, &[]);
        let xi = tape.constant(x.clone());
        (tape, nodes, xi)
    }

    /// Value-level forward of every output used by evaluation.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Inference<T>> {
        let (mut tape, nodes, xi) = self.frozen_tape(x);
        let enc = self.encode(&mut tape, &nodes, xi)?;
        let v = self.assemble(&mut tape, enc.c_hat, &enc)?;
        let logits = self.predict_label(&mut tape, &nodes, v)?;
        Ok(Inference {
            features: tape.tensor(enc.features).detached(),
            v_plus: tape.tensor(enc.v_plus).detached(),
            v_minus: tape.tensor(enc.v_minus).detached(),
            c_hat: tape.tensor(enc.c_hat).detached(),
            v: tape.tensor(v).detached(),
            logits: tape.tensor(logits).detached(),
        })
    }

    /// Value-level predictor logits for an embedding batch `[B × J]`.
    pub fn logits_for(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, &[]);
        let vi = tape.constant(v.clone());
        let out = self.predict_label(&mut tape, &nodes, vi)?;
        Ok(tape.tensor(out).detached())
    }

    /// Value-level discriminator output for a batch of discriminator inputs.
    pub fn discriminate_values(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, &[]);
        let vi = tape.constant(input.clone());
        let out = self.discriminate(&mut tape, &nodes, vi)?;
        Ok(tape.tensor(out).detached())
    }
}

/// Value-level `vᵢ = wᵢ·v⁺ᵢ + (1−wᵢ)·v⁻ᵢ` for `weights: [B×K]`, `v±: [B×K×d]`.
pub fn assemble_embedding<T: Scalar>(weights: &Tensor<T>, v_plus: &Tensor<T>, v_minus: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let w = tape.constant(weights.clone());
    let p = tape.constant(v_plus.clone());
    let m = tape.constant(v_minus.clone());
    let v = tape.mix(w, p, m)?;
    Ok(tape.tensor(v).detached())
}

/// Predicted class per row: argmax with ties to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (rows, cols) = logits.as_matrix();
    (0..rows)
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of a `[B × Q]` logit matrix.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = logits.as_matrix();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&z| (z - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], out).expect("shape")
}

impl<T: Scalar> Tensor<T> {
    /// Copy without gradient or tape handle.
    pub fn detached(self) -> Self {
        Tensor::new(self.shape().to_vec(), self.into_data()).expect("shape")
    }
}

pub(crate) fn mlp_forward<T: Scalar>(tape: &mut Tape<T>, layers: &[(NodeId, NodeId)], x: NodeId, activate_last: bool) -> Result<NodeId> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.affine(h, w, b)?;
        if i + 1 < layers.len() || activate_last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Tape handles for every parameter block, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    /// All blocks in checkpoint order.
    pub all: Vec<NodeId>,
    pub groups: Vec<Group>,
    pub phi: Vec<(NodeId, NodeId)>,
    pub heads: Vec<(NodeId, NodeId)>,
    pub g_concept: (NodeId, NodeId),
    pub predictor: Vec<(NodeId, NodeId)>,
    pub discriminator: Vec<(NodeId, NodeId)>,
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Backbone features `Φ(x)`.
    pub features: NodeId,
    pub v_plus: NodeId,
    pub v_minus: NodeId,
    pub c_hat: NodeId,
}

#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub features: Tensor<T>,
    pub v_plus: Tensor<T>,
    pub v_minus: Tensor<T>,
    pub c_hat: Tensor<T>,
    pub v: Tensor<T>,
    pub logits: Tensor<T>,
}

const MAGIC: &str = "conceptda-checkpoint v1";

fn join(ws: &[usize]) -> String {
    ws.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl<T: Scalar> ModelParams<T> {
    /// Text header of `key=value` lines terminated by `end`, then every block
    /// as a little-endian `u64` length followed by that many little-endian `f64`s.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let c = &self.config;
        let disc = match c.disc_input {
            DiscInput::Embedding => "embedding",
            DiscInput::Backbone => "backbone",
        };
        let blocks = self.blocks();
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "scalar={}", T::type_name())?;
        writeln!(w, "input_dim={}", c.input_dim)?;
        writeln!(w, "n_concepts={}", c.n_concepts)?;
        writeln!(w, "emb_dim={}", c.emb_dim)?;
        writeln!(w, "n_classes={}", c.n_classes)?;
        writeln!(w, "backbone_widths={}", join(&c.backbone_widths))?;
        writeln!(w, "predictor_widths={}", join(&c.predictor_widths))?;
        writeln!(w, "discriminator_widths={}", join(&c.discriminator_widths))?;
        writeln!(w, "disc_input={disc}")?;
        writeln!(w, "blocks={}", blocks.len())?;
        writeln!(w, "end")?;
        for (_, t) in blocks {
            w.write_all(&(t.numel() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("in-memory write");
        buf
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |line: usize, m: String| Error::Parse { line, detail: m };
        let mut cursor = bytes;
        let mut header = Vec::new();
        loop {
            let nl = cursor.iter().position(|&b| b == b'\n').ok_or_else(|| bad(header.len() + 1, "truncated header".into()))?;
            let line = std::str::from_utf8(&cursor[..nl]).map_err(|_| bad(header.len() + 1, "non-UTF-8 header".into()))?;
            cursor = &cursor[nl + 1..];
            if line == "end" {
                break;
            }
            header.push(line.to_string());
        }
        if header.first().map(String::as_str) != Some(MAGIC) {
            return Err(bad(1, format!("expected `{MAGIC}`")));
        }
        let get = |key: &str| -> Result<&str> {
            header
                .iter()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| bad(0, format!("missing header key `{key}`")))
        };
        let num = |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| bad(0, format!("bad `{key}`"))) };
        let list = |key: &str| -> Result<Vec<usize>> {
            let s = get(key)?;
            if s.is_empty() {
                return Ok(vec![]);
            }
            s.split(',').map(|p| p.parse().map_err(|_| bad(0, format!("bad `{key}`")))).collect()
        };
        let disc_input = match get("disc_input")? {
            "embedding" => DiscInput::Embedding,
            "backbone" => DiscInput::Backbone,
            other => return Err(bad(0, format!("unknown disc_input `{other}`"))),
        };
        let cfg = ModelConfig {
            input_dim: num("input_dim")?,
            n_concepts: num("n_concepts")?,
            emb_dim: num("emb_dim")?,
            n_classes: num("n_classes")?,
            backbone_widths: list("backbone_widths")?,
            predictor_widths: list("predictor_widths")?,
            discriminator_widths: list("discriminator_widths")?,
            disc_input,
        };
        let mut params = Self::init(&cfg, 0)?;
        let expected = num("blocks")?;
        let mut blocks = params.blocks_mut();
        if blocks.len() != expected {
            return Err(bad(0, format!("header declares {expected} blocks, config implies {}", blocks.len())));
        }
        for (i, (_, t)) in blocks.iter_mut().enumerate() {
            let mut len = [0u8; 8];
            cursor.read_exact(&mut len).map_err(|_| bad(0, format!("block {i}: truncated length")))?;
            let len = u64::from_le_bytes(len) as usize;
            if len != t.numel() {
                return Err(bad(0, format!("block {i}: length {len}, expected {}", t.numel())));
            }
            for v in t.data_mut() {
                let mut b = [0u8; 8];
                cursor.read_exact(&mut b).map_err(|_| bad(0, format!("block {i}: truncated data")))?;
                *v = T::lit(f64::from_le_bytes(b));
            }
        }
        drop(blocks);
        if !cursor.is_empty() {
            return Err(bad(0, "trailing bytes after last block".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            n_concepts: 3,
            emb_dim: 2,
            n_classes: 2,
            backbone_widths: vec![8],
            predictor_widths: vec![6],
            discriminator_widths: vec![4],
            disc_input: DiscInput::Embedding,
        }
    }

    fn x(rows: usize) -> Tensor<f64> {
        let data = (0..rows * 5).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        Tensor::new(vec![rows, 5], data).unwrap()
    }

    fn zeroed(mut p: ModelParams<f64>) -> ModelParams<f64> {
        for (_, t) in p.blocks_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ModelParams::<f64>::init(&cfg(), 4).unwrap();
        assert_eq!(a, ModelParams::init(&cfg(), 4).unwrap());
        assert_ne!(a, ModelParams::init(&cfg(), 5).unwrap());
        for l in a.phi.layers.iter().chain(&a.heads).chain([&a.g_concept]) {
            assert!(l.b.data().iter().all(|&b| b == 0.0));
        }
        assert_eq!(a.heads.len(), 3);
    }

    #[test]
    fn init_weights_are_centred() {
        let wide = ModelConfig { input_dim: 400, backbone_widths: vec![250], ..cfg() };
        let p = ModelParams::<f64>::init(&wide, 1).unwrap();
        let w = p.phi.layers[0].w.data();
        assert_eq!(w.len(), 100_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let bound = (6.0f64 / 650.0).sqrt();
        // Uniform(−a, a) has std a/√3.
        let se = bound / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_weights_give_zero_embeddings_and_half_probabilities() {
        let p = zeroed(ModelParams::init(&cfg(), 0).unwrap());
        let (vp, vm) = p.concept_heads_forward(&x(4)).unwrap();
        assert!(vp.data().iter().chain(vm.data()).all(|&v| v == 0.0));
        assert_eq!(vp.shape(), &[4, 3, 2]);
        let c = p.concept_prob_forward(&vp, &vm).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
        let inf = p.infer(&x(4)).unwrap();
        let probs = softmax_rows(&inf.logits);
        assert!(probs.data().iter().all(|&v| v == 0.5));
        let d = p.discriminate_values(&inf.v).unwrap();
        assert_eq!(d.shape(), &[4]);
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_scorer_bias() {
        let mut p = ModelParams::<f64>::init(&cfg(), 0).unwrap();
        p.g_concept.w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.g_concept.b.data_mut()[0] = 40.0;
        let (vp, vm) = p.concept_heads_forward(&x(3)).unwrap();
        let c = p.concept_prob_forward(&vp, &vm).unwrap();
        assert!(c.data().iter().all(|&v| (1.0 - v).abs() < 1e-12));

        let mut p = zeroed(p);
        p.discriminator.layers.last_mut().unwrap().b.data_mut()[0] = 40.0;
        let v = Tensor::zeros(&[2, 6]);
        let d = p.discriminate_values(&v).unwrap();
        assert!(d.data().iter().all(|&v| (1.0 - v).abs() < 1e-12));
    }

    #[test]
    fn forwards_are_row_independent() {
        let p = ModelParams::<f64>::init(&cfg(), 2).unwrap();
        let one = x(1);
        let twice = Tensor::new(vec![2, 5], [one.data(), one.data()].concat()).unwrap();
        let a = p.infer(&one).unwrap();
        let b = p.infer(&twice).unwrap();
        for t in [(&a.v_plus, &b.v_plus), (&a.c_hat, &b.c_hat), (&a.logits, &b.logits)] {
            let n = t.0.numel();
            assert_eq!(t.0.data(), &t.1.data()[..n]);
            assert_eq!(t.0.data(), &t.1.data()[n..]);
        }
        let d = p.discriminate_values(&b.v).unwrap();
        assert_eq!(d.data()[0], d.data()[1]);
    }

    #[test]
    fn permuting_heads_permutes_concepts() {
        let p = ModelParams::<f64>::init(&cfg(), 3).unwrap();
        let mut q = p.clone();
        q.heads = vec![p.heads[2].clone(), p.heads[0].clone(), p.heads[1].clone()];
        let a = p.infer(&x(4)).unwrap().c_hat;
        let b = q.infer(&x(4)).unwrap().c_hat;
        for r in 0..4 {
            assert_eq!(b.get2(r, 0), a.get2(r, 2));
            assert_eq!(b.get2(r, 1), a.get2(r, 0));
            assert_eq!(b.get2(r, 2), a.get2(r, 1));
        }
    }

    #[test]
    fn assemble_endpoints_midpoint_and_linearity() {
        let vp = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vm = Tensor::new(vec![1, 2, 2], vec![-1.0, 0.0, 5.0, 8.0]).unwrap();
        let w = |a: f64, b: f64| Tensor::new(vec![1, 2], vec![a, b]).unwrap();
        let v = assemble_embedding(&w(1.0, 0.0), &vp, &vm).unwrap();
        assert_eq!(v.data(), &[1.0, 2.0, 5.0, 8.0]);
        assert_eq!(v.shape(), &[1, 4]);
        let v = assemble_embedding(&w(0.5, 0.5), &vp, &vm).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 4.0, 6.0]);

        let (c1, c2, alpha) = (w(0.2, 0.9), w(0.7, 0.1), 0.3);
        let mixed = w(alpha * 0.2 + (1.0 - alpha) * 0.7, alpha * 0.9 + (1.0 - alpha) * 0.1);
        let lhs = assemble_embedding(&mixed, &vp, &vm).unwrap();
        let a = assemble_embedding(&c1, &vp, &vm).unwrap();
        let b = assemble_embedding(&c2, &vp, &vm).unwrap();
        for i in 0..4 {
            let rhs = alpha * a.data()[i] + (1.0 - alpha) * b.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
        assert!(matches!(assemble_embedding(&w(-0.1, 0.5), &vp, &vm), Err(Error::Contract { .. })));
    }

    #[test]
    fn c_hat_from_infer_matches_prob_forward_bitwise() {
        let p = ModelParams::<f64>::init(&cfg(), 9).unwrap();
        let inf = p.infer(&x(5)).unwrap();
        let c = p.concept_prob_forward(&inf.v_plus, &inf.v_minus).unwrap();
        assert_eq!(c.data(), inf.c_hat.data());
        assert!(inf.c_hat.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::<f64>::init(&cfg(), 0).unwrap();
        assert!(matches!(p.infer(&Tensor::zeros(&[2, 4])), Err(Error::Dimension { .. })));
        assert!(matches!(p.logits_for(&Tensor::zeros(&[2, 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(vec![3, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 5.0, 1.0, 5.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::<f64>::init(&ModelConfig { backbone_widths: vec![], ..cfg() }, 7).unwrap();
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(ModelParams::<f64>::from_checkpoint_bytes(&bytes).unwrap(), p);
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("conceptda-checkpoint v1\nscalar=f64\ninput_dim=5\n"));
        assert!(ModelParams::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());

        let naive = ModelConfig { disc_input: DiscInput::Backbone, ..cfg() };
        let p = ModelParams::<f32>::init(&naive, 7).unwrap();
        let back = ModelParams::<f32>::from_checkpoint_bytes(&p.to_checkpoint_bytes()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.discriminator.layers[0].w.shape(), &[8, 4]);
    }
}
