//! Pre-norm transformer with a pluggable positional encoding.
//!
//! The same stack runs as a causal language model or, in
//! [`Mode::EncoderPlaceholder`], as a bidirectional encoder that reads
//! answers off placeholder tokens appended to the input.

mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Mode, ModelConfig};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::pos_enc::{
    dape_apply_with_correction, init_dape, init_layer_params, layer_bias, sample_randomized_positions,
    sinusoidal_ape, DapeVars, PeKind,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Attention quantities recorded for one layer during a traced pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Scaled key-query logits, `[batch, h, n, n]`.
    pub scores: Var,
    /// Static bias, `[h, n, n]`.
    pub bias: Option<Var>,
    /// DAPE correction, `[batch, h, n, n]`.
    pub correction: Option<Var>,
    /// Pre-softmax logits after all positional terms.
    pub logits: Var,
}

/// One forward/backward pass: the tape, the parameter leaves bound onto
/// it, and optional per-layer traces.
#[derive(Debug, Default)]
pub struct Session {
    pub tape: Tape,
    pub binding: Binding,
    pub traces: Option<Vec<LayerTrace>>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn traced() -> Self {
        Session {
            traces: Some(Vec::new()),
            ..Self::default()
        }
    }

    /// Backpropagates `loss` and accumulates parameter gradients into `params`.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        self.tape.backward(loss)?;
        params.collect_grads(&self.tape, &self.binding);
        Ok(())
    }

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        self.binding.bind(&mut self.tape, store, name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn layer_prefix(l: usize) -> String {
    format!("layers.{l}.")
}

fn dape_prefix(cfg: &ModelConfig, l: usize) -> String {
    match &cfg.pe.dape {
        Some(d) if d.shared => "dape.".to_string(),
        _ => format!("layers.{l}.dape."),
    }
}

fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let (d, std) = (cfg.d_model, cfg.init_std);
    let ffn = cfg.ffn_mult * d;
    let mut p = ParamStore::new();
    p.insert("embed.weight", Tensor::normal(&[cfg.vocab_size, d], std, rng));
    if cfg.pe.kind == PeKind::LearnedApe {
        p.insert("pos_embed.weight", Tensor::normal(&[cfg.max_train_len, d], std, rng));
    }
    let dape_once = |p: &mut ParamStore, prefix: &str, rng: &mut R| {
        if let Some(dc) = &cfg.pe.dape {
            if !p.contains(&format!("{prefix}w1")) {
                for (name, t) in init_dape(cfg.heads, dc, rng).into_named() {
                    p.insert(format!("{prefix}{name}"), t);
                }
            }
        }
    };
    for l in 0..cfg.layers {
        let pre = layer_prefix(l);
        p.insert(format!("{pre}ln1.gamma"), Tensor::full(&[d], 1.0));
        p.insert(format!("{pre}ln1.beta"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{pre}attn.{w}"), Tensor::normal(&[d, d], std, rng));
        }
        for (name, t) in init_layer_params(&cfg.pe, cfg.heads, rng) {
            p.insert(format!("{pre}pe.{name}"), t);
        }
        dape_once(&mut p, &dape_prefix(cfg, l), rng);
        p.insert(format!("{pre}ln2.gamma"), Tensor::full(&[d], 1.0));
        p.insert(format!("{pre}ln2.beta"), Tensor::zeros(&[d]));
        p.insert(format!("{pre}ffn.w1"), Tensor::normal(&[d, ffn], std, rng));
        p.insert(format!("{pre}ffn.b1"), Tensor::zeros(&[ffn]));
        p.insert(format!("{pre}ffn.w2"), Tensor::normal(&[ffn, d], std, rng));
        p.insert(format!("{pre}ffn.b2"), Tensor::zeros(&[d]));
    }
    p.insert("ln_f.gamma", Tensor::full(&[d], 1.0));
    p.insert("ln_f.beta", Tensor::zeros(&[d]));
    if !cfg.tie_embeddings {
        p.insert("head.weight", Tensor::normal(&[d, cfg.output_size()], std, rng));
    }
    p
}

/// Parameter group of a name: everything before the last `.`.
pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(Model { config, params })
    }

    /// Wraps `params`, which must carry exactly the names and shapes that
    /// `config` calls for.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0));
        if let Some(name) = expected.names().find(|n| !params.contains(n)) {
            return Err(Error::CheckpointMismatch(format!(
                "missing parameter group `{}` (first absent tensor `{name}`)",
                param_group(name)
            )));
        }
        if let Some(name) = params.names().find(|n| !expected.contains(n)) {
            return Err(Error::CheckpointMismatch(format!(
                "unexpected parameter group `{}` (tensor `{name}`)",
                param_group(name)
            )));
        }
        for (name, t) in expected.iter() {
            let got = params.get(name).expect("checked above");
            if got.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let mut ordered = ParamStore::new();
        for name in expected.names() {
            ordered.insert(name, params.get(name).expect("checked above").clone());
        }
        Ok(Model { config, params: ordered })
    }

    /// Logits `[batch, n, output_size]` for `tokens` laid out row-major as
    /// `batch` sequences of equal length.
    pub fn logits<R: Rng>(
        &self,
        s: &mut Session,
        tokens: &[usize],
        batch: usize,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::contract(format!("{} tokens do not split into {batch} rows", tokens.len())));
        }
        let n = tokens.len() / batch;
        let d = cfg.d_model;
        let p = &self.params;

        let embed = s.param(p, "embed.weight")?;
        let x = s.tape.gather_rows(embed, tokens)?;
        let mut x = s.tape.reshape(x, &[batch, n, d])?;
        match cfg.pe.kind {
            PeKind::SinusoidalApe => {
                let table = s.tape.constant(sinusoidal_ape(n, d)?);
                x = s.tape.add(x, table)?;
            }
            PeKind::LearnedApe => {
                if n > cfg.max_train_len {
                    return Err(Error::UnsupportedLength {
                        len: n,
                        reason: format!("learned absolute table covers {} positions", cfg.max_train_len),
                    });
                }
                let table = s.param(p, "pos_embed.weight")?;
                let idx: Vec<usize> = (0..n).collect();
                let rows = s.tape.gather_rows(table, &idx)?;
                x = s.tape.add(x, rows)?;
            }
            _ => {}
        }
        if phase == Phase::Train {
            x = s.tape.dropout(x, cfg.dropout, rng);
        }

        let positions: Vec<usize> = match (cfg.pe.kind, phase) {
            (PeKind::RandomizedRope, Phase::Train) => {
                sample_randomized_positions(n, cfg.pe.random_factor() * cfg.max_train_len, rng)?
            }
            _ => (0..n).collect(),
        };
        let mask: Option<Vec<bool>> = (!cfg.bidirectional())
            .then(|| (0..n * n).map(|e| e % n <= e / n).collect());

        for l in 0..cfg.layers {
            let pre = layer_prefix(l);
            let g = s.param(p, &format!("{pre}ln1.gamma"))?;
            let b = s.param(p, &format!("{pre}ln1.beta"))?;
            let h = s.tape.layer_norm(x, g, b, cfg.ln_eps)?;
            let a = self.attention(s, l, h, batch, n, &positions, mask.as_deref(), phase, rng)?;
            x = s.tape.add(x, a)?;

            let g = s.param(p, &format!("{pre}ln2.gamma"))?;
            let b = s.param(p, &format!("{pre}ln2.beta"))?;
            let h = s.tape.layer_norm(x, g, b, cfg.ln_eps)?;
            let w1 = s.param(p, &format!("{pre}ffn.w1"))?;
            let b1 = s.param(p, &format!("{pre}ffn.b1"))?;
            let w2 = s.param(p, &format!("{pre}ffn.w2"))?;
            let b2 = s.param(p, &format!("{pre}ffn.b2"))?;
            let z = s.tape.matmul(h, w1)?;
            let z = s.tape.add(z, b1)?;
            let z = s.tape.gelu(z);
            let z = s.tape.matmul(z, w2)?;
            let mut z = s.tape.add(z, b2)?;
            if phase == Phase::Train {
                z = s.tape.dropout(z, cfg.dropout, rng);
            }
            x = s.tape.add(x, z)?;
        }

        let g = s.param(p, "ln_f.gamma")?;
        let b = s.param(p, "ln_f.beta")?;
        let x = s.tape.layer_norm(x, g, b, cfg.ln_eps)?;
        if cfg.tie_embeddings {
            s.tape.matmul_nt(x, embed)
        } else {
            let head = s.param(p, "head.weight")?;
            s.tape.matmul(x, head)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<R: Rng>(
        &self,
        s: &mut Session,
        l: usize,
        h: Var,
        batch: usize,
        n: usize,
        positions: &[usize],
        mask: Option<&[bool]>,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        let p = &self.params;
        let (heads, dh) = (cfg.heads, cfg.d_head());
        let pre = layer_prefix(l);

        let split = |s: &mut Session, w: &str| -> Result<Var> {
            let w = s.param(p, &format!("{pre}attn.{w}"))?;
            let z = s.tape.matmul(h, w)?;
            let z = s.tape.reshape(z, &[batch, n, heads, dh])?;
            s.tape.permute(z, &[0, 2, 1, 3])
        };
        let mut q = split(s, "wq")?;
        let mut k = split(s, "wk")?;
        let v = split(s, "wv")?;
        if matches!(cfg.pe.kind, PeKind::Rope | PeKind::RandomizedRope) {
            q = s.tape.rope(q, positions, cfg.pe.rope_theta())?;
            k = s.tape.rope(k, positions, cfg.pe.rope_theta())?;
        }
        let mut scores = s.tape.matmul_nt(q, k)?;
        if cfg.scale_scores {
            scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        }

        let pe_prefix = format!("{pre}pe.");
        let bias = layer_bias(
            &mut s.tape,
            p,
            &mut s.binding,
            &pe_prefix,
            &cfg.pe,
            heads,
            n,
            cfg.bidirectional(),
            cfg.max_train_len,
        )?;
        let (logits, correction) = match (bias, &cfg.pe.dape) {
            (Some(b), Some(dc)) => {
                let dp = dape_prefix(cfg, l);
                let vars = DapeVars::bind(|name| s.param(p, &format!("{dp}{name}")), dc.bias)?;
                let (t, f) = dape_apply_with_correction(&mut s.tape, scores, b, &vars, dc.variant, dc.leaky_slope)?;
                (t, Some(f))
            }
            (Some(b), None) => (s.tape.add(scores, b)?, None),
            (None, _) => (scores, None),
        };
        if let Some(traces) = &mut s.traces {
            traces.push(LayerTrace {
                scores,
                bias,
                correction,
                logits,
            });
        }

        let mut probs = s.tape.softmax(logits, mask)?;
        if phase == Phase::Train {
            probs = s.tape.dropout(probs, cfg.dropout, rng);
        }
        let ctx = s.tape.matmul(probs, v)?;
        let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.tape.reshape(ctx, &[batch, n, cfg.d_model])?;
        let wo = s.param(p, &format!("{pre}attn.wo"))?;
        let mut out = s.tape.matmul(ctx, wo)?;
        if phase == Phase::Train {
            out = s.tape.dropout(out, cfg.dropout, rng);
        }
        Ok(out)
    }

    /// Appends `answer_len` placeholders to each of the `batch` equal-length
    /// input rows and returns the logits at those slots, `[batch·answer_len, output_size]`.
    pub fn placeholder_logits<R: Rng>(
        &self,
        s: &mut Session,
        inputs: &[usize],
        batch: usize,
        answer_len: usize,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Var> {
        if self.config.mode != Mode::EncoderPlaceholder {
            return Err(Error::config("placeholder decoding needs an encoder_placeholder model"));
        }
        if answer_len == 0 {
            return Err(Error::contract("answer length must be positive"));
        }
        if batch == 0 || inputs.is_empty() || inputs.len() % batch != 0 {
            return Err(Error::contract(format!("{} tokens do not split into {batch} rows", inputs.len())));
        }
        let m = inputs.len() / batch;
        let n = m + answer_len;
        let ph = self.config.placeholder_token();
        let mut tokens = Vec::with_capacity(batch * n);
        let mut slots = Vec::with_capacity(batch * answer_len);
        for (r, row) in inputs.chunks_exact(m).enumerate() {
            tokens.extend_from_slice(row);
            tokens.extend(std::iter::repeat_n(ph, answer_len));
            slots.extend((m..n).map(|t| r * n + t));
        }
        let logits = self.logits(s, &tokens, batch, phase, rng)?;
        let v = self.config.output_size();
        let flat = s.tape.reshape(logits, &[batch * n, v])?;
        s.tape.gather_rows(flat, &slots)
    }
}
