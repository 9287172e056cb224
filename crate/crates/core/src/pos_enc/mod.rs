//! Positional encodings: absolute tables, rotary, additive attention
//! biases, and the data-adaptive (DAPE) correction that wraps any additive
//! bias.
//!
//! Additive kinds produce a per-head `[h, n, n]` bias that is added to the
//! scaled key-query logits. DAPE feeds those logits together with the
//! bias through a small per-entry MLP and adds its output back as a
//! correction, so the effective bias depends on the input.

mod absolute;
mod bias;
mod dape;
mod rope;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use absolute::{learned_ape_init, sinusoidal_ape};
pub use bias::{alibi_bias, default_alibi_slopes, fire_bias, kerple_bias, t5_bucket, t5_bucket_bias, FireParams, FireVars};
pub use dape::{dape_apply, dape_apply_with_correction, init_dape, DapeParams, DapeVars};
pub use rope::{rope_rotate, sample_randomized_positions};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{softplus_inverse, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    Nope,
    SinusoidalApe,
    LearnedApe,
    Rope,
    RandomizedRope,
    T5Bias,
    Alibi,
    Kerple,
    Fire,
}

impl PeKind {
    pub const ALL: [PeKind; 9] = [
        PeKind::Nope,
        PeKind::SinusoidalApe,
        PeKind::LearnedApe,
        PeKind::Rope,
        PeKind::RandomizedRope,
        PeKind::T5Bias,
        PeKind::Alibi,
        PeKind::Kerple,
        PeKind::Fire,
    ];

    /// Whether the encoding is a bias matrix added to attention logits.
    pub fn is_additive(self) -> bool {
        matches!(self, PeKind::T5Bias | PeKind::Alibi | PeKind::Kerple | PeKind::Fire)
    }

    pub fn name(self) -> &'static str {
        match self {
            PeKind::Nope => "nope",
            PeKind::SinusoidalApe => "sinusoidal_ape",
            PeKind::LearnedApe => "learned_ape",
            PeKind::Rope => "rope",
            PeKind::RandomizedRope => "randomized_rope",
            PeKind::T5Bias => "t5_bias",
            PeKind::Alibi => "alibi",
            PeKind::Kerple => "kerple",
            PeKind::Fire => "fire",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DapeVariant {
    /// `A + B + f(A + B)`, MLP input width `h`.
    AddResidual,
    /// `A + f(A, B)`, MLP input width `2h`.
    Concate,
    /// `A + B + f(A, B)`, MLP input width `2h`.
    ConcateResidual,
}

impl DapeVariant {
    pub fn input_channels(self, heads: usize) -> usize {
        match self {
            DapeVariant::AddResidual => heads,
            DapeVariant::Concate | DapeVariant::ConcateResidual => 2 * heads,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DapeVariant::AddResidual => "add_residual",
            DapeVariant::Concate => "concate",
            DapeVariant::ConcateResidual => "concate_residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DapeConfig {
    pub variant: DapeVariant,
    /// Hidden width of the correction MLP.
    pub hidden: usize,
    pub leaky_slope: f64,
    /// Whether the two MLP layers carry bias vectors.
    pub bias: bool,
    /// One MLP shared by every layer instead of one per layer.
    pub shared: bool,
}

impl Default for DapeConfig {
    fn default() -> Self {
        DapeConfig {
            variant: DapeVariant::ConcateResidual,
            hidden: 32,
            leaky_slope: 0.01,
            bias: true,
            shared: false,
        }
    }
}

/// A positional-encoding configuration.
///
/// Per-kind knobs live side by side; setting a knob that belongs to a
/// different kind is rejected by [`PeConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeConfig {
    pub kind: PeKind,
    pub alibi_slopes: Option<Vec<f64>>,
    pub rope_theta: Option<f64>,
    pub random_factor: Option<usize>,
    pub t5_buckets: Option<usize>,
    pub t5_max_distance: Option<usize>,
    pub fire_hidden: Option<usize>,
    pub fire_threshold: Option<usize>,
    pub dape: Option<DapeConfig>,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig::new(PeKind::Kerple)
    }
}

pub const DEFAULT_ROPE_THETA: f64 = 10000.0;
pub const DEFAULT_RANDOM_FACTOR: usize = 4;
pub const DEFAULT_T5_BUCKETS: usize = 32;
pub const DEFAULT_T5_MAX_DISTANCE: usize = 128;
pub const DEFAULT_FIRE_HIDDEN: usize = 32;

impl PeConfig {
    pub fn new(kind: PeKind) -> Self {
        PeConfig {
            kind,
            alibi_slopes: None,
            rope_theta: None,
            random_factor: None,
            t5_buckets: None,
            t5_max_distance: None,
            fire_hidden: None,
            fire_threshold: None,
            dape: None,
        }
    }

    pub fn with_dape(mut self, dape: DapeConfig) -> Self {
        self.dape = Some(dape);
        self
    }

    /// Parses names like `kerple`, `dape_kerple` or `dape_fire:concate`.
    pub fn from_name(name: &str, dape_defaults: &DapeConfig) -> Result<Self> {
        let (base, variant) = match name.split_once(':') {
            Some((b, v)) => (b, Some(v)),
            None => (name, None),
        };
        let (inner, dape) = match base.strip_prefix("dape_") {
            Some(inner) => (inner, true),
            None => (base, false),
        };
        let kind = PeKind::parse(inner).ok_or_else(|| Error::config(format!("unknown positional encoding `{name}`")))?;
        let mut cfg = PeConfig::new(kind);
        if dape {
            let mut d = dape_defaults.clone();
            if let Some(v) = variant {
                d.variant = match v {
                    "add_residual" => DapeVariant::AddResidual,
                    "concate" => DapeVariant::Concate,
                    "concate_residual" => DapeVariant::ConcateResidual,
                    other => return Err(Error::config(format!("unknown DAPE variant `{other}`"))),
                };
            }
            cfg.dape = Some(d);
        } else if variant.is_some() {
            return Err(Error::config(format!("variant suffix only applies to DAPE encodings: `{name}`")));
        }
        Ok(cfg)
    }

    /// Short display name, e.g. `dape_kerple` or `alibi`.
    pub fn label(&self) -> String {
        match &self.dape {
            Some(d) if d.variant != DapeVariant::ConcateResidual => {
                format!("dape_{}:{}", self.kind.name(), d.variant.name())
            }
            Some(_) => format!("dape_{}", self.kind.name()),
            None => self.kind.name().to_string(),
        }
    }

    pub fn rope_theta(&self) -> f64 {
        self.rope_theta.unwrap_or(DEFAULT_ROPE_THETA)
    }

    pub fn random_factor(&self) -> usize {
        self.random_factor.unwrap_or(DEFAULT_RANDOM_FACTOR)
    }

    pub fn t5_buckets(&self) -> usize {
        self.t5_buckets.unwrap_or(DEFAULT_T5_BUCKETS)
    }

    pub fn t5_max_distance(&self) -> usize {
        self.t5_max_distance.unwrap_or(DEFAULT_T5_MAX_DISTANCE)
    }

    pub fn fire_hidden(&self) -> usize {
        self.fire_hidden.unwrap_or(DEFAULT_FIRE_HIDDEN)
    }

    pub fn fire_threshold(&self, train_len: usize) -> usize {
        self.fire_threshold.unwrap_or(train_len).max(1)
    }

    pub fn alibi_slopes(&self, heads: usize) -> Vec<f64> {
        self.alibi_slopes.clone().unwrap_or_else(|| default_alibi_slopes(heads))
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        let k = self.kind;
        let stray = |set: bool, owner: &[PeKind], key: &str| -> Result<()> {
            if set && !owner.contains(&k) {
                return Err(Error::config(format!("`{key}` does not apply to positional encoding `{}`", k.name())));
            }
            Ok(())
        };
        stray(self.alibi_slopes.is_some(), &[PeKind::Alibi], "alibi_slopes")?;
        stray(self.rope_theta.is_some(), &[PeKind::Rope, PeKind::RandomizedRope], "rope_theta")?;
        stray(self.random_factor.is_some(), &[PeKind::RandomizedRope], "random_factor")?;
        stray(self.t5_buckets.is_some(), &[PeKind::T5Bias], "t5_buckets")?;
        stray(self.t5_max_distance.is_some(), &[PeKind::T5Bias], "t5_max_distance")?;
        stray(self.fire_hidden.is_some(), &[PeKind::Fire], "fire_hidden")?;
        stray(self.fire_threshold.is_some(), &[PeKind::Fire], "fire_threshold")?;

        if let Some(s) = &self.alibi_slopes {
            if s.len() != heads {
                return Err(Error::config(format!("{} alibi slopes for {heads} heads", s.len())));
            }
            if let Some(bad) = s.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
                return Err(Error::config(format!("alibi slope {bad} must be positive")));
            }
        }
        if self.random_factor() == 0 {
            return Err(Error::config("random_factor must be at least 1"));
        }
        if k == PeKind::T5Bias && (self.t5_buckets() < 2 || self.t5_max_distance() <= self.t5_buckets()) {
            return Err(Error::config("t5 bias needs buckets >= 2 and max_distance > buckets"));
        }
        if self.fire_hidden() == 0 || self.fire_threshold == Some(0) {
            return Err(Error::config("FIRE hidden width and threshold must be positive"));
        }
        if let Some(d) = &self.dape {
            if !k.is_additive() {
                return Err(Error::config(format!(
                    "DAPE wraps additive bias matrices; `{}` has none",
                    k.name()
                )));
            }
            if d.hidden == 0 {
                return Err(Error::config("DAPE hidden width must be positive"));
            }
            if !(d.leaky_slope > 0.0 && d.leaky_slope < 1.0) {
                return Err(Error::config("DAPE leaky slope must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// A per-head pre-softmax bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    /// `[h, n, n]`
    pub values: Tensor,
    pub causal_extent: usize,
}

impl BiasMatrix {
    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, head: usize, i: usize, j: usize) -> f64 {
        let n = self.causal_extent;
        self.values.data()[(head * n + i) * n + j]
    }
}

/// Initial values for the learnable parameters of one layer's static
/// encoding, keyed by name suffix.
pub fn init_layer_params<R: Rng>(
    cfg: &PeConfig,
    heads: usize,
    rng: &mut R,
) -> Vec<(&'static str, Tensor)> {
    match cfg.kind {
        PeKind::Kerple => {
            let raw = softplus_inverse(1.0);
            vec![
                ("r1", Tensor::full(&[heads], raw)),
                ("r2", Tensor::full(&[heads], raw)),
            ]
        }
        PeKind::T5Bias => {
            let nb = cfg.t5_buckets();
            vec![("t5_table", Tensor::normal(&[heads, nb], 0.02, rng))]
        }
        PeKind::Fire => FireParams::init(heads, cfg.fire_hidden(), rng).into_named(),
        _ => Vec::new(),
    }
}

/// Builds the `[h, n, n]` static bias of one layer on the tape, or `None`
/// for encodings that are not additive.
#[allow(clippy::too_many_arguments)]
pub fn layer_bias(
    tape: &mut Tape,
    store: &ParamStore,
    binding: &mut Binding,
    prefix: &str,
    cfg: &PeConfig,
    heads: usize,
    n: usize,
    bidirectional: bool,
    train_len: usize,
) -> Result<Option<Var>> {
    let mut p = |tape: &mut Tape, suffix: &str| binding.bind(tape, store, &format!("{prefix}{suffix}"));
    let v = match cfg.kind {
        PeKind::Alibi => {
            let b = alibi_bias(n, &cfg.alibi_slopes(heads))?;
            tape.constant(b.values)
        }
        PeKind::Kerple => {
            let r1 = p(tape, "r1")?;
            let r2 = p(tape, "r2")?;
            let (r1, r2) = (tape.softplus(r1), tape.softplus(r2));
            kerple_bias(tape, r1, r2, n)?
        }
        PeKind::T5Bias => {
            let table = p(tape, "t5_table")?;
            t5_bucket_bias(tape, table, n, cfg.t5_buckets(), cfg.t5_max_distance(), bidirectional)?
        }
        PeKind::Fire => {
            let vars = FireVars::bind(|name| p(tape, name))?;
            fire_bias(tape, &vars, n, cfg.fire_threshold(train_len))?
        }
        _ => return Ok(None),
    };
    Ok(Some(v))
}
