//! Architecture geometry, block segmentation, and superframe stacking.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidConfig(format!(
                "precision must be f32 or f64, got '{other}'"
            ))),
        }
    }
}

/// Full model geometry. Sizes counted in superframes (slots) unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension of one 10 ms input frame.
    pub input_dim: usize,
    /// Frames concatenated into one superframe.
    pub stack_factor: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Center block size `c`.
    pub block_size: usize,
    /// Lookahead (right context) `r`.
    pub lookahead: usize,
    /// Attended left-context frames `L`.
    pub left_context: usize,
    /// Compressed-memory slots `S` (0 disables memory).
    pub memory_slots: usize,
    /// Memory offset `O`: the bank skips the blocks covered by the
    /// regular left context.
    pub memory_offset: usize,
    /// Depthwise kernel taps `k`.
    pub kernel: usize,
    pub use_conv: bool,
    pub use_macaron: bool,
    pub use_talking_heads: bool,
    pub precision: Precision,
}

/// Layer-norm epsilon used everywhere in the stack.
pub const LN_EPS: f64 = 1e-5;

/// Desk-scale geometry exercising every boundary (short tail block,
/// memory warm-up) in milliseconds of compute.
impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 4,
            stack_factor: 2,
            model_dim: 16,
            ffn_dim: 32,
            num_layers: 3,
            num_heads: 4,
            block_size: 4,
            lookahead: 1,
            left_context: 8,
            memory_slots: 2,
            memory_offset: 2,
            kernel: 3,
            use_conv: true,
            use_macaron: true,
            use_talking_heads: true,
            precision: Precision::F64,
        }
    }
}

const FIELDS: &[&str] = &[
    "input_dim",
    "stack_factor",
    "model_dim",
    "ffn_dim",
    "num_layers",
    "num_heads",
    "block_size",
    "lookahead",
    "left_context",
    "memory_slots",
    "memory_offset",
    "kernel",
    "use_conv",
    "use_macaron",
    "use_talking_heads",
    "precision",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1".into());
        }
        if self.stack_factor == 0 {
            return fail("stack_factor must be >= 1".into());
        }
        if self.model_dim == 0 || self.ffn_dim == 0 {
            return fail("model_dim and ffn_dim must be >= 1".into());
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.block_size == 0 {
            return fail("block_size must be >= 1".into());
        }
        if self.use_conv && self.kernel == 0 {
            return fail("kernel must be >= 1 when use_conv is set".into());
        }
        Ok(())
    }

    /// Canonical flat key=value rendering; fixed field order so the text
    /// (and its digest) is stable.
    pub fn to_text(&self) -> String {
        format!(
            "input_dim={}\nstack_factor={}\nmodel_dim={}\nffn_dim={}\nnum_layers={}\n\
             num_heads={}\nblock_size={}\nlookahead={}\nleft_context={}\nmemory_slots={}\n\
             memory_offset={}\nkernel={}\nuse_conv={}\nuse_macaron={}\nuse_talking_heads={}\n\
             precision={}\n",
            self.input_dim,
            self.stack_factor,
            self.model_dim,
            self.ffn_dim,
            self.num_layers,
            self.num_heads,
            self.block_size,
            self.lookahead,
            self.left_context,
            self.memory_slots,
            self.memory_offset,
            self.kernel,
            self.use_conv,
            self.use_macaron,
            self.use_talking_heads,
            self.precision.as_str()
        )
    }

    /// Parse the flat key=value document. Unknown keys are errors; `#`
    /// starts a comment; every field must be present exactly once.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !FIELDS.contains(&key) {
                return Err(Error::InvalidConfig(format!("unknown key '{key}'")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("duplicate key '{key}'")));
            }
            let usize_val = || {
                value.parse::<usize>().map_err(|_| {
                    Error::InvalidConfig(format!("field '{key}': invalid integer '{value}'"))
                })
            };
            let bool_val = || {
                value.parse::<bool>().map_err(|_| {
                    Error::InvalidConfig(format!("field '{key}': invalid bool '{value}'"))
                })
            };
            match key {
                "input_dim" => cfg.input_dim = usize_val()?,
                "stack_factor" => cfg.stack_factor = usize_val()?,
                "model_dim" => cfg.model_dim = usize_val()?,
                "ffn_dim" => cfg.ffn_dim = usize_val()?,
                "num_layers" => cfg.num_layers = usize_val()?,
                "num_heads" => cfg.num_heads = usize_val()?,
                "block_size" => cfg.block_size = usize_val()?,
                "lookahead" => cfg.lookahead = usize_val()?,
                "left_context" => cfg.left_context = usize_val()?,
                "memory_slots" => cfg.memory_slots = usize_val()?,
                "memory_offset" => cfg.memory_offset = usize_val()?,
                "kernel" => cfg.kernel = usize_val()?,
                "use_conv" => cfg.use_conv = bool_val()?,
                "use_macaron" => cfg.use_macaron = bool_val()?,
                "use_talking_heads" => cfg.use_talking_heads = bool_val()?,
                "precision" => cfg.precision = Precision::parse(value)?,
                _ => unreachable!(),
            }
        }
        let missing: Vec<&str> = FIELDS
            .iter()
            .filter(|f| !seen.contains(**f))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "missing fields: {}",
                missing.join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seconds of audio represented by `n` superframes (10 ms per frame).
    pub fn audio_seconds(&self, num_superframes: usize) -> f64 {
        num_superframes as f64 * self.stack_factor as f64 * 0.01
    }

    /// Algorithmic latency until the first emission, in milliseconds.
    pub fn first_emission_latency_ms(&self) -> usize {
        (self.block_size + self.lookahead) * self.stack_factor * 10
    }
}

/// Segmentation of an utterance into center blocks plus the lookahead
/// span hard-copied for each block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    /// Half-open center index ranges, partitioning `[0, n)`.
    pub centers: Vec<(usize, usize)>,
    /// Half-open lookahead ranges: the `r` superframes after each block,
    /// clipped at the utterance end (the last may be empty).
    pub lookaheads: Vec<(usize, usize)>,
}

impl BlockPlan {
    pub fn num_blocks(&self) -> usize {
        self.centers.len()
    }
}

pub fn plan_blocks(num_superframes: usize, block_size: usize, lookahead: usize) -> BlockPlan {
    assert!(block_size >= 1);
    let mut centers = Vec::new();
    let mut lookaheads = Vec::new();
    let mut start = 0;
    while start < num_superframes {
        let end = (start + block_size).min(num_superframes);
        centers.push((start, end));
        lookaheads.push((end, (end + lookahead).min(num_superframes)));
        start = end;
    }
    BlockPlan {
        centers,
        lookaheads,
    }
}

/// Concatenate non-overlapping groups of `factor` frames along the feature
/// axis. The trailing remainder (< factor frames) is dropped; the streaming
/// session buffers it instead.
pub fn superframe_stack<S: Scalar>(frames: &Tensor<S>, factor: usize) -> Tensor<S> {
    assert!(factor >= 1);
    let t = frames.rows();
    let d = frames.cols();
    let n = t / factor;
    let mut data = Vec::with_capacity(n * d * factor);
    for g in 0..n {
        for f in 0..factor {
            data.extend_from_slice(frames.row(g * factor + f));
        }
    }
    Tensor::new(vec![n, d * factor], data).unwrap()
}
