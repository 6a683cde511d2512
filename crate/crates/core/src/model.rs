//! Utterance-level engine: input projection, block segmentation with
//! lookahead hard copy, layer stacking, streaming sessions, weight
//! generation, and the dual-path equivalence check.

use crate::attention::{MhaWeights, TalkingHeadsWeights};
use crate::config::{plan_blocks, superframe_stack, ModelConfig};
use crate::conv::ConvWeights;
use crate::error::{Error, Result};
use crate::layer::{
    layer_forward_parallel, layer_forward_streaming, BlockIo, FfnWeights, LayerState,
    LayerWeights, LnWeights,
};
use crate::tensor::{concat_rows, matmul, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<S: Scalar> {
    /// `(input_dim * stack_factor) x model_dim` superframe projection.
    pub input_proj: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
}

impl<S: Scalar> ModelWeights<S> {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let in_dim = cfg.input_dim * cfg.stack_factor;
        if self.input_proj.shape() != [in_dim, cfg.model_dim] {
            return Err(Error::InvalidConfig(format!(
                "input projection must be {in_dim}x{}, got {:?}",
                cfg.model_dim,
                self.input_proj.shape()
            )));
        }
        if self.layers.len() != cfg.num_layers {
            return Err(Error::InvalidConfig(format!(
                "expected {} layers, got {}",
                cfg.num_layers,
                self.layers.len()
            )));
        }
        for l in &self.layers {
            l.validate(cfg)?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        ModelWeights {
            input_proj: self.input_proj.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ffn1: l.ffn1.as_ref().map(cast_ffn),
                    attn: MhaWeights {
                        w_q: l.attn.w_q.cast(),
                        w_k: l.attn.w_k.cast(),
                        w_v: l.attn.w_v.cast(),
                        w_o: l.attn.w_o.cast(),
                        num_heads: l.attn.num_heads,
                    },
                    talking_heads: l.talking_heads.as_ref().map(|t| TalkingHeadsWeights {
                        w_l: t.w_l.cast(),
                        w_r: t.w_r.cast(),
                    }),
                    conv: l.conv.as_ref().map(|c| ConvWeights {
                        pw1: c.pw1.cast(),
                        dw: c.dw.cast(),
                        ln_gain: c.ln_gain.cast(),
                        ln_bias: c.ln_bias.cast(),
                        pw2: c.pw2.cast(),
                    }),
                    ffn2: cast_ffn(&l.ffn2),
                    ln_attn_in: cast_ln(&l.ln_attn_in),
                    ln_conv_in: l.ln_conv_in.as_ref().map(cast_ln),
                    ln_final: cast_ln(&l.ln_final),
                    compress_weights: l.compress_weights.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All tensors in canonical (name, tensor) order; the serialization
    /// order of the weight file.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![("input_proj".into(), &self.input_proj)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}");
            macro_rules! push {
                ($name:expr, $t:expr) => {
                    out.push(($name, $t))
                };
            }
            if let Some(f) = &l.ffn1 {
                push!(format!("{p}.ffn1.ln_gain"), &f.ln.gain);
                push!(format!("{p}.ffn1.ln_bias"), &f.ln.bias);
                push!(format!("{p}.ffn1.lin_in"), &f.lin_in);
                push!(format!("{p}.ffn1.lin_out"), &f.lin_out);
            }
            push!(format!("{p}.ln_attn_in.gain"), &l.ln_attn_in.gain);
            push!(format!("{p}.ln_attn_in.bias"), &l.ln_attn_in.bias);
            push!(format!("{p}.attn.w_q"), &l.attn.w_q);
            push!(format!("{p}.attn.w_k"), &l.attn.w_k);
            push!(format!("{p}.attn.w_v"), &l.attn.w_v);
            push!(format!("{p}.attn.w_o"), &l.attn.w_o);
            if let Some(t) = &l.talking_heads {
                push!(format!("{p}.th.w_l"), &t.w_l);
                push!(format!("{p}.th.w_r"), &t.w_r);
            }
            if let Some(c) = &l.conv {
                let ln = l.ln_conv_in.as_ref().unwrap();
                push!(format!("{p}.ln_conv_in.gain"), &ln.gain);
                push!(format!("{p}.ln_conv_in.bias"), &ln.bias);
                push!(format!("{p}.conv.pw1"), &c.pw1);
                push!(format!("{p}.conv.dw"), &c.dw);
                push!(format!("{p}.conv.ln_gain"), &c.ln_gain);
                push!(format!("{p}.conv.ln_bias"), &c.ln_bias);
                push!(format!("{p}.conv.pw2"), &c.pw2);
            }
            push!(format!("{p}.ffn2.ln_gain"), &l.ffn2.ln.gain);
            push!(format!("{p}.ffn2.ln_bias"), &l.ffn2.ln.bias);
            push!(format!("{p}.ffn2.lin_in"), &l.ffn2.lin_in);
            push!(format!("{p}.ffn2.lin_out"), &l.ffn2.lin_out);
            push!(format!("{p}.ln_final.gain"), &l.ln_final.gain);
            push!(format!("{p}.ln_final.bias"), &l.ln_final.bias);
            if let Some(cw) = &l.compress_weights {
                push!(format!("{p}.compress_weights"), cw);
            }
        }
        out
    }
}

fn cast_ffn<S: Scalar, T: Scalar>(f: &FfnWeights<S>) -> FfnWeights<T> {
    FfnWeights {
        ln: cast_ln(&f.ln),
        lin_in: f.lin_in.cast(),
        lin_out: f.lin_out.cast(),
    }
}

fn cast_ln<S: Scalar, T: Scalar>(l: &LnWeights<S>) -> LnWeights<T> {
    LnWeights {
        gain: l.gain.cast(),
        bias: l.bias.cast(),
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
    )
    .unwrap()
}

/// Deterministic seeded initialization: uniform(-1/sqrt(fan_in)) linear
/// layers, unit layer norms, near-identity talking-heads mixing, uniform
/// compression weights.
pub fn gen_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.model_dim;
    let f = cfg.ffn_dim;
    let in_dim = cfg.input_dim * cfg.stack_factor;
    let input_proj = uniform_fan_in(&mut rng, in_dim, d, in_dim);

    let gen_ffn = |rng: &mut ChaCha8Rng| FfnWeights {
        ln: LnWeights::unit(d),
        lin_in: uniform_fan_in(rng, d, f, d),
        lin_out: uniform_fan_in(rng, f, d, f),
    };

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        let ffn1 = cfg.use_macaron.then(|| gen_ffn(&mut rng));
        let attn = MhaWeights {
            w_q: uniform_fan_in(&mut rng, d, d, d),
            w_k: uniform_fan_in(&mut rng, d, d, d),
            w_v: uniform_fan_in(&mut rng, d, d, d),
            w_o: uniform_fan_in(&mut rng, d, d, d),
            num_heads: cfg.num_heads,
        };
        let talking_heads = cfg.use_talking_heads.then(|| {
            let h = cfg.num_heads;
            let eps = 0.01;
            let mut noisy_identity = || {
                let mut t = Tensor::<f64>::eye(h);
                for v in t.data_mut() {
                    *v += eps * rng.gen_range(-1.0..1.0);
                }
                t
            };
            TalkingHeadsWeights {
                w_l: noisy_identity(),
                w_r: noisy_identity(),
            }
        });
        let conv = cfg.use_conv.then(|| ConvWeights {
            pw1: uniform_fan_in(&mut rng, d, 2 * d, d),
            dw: uniform_fan_in(&mut rng, d, cfg.kernel, cfg.kernel),
            ln_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln_bias: Tensor::zeros(vec![d]),
            pw2: uniform_fan_in(&mut rng, d, d, d),
        });
        let ffn2 = gen_ffn(&mut rng);
        layers.push(LayerWeights {
            ffn1,
            attn,
            talking_heads,
            conv,
            ffn2,
            ln_attn_in: LnWeights::unit(d),
            ln_conv_in: cfg.use_conv.then(|| LnWeights::unit(d)),
            ln_final: LnWeights::unit(d),
            compress_weights: (cfg.memory_slots > 0).then(|| {
                Tensor::new(
                    vec![cfg.block_size],
                    vec![1.0 / cfg.block_size as f64; cfg.block_size],
                )
                .unwrap()
            }),
        });
    }
    Ok(ModelWeights { input_proj, layers })
}

/// Whole-utterance forward: stack superframes, project, run all layers in
/// parallel block mode, return the center-frame outputs in temporal order.
/// Hard-copied lookahead activations are consumed internally and discarded
/// at the top layer.
pub fn encoder_forward_parallel<S: Scalar>(
    frames: &Tensor<S>,
    cfg: &ModelConfig,
    weights: &ModelWeights<S>,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    weights.validate(cfg)?;
    let stacked = superframe_stack(frames, cfg.stack_factor);
    let projected = matmul(&stacked, &weights.input_proj)?;
    let plan = plan_blocks(projected.rows(), cfg.block_size, cfg.lookahead);

    let mut blocks: Vec<BlockIo<S>> = plan
        .centers
        .iter()
        .zip(&plan.lookaheads)
        .map(|(&(cs, ce), &(ls, le))| BlockIo {
            center: projected.slice_rows(cs, ce),
            lookahead: projected.slice_rows(ls, le),
        })
        .collect();

    for lw in &weights.layers {
        blocks = layer_forward_parallel(&blocks, cfg, lw)?;
    }

    let centers: Vec<&Tensor<S>> = blocks.iter().map(|b| &b.center).collect();
    if centers.is_empty() {
        return Ok(Tensor::zeros(vec![0, cfg.model_dim]));
    }
    Ok(concat_rows(&centers))
}

/// One audio stream's incremental forward. Accepts raw 10 ms frames in any
/// granularity; emits a block's center outputs as soon as its center and
/// lookahead superframes are complete (or at flush with clipped lookahead).
pub struct StreamingSession<S: Scalar> {
    cfg: ModelConfig,
    weights: Arc<ModelWeights<S>>,
    /// raw frames not yet forming a superframe (< stack_factor rows)
    frame_buf: Vec<S>,
    frame_rows: usize,
    /// projected superframes not yet consumed by a block
    pending: Tensor<S>,
    layer_states: Vec<LayerState<S>>,
    next_block: usize,
    flushed: bool,
}

impl<S: Scalar> StreamingSession<S> {
    pub fn open(cfg: ModelConfig, weights: Arc<ModelWeights<S>>) -> Result<Self> {
        cfg.validate()?;
        weights.validate(&cfg)?;
        let layer_states = (0..cfg.num_layers).map(|_| LayerState::new(&cfg)).collect();
        Ok(Self {
            pending: Tensor::zeros(vec![0, cfg.model_dim]),
            frame_buf: Vec::new(),
            frame_rows: 0,
            layer_states,
            next_block: 0,
            flushed: false,
            cfg,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    #[doc(hidden)]
    pub fn corrupt_conv_state(&mut self) {
        for s in &mut self.layer_states {
            s.corrupt_conv_tail();
        }
    }

    fn run_block(&mut self, center_rows: usize, lookahead_rows: usize) -> Result<Tensor<S>> {
        let mut io = BlockIo {
            center: self.pending.slice_rows(0, center_rows),
            lookahead: self
                .pending
                .slice_rows(center_rows, center_rows + lookahead_rows),
        };
        let weights = Arc::clone(&self.weights);
        for (lw, state) in weights.layers.iter().zip(&mut self.layer_states) {
            io = layer_forward_streaming(&io, self.next_block, state, &self.cfg, lw)?;
        }
        self.pending = self
            .pending
            .slice_rows(center_rows, self.pending.rows());
        self.next_block += 1;
        Ok(io.center)
    }

    /// Feed raw frames; returns the center outputs emitted by any blocks
    /// completed by this push (possibly zero rows).
    pub fn push(&mut self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        if self.flushed {
            return Err(Error::StreamFlushed);
        }
        if frames.rows() > 0 && frames.cols() != self.cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "stream_push",
                lhs: frames.shape().to_vec(),
                rhs: vec![frames.rows(), self.cfg.input_dim],
            });
        }
        // complete superframes out of the raw buffer
        self.frame_buf.extend_from_slice(frames.data());
        self.frame_rows += frames.rows();
        let factor = self.cfg.stack_factor;
        let full = self.frame_rows / factor;
        if full > 0 {
            let in_dim = self.cfg.input_dim;
            let take = full * factor * in_dim;
            let raw: Vec<S> = self.frame_buf.drain(..take).collect();
            self.frame_rows -= full * factor;
            let stacked = Tensor::new(vec![full, in_dim * factor], raw)?;
            let projected = matmul(&stacked, &self.weights.input_proj)?;
            self.pending = concat_rows(&[&self.pending, &projected]);
        }

        let (c, r) = (self.cfg.block_size, self.cfg.lookahead);
        let mut emitted: Vec<Tensor<S>> = Vec::new();
        while self.pending.rows() >= c + r {
            emitted.push(self.run_block(c, r)?);
        }
        let refs: Vec<&Tensor<S>> = emitted.iter().collect();
        if refs.is_empty() {
            Ok(Tensor::zeros(vec![0, self.cfg.model_dim]))
        } else {
            Ok(concat_rows(&refs))
        }
    }

    /// End of stream: process the tail blocks with whatever lookahead is
    /// left (possibly none), mirroring the clipped parallel plan. Raw
    /// frames short of a superframe are dropped.
    pub fn flush(&mut self) -> Result<Tensor<S>> {
        if self.flushed {
            return Err(Error::StreamFlushed);
        }
        self.flushed = true;
        let (c, r) = (self.cfg.block_size, self.cfg.lookahead);
        let mut emitted: Vec<Tensor<S>> = Vec::new();
        while self.pending.rows() > 0 {
            let center = c.min(self.pending.rows());
            let lookahead = r.min(self.pending.rows() - center);
            emitted.push(self.run_block(center, lookahead)?);
        }
        let refs: Vec<&Tensor<S>> = emitted.iter().collect();
        if refs.is_empty() {
            Ok(Tensor::zeros(vec![0, self.cfg.model_dim]))
        } else {
            Ok(concat_rows(&refs))
        }
    }
}

/// Convenience wrapper: run the whole utterance through a fresh streaming
/// session and concatenate everything it emits.
pub fn encoder_forward_streaming<S: Scalar>(
    frames: &Tensor<S>,
    cfg: &ModelConfig,
    weights: &ModelWeights<S>,
) -> Result<Tensor<S>> {
    let mut session = StreamingSession::open(cfg.clone(), Arc::new(weights.clone()))?;
    let a = session.push(frames)?;
    let b = session.flush()?;
    Ok(concat_rows(&[&a, &b]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    /// (superframe row, feature column) of the worst element, if any output
    pub argmax: Option<(usize, usize)>,
    pub emitted_rows: usize,
}

/// Run both forward paths on the same input and report the elementwise
/// worst-case disagreement.
pub fn check_equivalence<S: Scalar>(
    frames: &Tensor<S>,
    cfg: &ModelConfig,
    weights: &ModelWeights<S>,
) -> Result<EquivalenceReport> {
    let par = encoder_forward_parallel(frames, cfg, weights)?;
    let stream = encoder_forward_streaming(frames, cfg, weights)?;
    if par.shape() != stream.shape() {
        return Err(Error::InvalidConfig(format!(
            "path outputs disagree in shape: {:?} vs {:?}",
            par.shape(),
            stream.shape()
        )));
    }
    let mut max_abs_diff = 0.0f64;
    let mut argmax = None;
    let d = cfg.model_dim;
    for (idx, (a, b)) in par.data().iter().zip(stream.data()).enumerate() {
        let diff = (a.as_f64() - b.as_f64()).abs();
        if diff > max_abs_diff || argmax.is_none() {
            max_abs_diff = diff;
            argmax = Some((idx / d, idx % d));
        }
    }
    Ok(EquivalenceReport {
        max_abs_diff,
        argmax: if par.len() == 0 { None } else { argmax },
        emitted_rows: par.rows(),
    })
}

/// Deterministic random feature matrix (`T x input_dim`), the synthetic
/// input for checks and benchmarks.
pub fn random_features(num_frames: usize, input_dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![num_frames, input_dim],
        (0..num_frames * input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}
