//! One encoder layer: macaron half-FFN, (talking-heads) attention over
//! [compressed memory, cached left context, center, lookahead], the conv
//! block, and the closing half-FFN with final layer norm. The baseline
//! variant (macaron/conv/talking-heads off, no memory) degenerates to the
//! plain block-processing layer: LayerNorm -> attention -> FFN -> residual
//! layer norm.
//!
//! Both forward paths are provided: `layer_forward_parallel` over the whole
//! utterance and `layer_forward_streaming` over one block with carried
//! state. They are required to agree to floating-point roundoff.

use crate::attention::{attention_projected, MhaWeights, TalkingHeadsWeights};
use crate::config::{ModelConfig, LN_EPS};
use crate::conv::{conv_block_parallel, conv_block_streaming, ConvState, ConvWeights};
use crate::error::{Error, Result};
use crate::tensor::{add, concat_rows, layer_norm, matmul, relu, scale, Scalar, Tensor};
use std::collections::VecDeque;

/// Gain/bias pair of one layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LnWeights<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LnWeights<S> {
    pub fn unit(d: usize) -> Self {
        Self {
            gain: Tensor::new(vec![d], vec![S::one(); d]).unwrap(),
            bias: Tensor::zeros(vec![d]),
        }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        layer_norm(x, &self.gain, &self.bias, S::from_f64(LN_EPS))
    }
}

/// Two-layer feed-forward block with a pre-norm: lin_in -> relu -> lin_out.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<S: Scalar> {
    pub ln: LnWeights<S>,
    pub lin_in: Tensor<S>,
    pub lin_out: Tensor<S>,
}

impl<S: Scalar> FfnWeights<S> {
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        matmul(&relu(&matmul(&self.ln.apply(x)?, &self.lin_in)?), &self.lin_out)
    }
}

/// All learned parameters of one layer. Optional parts must match the
/// config flags (`ffn1` with use_macaron, `conv` with use_conv,
/// `talking_heads` with use_talking_heads, `compress_weights` with
/// memory_slots > 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S: Scalar> {
    pub ffn1: Option<FfnWeights<S>>,
    pub attn: MhaWeights<S>,
    pub talking_heads: Option<TalkingHeadsWeights<S>>,
    pub conv: Option<ConvWeights<S>>,
    pub ffn2: FfnWeights<S>,
    pub ln_attn_in: LnWeights<S>,
    pub ln_conv_in: Option<LnWeights<S>>,
    pub ln_final: LnWeights<S>,
    /// Length block_size; convex-initialized combination weights for
    /// context compression.
    pub compress_weights: Option<Tensor<S>>,
}

impl<S: Scalar> LayerWeights<S> {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.attn.validate()?;
        if self.ffn1.is_some() != cfg.use_macaron {
            return Err(Error::InvalidConfig(
                "ffn1 presence must match use_macaron".into(),
            ));
        }
        if self.conv.is_some() != cfg.use_conv || self.ln_conv_in.is_some() != cfg.use_conv {
            return Err(Error::InvalidConfig(
                "conv weights presence must match use_conv".into(),
            ));
        }
        if self.talking_heads.is_some() != cfg.use_talking_heads {
            return Err(Error::InvalidConfig(
                "talking-heads weights presence must match use_talking_heads".into(),
            ));
        }
        if self.compress_weights.is_some() != (cfg.memory_slots > 0) {
            return Err(Error::InvalidConfig(
                "compress_weights presence must match memory_slots > 0".into(),
            ));
        }
        if let Some(cw) = &self.compress_weights {
            if cw.len() != cfg.block_size {
                return Err(Error::InvalidConfig(
                    "compress_weights length must equal block_size".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Center/lookahead pair of one block as it flows through the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockIo<S: Scalar> {
    pub center: Tensor<S>,
    pub lookahead: Tensor<S>,
}

/// Compressed history slots visible to one block, oldest first.
#[derive(Debug, Clone)]
pub struct MemoryBank<S: Scalar> {
    /// (source block index, compressed vector as a 1 x d tensor)
    pub slots: Vec<(usize, Tensor<S>)>,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn empty() -> Self {
        Self { slots: Vec::new() }
    }

    fn rows(&self, d: usize) -> Tensor<S> {
        let parts: Vec<&Tensor<S>> = self.slots.iter().map(|(_, t)| t).collect();
        if parts.is_empty() {
            Tensor::zeros(vec![0, d])
        } else {
            concat_rows(&parts)
        }
    }
}

/// Source block range of the memory bank for block `i`: the `slots` blocks
/// immediately preceding block `i - offset`, clipped at the utterance start.
pub fn memory_bank_range(i: usize, slots: usize, offset: usize) -> std::ops::Range<usize> {
    let hi = i.saturating_sub(offset);
    let lo = hi.saturating_sub(slots);
    lo..hi
}

/// Select the bank for block `i` out of per-block compressed vectors.
pub fn memory_bank_select<S: Scalar>(
    all_slots: &[Tensor<S>],
    i: usize,
    slots: usize,
    offset: usize,
) -> MemoryBank<S> {
    let range = memory_bank_range(i, slots, offset);
    MemoryBank {
        slots: range
            .filter(|&j| j < all_slots.len())
            .map(|j| (j, all_slots[j].clone()))
            .collect(),
    }
}

/// Weighted combination of the center frames into a single vector.
/// Shorter final blocks use the truncated weights renormalized to sum 1.
pub fn compress_block<S: Scalar>(center_in: &Tensor<S>, weights: &Tensor<S>) -> Result<Tensor<S>> {
    let c = center_in.rows();
    if c == 0 {
        return Err(Error::InvalidShape {
            op: "compress_block",
            shape: center_in.shape().to_vec(),
            reason: "empty center block",
        });
    }
    if c > weights.len() {
        return Err(Error::ShapeMismatch {
            op: "compress_block",
            lhs: center_in.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    let mut w: Vec<S> = weights.data()[..c].to_vec();
    if c < weights.len() {
        let mut sum = S::zero();
        for &v in &w {
            sum = sum + v;
        }
        if sum == S::zero() {
            return Err(Error::InvalidConfig(
                "truncated compression weights sum to zero".into(),
            ));
        }
        for v in &mut w {
            *v = *v / sum;
        }
    }
    let d = center_in.cols();
    let mut out = vec![S::zero(); d];
    for (t, &wt) in w.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o = *o + wt * center_in.row(t)[j];
        }
    }
    Tensor::new(vec![1, d], out)
}

/// Half-weighted pre-norm FFN with residual, then the closing layer norm:
/// ln_out(x + 1/2 ffn(x)).
pub fn macaron_ffn_half<S: Scalar>(
    x: &Tensor<S>,
    ffn: &FfnWeights<S>,
    ln_out: &LnWeights<S>,
) -> Result<Tensor<S>> {
    let half = S::from_f64(0.5);
    ln_out.apply(&add(x, &scale(&ffn.apply(x)?, half))?)
}

fn attend_block<S: Scalar>(
    block: &BlockIo<S>,
    c_hat: &Tensor<S>,
    r_hat: &Tensor<S>,
    left_k: &Tensor<S>,
    left_v: &Tensor<S>,
    bank: &MemoryBank<S>,
    w: &LayerWeights<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = c_hat.cols();
    // keys/values: [left-context cache, W_k/W_v over [memory, center, lookahead]]
    let fresh = concat_rows(&[&bank.rows(d), c_hat, r_hat]);
    let k_fresh = matmul(&fresh, &w.attn.w_k)?;
    let v_fresh = matmul(&fresh, &w.attn.w_v)?;
    let k_all = concat_rows(&[left_k, &k_fresh]);
    let v_all = concat_rows(&[left_v, &v_fresh]);
    let q = matmul(&concat_rows(&[c_hat, r_hat]), &w.attn.w_q)?;
    let attn = attention_projected(
        &q,
        &k_all,
        &v_all,
        w.attn.num_heads,
        &w.attn.w_o,
        w.talking_heads.as_ref(),
        None,
    )?;
    let c_rows = c_hat.rows();
    let z_c = add(&attn.slice_rows(0, c_rows), &block.center)?;
    let z_r = add(&attn.slice_rows(c_rows, attn.rows()), &block.lookahead)?;
    // this block's center keys/values join the cache for later blocks
    let n_mem = bank.slots.len();
    let k_center = k_fresh.slice_rows(n_mem, n_mem + c_rows);
    let v_center = v_fresh.slice_rows(n_mem, n_mem + c_rows);
    Ok((z_c, z_r, k_center, v_center))
}

fn closing_ffn<S: Scalar>(x: &Tensor<S>, cfg: &ModelConfig, w: &LayerWeights<S>) -> Result<Tensor<S>> {
    let ffn_out = w.ffn2.apply(x)?;
    let ffn_out = if cfg.use_macaron {
        scale(&ffn_out, S::from_f64(0.5))
    } else {
        ffn_out
    };
    w.ln_final.apply(&add(x, &ffn_out)?)
}

fn split_io<S: Scalar>(x: &Tensor<S>, c_rows: usize) -> BlockIo<S> {
    BlockIo {
        center: x.slice_rows(0, c_rows),
        lookahead: x.slice_rows(c_rows, x.rows()),
    }
}

fn last_rows_capped<S: Scalar>(x: &Tensor<S>, cap: usize) -> Tensor<S> {
    let n = x.rows();
    x.slice_rows(n - n.min(cap), n)
}

/// Whole-utterance layer forward over all blocks at once.
pub fn layer_forward_parallel<S: Scalar>(
    blocks: &[BlockIo<S>],
    cfg: &ModelConfig,
    w: &LayerWeights<S>,
) -> Result<Vec<BlockIo<S>>> {
    w.validate(cfg)?;
    let d = cfg.model_dim;

    // compressed memory slots come from the layer input center frames
    let mem_slots: Vec<Tensor<S>> = if cfg.memory_slots > 0 {
        let cw = w.compress_weights.as_ref().unwrap();
        blocks
            .iter()
            .map(|b| compress_block(&b.center, cw))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    // per-block attention input (post-macaron, post-norm)
    let mut hats = Vec::with_capacity(blocks.len());
    for b in blocks {
        let x = concat_rows(&[&b.center, &b.lookahead]);
        let x_hat = match &w.ffn1 {
            Some(ffn1) => macaron_ffn_half(&x, ffn1, &w.ln_attn_in)?,
            None => w.ln_attn_in.apply(&x)?,
        };
        hats.push(split_io(&x_hat, b.center.rows()));
    }

    let mut out = Vec::with_capacity(blocks.len());
    let mut left_k = Tensor::zeros(vec![0, d]);
    let mut left_v = Tensor::zeros(vec![0, d]);
    let mut z_centers: Vec<Tensor<S>> = Vec::with_capacity(blocks.len());
    let mut z_rights: Vec<Tensor<S>> = Vec::with_capacity(blocks.len());
    for (i, (b, hat)) in blocks.iter().zip(&hats).enumerate() {
        let bank = memory_bank_select(&mem_slots, i, cfg.memory_slots, cfg.memory_offset);
        let (z_c, z_r, k_c, v_c) =
            attend_block(b, &hat.center, &hat.lookahead, &left_k, &left_v, &bank, w)?;
        left_k = last_rows_capped(&concat_rows(&[&left_k, &k_c]), cfg.left_context);
        left_v = last_rows_capped(&concat_rows(&[&left_v, &v_c]), cfg.left_context);
        z_centers.push(z_c);
        z_rights.push(z_r);
    }

    if cfg.use_conv {
        let conv_w = w.conv.as_ref().unwrap();
        let ln_conv = w.ln_conv_in.as_ref().unwrap();
        let mut bounds = Vec::with_capacity(blocks.len());
        let mut start = 0;
        for z in &z_centers {
            bounds.push((start, start + z.rows()));
            start += z.rows();
        }
        let center_refs: Vec<&Tensor<S>> = z_centers.iter().collect();
        let center_all = ln_conv.apply(&concat_rows(&center_refs))?;
        let right_in: Vec<Tensor<S>> = z_rights
            .iter()
            .map(|z| ln_conv.apply(z))
            .collect::<Result<_>>()?;
        let (conv_c, conv_r) =
            conv_block_parallel(&center_all, &right_in, &bounds, conv_w, S::from_f64(LN_EPS))?;
        for (i, &(s, e)) in bounds.iter().enumerate() {
            let joined = concat_rows(&[&conv_c.slice_rows(s, e), &conv_r[i]]);
            out.push(split_io(&closing_ffn(&joined, cfg, w)?, e - s));
        }
    } else {
        for (z_c, z_r) in z_centers.iter().zip(&z_rights) {
            let joined = concat_rows(&[z_c, z_r]);
            out.push(split_io(&closing_ffn(&joined, cfg, w)?, z_c.rows()));
        }
    }
    Ok(out)
}

/// Carried caches of one layer for one stream.
#[derive(Debug, Clone)]
pub struct LayerState<S: Scalar> {
    left_k: Tensor<S>,
    left_v: Tensor<S>,
    conv: Option<ConvState<S>>,
    /// compressed slots of recent blocks, oldest first, capped at S + O
    mem: VecDeque<(usize, Tensor<S>)>,
}

impl<S: Scalar> LayerState<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            left_k: Tensor::zeros(vec![0, cfg.model_dim]),
            left_v: Tensor::zeros(vec![0, cfg.model_dim]),
            conv: cfg
                .use_conv
                .then(|| ConvState::new(cfg.kernel, cfg.model_dim)),
            mem: VecDeque::new(),
        }
    }

    #[doc(hidden)]
    pub fn corrupt_conv_tail(&mut self) {
        if let Some(c) = &mut self.conv {
            c.corrupt();
        }
    }
}

/// Same math as the parallel path restricted to block `block_index`,
/// consuming and updating `state`.
pub fn layer_forward_streaming<S: Scalar>(
    block: &BlockIo<S>,
    block_index: usize,
    state: &mut LayerState<S>,
    cfg: &ModelConfig,
    w: &LayerWeights<S>,
) -> Result<BlockIo<S>> {
    w.validate(cfg)?;

    let x = concat_rows(&[&block.center, &block.lookahead]);
    let x_hat = match &w.ffn1 {
        Some(ffn1) => macaron_ffn_half(&x, ffn1, &w.ln_attn_in)?,
        None => w.ln_attn_in.apply(&x)?,
    };
    let hat = split_io(&x_hat, block.center.rows());

    let bank = {
        let range = memory_bank_range(block_index, cfg.memory_slots, cfg.memory_offset);
        MemoryBank {
            slots: state
                .mem
                .iter()
                .filter(|(j, _)| range.contains(j))
                .cloned()
                .collect(),
        }
    };

    let (z_c, z_r, k_c, v_c) = attend_block(
        block,
        &hat.center,
        &hat.lookahead,
        &state.left_k,
        &state.left_v,
        &bank,
        w,
    )?;
    state.left_k = last_rows_capped(&concat_rows(&[&state.left_k, &k_c]), cfg.left_context);
    state.left_v = last_rows_capped(&concat_rows(&[&state.left_v, &v_c]), cfg.left_context);

    if cfg.memory_slots > 0 {
        let cw = w.compress_weights.as_ref().unwrap();
        state
            .mem
            .push_back((block_index, compress_block(&block.center, cw)?));
        while state.mem.len() > cfg.memory_slots + cfg.memory_offset {
            state.mem.pop_front();
        }
    }

    let (zc2, zr2) = if cfg.use_conv {
        let conv_w = w.conv.as_ref().unwrap();
        let ln_conv = w.ln_conv_in.as_ref().unwrap();
        conv_block_streaming(
            &ln_conv.apply(&z_c)?,
            &ln_conv.apply(&z_r)?,
            state.conv.as_mut().unwrap(),
            conv_w,
            S::from_f64(LN_EPS),
        )?
    } else {
        (z_c, z_r)
    };
    let joined = concat_rows(&[&zc2, &zr2]);
    Ok(split_io(&closing_ffn(&joined, cfg, w)?, zc2.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::multi_head_attention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> T {
        T::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_ln(rng: &mut ChaCha8Rng, d: usize) -> LnWeights<f64> {
        LnWeights {
            gain: T::new(vec![d], (0..d).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap(),
            bias: T::new(vec![d], (0..d).map(|_| rng.gen_range(-0.2..0.2)).collect()).unwrap(),
        }
    }

    fn rand_ffn(rng: &mut ChaCha8Rng, d: usize, f: usize) -> FfnWeights<f64> {
        FfnWeights {
            ln: rand_ln(rng, d),
            lin_in: rand_tensor(rng, d, f),
            lin_out: rand_tensor(rng, f, d),
        }
    }

    fn rand_layer(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> LayerWeights<f64> {
        let d = cfg.model_dim;
        LayerWeights {
            ffn1: cfg.use_macaron.then(|| rand_ffn(rng, d, cfg.ffn_dim)),
            attn: MhaWeights {
                w_q: rand_tensor(rng, d, d),
                w_k: rand_tensor(rng, d, d),
                w_v: rand_tensor(rng, d, d),
                w_o: rand_tensor(rng, d, d),
                num_heads: cfg.num_heads,
            },
            talking_heads: cfg.use_talking_heads.then(|| TalkingHeadsWeights {
                w_l: rand_tensor(rng, cfg.num_heads, cfg.num_heads),
                w_r: rand_tensor(rng, cfg.num_heads, cfg.num_heads),
            }),
            conv: cfg.use_conv.then(|| ConvWeights {
                pw1: rand_tensor(rng, d, 2 * d),
                dw: rand_tensor(rng, d, cfg.kernel),
                ln_gain: T::new(vec![d], vec![1.0; d]).unwrap(),
                ln_bias: T::zeros(vec![d]),
                pw2: rand_tensor(rng, d, d),
            }),
            ffn2: rand_ffn(rng, d, cfg.ffn_dim),
            ln_attn_in: rand_ln(rng, d),
            ln_conv_in: cfg.use_conv.then(|| rand_ln(rng, d)),
            ln_final: rand_ln(rng, d),
            compress_weights: (cfg.memory_slots > 0).then(|| {
                T::new(
                    vec![cfg.block_size],
                    vec![1.0 / cfg.block_size as f64; cfg.block_size],
                )
                .unwrap()
            }),
        }
    }

    fn rand_blocks(rng: &mut ChaCha8Rng, cfg: &ModelConfig, sizes: &[(usize, usize)]) -> Vec<BlockIo<f64>> {
        sizes
            .iter()
            .map(|&(c, r)| BlockIo {
                center: rand_tensor(rng, c, cfg.model_dim),
                lookahead: rand_tensor(rng, r, cfg.model_dim),
            })
            .collect()
    }

    #[test]
    fn macaron_half_zero_ffn_is_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let d = 6;
        let ffn = FfnWeights {
            ln: rand_ln(&mut rng, d),
            lin_in: T::zeros(vec![d, 12]),
            lin_out: T::zeros(vec![12, d]),
        };
        let ln_out = rand_ln(&mut rng, d);
        let x = rand_tensor(&mut rng, 3, d);
        assert_eq!(
            macaron_ffn_half(&x, &ffn, &ln_out).unwrap(),
            ln_out.apply(&x).unwrap()
        );
    }

    #[test]
    fn macaron_half_zero_input_zero_bias() {
        let d = 4;
        let ffn = FfnWeights {
            ln: LnWeights::unit(d),
            lin_in: T::zeros(vec![d, 8]),
            lin_out: T::zeros(vec![8, d]),
        };
        let out = macaron_ffn_half(&T::zeros(vec![2, d]), &ffn, &LnWeights::unit(d)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn macaron_half_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (d, f) = (4, 7);
        let ffn = rand_ffn(&mut rng, d, f);
        let ln_out = rand_ln(&mut rng, d);
        let x = rand_tensor(&mut rng, 2, d);
        let got = macaron_ffn_half(&x, &ffn, &ln_out).unwrap();
        let inner = matmul(&relu(&matmul(&ffn.ln.apply(&x).unwrap(), &ffn.lin_in).unwrap()), &ffn.lin_out).unwrap();
        let want = ln_out
            .apply(&add(&x, &scale(&inner, 0.5)).unwrap())
            .unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn compress_block_mean_and_onehot() {
        let block = T::from_rows(&[vec![1.0], vec![3.0]]);
        let uniform = T::new(vec![2], vec![0.5, 0.5]).unwrap();
        assert_eq!(compress_block(&block, &uniform).unwrap().data(), &[2.0]);

        let onehot = T::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert_eq!(compress_block(&block, &onehot).unwrap().data(), &[1.0]);
    }

    #[test]
    fn compress_block_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let block = rand_tensor(&mut rng, 4, 3);
        let w = T::new(vec![4], (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let got = compress_block(&block, &w).unwrap();
        for j in 0..3 {
            let want: f64 = (0..4).map(|t| w.data()[t] * block.row(t)[j]).sum();
            assert!((got.data()[j] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn compress_block_truncation_renormalizes() {
        // final short block: 3 rows against length-4 weights
        let block = T::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
        let w = T::new(vec![4], vec![0.25; 4]).unwrap();
        let got = compress_block(&block, &w).unwrap();
        assert!((got.data()[0] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn compress_block_empty_errors() {
        let w = T::new(vec![2], vec![0.5, 0.5]).unwrap();
        assert!(compress_block(&T::zeros(vec![0, 3]), &w).is_err());
    }

    #[test]
    fn memory_bank_offset_semantics() {
        assert_eq!(memory_bank_range(5, 2, 2), 1..3);
        assert!(memory_bank_range(1, 4, 1).is_empty());
        assert!(memory_bank_range(7, 0, 2).is_empty());
        assert_eq!(memory_bank_range(2, 4, 0), 0..2);
    }

    #[test]
    fn memory_bank_disjoint_from_left_context() {
        // L=8, c=4, S=2, O=2: left context covers the 2 preceding blocks,
        // the bank must sit strictly before them
        let (c, l, s, o) = (4usize, 8usize, 2usize, 2usize);
        for i in 0..12 {
            let bank = memory_bank_range(i, s, o);
            let left_frames = l.min(i * c); // frames i*c-L .. i*c
            let left_lo_block = (i * c - left_frames) / c;
            for j in bank {
                assert!(j < left_lo_block || left_frames == 0);
            }
        }
    }

    fn degenerate_cfg() -> ModelConfig {
        ModelConfig {
            left_context: 0,
            memory_slots: 0,
            memory_offset: 0,
            use_conv: false,
            use_macaron: false,
            use_talking_heads: false,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn degenerate_config_is_plain_transformer_layer() {
        // single block, no left context/memory/conv/macaron: the layer is
        // self-attention over [C;R] plus the FFN block
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cfg = degenerate_cfg();
        let w = rand_layer(&mut rng, &cfg);
        let blocks = rand_blocks(&mut rng, &cfg, &[(4, 1)]);
        let out = layer_forward_parallel(&blocks, &cfg, &w).unwrap();

        let x = concat_rows(&[&blocks[0].center, &blocks[0].lookahead]);
        let x_hat = w.ln_attn_in.apply(&x).unwrap();
        let z = add(
            &multi_head_attention(&x_hat, &x_hat, &x_hat, &w.attn, None).unwrap(),
            &x,
        )
        .unwrap();
        let want = w
            .ln_final
            .apply(&add(&z, &w.ffn2.apply(&z).unwrap()).unwrap())
            .unwrap();
        let got = concat_rows(&[&out[0].center, &out[0].lookahead]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_zero_ignores_block_one_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cfg = ModelConfig::default();
        let w = rand_layer(&mut rng, &cfg);
        let mut blocks = rand_blocks(&mut rng, &cfg, &[(4, 1), (4, 1)]);
        let out_a = layer_forward_parallel(&blocks, &cfg, &w).unwrap();
        for v in blocks[1].center.data_mut() {
            *v += 2.5;
        }
        let out_b = layer_forward_parallel(&blocks, &cfg, &w).unwrap();
        assert_eq!(out_a[0], out_b[0]);
        assert_ne!(out_a[1], out_b[1]);
    }

    fn assert_dual_path(cfg: &ModelConfig, sizes: &[(usize, usize)], seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_layer(&mut rng, cfg);
        let blocks = rand_blocks(&mut rng, cfg, sizes);
        let par = layer_forward_parallel(&blocks, cfg, &w).unwrap();
        let mut state = LayerState::new(cfg);
        for (i, b) in blocks.iter().enumerate() {
            let got = layer_forward_streaming(b, i, &mut state, cfg, &w).unwrap();
            for (a, e) in got
                .center
                .data()
                .iter()
                .chain(got.lookahead.data())
                .zip(par[i].center.data().iter().chain(par[i].lookahead.data()))
            {
                assert!((a - e).abs() <= tol, "block {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn streaming_equals_parallel_default_cfg() {
        assert_dual_path(
            &ModelConfig::default(),
            &[(4, 1), (4, 1), (4, 1), (2, 0)],
            35,
            1e-12,
        );
    }

    #[test]
    fn streaming_equals_parallel_single_block_fresh_state() {
        assert_dual_path(&ModelConfig::default(), &[(4, 1)], 36, 0.0);
    }

    #[test]
    fn paper_geometry_l8_c4_s2_o2_accepted() {
        let cfg = ModelConfig {
            left_context: 8,
            block_size: 4,
            memory_slots: 2,
            memory_offset: 2,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        assert_dual_path(&cfg, &[(4, 1); 7], 37, 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn streaming_equals_parallel_sampled_configs(
                seed in 0u64..10_000,
                use_conv in any::<bool>(),
                use_macaron in any::<bool>(),
                use_th in any::<bool>(),
                c in 1usize..5,
                r in 0usize..3,
                l in prop::sample::select(vec![0usize, 4, 8]),
                s in prop::sample::select(vec![0usize, 2]),
                o in prop::sample::select(vec![0usize, 2]),
                k in prop::sample::select(vec![1usize, 3, 7]),
                n_blocks in 1usize..5,
            ) {
                let cfg = ModelConfig {
                    model_dim: 8,
                    ffn_dim: 12,
                    num_heads: 2,
                    block_size: c,
                    lookahead: r,
                    left_context: l,
                    memory_slots: s,
                    memory_offset: o,
                    kernel: k,
                    use_conv,
                    use_macaron,
                    use_talking_heads: use_th,
                    ..ModelConfig::default()
                };
                let mut sizes: Vec<(usize, usize)> = (0..n_blocks).map(|_| (c, r)).collect();
                if let Some(last) = sizes.last_mut() {
                    last.1 = 0; // utterance tail has no lookahead
                }
                assert_dual_path(&cfg, &sizes, seed, 1e-12);
            }
        }
    }
}
