//! Convolution block with a streaming-consistent depthwise stage.
//!
//! The per-frame pipeline is pointwise expansion -> GLU -> depthwise conv ->
//! layer norm -> swish -> pointwise projection, with a residual add around
//! the whole block. The depthwise kernel is left-aligned: the output at
//! frame t reads the k-1 preceding post-GLU frames plus frame t, so the
//! center branch never sees the future. The lookahead branch convolves each
//! block's lookahead frames padded on the left with the last k-1 post-GLU
//! center frames of the same block.

use crate::error::{Error, Result};
use crate::tensor::{add, concat_rows, glu_lastaxis, layer_norm, matmul, swish, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<S: Scalar> {
    /// Pointwise expansion `d x 2d`, feeds the GLU.
    pub pw1: Tensor<S>,
    /// Depthwise kernel `d x k`, one k-tap filter per channel.
    pub dw: Tensor<S>,
    pub ln_gain: Tensor<S>,
    pub ln_bias: Tensor<S>,
    /// Pointwise projection `d x d`.
    pub pw2: Tensor<S>,
}

impl<S: Scalar> ConvWeights<S> {
    pub fn kernel_size(&self) -> usize {
        self.dw.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.dw.rows()
    }
}

/// Depthwise left history carried across blocks: the last k-1 post-GLU
/// center activations, zeros at utterance start.
#[derive(Debug, Clone)]
pub struct ConvState<S: Scalar> {
    tail: Tensor<S>,
}

impl<S: Scalar> ConvState<S> {
    pub fn new(kernel_size: usize, dim: usize) -> Self {
        Self {
            tail: Tensor::zeros(vec![kernel_size - 1, dim]),
        }
    }

    pub fn tail(&self) -> &Tensor<S> {
        &self.tail
    }

    #[doc(hidden)]
    pub fn corrupt(&mut self) {
        if let Some(v) = self.tail.data_mut().first_mut() {
            *v = *v + S::one();
        }
    }
}

/// Valid depthwise convolution: `input` has `history rows + n` rows, output
/// row t is the tap-weighted sum of input rows t..t+k-1, per channel, in
/// fixed tap order.
pub fn depthwise_valid<S: Scalar>(input: &Tensor<S>, dw: &Tensor<S>) -> Tensor<S> {
    let k = dw.cols();
    let d = dw.rows();
    let n = input.rows() + 1 - k;
    let mut out = Tensor::zeros(vec![n, d]);
    for t in 0..n {
        for c in 0..d {
            let mut acc = S::zero();
            for tap in 0..k {
                acc = acc + dw.row(c)[tap] * input.row(t + tap)[c];
            }
            out.data_mut()[t * d + c] = acc;
        }
    }
    out
}

/// Last `n` rows of `[prefix; x]`, zero-padded on the left if the pair is
/// still shorter than `n`.
fn last_rows_with_prefix<S: Scalar>(prefix: &Tensor<S>, x: &Tensor<S>, n: usize) -> Tensor<S> {
    let joined = concat_rows(&[prefix, x]);
    let have = joined.rows();
    if have >= n {
        joined.slice_rows(have - n, have)
    } else {
        concat_rows(&[&Tensor::zeros(vec![n - have, joined.cols()]), &joined])
    }
}

fn postlude<S: Scalar>(
    conv_out: &Tensor<S>,
    residual: &Tensor<S>,
    w: &ConvWeights<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let normed = layer_norm(conv_out, &w.ln_gain, &w.ln_bias, eps)?;
    add(residual, &matmul(&swish(&normed), &w.pw2)?)
}

/// Whole-utterance conv block. `center` is the concatenated center frames,
/// `block_bounds` its partition into blocks, `right[i]` the lookahead frames
/// hard-copied for block i.
pub fn conv_block_parallel<S: Scalar>(
    center: &Tensor<S>,
    right: &[Tensor<S>],
    block_bounds: &[(usize, usize)],
    w: &ConvWeights<S>,
    eps: S,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    if right.len() != block_bounds.len() {
        return Err(Error::InvalidConfig(
            "right blocks and block_bounds lengths differ".into(),
        ));
    }
    let mut cursor = 0;
    for &(s, e) in block_bounds {
        if s != cursor || e < s {
            return Err(Error::InvalidConfig(format!(
                "block_bounds is not a partition at ({s}, {e})"
            )));
        }
        cursor = e;
    }
    if cursor != center.rows() {
        return Err(Error::InvalidConfig(format!(
            "block_bounds cover {cursor} rows, center has {}",
            center.rows()
        )));
    }

    let k = w.kernel_size();
    let d = w.model_dim();
    let g_center = glu_lastaxis(&matmul(center, &w.pw1)?)?;

    // center branch: k-1 zero history at utterance start
    let zeros = Tensor::zeros(vec![k - 1, d]);
    let hist = concat_rows(&[&zeros, &g_center]);
    let dw_center = depthwise_valid(&hist, &w.dw);
    let center_out = postlude(&dw_center, center, w, eps)?;

    // lookahead branch: each block padded with its own trailing k-1
    // post-GLU center frames (borrowing older frames for short blocks)
    let mut right_out = Vec::with_capacity(right.len());
    for (i, r) in right.iter().enumerate() {
        if r.rows() == 0 {
            right_out.push(Tensor::zeros(vec![0, d]));
            continue;
        }
        let (_, end) = block_bounds[i];
        let pad = last_rows_with_prefix(&Tensor::zeros(vec![0, d]), &hist.slice_rows(0, end + k - 1), k - 1);
        let g_r = glu_lastaxis(&matmul(r, &w.pw1)?)?;
        let dw_r = depthwise_valid(&concat_rows(&[&pad, &g_r]), &w.dw);
        right_out.push(postlude(&dw_r, r, w, eps)?);
    }
    Ok((center_out, right_out))
}

/// Per-block conv forward; identical math to the parallel path restricted
/// to one block, with `state.tail` standing in for the preceding blocks'
/// post-GLU center frames. A zero-row `right_i` gives the causal mode.
pub fn conv_block_streaming<S: Scalar>(
    center_i: &Tensor<S>,
    right_i: &Tensor<S>,
    state: &mut ConvState<S>,
    w: &ConvWeights<S>,
    eps: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let k = w.kernel_size();
    let d = w.model_dim();
    if state.tail.rows() != k - 1 || state.tail.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "conv_block_streaming state",
            lhs: state.tail.shape().to_vec(),
            rhs: vec![k - 1, d],
        });
    }
    let g_center = glu_lastaxis(&matmul(center_i, &w.pw1)?)?;
    let hist = concat_rows(&[&state.tail, &g_center]);
    let center_out = postlude(&depthwise_valid(&hist, &w.dw), center_i, w, eps)?;

    let new_tail = last_rows_with_prefix(&state.tail, &g_center, k - 1);
    let right_out = if right_i.rows() == 0 {
        Tensor::zeros(vec![0, d])
    } else {
        let g_r = glu_lastaxis(&matmul(right_i, &w.pw1)?)?;
        postlude(
            &depthwise_valid(&concat_rows(&[&new_tail, &g_r]), &w.dw),
            right_i,
            w,
            eps,
        )?
    };
    state.tail = new_tail;
    Ok((center_out, right_out))
}
