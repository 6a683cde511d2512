//! Masked scaled-dot-product attention, multi-head attention, and the
//! talking-heads variant (learned h-by-h mixing of the logits before the
//! softmax and of the attention weights after it).

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_lastaxis, Scalar, Tensor};

/// Boolean query-by-key mask. `true` means the key may be attended.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    num_queries: usize,
    num_keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(num_queries: usize, num_keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != num_queries * num_keys {
            return Err(Error::InvalidShape {
                op: "AttentionMask::new",
                shape: vec![num_queries, num_keys],
                reason: "mask length does not match dims",
            });
        }
        Ok(Self {
            num_queries,
            num_keys,
            allowed,
        })
    }

    pub fn allow_all(num_queries: usize, num_keys: usize) -> Self {
        Self {
            num_queries,
            num_keys,
            allowed: vec![true; num_queries * num_keys],
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.num_keys + k]
    }
}

/// Projection weights of one attention layer. `d` must divide evenly
/// into `num_heads` slices.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights<S: Scalar> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub num_heads: usize,
}

impl<S: Scalar> MhaWeights<S> {
    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.shape() != [d, d] {
                return Err(Error::InvalidConfig(format!(
                    "attention weight {name} must be {d}x{d}, got {:?}",
                    w.shape()
                )));
            }
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {d} not divisible by {} heads",
                self.num_heads
            )));
        }
        Ok(())
    }
}

/// Pre/post-softmax head mixing matrices, each `h x h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TalkingHeadsWeights<S: Scalar> {
    pub w_l: Tensor<S>,
    pub w_r: Tensor<S>,
}

impl<S: Scalar> TalkingHeadsWeights<S> {
    pub fn identity(h: usize) -> Self {
        Self {
            w_l: Tensor::eye(h),
            w_r: Tensor::eye(h),
        }
    }
}

fn check_mask(mask: Option<&AttentionMask>, f_q: usize, f_k: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.num_queries != f_q || m.num_keys != f_k {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![f_q, f_k],
                rhs: vec![m.num_queries, m.num_keys],
            });
        }
    }
    Ok(())
}

/// logits = q k^T / sqrt(d), masked entries forced to -inf.
fn masked_logits<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<S>> {
    let d_h = q.cols();
    let scale = S::from_f64((d_h as f64).sqrt()).recip();
    let (f_q, f_k) = (q.rows(), k.rows());
    let mut data = vec![S::zero(); f_q * f_k];
    for i in 0..f_q {
        for j in 0..f_k {
            if mask.map_or(true, |m| m.allows(i, j)) {
                let mut acc = S::zero();
                for (t, &qv) in q.row(i).iter().enumerate() {
                    acc = acc + qv * k.row(j)[t];
                }
                data[i * f_k + j] = acc * scale;
            } else {
                data[i * f_k + j] = S::neg_infinity();
            }
        }
    }
    Tensor::new(vec![f_q, f_k], data)
}

/// Single-head attention: softmax(q k^T / sqrt(d)) v, with optional mask.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<S>> {
    if k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    check_mask(mask, q.rows(), k.rows())?;
    let weights = softmax_lastaxis(&masked_logits(q, k, mask)?)?;
    matmul(&weights, v)
}

fn head_slice<S: Scalar>(x: &Tensor<S>, head: usize, d_h: usize) -> Tensor<S> {
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * d_h);
    for i in 0..rows {
        let r = x.row(i);
        data.extend_from_slice(&r[head * d_h..(head + 1) * d_h]);
    }
    Tensor::new(vec![rows, d_h], data).unwrap()
}

fn concat_heads<S: Scalar>(heads: &[Tensor<S>]) -> Tensor<S> {
    let rows = heads[0].rows();
    let d_h = heads[0].cols();
    let mut data = Vec::with_capacity(rows * d_h * heads.len());
    for i in 0..rows {
        for h in heads {
            data.extend_from_slice(h.row(i));
        }
    }
    Tensor::new(vec![rows, d_h * heads.len()], data).unwrap()
}

/// Attention over already-projected query/key/value rows (each `f x d`).
/// Splits into heads, optionally mixes logits and attention weights with
/// talking-heads matrices, and applies the output projection `w_o`.
///
/// The streaming runtime caches projected key/value rows across blocks and
/// feeds them here directly; the public wrappers below project first.
pub fn attention_projected<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    num_heads: usize,
    w_o: &Tensor<S>,
    th: Option<&TalkingHeadsWeights<S>>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<S>> {
    let d = q.cols();
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "model dim {d} not divisible by {num_heads} heads"
        )));
    }
    check_mask(mask, q.rows(), k.rows())?;
    let d_h = d / num_heads;
    match th {
        None => {
            let mut heads = Vec::with_capacity(num_heads);
            for h in 0..num_heads {
                heads.push(scaled_dot_attention(
                    &head_slice(q, h, d_h),
                    &head_slice(k, h, d_h),
                    &head_slice(v, h, d_h),
                    mask,
                )?);
            }
            matmul(&concat_heads(&heads), w_o)
        }
        Some(th) => talking_heads_core(q, k, v, num_heads, w_o, th, mask),
    }
}

/// Standard multi-head attention with per-head scale sqrt(d/h).
pub fn multi_head_attention<S: Scalar>(
    q_in: &Tensor<S>,
    k_in: &Tensor<S>,
    v_in: &Tensor<S>,
    w: &MhaWeights<S>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<S>> {
    w.validate()?;
    let q = matmul(q_in, &w.w_q)?;
    let k = matmul(k_in, &w.w_k)?;
    let v = matmul(v_in, &w.w_v)?;
    attention_projected(&q, &k, &v, w.num_heads, &w.w_o, None, mask)
}

/// Talking-heads attention. The logit cube is mixed across the head axis
/// by `w_l`, masked, softmaxed over keys, mixed again by `w_r`, then the
/// usual value mixture and output projection follow.
///
/// The mask is applied after the `w_l` mixing so masked keys stay at -inf
/// and cannot re-enter the normalization through head mixing.
pub fn talking_heads_attention<S: Scalar>(
    q_in: &Tensor<S>,
    k_in: &Tensor<S>,
    v_in: &Tensor<S>,
    w: &MhaWeights<S>,
    th: &TalkingHeadsWeights<S>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<S>> {
    w.validate()?;
    let q = matmul(q_in, &w.w_q)?;
    let k = matmul(k_in, &w.w_k)?;
    let v = matmul(v_in, &w.w_v)?;
    attention_projected(&q, &k, &v, w.num_heads, &w.w_o, Some(th), mask)
}

fn talking_heads_core<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    num_heads: usize,
    w_o: &Tensor<S>,
    th: &TalkingHeadsWeights<S>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<S>> {
    let h = num_heads;
    if th.w_l.shape() != [h, h] || th.w_r.shape() != [h, h] {
        return Err(Error::InvalidConfig(format!(
            "talking-heads matrices must be {h}x{h}"
        )));
    }
    let d = q.cols();
    let d_h = d / h;
    let (f_q, f_k) = (q.rows(), k.rows());

    // raw per-head logits, no mask yet
    let mut logits = Vec::with_capacity(h);
    for hi in 0..h {
        logits.push(masked_logits(
            &head_slice(q, hi, d_h),
            &head_slice(k, hi, d_h),
            None,
        )?);
    }

    // mix across heads, then mask, then softmax
    let mut probs = Vec::with_capacity(h);
    for hj in 0..h {
        let mut mixed = vec![S::zero(); f_q * f_k];
        for hi in 0..h {
            let c = th.w_l.row(hi)[hj];
            for (dst, &src) in mixed.iter_mut().zip(logits[hi].data()) {
                *dst = *dst + c * src;
            }
        }
        if let Some(m) = mask {
            for i in 0..f_q {
                for j in 0..f_k {
                    if !m.allows(i, j) {
                        mixed[i * f_k + j] = S::neg_infinity();
                    }
                }
            }
        }
        probs.push(softmax_lastaxis(&Tensor::new(vec![f_q, f_k], mixed)?)?);
    }

    // post-softmax mixing, value mixture, concat, output projection
    let mut heads = Vec::with_capacity(h);
    for hj in 0..h {
        let mut mixed = vec![S::zero(); f_q * f_k];
        for hi in 0..h {
            let c = th.w_r.row(hi)[hj];
            for (dst, &src) in mixed.iter_mut().zip(probs[hi].data()) {
                *dst = *dst + c * src;
            }
        }
        let weights = Tensor::new(vec![f_q, f_k], mixed)?;
        heads.push(matmul(&weights, &head_slice(v, hj, d_h))?);
    }
    matmul(&concat_heads(&heads), w_o)
}
