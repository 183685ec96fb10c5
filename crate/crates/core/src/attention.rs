//! Chunk layout, block-causal masks, rotary encoding and masked attention.
//!
//! A generation window holds `T + 1` latent frames: frame 0 is the clean
//! reference chunk and frames `1..=T` are split into `T / C` generation
//! chunks. Chunk `i` (1-based) spans frames `(i-1)·C + 1 ..= i·C`. Attention
//! is causal between chunks and bidirectional inside a chunk; masks are built
//! per frame and lifted to tokens, every token of a frame sharing its row.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    generated_frames: usize,
    chunk: usize,
}

impl ChunkLayout {
    /// `generated_frames` is `T` (the reference frame is not counted).
    pub fn new(generated_frames: usize, chunk: usize) -> Result<Self, Error> {
        if chunk == 0 || generated_frames == 0 || !generated_frames.is_multiple_of(chunk) {
            return Err(Error::Layout(format!(
                "window of {generated_frames} frames is not a positive multiple of chunk size {chunk}"
            )));
        }
        Ok(Self {
            generated_frames,
            chunk,
        })
    }

    pub fn generated_frames(&self) -> usize {
        self.generated_frames
    }

    /// `T + 1`, including the reference frame.
    pub fn window_frames(&self) -> usize {
        self.generated_frames + 1
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk
    }

    pub fn num_chunks(&self) -> usize {
        self.generated_frames / self.chunk
    }

    /// Chunk index of a frame; the reference frame is chunk 0.
    pub fn chunk_of(&self, frame: usize) -> usize {
        chunk_of(frame, self.chunk)
    }

    /// Inclusive frame range `(s_i, e_i)` of generation chunk `i ≥ 1`.
    pub fn span(&self, i: usize) -> (usize, usize) {
        chunk_span(i, self.chunk)
    }
}

pub fn chunk_of(frame: usize, chunk: usize) -> usize {
    frame.div_ceil(chunk)
}

pub fn chunk_span(i: usize, chunk: usize) -> (usize, usize) {
    assert!(i >= 1, "generation chunks are 1-based");
    ((i - 1) * chunk + 1, i * chunk)
}

/// Frame-level visibility matrix, `query_frames × key_frames`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    query_frames: usize,
    key_frames: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(query_frames: usize, key_frames: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(query_frames * key_frames);
        for q in 0..query_frames {
            for k in 0..key_frames {
                allowed.push(f(q, k));
            }
        }
        Self {
            query_frames,
            key_frames,
            allowed,
        }
    }

    pub fn full(query_frames: usize, key_frames: usize) -> Self {
        Self::from_fn(query_frames, key_frames, |_, _| true)
    }

    pub fn query_frames(&self) -> usize {
        self.query_frames
    }

    pub fn key_frames(&self) -> usize {
        self.key_frames
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.key_frames + k]
    }

    /// Keys visible from query frame `q`.
    pub fn visible(&self, q: usize) -> Vec<usize> {
        (0..self.key_frames).filter(|&k| self.allowed(q, k)).collect()
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Token-level mask, row-major `[q_frames·q_tokens, k_frames·k_tokens]`.
    pub fn lift(&self, q_tokens: usize, k_tokens: usize) -> Vec<bool> {
        let cols = self.key_frames * k_tokens;
        let mut out = Vec::with_capacity(self.query_frames * q_tokens * cols);
        for q in 0..self.query_frames {
            let row: Vec<bool> = (0..cols).map(|c| self.allowed(q, c / k_tokens)).collect();
            for _ in 0..q_tokens {
                out.extend_from_slice(&row);
            }
        }
        out
    }
}

/// `allowed(q, k) ⇔ chunk_of(k) ≤ chunk_of(q)` over the `T + 1` window frames.
pub fn build_block_causal_mask(layout: &ChunkLayout) -> AttentionMask {
    let f = layout.window_frames();
    AttentionMask::from_fn(f, f, |q, k| layout.chunk_of(k) <= layout.chunk_of(q))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    pub head_dim: usize,
    pub theta_base: f64,
    /// Largest positional index seen during training.
    pub max_index: usize,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta_base: f64, max_index: usize) -> Result<Self, Error> {
        if !head_dim.is_multiple_of(2) {
            return Err(TensorError::OddHeadDim(head_dim).into());
        }
        if !(theta_base > 1.0) {
            return Err(Error::Config(format!("rope theta base must exceed 1, got {theta_base}")));
        }
        Ok(Self {
            head_dim,
            theta_base,
            max_index,
        })
    }
}

/// Rotates consecutive pairs of every head in place. Row `r` of `data`
/// (width `cols`) is rotated by `sign · positions[r] · theta^(-2j/head_dim)`
/// on pair `j`.
pub(crate) fn rotate_rows(data: &mut [f64], cols: usize, positions: &[f64], head_dim: usize, theta: f64, sign: f64) {
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| theta.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0.0 {
            continue;
        }
        let row = &mut data[r * cols..(r + 1) * cols];
        let (sin, cos): (Vec<f64>, Vec<f64>) = inv_freq.iter().map(|f| (sign * pos * f).sin_cos()).unzip();
        for head in row.chunks_mut(head_dim) {
            for j in 0..half {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * cos[j] - b * sin[j];
                head[2 * j + 1] = a * sin[j] + b * cos[j];
            }
        }
    }
}

/// Rotary encoding of `x: [frames, heads, head_dim]` with one index per frame.
pub fn rope_apply(x: &Tensor, indices: &[usize], params: &RopeParams) -> Result<Tensor, Error> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(TensorError::Rank {
            op: "rope_apply",
            expected: 3,
            shape: shape.to_vec(),
        }
        .into());
    }
    if !shape[2].is_multiple_of(2) {
        return Err(TensorError::OddHeadDim(shape[2]).into());
    }
    if shape[2] != params.head_dim || indices.len() != shape[0] {
        return Err(TensorError::Length {
            shape: shape.to_vec(),
            len: indices.len(),
        }
        .into());
    }
    let cols = shape[1] * shape[2];
    let mut data = x.data().to_vec();
    let pos: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
    rotate_rows(&mut data, cols, &pos, params.head_dim, params.theta_base, 1.0);
    Ok(Tensor::new(shape, data)?)
}

/// Multi-head scaled dot-product attention on a tape.
///
/// `q: [Rq, heads·d]`, `k, v: [Rk, heads·d]`. `allowed` is a token-level
/// `[Rq, Rk]` mask; `None` means everything is visible. A query row with no
/// visible key is an error.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    allowed: Option<&[bool]>,
    scale: f64,
) -> Result<Var, TensorError> {
    let (rq, width) = tape.value(q).dims2()?;
    let (rk, kw) = tape.value(k).dims2()?;
    let (rv, vw) = tape.value(v).dims2()?;
    if kw != width || rv != rk || heads == 0 || width % heads != 0 || vw % heads != 0 {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: vec![rq, width],
            rhs: vec![rk, kw],
        });
    }
    let d = width / heads;
    let dv = vw / heads;
    let full = vec![true; rq * rk];
    let mask = allowed.unwrap_or(&full);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d, d)?,
                tape.slice_cols(k, h * d, d)?,
                tape.slice_cols(v, h * dv, dv)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, mask)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Attention logits `q·kᵀ·scale` for one head, outside any tape.
pub fn attention_logits(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor, TensorError> {
    Ok(q.matmul(&k.transpose2()?)?.map(|v| v * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_rejects_non_multiple() {
        assert!(ChunkLayout::new(7, 3).is_err());
        assert!(ChunkLayout::new(6, 0).is_err());
    }

    #[test]
    fn chunk_spans_follow_ceil_rule() {
        let l = ChunkLayout::new(12, 3).unwrap();
        assert_eq!(l.span(1), (1, 3));
        assert_eq!(l.span(2), (4, 6));
        assert_eq!(l.chunk_of(0), 0);
        assert_eq!(l.chunk_of(3), 1);
        assert_eq!(l.chunk_of(4), 2);
    }

    #[test]
    fn block_causal_c3_t6() {
        let m = build_block_causal_mask(&ChunkLayout::new(6, 3).unwrap());
        assert_eq!(m.visible(0), vec![0]);
        assert_eq!(m.visible(2), vec![0, 1, 2, 3]);
        assert_eq!(m.visible(4), (0..=6).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_one_is_frame_causal() {
        let m = build_block_causal_mask(&ChunkLayout::new(5, 1).unwrap());
        for q in 0..6 {
            assert_eq!(m.visible(q), (0..=q).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_chunk_window() {
        let m = build_block_causal_mask(&ChunkLayout::new(4, 4).unwrap());
        assert_eq!(m.visible(0), vec![0]);
        for q in 1..5 {
            assert_eq!(m.visible(q), (0..5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn lift_broadcasts_frames_to_tokens() {
        let m = AttentionMask::from_fn(2, 2, |q, k| k <= q);
        let t = m.lift(2, 2);
        assert_eq!(&t[0..4], &[true, true, false, false]);
        assert_eq!(&t[4..8], &[true, true, false, false]);
        assert_eq!(&t[8..12], &[true; 4]);
    }

    #[test]
    fn rope_zero_index_is_identity() {
        let x = Tensor::from_fn(&[3, 2, 4], |i| i as f64 * 0.1 - 1.0);
        let p = RopeParams::new(4, 10_000.0, 16).unwrap();
        assert_eq!(rope_apply(&x, &[0, 0, 0], &p).unwrap(), x);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let x = Tensor::zeros(&[1, 1, 3]);
        let p = RopeParams {
            head_dim: 3,
            theta_base: 10_000.0,
            max_index: 4,
        };
        assert!(rope_apply(&x, &[1], &p).is_err());
        assert!(RopeParams::new(3, 10_000.0, 4).is_err());
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let k = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
        let v = tape.constant(Tensor::from_fn(&[1, 4], |i| 1.0 + i as f64));
        let o = attention(&mut tape, q, k, v, 2, None, 0.5).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(o).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn all_true_mask_matches_unmasked() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()));
        let k = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.3).cos()));
        let v = tape.constant(Tensor::from_fn(&[5, 4], |i| i as f64 * 0.1));
        let a = attention(&mut tape, q, k, v, 2, None, 0.5).unwrap();
        let full = vec![true; 15];
        let b = attention(&mut tape, q, k, v, 2, Some(&full), 0.5).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn empty_query_row_errors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::ones(&[2, 2]));
        let k = tape.constant(Tensor::ones(&[2, 2]));
        let mask = [true, true, false, false];
        assert!(attention(&mut tape, q, k, k, 1, Some(&mask), 1.0).is_err());
    }
}
