//! Interactive spatiotemporal tokenization.
//!
//! A `(C, T, J, E)` clip is optionally entity-shuffled, wrap-padded so each
//! axis divides its window length, cut into non-overlapping
//! `T_w x J_w x E_w` windows, and laid out as `(C, T_w, S, U)` with
//! `S = J_w * E_w`. Token `u` is ordered temporal block outermost, then joint
//! block, then entity block; inside a token the slot is `s = j * E_w + e`.
//! The embedding stack (pointwise conv, batch norm, leaky ReLU) lifts the
//! `C` coordinates to `C'` channels.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};
use crate::dataset::{compute_padding, SkeletonSequence};
use crate::layers::{BatchNorm, ForwardCtx, Module, Pointwise};
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("window lengths must be at least 1, got {0:?}")]
    ZeroWindow(WindowSpec),
    #[error("axis {axis} of length {len} is not divisible by window {w}; pad the clip first")]
    NotDivisible {
        axis: &'static str,
        len: usize,
        w: usize,
    },
    #[error("token layout mismatch: {0}")]
    Layout(String),
}

/// Non-overlapping window lengths along time, joints and entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub t_w: usize,
    pub j_w: usize,
    pub e_w: usize,
}

impl WindowSpec {
    pub fn new(t_w: usize, j_w: usize, e_w: usize) -> Result<Self, TokenizeError> {
        let w = WindowSpec { t_w, j_w, e_w };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), TokenizeError> {
        if self.t_w == 0 || self.j_w == 0 || self.e_w == 0 {
            return Err(TokenizeError::ZeroWindow(*self));
        }
        Ok(())
    }

    /// Slots per token, `J_w * E_w`.
    pub fn slots(&self) -> usize {
        self.j_w * self.e_w
    }

    /// Token grid for a clip of `t x j x e`, counting partial windows as whole.
    pub fn layout(&self, t: usize, j: usize, e: usize) -> ULayout {
        ULayout {
            t_blocks: t.div_ceil(self.t_w),
            j_blocks: j.div_ceil(self.j_w),
            e_blocks: e.div_ceil(self.e_w),
        }
    }
}

/// Factorization of the token count into temporal, joint and entity blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ULayout {
    pub t_blocks: usize,
    pub j_blocks: usize,
    pub e_blocks: usize,
}

impl ULayout {
    pub fn tokens(&self) -> usize {
        self.t_blocks * self.j_blocks * self.e_blocks
    }

    pub fn index(&self, tb: usize, jb: usize, eb: usize) -> usize {
        (tb * self.j_blocks + jb) * self.e_blocks + eb
    }

    pub fn blocks(&self, u: usize) -> (usize, usize, usize) {
        let eb = u % self.e_blocks;
        let jb = (u / self.e_blocks) % self.j_blocks;
        let tb = u / (self.e_blocks * self.j_blocks);
        (tb, jb, eb)
    }
}

/// Raw (pre-embedding) tokens of one clip: `(C, T_w, S, U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    pub data: Tensor<T>,
    pub layout: ULayout,
}

/// Draws a uniformly random entity order. Entities listed in `frozen` keep
/// their slot; the rest are shuffled among the remaining slots.
pub fn draw_permutation(entities: usize, frozen: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..entities).collect();
    let movable: Vec<usize> = (0..entities).filter(|e| !frozen.contains(e)).collect();
    let mut shuffled = movable.clone();
    shuffled.shuffle(rng);
    for (slot, src) in movable.iter().zip(shuffled) {
        perm[*slot] = src;
    }
    perm
}

/// Reorders the entity axis: output entity `i` is input entity `perm[i]`.
pub fn permute_entities<T: Copy>(data: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = data.shape();
    let e = s[3];
    assert_eq!(perm.len(), e, "permutation length must equal entity count");
    let src = data.data();
    let out = src
        .chunks(e)
        .flat_map(|row| perm.iter().map(move |&p| row[p]))
        .collect();
    Tensor::from_vec(s, out).expect("same shape")
}

/// Entity Rearrangement: a fresh random entity order when enabled, identity otherwise.
pub fn entity_rearrange(
    seq: &SkeletonSequence,
    rng: &mut impl Rng,
    enabled: bool,
    frozen: &[usize],
) -> SkeletonSequence {
    if !enabled {
        return seq.clone();
    }
    let perm = draw_permutation(seq.entities(), frozen, rng);
    SkeletonSequence {
        data: permute_entities(&seq.data, &perm),
        ..seq.clone()
    }
}

/// Pads `(C, T, J, E)` so every axis divides its window, replicating from the
/// start of each axis (index `i` of the padded axis reads `i mod n`).
pub fn pad_wrap<T: Copy>(data: &Tensor<T>, w: &WindowSpec) -> Result<Tensor<T>, TokenizeError> {
    w.validate()?;
    let s = data.shape();
    let (c, t, j, e) = (s[0], s[1], s[2], s[3]);
    let pt = compute_padding(t, w.t_w).expect("validated");
    let pj = compute_padding(j, w.j_w).expect("validated");
    let pe = compute_padding(e, w.e_w).expect("validated");
    if pt == 0 && pj == 0 && pe == 0 {
        return Ok(data.clone());
    }
    let (tp, jp, ep) = (t + pt, j + pj, e + pe);
    let mut out = Vec::with_capacity(c * tp * jp * ep);
    let src = data.data();
    for ci in 0..c {
        for ti in 0..tp {
            for ji in 0..jp {
                for ei in 0..ep {
                    out.push(src[((ci * t + ti % t) * j + ji % j) * e + ei % e]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[c, tp, jp, ep], out).expect("sized above"))
}

/// Cuts a padded `(C, T', J', E')` array into `(C, T_w, S, U)` tokens.
pub fn partition<T: Copy>(
    data: &Tensor<T>,
    w: &WindowSpec,
) -> Result<TokenBatch<T>, TokenizeError> {
    w.validate()?;
    let s = data.shape();
    let (c, t, j, e) = (s[0], s[1], s[2], s[3]);
    for (axis, len, wl) in [("T", t, w.t_w), ("J", j, w.j_w), ("E", e, w.e_w)] {
        if len % wl != 0 {
            return Err(TokenizeError::NotDivisible { axis, len, w: wl });
        }
    }
    let layout = w.layout(t, j, e);
    let (u_n, s_n) = (layout.tokens(), w.slots());
    let src = data.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for lt in 0..w.t_w {
            for lj in 0..w.j_w {
                for le in 0..w.e_w {
                    for u in 0..u_n {
                        let (tb, jb, eb) = layout.blocks(u);
                        let ti = tb * w.t_w + lt;
                        let ji = jb * w.j_w + lj;
                        let ei = eb * w.e_w + le;
                        out.push(src[((ci * t + ti) * j + ji) * e + ei]);
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), c * w.t_w * s_n * u_n);
    Ok(TokenBatch {
        data: Tensor::from_vec(&[c, w.t_w, s_n, u_n], out).expect("sized above"),
        layout,
    })
}

/// Inverse of [`partition`].
pub fn unpartition<T: Copy>(
    tokens: &TokenBatch<T>,
    w: &WindowSpec,
) -> Result<Tensor<T>, TokenizeError> {
    let s = tokens.data.shape();
    if s.len() != 4 {
        return Err(TokenizeError::Layout(format!(
            "expected rank 4 tokens, got {s:?}"
        )));
    }
    let layout = tokens.layout;
    let (c, tw, sn, un) = (s[0], s[1], s[2], s[3]);
    if tw != w.t_w || sn != w.slots() || un != layout.tokens() {
        return Err(TokenizeError::Layout(format!(
            "tokens {s:?} do not match window {w:?} with layout {layout:?}"
        )));
    }
    let (t, j, e) = (
        layout.t_blocks * w.t_w,
        layout.j_blocks * w.j_w,
        layout.e_blocks * w.e_w,
    );
    let mut out = vec![tokens.data.data()[0]; c * t * j * e];
    let src = tokens.data.data();
    let mut idx = 0;
    for ci in 0..c {
        for lt in 0..w.t_w {
            for lj in 0..w.j_w {
                for le in 0..w.e_w {
                    for u in 0..un {
                        let (tb, jb, eb) = layout.blocks(u);
                        let ti = tb * w.t_w + lt;
                        let ji = jb * w.j_w + lj;
                        let ei = eb * w.e_w + le;
                        out[((ci * t + ti) * j + ji) * e + ei] = src[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[c, t, j, e], out).expect("sized above"))
}

/// Pad then partition.
pub fn tokenize<T: Copy>(data: &Tensor<T>, w: &WindowSpec) -> Result<TokenBatch<T>, TokenizeError> {
    partition(&pad_wrap(data, w)?, w)
}

/// Token embedding: pointwise conv to `C'`, batch norm, leaky ReLU.
#[derive(Debug, Clone)]
pub struct EmbedParams<R> {
    pub conv: Pointwise<R>,
    pub norm: BatchNorm<R>,
    pub gamma: R,
}

impl<R: Real> EmbedParams<R> {
    pub fn new(c_in: usize, c_embed: usize, gamma: f64, rng: &mut impl Rng) -> Self {
        assert!(
            c_embed >= c_in,
            "embedding must not shrink the coordinate axis"
        );
        assert!(gamma >= 0.0, "negative slope must be non-negative");
        EmbedParams {
            conv: Pointwise::new("embed.conv", c_in, c_embed, rng),
            norm: BatchNorm::new("embed.norm", c_embed),
            gamma: R::lit(gamma),
        }
    }

    /// `tokens` is `(N, C, T_w, S, U)`.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        tokens: Var,
        ctx: &mut ForwardCtx<R>,
    ) -> autodiff::Result<Var> {
        let x = self.conv.forward(tape, tokens)?;
        let x = self.norm.forward(tape, x, ctx)?;
        Ok(tape.leaky_relu(x, self.gamma))
    }
}

impl<R: Real> Module<R> for EmbedParams<R> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>)) {
        self.conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<R>)) {
        self.norm.visit_buffers_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[R])) {
        self.norm.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn single_window_is_reshape() {
        let x = iota(&[2, 3, 2, 2]);
        let w = WindowSpec::new(3, 2, 2).unwrap();
        let tok = partition(&x, &w).unwrap();
        assert_eq!(tok.layout.tokens(), 1);
        assert_eq!(tok.data.shape(), &[2, 3, 4, 1]);
        assert_eq!(tok.data.data(), x.data());
        assert_eq!(unpartition(&tok, &w).unwrap(), x);
    }

    #[test]
    fn default_window_token_count() {
        let x = iota(&[3, 120, 25, 2]);
        let w = WindowSpec::new(20, 1, 2).unwrap();
        let tok = tokenize(&x, &w).unwrap();
        assert_eq!(tok.layout.tokens(), 150);
        assert_eq!(tok.data.shape(), &[3, 20, 2, 150]);
    }

    #[test]
    fn token_order_is_t_then_j_then_e() {
        let x = iota(&[1, 4, 2, 2]);
        let w = WindowSpec::new(2, 1, 1).unwrap();
        let tok = partition(&x, &w).unwrap();
        let l = tok.layout;
        assert_eq!((l.t_blocks, l.j_blocks, l.e_blocks), (2, 2, 2));
        // u = 5 -> (tb=1, jb=0, eb=1); local t=1 -> frame 3, joint 0, entity 1.
        assert_eq!(l.blocks(5), (1, 0, 1));
        assert_eq!(tok.data.at(&[0, 1, 0, 5]), x.at(&[0, 3, 0, 1]));
    }

    #[test]
    fn slot_order_is_joint_major() {
        let x = iota(&[1, 1, 2, 2]);
        let w = WindowSpec::new(1, 2, 2).unwrap();
        let tok = partition(&x, &w).unwrap();
        for lj in 0..2 {
            for le in 0..2 {
                assert_eq!(tok.data.at(&[0, 0, lj * 2 + le, 0]), x.at(&[0, 0, lj, le]));
            }
        }
    }

    #[test]
    fn partition_requires_padding() {
        let x = iota(&[2, 5, 1, 1]);
        let w = WindowSpec::new(2, 1, 1).unwrap();
        assert_eq!(
            partition(&x, &w),
            Err(TokenizeError::NotDivisible {
                axis: "T",
                len: 5,
                w: 2
            })
        );
    }

    #[test]
    fn wrap_padding_replicates_start() {
        let x = iota(&[1, 3, 1, 1]);
        let p = pad_wrap(&x, &WindowSpec::new(2, 1, 1).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 0.0]);
        let y = iota(&[1, 1, 1, 3]);
        let q = pad_wrap(&y, &WindowSpec::new(1, 1, 2).unwrap()).unwrap();
        assert_eq!(q.data(), &[0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn rearrange_disabled_is_identity() {
        let seq = SkeletonSequence::new(iota(&[2, 2, 2, 3]), 1, "x").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(entity_rearrange(&seq, &mut rng, false, &[]), seq);
    }

    #[test]
    fn frozen_entities_stay_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = draw_permutation(4, &[2], &mut rng);
            assert_eq!(p[2], 2);
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn unpartition_after_permutation_recovers_permuted() {
        let x = iota(&[2, 4, 3, 2]);
        let px = permute_entities(&x, &[1, 0]);
        let w = WindowSpec::new(2, 3, 1).unwrap();
        let back = unpartition(&partition(&px, &w).unwrap(), &w).unwrap();
        assert_eq!(back, px);
        assert_ne!(back, x);
    }

    #[test]
    fn identity_embedding_passes_first_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut emb = EmbedParams::<f64>::new(2, 3, 0.1, &mut rng);
        emb.conv.weight.tensor = Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap();
        emb.norm.eps = 1e-12;
        let x = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![0.5, 1.0, 2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let y = emb.forward(&mut tape, xv, &mut ctx).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 3, 1, 1, 2]);
        for (a, b) in out.data()[..4].iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(out.data()[4..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_input_gives_activated_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut emb = EmbedParams::<f64>::new(2, 2, 0.1, &mut rng);
        emb.conv.bias.tensor = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        emb.norm.shift.tensor = Tensor::from_vec(&[2], vec![0.25, 0.0]).unwrap();
        emb.norm.eps = 1e-12;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 2, 1, 1, 1]));
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let y = emb.forward(&mut tape, xv, &mut ctx).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.75).abs() < 1e-9);
        assert!((out[1] + 0.2).abs() < 1e-9);
    }
}
