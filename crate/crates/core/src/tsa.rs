//! Token self-attention blocks.
//!
//! Each head projects `x + PE` to queries and keys with pointwise
//! convolutions, takes its values straight from a channel slice of `x`, and
//! mixes tokens with `alpha * tanh(Q K^T / sqrt(C_beta)) + M`. The
//! concatenated heads go through a token-axis convolution (`k_u`), a
//! pointwise feed-forward with the residual injected both inside and
//! outside, and a temporal-axis convolution with a residual (`k_t`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Axis, Result, Tape, Var};
use crate::layers::{AxisConv, BatchNorm, ForwardCtx, Module, Pointwise};
use crate::tensor::{Parameter, Real, Tensor};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsaBlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub heads: usize,
    /// Query/key channels per head.
    pub c_qkv: usize,
    pub k_u: usize,
    pub k_t: usize,
    pub gamma: f64,
    /// Temporal aggregation on/off (ablation switch).
    #[serde(default = "default_true")]
    pub temporal_aggregation: bool,
}

impl TsaBlockConfig {
    /// Defaults: 4 heads, `c_qkv = c_in / 4`, `k_u = k_t = 3`, slope 0.1.
    pub fn standard(c_in: usize, c_out: usize) -> Self {
        TsaBlockConfig {
            c_in,
            c_out,
            heads: 4,
            c_qkv: (c_in / 4).max(1),
            k_u: 3,
            k_t: 3,
            gamma: 0.1,
            temporal_aggregation: true,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.c_in == 0 {
            return Err("c_in must be positive".into());
        }
        if self.c_out != self.c_in && self.c_out != 2 * self.c_in {
            return Err(format!(
                "c_out must equal c_in or 2*c_in, got c_in={} c_out={}",
                self.c_in, self.c_out
            ));
        }
        if self.heads == 0 || !self.c_in.is_multiple_of(self.heads) {
            return Err(format!(
                "heads ({}) must be positive and divide c_in ({})",
                self.heads, self.c_in
            ));
        }
        if self.c_qkv == 0 {
            return Err("c_qkv must be positive".into());
        }
        for (name, k) in [("k_u", self.k_u), ("k_t", self.k_t)] {
            if k % 2 == 0 {
                return Err(format!("{name} must be odd, got {k}"));
            }
        }
        if self.gamma < 0.0 {
            return Err("gamma must be non-negative".into());
        }
        Ok(())
    }
}

/// Sinusoidal encoding of the token index, constant across `T_w` and `S`:
/// even channels `sin(u / 10000^(c/C))`, odd channels `cos(u / 10000^((c-1)/C))`.
pub fn positional_encoding<R: Real>(c: usize, t_w: usize, s: usize, u: usize) -> Tensor<R> {
    let inner = t_w * s;
    let mut data = Vec::with_capacity(c * inner * u);
    for ci in 0..c {
        let even = ci - ci % 2;
        let rate = 10000f64.powf(even as f64 / c as f64);
        let row: Vec<R> = (0..u)
            .map(|ui| {
                let a = ui as f64 / rate;
                R::lit(if ci % 2 == 0 { a.sin() } else { a.cos() })
            })
            .collect();
        for _ in 0..inner {
            data.extend_from_slice(&row);
        }
    }
    Tensor::from_vec(&[c, t_w, s, u], data).expect("sized above")
}

#[derive(Debug, Clone)]
pub struct TsaBlockParams<R> {
    pub query: Vec<Pointwise<R>>,
    pub key: Vec<Pointwise<R>>,
    pub alpha: Vec<Parameter<R>>,
    pub m: Vec<Parameter<R>>,
    pub ffn_tokens: AxisConv<R>,
    pub norm_ffn: BatchNorm<R>,
    pub residual: Option<Pointwise<R>>,
    pub ffn_out: Pointwise<R>,
    pub ta: Option<AxisConv<R>>,
    pub norm_out: BatchNorm<R>,
}

#[derive(Debug, Clone)]
pub struct TsaBlock<R> {
    pub config: TsaBlockConfig,
    pub tokens: usize,
    pub params: TsaBlockParams<R>,
}

impl<R: Real> TsaBlock<R> {
    /// `alpha = 1`, `M = 0`, convolutions uniform in `±1/sqrt(fan_in)`.
    pub fn new(prefix: &str, config: TsaBlockConfig, tokens: usize, rng: &mut impl Rng) -> Self {
        config.validate().expect("validated block config");
        let c = &config;
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut alpha = Vec::new();
        let mut m = Vec::new();
        for h in 0..c.heads {
            query.push(Pointwise::new(
                &format!("{prefix}.head{h}.query"),
                c.c_in,
                c.c_qkv,
                rng,
            ));
            key.push(Pointwise::new(
                &format!("{prefix}.head{h}.key"),
                c.c_in,
                c.c_qkv,
                rng,
            ));
            alpha.push(Parameter::new(
                format!("{prefix}.head{h}.alpha"),
                Tensor::full(&[1], R::one()),
            ));
            m.push(Parameter::new(
                format!("{prefix}.head{h}.m"),
                Tensor::zeros(&[tokens, tokens]),
            ));
        }
        let ffn_tokens = AxisConv::new(
            &format!("{prefix}.ffn_tokens"),
            c.c_in,
            c.c_out,
            c.k_u,
            Axis::U,
            rng,
        );
        let residual = (c.c_out != c.c_in)
            .then(|| Pointwise::new(&format!("{prefix}.residual"), c.c_in, c.c_out, rng));
        let ffn_out = Pointwise::new(&format!("{prefix}.ffn_out"), c.c_out, c.c_out, rng);
        let ta = c.temporal_aggregation.then(|| {
            AxisConv::new(
                &format!("{prefix}.ta"),
                c.c_out,
                c.c_out,
                c.k_t,
                Axis::T,
                rng,
            )
        });
        TsaBlock {
            params: TsaBlockParams {
                query,
                key,
                alpha,
                m,
                ffn_tokens,
                norm_ffn: BatchNorm::new(&format!("{prefix}.norm_ffn"), c.c_out),
                residual,
                ffn_out,
                ta,
                norm_out: BatchNorm::new(&format!("{prefix}.norm_out"), c.c_out),
            },
            tokens,
            config,
        }
    }

    fn check_input(&self, tape: &Tape<R>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 5 {
            return Err(crate::tensor::ShapeError::Rank {
                op: "tsa block",
                expected: 5,
                found: s.len(),
            }
            .into());
        }
        if s[1] != self.config.c_in {
            return Err(crate::tensor::ShapeError::mismatch(
                "block channels (C_in)",
                self.config.c_in,
                s[1],
            )
            .into());
        }
        if s[4] != self.tokens {
            return Err(
                crate::tensor::ShapeError::mismatch("token axis (U)", self.tokens, s[4]).into(),
            );
        }
        Ok(())
    }

    /// Query, key and value of head `h`. `x_pe` is `x + PE`.
    pub fn qkv_project(
        &self,
        tape: &mut Tape<R>,
        x: Var,
        x_pe: Var,
        h: usize,
    ) -> Result<(Var, Var, Var)> {
        let q = self.params.query[h].forward(tape, x_pe)?;
        let k = self.params.key[h].forward(tape, x_pe)?;
        let group = self.config.c_in / self.config.heads;
        let v = tape.slice_channels(x, h * group, group)?;
        Ok((q, k, v))
    }

    /// `(N, C_in, T_w, S, U)` to `(N, C_out, T_w, S, U)`.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        x: Var,
        ctx: &mut ForwardCtx<R>,
        block_index: usize,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let c = &self.config;
        let s = tape.shape(x).to_vec();
        let (t_w, slots) = (s[2], s[3]);
        let pe = tape.constant(positional_encoding(c.c_in, t_w, slots, self.tokens));
        let x_pe = tape.add_broadcast(x, pe)?;
        let c_beta = (t_w * slots * c.c_qkv) as f64;

        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let (q, k, v) = self.qkv_project(tape, x, x_pe, h)?;
            let alpha = tape.param(&self.params.alpha[h]);
            let m = tape.param(&self.params.m[h]);
            let scores = attention_scores(tape, q, k, alpha, m, c_beta)?;
            if ctx.record_attention {
                ctx.attention
                    .push((block_index, h, tape.value(scores).clone()));
            }
            heads.push(tape.apply_scores(scores, v)?);
        }
        let xh = tape.concat_channels(&heads)?;

        let hat = self.params.ffn_tokens.forward(tape, xh)?;
        let hat = self.params.norm_ffn.forward(tape, hat, ctx)?;
        let hat = tape.leaky_relu(hat, R::lit(c.gamma));

        let res = match &self.params.residual {
            Some(proj) => proj.forward(tape, x)?,
            None => x,
        };
        let inner = tape.add(hat, res)?;
        let ffn = self.params.ffn_out.forward(tape, inner)?;
        let acute = tape.add(ffn, res)?;

        let out = match &self.params.ta {
            Some(conv) => temporal_aggregate(tape, acute, conv)?,
            None => acute,
        };
        let out = self.params.norm_out.forward(tape, out, ctx)?;
        Ok(tape.leaky_relu(out, R::lit(c.gamma)))
    }
}

/// `alpha * tanh(contract(q, k) / sqrt(c_beta)) + M`, shape `(N, U, U)`.
pub fn attention_scores<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    alpha: Var,
    m: Var,
    c_beta: f64,
) -> Result<Var> {
    if c_beta <= 0.0 {
        return Err(AutodiffError::Config("C_beta must be positive".into()));
    }
    let g = tape.attention_contract(q, k)?;
    let g = tape.scale(g, R::lit(1.0 / c_beta.sqrt()));
    let g = tape.tanh(g);
    let g = tape.scale_by(g, alpha)?;
    tape.add_broadcast(g, m)
}

/// Temporal convolution plus residual.
pub fn temporal_aggregate<R: Real>(tape: &mut Tape<R>, x: Var, conv: &AxisConv<R>) -> Result<Var> {
    let y = conv.forward(tape, x)?;
    tape.add(y, x)
}

impl<R: Real> Module<R> for TsaBlock<R> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>)) {
        let p = &self.params;
        for h in 0..self.config.heads {
            p.query[h].visit_params(f);
            p.key[h].visit_params(f);
            f(&p.alpha[h]);
            f(&p.m[h]);
        }
        p.ffn_tokens.visit_params(f);
        p.norm_ffn.visit_params(f);
        if let Some(r) = &p.residual {
            r.visit_params(f);
        }
        p.ffn_out.visit_params(f);
        if let Some(t) = &p.ta {
            t.visit_params(f);
        }
        p.norm_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>)) {
        let p = &mut self.params;
        for h in 0..self.config.heads {
            p.query[h].visit_params_mut(f);
            p.key[h].visit_params_mut(f);
            f(&mut p.alpha[h]);
            f(&mut p.m[h]);
        }
        p.ffn_tokens.visit_params_mut(f);
        p.norm_ffn.visit_params_mut(f);
        if let Some(r) = &mut p.residual {
            r.visit_params_mut(f);
        }
        p.ffn_out.visit_params_mut(f);
        if let Some(t) = &mut p.ta {
            t.visit_params_mut(f);
        }
        p.norm_out.visit_params_mut(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<R>)) {
        self.params.norm_ffn.visit_buffers_mut(f);
        self.params.norm_out.visit_buffers_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[R])) {
        self.params.norm_ffn.visit_buffers(f);
        self.params.norm_out.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        crate::layers::uniform(rng, shape, 1.0)
    }

    #[test]
    fn pe_origin_values() {
        let pe = positional_encoding::<f64>(4, 2, 3, 5);
        for t in 0..2 {
            for s in 0..3 {
                assert_eq!(pe.at(&[0, t, s, 0]), 0.0);
                assert_eq!(pe.at(&[1, t, s, 0]), 1.0);
            }
        }
        assert!((pe.at(&[2, 0, 0, 3]) - (3.0 / 100f64).sin()).abs() < 1e-15);
        assert!((pe.at(&[3, 1, 2, 3]) - (3.0 / 100f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn pe_is_bounded_and_injective() {
        let (c, u) = (4, 600);
        let pe = positional_encoding::<f64>(c, 1, 1, u);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let vecs: Vec<Vec<f64>> = (0..u)
            .map(|ui| (0..c).map(|ci| pe.at(&[ci, 0, 0, ui])).collect())
            .collect();
        for a in 0..u {
            for b in a + 1..u {
                let d: f64 = vecs[a]
                    .iter()
                    .zip(&vecs[b])
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(d > 1e-9, "tokens {a} and {b} share an encoding");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TsaBlockConfig::standard(8, 8).validate().is_ok());
        assert!(TsaBlockConfig::standard(8, 16).validate().is_ok());
        assert!(TsaBlockConfig::standard(8, 12).validate().is_err());
        let mut c = TsaBlockConfig::standard(8, 8);
        c.k_u = 2;
        assert!(c.validate().is_err());
        c = TsaBlockConfig::standard(8, 8);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn alpha_zero_scores_equal_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[2, 3, 2, 2, 4]));
        let k = tape.constant(rand_tensor(&mut rng, &[2, 3, 2, 2, 4]));
        let alpha = tape.constant(Tensor::full(&[1], 0.0));
        let m_t = rand_tensor(&mut rng, &[4, 4]);
        let m = tape.constant(m_t.clone());
        let s = attention_scores(&mut tape, q, k, alpha, m, 12.0).unwrap();
        let sv = tape.value(s);
        for n in 0..2 {
            for u in 0..4 {
                for v in 0..4 {
                    assert_eq!(sv.at(&[n, u, v]), m_t.at(&[u, v]));
                }
            }
        }
    }

    #[test]
    fn dominant_token_diagonal() {
        // Two tokens, feature length 2: token 0 = (3, 0), token 1 = (0, 0.1).
        let mut tape = Tape::new();
        let q =
            tape.constant(Tensor::from_vec(&[1, 2, 1, 1, 2], vec![3.0, 0.0, 0.0, 0.1]).unwrap());
        let alpha = tape.constant(Tensor::full(&[1], 0.7));
        let m = tape.constant(Tensor::zeros(&[2, 2]));
        let s = attention_scores(&mut tape, q, q, alpha, m, 2.0).unwrap();
        let sv = tape.value(s).data();
        assert!((sv[0] - 0.7 * (9.0 / 2f64.sqrt()).tanh()).abs() < 1e-15);
        assert!((sv[3] - 0.7 * (0.01 / 2f64.sqrt()).tanh()).abs() < 1e-15);
        assert_eq!(sv[1], 0.0);
    }

    #[test]
    fn temporal_aggregate_identity_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = AxisConv::<f64>::new("ta", 2, 2, 1, Axis::T, &mut rng);
        conv.weight.tensor = Tensor::from_vec(&[2, 2, 1], vec![1., 0., 0., 1.]).unwrap();
        let x_t = rand_tensor(&mut rng, &[1, 2, 3, 2, 2]);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let y = temporal_aggregate(&mut tape, x, &conv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x_t.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        conv.weight.tensor = Tensor::zeros(&[2, 2, 1]);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let y = temporal_aggregate(&mut tape, x, &conv).unwrap();
        assert_eq!(tape.value(y).data(), x_t.data());
    }

    #[test]
    fn value_path_is_raw_input_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TsaBlockConfig {
            heads: 2,
            c_qkv: 3,
            ..TsaBlockConfig::standard(4, 4)
        };
        let block = TsaBlock::<f64>::new("b", cfg, 3, &mut rng);
        let x_t = rand_tensor(&mut rng, &[1, 4, 2, 2, 3]);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let pe = tape.constant(positional_encoding(4, 2, 2, 3));
        let xpe = tape.add_broadcast(x, pe).unwrap();
        let (q, _, v) = block.qkv_project(&mut tape, x, xpe, 1).unwrap();
        assert_eq!(tape.shape(q), &[1, 3, 2, 2, 3]);
        assert_eq!(tape.value(v).data(), &x_t.data()[2 * 12..4 * 12]);
    }

    #[test]
    fn zero_input_isolates_pe_in_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TsaBlockConfig {
            heads: 1,
            c_qkv: 2,
            ..TsaBlockConfig::standard(2, 2)
        };
        let block = TsaBlock::<f64>::new("b", cfg, 3, &mut rng);
        let pe_t = positional_encoding::<f64>(2, 1, 1, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1, 3]));
        let pe = tape.constant(pe_t.clone());
        let xpe = tape.add_broadcast(x, pe).unwrap();
        let (q, _, _) = block.qkv_project(&mut tape, x, xpe, 0).unwrap();
        let pe_only = tape.constant(pe_t.reshape(&[1, 2, 1, 1, 3]).unwrap());
        let expect = block.params.query[0].forward(&mut tape, pe_only).unwrap();
        assert_eq!(tape.value(q).data(), tape.value(expect).data());
    }

    #[test]
    fn shapes_for_same_and_doubled_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for c_out in [4, 8] {
            let cfg = TsaBlockConfig {
                heads: 2,
                c_qkv: 1,
                ..TsaBlockConfig::standard(4, c_out)
            };
            let block = TsaBlock::<f64>::new("b", cfg, 5, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(rand_tensor(&mut rng, &[2, 4, 3, 2, 5]));
            let mut ctx = ForwardCtx::new(Mode::Train);
            let y = block.forward(&mut tape, x, &mut ctx, 0).unwrap();
            assert_eq!(tape.shape(y), &[2, c_out, 3, 2, 5]);
            assert!(tape.value(y).is_finite());
        }
    }

    #[test]
    fn single_token_block_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = TsaBlockConfig {
            heads: 2,
            c_qkv: 1,
            ..TsaBlockConfig::standard(4, 4)
        };
        let block = TsaBlock::<f64>::new("b", cfg, 1, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[2, 4, 2, 2, 1]));
        let mut ctx = ForwardCtx::new(Mode::Train);
        let y = block.forward(&mut tape, x, &mut ctx, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 2, 2, 1]);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn residual_dominated_golden() {
        // alpha = 0, M = I, zero FFN/TA weights: output = leaky(BN_eval(x)).
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = TsaBlockConfig {
            heads: 2,
            c_qkv: 1,
            ..TsaBlockConfig::standard(2, 2)
        };
        let mut block = TsaBlock::<f64>::new("b", cfg, 2, &mut rng);
        for h in 0..2 {
            block.params.alpha[h].tensor = Tensor::full(&[1], 0.0);
            block.params.m[h].tensor = Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        }
        block.params.ffn_tokens.weight.tensor = Tensor::zeros(&[2, 2, 3]);
        block.params.ffn_out.weight.tensor = Tensor::zeros(&[2, 2]);
        block.params.ta.as_mut().unwrap().weight.tensor = Tensor::zeros(&[2, 2, 3]);
        let x_t = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(x_t);
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let y = block.forward(&mut tape, x, &mut ctx, 0).unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        let golden = [k, -0.2 * k, 0.5 * k, 3.0 * k];
        for (a, b) in tape.value(y).data().iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_recorded_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = TsaBlockConfig {
            heads: 2,
            c_qkv: 1,
            ..TsaBlockConfig::standard(4, 4)
        };
        let block = TsaBlock::<f64>::new("b", cfg, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[1, 4, 2, 1, 3]));
        let mut ctx = ForwardCtx::new(Mode::Eval);
        ctx.record_attention = true;
        block.forward(&mut tape, x, &mut ctx, 3).unwrap();
        assert_eq!(ctx.attention.len(), 2);
        assert_eq!(ctx.attention[1].0, 3);
        assert_eq!(ctx.attention[1].2.shape(), &[1, 3, 3]);
    }
}
