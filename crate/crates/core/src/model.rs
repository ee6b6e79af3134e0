//! The full network: tokenizer embedding, a chain of attention blocks,
//! global average pooling and a linear classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::dataset::{center_on_first_frame, resample_frames, SkeletonSequence};
use crate::layers::{BatchNorm, ForwardCtx, Mode, Module, Pointwise};
use crate::tensor::{Parameter, Real, ShapeError, Tensor};
use crate::tokenizer::{
    entity_rearrange, tokenize, EmbedParams, TokenizeError, ULayout, WindowSpec,
};
use crate::tsa::{TsaBlock, TsaBlockConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

impl From<ShapeError> for ModelError {
    fn from(e: ShapeError) -> Self {
        ModelError::Autodiff(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Fixed clip dimensions every sample is brought to before tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub entities: usize,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputDims,
    pub window: WindowSpec,
    pub embed_channels: usize,
    pub gamma: f64,
    pub blocks: Vec<TsaBlockConfig>,
    pub num_classes: usize,
    /// Entity slots exempt from rearrangement.
    #[serde(default)]
    pub frozen_entities: Vec<usize>,
    /// Subtract the first frame's mean joint position.
    #[serde(default = "default_true")]
    pub center: bool,
}

impl ModelConfig {
    /// Six blocks on `[C', C', 2C', 2C', 4C', 4C']` with `C' = 64`, four heads.
    pub fn standard(input: InputDims, window: WindowSpec, num_classes: usize) -> Self {
        let c = 64;
        let plan = [
            (c, c),
            (c, c),
            (c, 2 * c),
            (2 * c, 2 * c),
            (2 * c, 4 * c),
            (4 * c, 4 * c),
        ];
        ModelConfig {
            input,
            window,
            embed_channels: c,
            gamma: 0.1,
            blocks: plan
                .iter()
                .map(|&(i, o)| TsaBlockConfig::standard(i, o))
                .collect(),
            num_classes,
            frozen_entities: Vec::new(),
            center: true,
        }
    }

    /// A uniform stack of `layers` blocks at `channels` with `heads` heads.
    pub fn small(
        input: InputDims,
        window: WindowSpec,
        num_classes: usize,
        channels: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let block = TsaBlockConfig {
            heads,
            ..TsaBlockConfig::standard(channels, channels)
        };
        ModelConfig {
            input,
            window,
            embed_channels: channels,
            gamma: 0.1,
            blocks: vec![block; layers],
            num_classes,
            frozen_entities: Vec::new(),
            center: true,
        }
    }

    pub fn layout(&self) -> ULayout {
        self.window
            .layout(self.input.frames, self.input.joints, self.input.entities)
    }

    pub fn tokens(&self) -> usize {
        self.layout().tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(ModelError::Config(m));
        let i = &self.input;
        if !(2..=3).contains(&i.channels) {
            return cfg(format!("input channels must be 2 or 3, got {}", i.channels));
        }
        if i.frames == 0 || i.joints == 0 || i.entities == 0 {
            return cfg("input frames, joints and entities must be at least 1".into());
        }
        self.window.validate()?;
        if self.embed_channels < i.channels {
            return cfg(format!(
                "embed_channels ({}) must be at least the input channels ({})",
                self.embed_channels, i.channels
            ));
        }
        if self.gamma < 0.0 {
            return cfg("gamma must be non-negative".into());
        }
        if self.num_classes < 2 {
            return cfg(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.blocks.is_empty() {
            return cfg("at least one block is required".into());
        }
        let mut c = self.embed_channels;
        for (k, b) in self.blocks.iter().enumerate() {
            b.validate()
                .map_err(|m| ModelError::Config(format!("block {k}: {m}")))?;
            if b.c_in != c {
                return cfg(format!(
                    "block {k} expects {} input channels but receives {c}",
                    b.c_in
                ));
            }
            c = b.c_out;
        }
        if let Some(&bad) = self.frozen_entities.iter().find(|&&e| e >= i.entities) {
            return cfg(format!(
                "frozen entity {bad} out of range for {} entities",
                i.entities
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IstaNet<R> {
    pub config: ModelConfig,
    pub embed: EmbedParams<R>,
    pub blocks: Vec<TsaBlock<R>>,
    pub head: Pointwise<R>,
}

impl<R: Real> IstaNet<R> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = config.tokens();
        let embed = EmbedParams::new(
            config.input.channels,
            config.embed_channels,
            config.gamma,
            &mut rng,
        );
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| TsaBlock::new(&format!("blocks.{i}"), b.clone(), tokens, &mut rng))
            .collect();
        let last = config.blocks.last().expect("validated").c_out;
        let head = Pointwise::new("head.fc", last, config.num_classes, &mut rng);
        Ok(IstaNet {
            config,
            embed,
            blocks,
            head,
        })
    }

    /// Checks dimensions, then centers and resamples to the configured frame count.
    pub fn prepare(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        let i = &self.config.input;
        let got = (seq.channels(), seq.joints(), seq.entities());
        if got != (i.channels, i.joints, i.entities) {
            return Err(ModelError::Config(format!(
                "sample {} has (C,J,E) = {:?}, model expects ({}, {}, {})",
                seq.source_id, got, i.channels, i.joints, i.entities
            )));
        }
        let seq = if self.config.center {
            center_on_first_frame(seq)
        } else {
            seq.clone()
        };
        Ok(
            if seq.frames() == i.frames && seq.valid_frames == i.frames {
                seq
            } else {
                resample_frames(&seq, i.frames)
            },
        )
    }

    /// Raw `(C, T_w, S, U)` tokens of a prepared clip, entity-shuffled when `er` is given.
    pub fn tokens_of(
        &self,
        seq: &SkeletonSequence,
        er: Option<&mut dyn rand::RngCore>,
    ) -> Result<Tensor<R>> {
        let seq = match er {
            Some(rng) => entity_rearrange(
                seq,
                &mut RngAdapter(rng),
                true,
                &self.config.frozen_entities,
            ),
            None => seq.clone(),
        };
        let tok = tokenize(&seq.data, &self.config.window)?;
        Ok(tok.data.cast())
    }

    /// `(N, C, T_w, S, U)` tokens to `(N, num_classes)` logits.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<R>,
        tokens: Var,
        ctx: &mut ForwardCtx<R>,
    ) -> Result<Var> {
        let s = tape.shape(tokens);
        let layout = self.config.layout();
        let expect = [
            self.config.input.channels,
            self.config.window.t_w,
            self.config.window.slots(),
            layout.tokens(),
        ];
        if s.len() != 5 || s[1..] != expect {
            return Err(ModelError::Config(format!(
                "token batch shape {s:?} does not match (N, {}, {}, {}, {})",
                expect[0], expect[1], expect[2], expect[3]
            )));
        }
        let mut x = self.embed.forward(tape, tokens, ctx)?;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(tape, x, ctx, i)?;
        }
        let pooled = self.pooled_features(tape, x)?;
        Ok(self.head.forward(tape, pooled)?)
    }

    /// Global average over `(T_w, S, U)`.
    pub fn pooled_features(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        Ok(tape.mean_trailing(x)?)
    }

    /// Logits of one clip. `rng` drives rearrangement in train mode and is
    /// ignored in eval mode.
    pub fn forward_classify(
        &self,
        seq: &SkeletonSequence,
        mode: Mode,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<R>> {
        let prepared = self.prepare(seq)?;
        let er = match mode {
            Mode::Train => Some(rng),
            Mode::Eval => None,
        };
        let tokens = self.tokens_of(&prepared, er)?;
        let batch = Tensor::stack(&[tokens])?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let mut ctx = ForwardCtx::new(mode);
        let logits = self.forward_tokens(&mut tape, x, &mut ctx)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Eval-mode attention maps `(block, head, (U, U))` of one clip.
    pub fn attention_maps(&self, seq: &SkeletonSequence) -> Result<Vec<(usize, usize, Tensor<R>)>> {
        let tokens = self.tokens_of(&self.prepare(seq)?, None)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::stack(&[tokens])?);
        let mut ctx = ForwardCtx::new(Mode::Eval);
        ctx.record_attention = true;
        self.forward_tokens(&mut tape, x, &mut ctx)?;
        ctx.attention
            .into_iter()
            .map(|(b, h, t)| {
                let u = t.shape()[1];
                Ok((b, h, t.reshape(&[u, u])?))
            })
            .collect()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<R>> {
        let mut out = vec![&mut self.embed.norm];
        for b in &mut self.blocks {
            out.push(&mut b.params.norm_ffn);
            out.push(&mut b.params.norm_out);
        }
        out
    }

    /// Folds the batch statistics gathered by a train-mode pass into the running buffers.
    pub fn apply_norm_stats(&mut self, ctx: &ForwardCtx<R>) {
        let mut norms = self.norms_mut();
        for (name, mean, var, count) in &ctx.norm_stats {
            if let Some(n) = norms.iter_mut().find(|n| &n.name == name) {
                n.update_running(mean, var, *count);
            }
        }
    }

    /// Copies parameter gradients off a tape after `backward`.
    pub fn collect_grads(&mut self, tape: &Tape<R>, accumulate: bool) {
        self.visit_params_mut(&mut |p| {
            if let Some(g) = tape.param_grad(&p.name) {
                p.set_grad(g, accumulate);
            } else if !accumulate {
                p.tensor.grad = None;
            }
        });
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.tensor.len());
        n
    }

    /// Same architecture and values at another precision.
    pub fn cast<S: Real>(&self) -> IstaNet<S> {
        let mut out = IstaNet::<S>::new(self.config.clone(), 0).expect("config already validated");
        let mut params = Vec::new();
        self.visit_params(&mut |p| params.push(p.tensor.cast::<S>()));
        let mut it = params.into_iter();
        out.visit_params_mut(&mut |p| {
            let mut t = it.next().expect("same architecture");
            t.requires_grad = true;
            p.tensor = t;
        });
        let mut bufs = Vec::new();
        self.visit_buffers(&mut |_, b| {
            bufs.push(b.iter().map(|v| S::lit(v.as_f64())).collect::<Vec<S>>())
        });
        let mut it = bufs.into_iter();
        out.visit_buffers_mut(&mut |_, b| *b = it.next().expect("same architecture"));
        out
    }
}

impl<R: Real> Module<R> for IstaNet<R> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>)) {
        self.embed.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>)) {
        self.embed.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<R>)) {
        self.embed.visit_buffers_mut(f);
        for b in &mut self.blocks {
            b.visit_buffers_mut(f);
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[R])) {
        self.embed.visit_buffers(f);
        for b in &self.blocks {
            b.visit_buffers(f);
        }
    }
}

/// Lets a `dyn RngCore` be used where `impl Rng` is expected.
struct RngAdapter<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngAdapter<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Per-sample rng derived from `(seed, epoch, sample)`, independent of
/// worker count and batch composition.
pub fn sample_rng(seed: u64, epoch: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample);
    let _: u64 = rng.random();
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mini_config() -> ModelConfig {
        let input = InputDims {
            channels: 3,
            frames: 4,
            joints: 2,
            entities: 2,
        };
        let window = WindowSpec::new(2, 1, 2).unwrap();
        let mut c = ModelConfig::small(input, window, 3, 4, 1, 2);
        c.blocks[0].c_qkv = 1;
        c
    }

    fn clip(seed: u64, cfg: &ModelConfig) -> SkeletonSequence {
        let i = cfg.input;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = crate::layers::uniform::<f64>(
            &mut rng,
            &[i.channels, i.frames, i.joints, i.entities],
            1.0,
        );
        SkeletonSequence::new(t, 0, "clip").unwrap()
    }

    #[test]
    fn standard_config_is_consistent() {
        let input = InputDims {
            channels: 3,
            frames: 120,
            joints: 25,
            entities: 2,
        };
        let c = ModelConfig::standard(input, WindowSpec::new(20, 1, 2).unwrap(), 26);
        c.validate().unwrap();
        assert_eq!(c.tokens(), 150);
        assert_eq!(c.blocks.last().unwrap().c_out, 256);
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let mut c = mini_config();
        c.blocks.push(TsaBlockConfig::standard(8, 8));
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        let mut c = mini_config();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape_and_head_isolation() {
        let cfg = mini_config();
        let mut net = IstaNet::<f64>::new(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = net
            .forward_classify(&clip(3, &cfg), Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(l.len(), 3);
        net.head.weight.tensor = Tensor::zeros(&[3, 4]);
        net.head.bias.tensor = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        for s in 0..3 {
            let l = net
                .forward_classify(&clip(s, &cfg), Mode::Train, &mut rng)
                .unwrap();
            assert_eq!(l, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn eval_ignores_rng_state() {
        let cfg = mini_config();
        let net = IstaNet::<f64>::new(cfg.clone(), 1).unwrap();
        let c = clip(5, &cfg);
        let a = net
            .forward_classify(&c, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = net
            .forward_classify(&c, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(999))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let cfg = mini_config();
        let net = IstaNet::<f64>::new(cfg, 1).unwrap();
        let bad = SkeletonSequence::new(Tensor::zeros(&[3, 4, 3, 2]), 0, "bad").unwrap();
        let err = net
            .forward_classify(&bad, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
    }

    #[test]
    fn gap_is_linear_in_activations() {
        let cfg = mini_config();
        let net = IstaNet::<f64>::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = crate::layers::uniform::<f64>(&mut rng, &[2, 4, 2, 2, 4], 1.0);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v * 3.5));
        let pa = net.pooled_features(&mut tape, a).unwrap();
        let pb = net.pooled_features(&mut tape, b).unwrap();
        for (u, v) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((u * 3.5 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn param_names_are_unique() {
        let net = IstaNet::<f32>::new(mini_config(), 0).unwrap();
        let names = net.param_names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"blocks.0.head1.m".to_string()));
    }

    #[test]
    fn sample_rng_is_stable() {
        let a: u64 = sample_rng(1, 2, 3).random();
        let b: u64 = sample_rng(1, 2, 3).random();
        let c: u64 = sample_rng(1, 2, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
