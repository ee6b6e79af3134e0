//! Parameterized building blocks shared by the tokenizer embedding, the
//! attention blocks, and the classification head.

use rand::Rng;

use crate::autodiff::{Axis, NormMode, Result, Tape, Var};
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Collects side outputs of a forward pass.
#[derive(Debug)]
pub struct ForwardCtx<R> {
    pub mode: Mode,
    /// Batch statistics of every train-mode norm layer, by layer name.
    pub norm_stats: Vec<(String, Vec<R>, Vec<R>, usize)>,
    pub record_attention: bool,
    /// `(block, head, scores (N,U,U))` when `record_attention` is set.
    pub attention: Vec<(usize, usize, Tensor<R>)>,
}

impl<R: Real> ForwardCtx<R> {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            norm_stats: Vec::new(),
            record_attention: false,
            attention: Vec::new(),
        }
    }
}

/// Read/write access to every named trainable tensor and running buffer.
pub trait Module<R: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>));
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<R>)) {}
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &[R])) {}
}

pub(crate) fn uniform<R: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| R::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

/// `1x1x1` convolution, i.e. a per-position linear channel map.
#[derive(Debug, Clone)]
pub struct Pointwise<R> {
    pub weight: Parameter<R>,
    pub bias: Parameter<R>,
}

impl<R: Real> Pointwise<R> {
    /// Weights uniform in `±1/sqrt(c_in)`, zero bias.
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Pointwise {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform(rng, &[c_out, c_in], bound),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.pointwise_conv(x, w, b)
    }
}

impl<R: Real> Module<R> for Pointwise<R> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Same-padded convolution along a single token axis.
#[derive(Debug, Clone)]
pub struct AxisConv<R> {
    pub weight: Parameter<R>,
    pub bias: Parameter<R>,
    pub axis: Axis,
}

impl<R: Real> AxisConv<R> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        axis: Axis,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        AxisConv {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform(rng, &[c_out, c_in, k], bound),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            axis,
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv_axis(x, w, b, self.axis)
    }
}

impl<R: Real> Module<R> for AxisConv<R> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Batch normalization with running statistics.
///
/// Running updates follow `running = (1 - momentum) * running + momentum * batch`,
/// with the unbiased batch variance.
#[derive(Debug, Clone)]
pub struct BatchNorm<R> {
    pub name: String,
    pub scale: Parameter<R>,
    pub shift: Parameter<R>,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub momentum: R,
    pub eps: R,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            scale: Parameter::new(format!("{name}.scale"), Tensor::full(&[channels], R::one())),
            shift: Parameter::new(format!("{name}.shift"), Tensor::zeros(&[channels])),
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            momentum: R::lit(0.1),
            eps: R::lit(1e-5),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let s = tape.param(&self.scale);
        let h = tape.param(&self.shift);
        match ctx.mode {
            Mode::Train => {
                let y = tape.batchnorm(x, s, h, NormMode::Train, self.eps)?;
                let shape = tape.shape(x);
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (m, v) = tape.batch_stats(y).expect("train-mode norm records stats");
                ctx.norm_stats
                    .push((self.name.clone(), m.to_vec(), v.to_vec(), count));
                Ok(y)
            }
            Mode::Eval => tape.batchnorm(
                x,
                s,
                h,
                NormMode::Infer {
                    mean: &self.running_mean,
                    var: &self.running_var,
                },
                self.eps,
            ),
        }
    }

    pub fn update_running(&mut self, mean: &[R], var: &[R], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            R::lit(count as f64 / (count - 1) as f64)
        } else {
            R::one()
        };
        for (r, b) in self.running_mean.iter_mut().zip(mean) {
            *r = (R::one() - m) * *r + m * *b;
        }
        for (r, b) in self.running_var.iter_mut().zip(var) {
            *r = (R::one() - m) * *r + m * *b * unbias;
        }
    }
}

impl<R: Real> Module<R> for BatchNorm<R> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<R>)) {
        f(&self.scale);
        f(&self.shift);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<R>)) {
        f(&mut self.scale);
        f(&mut self.shift);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<R>)) {
        f(
            &format!("{}.running_mean", self.name),
            &mut self.running_mean,
        );
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[R])) {
        f(&format!("{}.running_mean", self.name), &self.running_mean);
        f(&format!("{}.running_var", self.name), &self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pointwise::<f64>::new("fc", 16, 4, &mut rng);
        assert!(p.weight.tensor.data().iter().all(|w| w.abs() <= 0.25));
        assert!(p.bias.tensor.data().iter().all(|&b| b == 0.0));
        assert_eq!(p.weight.name, "fc.weight");
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        bn.update_running(&[2.0], &[1.0], 2);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_before_training_uses_identity_stats() {
        let bn = BatchNorm::<f64>::new("bn", 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![0.5, -3.0]).unwrap());
        let mut ctx = ForwardCtx::new(Mode::Eval);
        let y = bn.forward(&mut tape, x, &mut ctx).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([0.5, -3.0]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(ctx.norm_stats.is_empty());
    }
}
