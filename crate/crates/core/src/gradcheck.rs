//! Central finite-difference check of every parameter of a model at 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Tape};
use crate::dataset::SkeletonSequence;
use crate::layers::{uniform, ForwardCtx, Mode, Module};
use crate::model::{InputDims, IstaNet, ModelConfig, Result};
use crate::tensor::Tensor;
use crate::tokenizer::WindowSpec;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-6;

/// `C=3, T=4, J=2, E=2`, window `(2,1,2)` so `U=4`; `C'=4`, one block, two heads.
pub fn miniature_config() -> ModelConfig {
    let input = InputDims {
        channels: 3,
        frames: 4,
        joints: 2,
        entities: 2,
    };
    let window = WindowSpec::new(2, 1, 2).expect("nonzero window");
    let mut c = ModelConfig::small(input, window, 3, 4, 1, 2);
    c.blocks[0].c_qkv = 1;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
}

impl ParamReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Problem {
    tokens: Tensor<f64>,
    labels: Vec<usize>,
}

fn problem(model: &IstaNet<f64>, seed: u64) -> Result<Problem> {
    let i = model.config.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.config.num_classes;
    let n = k.max(2);
    let mut tokens = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let data = uniform::<f64>(&mut rng, &[i.channels, i.frames, i.joints, i.entities], 1.0);
        let seq = SkeletonSequence::new(data, s % k, "gradcheck")
            .map_err(|e| crate::model::ModelError::Config(e.to_string()))?;
        tokens.push(model.tokens_of(&model.prepare(&seq)?, None)?);
        labels.push(s % k);
    }
    Ok(Problem {
        tokens: Tensor::stack(&tokens)?,
        labels,
    })
}

fn loss(
    model: &IstaNet<f64>,
    p: &Problem,
    fault: Option<Fault>,
    backward: bool,
) -> Result<(f64, Tape<f64>)> {
    let mut tape = Tape::new();
    tape.set_fault(fault);
    let x = tape.constant(p.tokens.clone());
    let mut ctx = ForwardCtx::new(Mode::Train);
    let logits = model.forward_tokens(&mut tape, x, &mut ctx)?;
    let l = tape.cross_entropy(logits, &p.labels, 0.1, 1.0)?;
    let value = tape.value(l).data()[0];
    if backward {
        tape.backward(l)?;
    }
    Ok((value, tape))
}

/// Compares reverse-mode gradients of a label-smoothed loss on a random
/// train-mode batch with central differences, one report per parameter.
/// `fault` corrupts the backward pass for negative-control runs.
pub fn gradcheck(
    config: &ModelConfig,
    seed: u64,
    eps: f64,
    fault: Option<Fault>,
) -> Result<Vec<ParamReport>> {
    let mut model = IstaNet::<f64>::new(config.clone(), seed)?;
    // Move alpha and M off their initial values so every path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    model.visit_params_mut(&mut |p| {
        if p.name.ends_with(".alpha") || p.name.ends_with(".m") || p.name.contains("norm") {
            let noise = uniform::<f64>(&mut rng, p.tensor.shape(), 0.3);
            for (v, d) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
                *v += d;
            }
        }
    });
    let prob = problem(&model, seed)?;
    let (_, tape) = loss(&model, &prob, fault, true)?;
    let mut analytic = Vec::new();
    model.visit_params(&mut |p| {
        let g = tape
            .param_grad(&p.name)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
        analytic.push((p.name.clone(), g));
    });

    let mut reports = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let mut report = ParamReport {
            name: name.clone(),
            elements: grad.len(),
            max_rel_err: 0.0,
            worst: 0,
        };
        for (idx, &a) in grad.iter().enumerate() {
            let mut probe = |delta: f64| -> Result<f64> {
                nudge(&mut model, &name, idx, delta);
                let v = loss(&model, &prob, None, false).map(|r| r.0);
                nudge(&mut model, &name, idx, -delta);
                v
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let err = rel_err(a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = idx;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

fn nudge(model: &mut IstaNet<f64>, name: &str, idx: usize, delta: f64) {
    model.visit_params_mut(&mut |p| {
        if p.name == name {
            p.tensor.data_mut()[idx] += delta;
        }
    });
}
