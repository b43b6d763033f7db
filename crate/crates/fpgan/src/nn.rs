//! Layer-level building blocks shared by the generator and discriminators:
//! convolution layers (standard, depthwise, pointwise, separable) built from
//! a [`ConvSpec`], and 2-D batch normalization with running statistics.

use crate::cost::{ConvKind, ConvSpec, CostReport, DscOrder};
use crate::element::Element;
use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// He-normal standard deviation for a fan-in.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// A convolution layer whose weights realize its [`ConvSpec`]. Separable
/// layers hold both stage weights; the optional bias belongs to the second
/// stage (or the only stage).
#[derive(Debug)]
pub struct ConvLayer<T: Element> {
    pub spec: ConvSpec,
    w1: Tensor<T>,
    w2: Option<Tensor<T>>,
    bias: Option<Tensor<T>>,
}

impl<T: Element> ConvLayer<T> {
    /// He-normal weight init, zero bias; all tensors marked trainable.
    pub fn build(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (ci, co, k) = (spec.in_channels, spec.out_channels, spec.kernel);
        let (w1, w2) = match (spec.kind, spec.dsc_order) {
            (ConvKind::Standard, _) => (
                Tensor::randn_scaled(&[co, ci, k, k], he_std(ci * k * k), rng)?,
                None,
            ),
            (ConvKind::Depthwise, _) => (
                Tensor::randn_scaled(&[ci, 1, k, k], he_std(k * k), rng)?,
                None,
            ),
            (ConvKind::Pointwise, _) => {
                (Tensor::randn_scaled(&[co, ci, 1, 1], he_std(ci), rng)?, None)
            }
            (ConvKind::Separable, DscOrder::DepthwiseFirst) => (
                Tensor::randn_scaled(&[ci, 1, k, k], he_std(k * k), rng)?,
                Some(Tensor::randn_scaled(&[co, ci, 1, 1], he_std(ci), rng)?),
            ),
            (ConvKind::Separable, DscOrder::PointwiseFirst) => (
                Tensor::randn_scaled(&[co, ci, 1, 1], he_std(ci), rng)?,
                Some(Tensor::randn_scaled(&[co, 1, k, k], he_std(k * k), rng)?),
            ),
        };
        let bias = if spec.has_bias {
            Some(Tensor::zeros(&[co])?)
        } else {
            None
        };
        let mut layer = ConvLayer { spec, w1, w2, bias };
        layer.set_trainable(true);
        Ok(layer)
    }

    pub fn set_trainable(&mut self, value: bool) {
        self.w1.set_requires_grad(value);
        if let Some(w2) = self.w2.as_mut() {
            w2.set_requires_grad(value);
        }
        if let Some(b) = self.bias.as_mut() {
            b.set_requires_grad(value);
        }
    }

    fn enter(tape: &mut Tape<T>, t: &Tensor<T>, trainable: bool) -> NodeId {
        if trainable {
            tape.leaf(t)
        } else {
            tape.frozen(t)
        }
    }

    /// Applies the layer on the tape. `trainable = false` inserts the
    /// weights untracked (frozen nets, or the side not being trained).
    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId, trainable: bool) -> Result<NodeId> {
        let (stride, pad) = (self.spec.stride, self.spec.padding);
        let w1 = Self::enter(tape, &self.w1, trainable);
        let bias = self
            .bias
            .as_ref()
            .map(|b| Self::enter(tape, b, trainable));
        match (self.spec.kind, self.spec.dsc_order) {
            (ConvKind::Standard, _) => tape.conv2d(x, w1, bias, stride, pad),
            (ConvKind::Depthwise, _) => tape.depthwise_conv2d(x, w1, bias, stride, pad),
            (ConvKind::Pointwise, _) => tape.pointwise_conv2d(x, w1, bias),
            (ConvKind::Separable, DscOrder::DepthwiseFirst) => {
                let w2 = Self::enter(tape, self.w2.as_ref().unwrap(), trainable);
                let mid = tape.depthwise_conv2d(x, w1, None, stride, pad)?;
                tape.pointwise_conv2d(mid, w2, bias)
            }
            (ConvKind::Separable, DscOrder::PointwiseFirst) => {
                let w2 = Self::enter(tape, self.w2.as_ref().unwrap(), trainable);
                let mid = tape.pointwise_conv2d(x, w1, None)?;
                tape.depthwise_conv2d(mid, w2, bias, stride, pad)
            }
        }
    }

    pub fn cost(&self, input_hw: (usize, usize)) -> CostReport {
        crate::cost::count_cost(&self.spec, input_hw, T::DTYPE)
            .expect("spec validated at build time")
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        match self.spec.kind {
            ConvKind::Separable => {
                f(format!("{prefix}.w1"), &self.w1);
                f(format!("{prefix}.w2"), self.w2.as_ref().unwrap());
            }
            _ => f(format!("{prefix}.w"), &self.w1),
        }
        if let Some(b) = self.bias.as_ref() {
            f(format!("{prefix}.b"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self.spec.kind {
            ConvKind::Separable => {
                f(format!("{prefix}.w1"), &mut self.w1);
                f(format!("{prefix}.w2"), self.w2.as_mut().unwrap());
            }
            _ => f(format!("{prefix}.w"), &mut self.w1),
        }
        if let Some(b) = self.bias.as_mut() {
            f(format!("{prefix}.b"), b);
        }
    }
}

/// Batch norm with learned affine and running statistics. Running stats are
/// buffers: saved in checkpoints, never touched by the optimizer.
#[derive(Debug)]
pub struct BatchNorm2d<T: Element> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::ones(&[channels])?.with_requires_grad(),
            beta: Tensor::zeros(&[channels])?.with_requires_grad(),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn affine_param_count(&self) -> u64 {
        2 * self.gamma.numel() as u64
    }

    /// Training mode normalizes by batch statistics and folds them into the
    /// running estimates; inference mode normalizes by the running stats.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<NodeId> {
        let gamma = ConvLayer::enter(tape, &self.gamma, trainable);
        let beta = ConvLayer::enter(tape, &self.beta, trainable);
        match mode {
            Mode::Training => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let keep = T::one() - m;
                for (r, &b) in self
                    .running_mean
                    .data_mut()
                    .iter_mut()
                    .zip(stats.mean.iter())
                {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in self
                    .running_var
                    .data_mut()
                    .iter_mut()
                    .zip(stats.var.iter())
                {
                    *r = keep * *r + m * b;
                }
                Ok(y)
            }
            Mode::Inference => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{ConvKind, ConvSpec};

    #[test]
    fn separable_forward_is_stage_composition_bitwise() {
        let spec = ConvSpec::new(ConvKind::Separable, 3, 5, 3)
            .with_padding(1)
            .with_bias(true);
        let mut rng = Rng::from_seed(11);
        let layer: ConvLayer<f32> = ConvLayer::build(spec, &mut rng).unwrap();
        let x = Tensor::<f32>::randn(&[2, 3, 6, 6], &mut rng).unwrap();

        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(&x);
        let fused = layer.forward(&mut tape, xid, true).unwrap();

        // Manual two-stage composition on the same tape with the same ids.
        let w1 = tape.leaf(&layer.w1);
        let w2 = tape.leaf(layer.w2.as_ref().unwrap());
        let b = tape.leaf(layer.bias.as_ref().unwrap());
        let mid = tape.depthwise_conv2d(xid, w1, None, 1, 1).unwrap();
        let manual = tape.pointwise_conv2d(mid, w2, Some(b)).unwrap();

        assert_eq!(tape.value(fused), tape.value(manual));
    }

    #[test]
    fn separable_identity_stages_pass_input_through() {
        // Depthwise stage: K=1 weights of 1.0; pointwise stage: identity matrix.
        let spec = ConvSpec::new(ConvKind::Separable, 3, 3, 1);
        let mut rng = Rng::from_seed(1);
        let mut layer: ConvLayer<f32> = ConvLayer::build(spec, &mut rng).unwrap();
        layer.w1.data_mut().fill(1.0);
        let pw = layer.w2.as_mut().unwrap();
        pw.data_mut().fill(0.0);
        for c in 0..3 {
            pw.data_mut()[c * 3 + c] = 1.0;
        }
        let x = Tensor::<f32>::randn(&[1, 3, 4, 4], &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(&x);
        let y = layer.forward(&mut tape, xid, true).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn batch_norm_gamma_zero_outputs_beta() {
        let mut bn: BatchNorm2d<f64> = BatchNorm2d::new(2).unwrap();
        bn.gamma.data_mut().fill(0.0);
        bn.beta.data_mut().copy_from_slice(&[3.0, -1.0]);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .constant(&[2, 2, 2, 2], (0..16).map(|i| i as f64).collect())
            .unwrap();
        let y = bn.forward(&mut tape, x, Mode::Training, true).unwrap();
        let v = tape.value(y);
        for s in 0..2 {
            for i in 0..4 {
                assert_eq!(v[(s * 2) * 4 + i], 3.0);
                assert_eq!(v[(s * 2 + 1) * 4 + i], -1.0);
            }
        }
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut bn: BatchNorm2d<f64> = BatchNorm2d::new(1).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&[2, 1, 1, 1], vec![4.0, 6.0]).unwrap();
        bn.forward(&mut tape, x, Mode::Training, true).unwrap();
        // mean 5, var 1: running_mean = 0.9*0 + 0.1*5, running_var = 0.9*1 + 0.1*1.
        assert!((bn.running_mean.data()[0] - 0.5).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-12);
    }
}
