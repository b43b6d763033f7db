//! Projected multi-scale discriminator: a frozen, seeded feature network
//! producing a 4-scale pyramid, frozen random 1x1 channel projections per
//! scale, and one trainable discriminator per scale.
//!
//! The feature network stands in for a pretrained extractor at desk scale:
//! random frozen features still carry a usable adversarial signal, and the
//! whole thing is pluggable behind the same pyramid interface. Gradients
//! pass through the frozen stages to the generator's images but are never
//! applied to the frozen weights.

use crate::cost::{ConvKind, ConvSpec};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::generator::Variant;
use crate::nn::ConvLayer;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Channel widths of the four stride-2 feature stages.
pub const FEATURE_CHANNELS: [usize; 4] = [32, 64, 64, 64];

#[derive(Debug)]
pub struct FeatureNetwork<T: Element> {
    pub resolution: usize,
    pub seed: u64,
    stages: Vec<ConvLayer<T>>,
}

#[derive(Debug)]
pub struct ProjectionSet<T: Element> {
    projections: Vec<ConvLayer<T>>,
}

/// Builds the frozen feature pyramid and its per-scale random projections.
/// Scales come out at resolution/2, /4, /8 and /16.
pub fn build_feature_network<T: Element>(
    resolution: usize,
    seed: u64,
) -> Result<(FeatureNetwork<T>, ProjectionSet<T>)> {
    if resolution < 32 {
        return Err(Error::config(format!(
            "feature network needs resolution >= 32, got {resolution}"
        )));
    }
    let mut rng_f = Rng::stream(seed, "feature_net", 0);
    let mut rng_p = Rng::stream(seed, "projections", 0);
    let mut stages = Vec::new();
    let mut projections = Vec::new();
    let mut c_in = 3usize;
    for &c_out in FEATURE_CHANNELS.iter() {
        // K=4, stride 2, pad 1 halves even extents exactly.
        let spec = ConvSpec::new(ConvKind::Standard, c_in, c_out, 4)
            .with_stride(2)
            .with_padding(1)
            .with_bias(true);
        let mut stage = ConvLayer::build(spec, &mut rng_f)?;
        // A random frozen net gets random biases too; zero biases would make
        // the stand-in degenerate on constant inputs.
        stage.visit_mut("stage", &mut |name, t| {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v = T::from_f64(rng_f.normal() * 0.1);
                }
            }
        });
        stage.set_trainable(false);
        stages.push(stage);

        let pspec = ConvSpec::new(ConvKind::Pointwise, c_out, c_out, 1);
        let mut proj = ConvLayer::build(pspec, &mut rng_p)?;
        proj.set_trainable(false);
        projections.push(proj);
        c_in = c_out;
    }
    Ok((
        FeatureNetwork {
            resolution,
            seed,
            stages,
        },
        ProjectionSet { projections },
    ))
}

impl<T: Element> FeatureNetwork<T> {
    /// Runs the frozen pyramid and projections on images in [-1, 1].
    /// Differentiable with respect to `x`, never with respect to the frozen
    /// weights (they enter the tape untracked).
    pub fn extract_and_project(
        &self,
        proj: &ProjectionSet<T>,
        tape: &mut Tape<T>,
        x: NodeId,
    ) -> Result<Vec<NodeId>> {
        let dims = tape.dims(x).to_vec();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.resolution || dims[3] != self.resolution
        {
            return Err(Error::shape(format!(
                "feature network expects [N,3,{},{}], got {:?}",
                self.resolution, self.resolution, dims
            )));
        }
        let mut h = x;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for (stage, p) in self.stages.iter().zip(&proj.projections) {
            h = stage.forward(tape, h, false)?;
            h = tape.leaky_relu(h, T::from_f64(0.2))?;
            pyramid.push(p.forward(tape, h, false)?);
        }
        Ok(pyramid)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("feat.stage{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("feat.stage{i}"), f);
        }
    }
}

impl<T: Element> ProjectionSet<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.projections.iter().enumerate() {
            p.visit(&format!("proj.scale{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.projections.iter_mut().enumerate() {
            p.visit_mut(&format!("proj.scale{i}"), f);
        }
    }
}

/// One per-scale discriminator: stride-2 body convs (standard, or separable
/// under fpg-dg) and a standard 1-channel head emitting a logit map.
#[derive(Debug)]
pub struct ScaleDiscriminator<T: Element> {
    pub body: Vec<ConvLayer<T>>,
    pub head: ConvLayer<T>,
}

impl<T: Element> ScaleDiscriminator<T> {
    fn build(
        in_channels: usize,
        in_resolution: usize,
        variant: Variant,
        order: crate::cost::DscOrder,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut body = Vec::new();
        let mut c = in_channels;
        let mut h = in_resolution;
        while h > 4 && body.len() < 3 {
            let c_next = (2 * c).min(256);
            let spec = ConvSpec::new(variant.disc_kind(), c, c_next, 4)
                .with_stride(2)
                .with_padding(1)
                .with_bias(true)
                .with_order(order);
            body.push(ConvLayer::build(spec, rng)?);
            c = c_next;
            h /= 2;
        }
        // The 1-channel head stays standard in all variants: decomposing a
        // C->1 conv would add parameters, not remove them.
        let head_spec = ConvSpec::new(ConvKind::Standard, c, 1, 3)
            .with_padding(1)
            .with_bias(true);
        let head = ConvLayer::build(head_spec, rng)?;
        Ok(ScaleDiscriminator { body, head })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId, trainable: bool) -> Result<NodeId> {
        let mut h = x;
        for conv in &self.body {
            h = conv.forward(tape, h, trainable)?;
            h = tape.leaky_relu(h, T::from_f64(0.2))?;
        }
        self.head.forward(tape, h, trainable)
    }

    pub fn param_count(&self) -> u64 {
        let mut total = self.head.cost((1, 1)).params;
        for b in &self.body {
            total += b.cost((1, 1)).params;
        }
        total
    }
}

/// The trainable per-scale discriminators as a unit.
#[derive(Debug)]
pub struct MultiScaleDiscriminator<T: Element> {
    pub scales: Vec<ScaleDiscriminator<T>>,
}

impl<T: Element> MultiScaleDiscriminator<T> {
    /// One discriminator per pyramid scale of a feature network built at
    /// `resolution`.
    pub fn build(
        resolution: usize,
        variant: Variant,
        order: crate::cost::DscOrder,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut scales = Vec::new();
        for (i, &c) in FEATURE_CHANNELS.iter().enumerate() {
            let scale_res = resolution >> (i + 1);
            scales.push(ScaleDiscriminator::build(c, scale_res, variant, order, rng)?);
        }
        Ok(MultiScaleDiscriminator { scales })
    }

    /// One logit map per scale.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        pyramid: &[NodeId],
        trainable: bool,
    ) -> Result<Vec<NodeId>> {
        if pyramid.len() != self.scales.len() {
            return Err(Error::contract(format!(
                "pyramid has {} scales, discriminator expects {}",
                pyramid.len(),
                self.scales.len()
            )));
        }
        self.scales
            .iter()
            .zip(pyramid)
            .map(|(d, &p)| d.forward(tape, p, trainable))
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.scales.iter().map(|s| s.param_count()).sum()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, s) in self.scales.iter().enumerate() {
            for (j, b) in s.body.iter().enumerate() {
                b.visit(&format!("d.scale{i}.body{j}"), f);
            }
            s.head.visit(&format!("d.scale{i}.head"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, s) in self.scales.iter_mut().enumerate() {
            for (j, b) in s.body.iter_mut().enumerate() {
                b.visit_mut(&format!("d.scale{i}.body{j}"), f);
            }
            s.head.visit_mut(&format!("d.scale{i}.head"), f);
        }
    }
}

/// Hinge discriminator loss summed over scales:
/// `sum_s mean(relu(1 - real_s)) + mean(relu(1 + fake_s))`.
pub fn hinge_d_loss<T: Element>(
    tape: &mut Tape<T>,
    real_logits: &[NodeId],
    fake_logits: &[NodeId],
) -> Result<NodeId> {
    if real_logits.is_empty() || real_logits.len() != fake_logits.len() {
        return Err(Error::contract(
            "hinge_d_loss needs matching non-empty logit lists",
        ));
    }
    let mut total: Option<NodeId> = None;
    for (&r, &f) in real_logits.iter().zip(fake_logits) {
        let one_minus_real = tape.affine(r, -T::one(), T::one())?;
        let real_term = tape.relu(one_minus_real)?;
        let real_mean = tape.mean(real_term, &[])?;
        let one_plus_fake = tape.affine(f, T::one(), T::one())?;
        let fake_term = tape.relu(one_plus_fake)?;
        let fake_mean = tape.mean(fake_term, &[])?;
        let scale_loss = tape.add(real_mean, fake_mean)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scale_loss)?,
            None => scale_loss,
        });
    }
    Ok(total.unwrap())
}

/// Hinge generator loss summed over scales: `sum_s -mean(fake_s)`.
pub fn hinge_g_loss<T: Element>(tape: &mut Tape<T>, fake_logits: &[NodeId]) -> Result<NodeId> {
    if fake_logits.is_empty() {
        return Err(Error::contract("hinge_g_loss needs at least one scale"));
    }
    let mut total: Option<NodeId> = None;
    for &f in fake_logits {
        let m = tape.mean(f, &[])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, m)?,
            None => m,
        });
    }
    tape.affine(total.unwrap(), -T::one(), T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::DscOrder;

    #[test]
    fn feature_network_is_seed_deterministic_and_frozen() {
        let (fa, pa) = build_feature_network::<f32>(64, 42).unwrap();
        let (fb, pb) = build_feature_network::<f32>(64, 42).unwrap();
        let mut ta = Vec::new();
        fa.visit(&mut |n, t| ta.push((n, t.data().to_vec())));
        pa.visit(&mut |n, t| ta.push((n, t.data().to_vec())));
        let mut tb = Vec::new();
        fb.visit(&mut |n, t| tb.push((n, t.data().to_vec())));
        pb.visit(&mut |n, t| tb.push((n, t.data().to_vec())));
        assert_eq!(ta, tb);
        fa.visit(&mut |n, t| assert!(!t.requires_grad(), "{n} must be frozen"));
    }

    #[test]
    fn resolution_below_32_rejected() {
        assert!(build_feature_network::<f32>(16, 1).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let (f, p) = build_feature_network::<f32>(64, 7).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 3, 64, 64]).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(&x);
        let pyr = f.extract_and_project(&p, &mut tape, xid).unwrap();
        let expect = [
            [2, 32, 32, 32],
            [2, 64, 16, 16],
            [2, 64, 8, 8],
            [2, 64, 4, 4],
        ];
        for (id, e) in pyr.iter().zip(expect) {
            assert_eq!(tape.dims(*id), e);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let (f, p) = build_feature_network::<f32>(64, 7).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(&x);
        assert!(f.extract_and_project(&p, &mut tape, xid).is_err());
    }

    #[test]
    fn discriminator_scale_count_and_determinism() {
        let d = MultiScaleDiscriminator::<f32>::build(
            64,
            Variant::Baseline,
            DscOrder::DepthwiseFirst,
            &mut Rng::stream(9, "weights_d", 0),
        )
        .unwrap();
        let (f, p) = build_feature_network::<f32>(64, 7).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 3, 64, 64]).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(&x);
        let pyr = f.extract_and_project(&p, &mut tape, xid).unwrap();
        let logits = d.forward(&mut tape, &pyr, true).unwrap();
        assert_eq!(logits.len(), 4);
        // Mismatched scale count is a contract error.
        assert!(d.forward(&mut tape, &pyr[..3], true).is_err());
    }

    #[test]
    fn dsc_variant_has_fewer_disc_params() {
        let base = MultiScaleDiscriminator::<f32>::build(
            64,
            Variant::Baseline,
            DscOrder::DepthwiseFirst,
            &mut Rng::stream(1, "weights_d", 0),
        )
        .unwrap();
        let dsc = MultiScaleDiscriminator::<f32>::build(
            64,
            Variant::FpgDg,
            DscOrder::DepthwiseFirst,
            &mut Rng::stream(1, "weights_d", 0),
        )
        .unwrap();
        let fpg_g = MultiScaleDiscriminator::<f32>::build(
            64,
            Variant::FpgG,
            DscOrder::DepthwiseFirst,
            &mut Rng::stream(1, "weights_d", 0),
        )
        .unwrap();
        assert!(dsc.param_count() < base.param_count());
        assert_eq!(fpg_g.param_count(), base.param_count());
    }

    #[test]
    fn hinge_d_loss_values() {
        let mut tape: Tape<f64> = Tape::new();
        // All real >= 1 and fake <= -1: loss 0.
        let real = tape.constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 1.5]).unwrap();
        let fake = tape
            .constant(&[1, 1, 2, 2], vec![-1.0, -2.0, -3.0, -1.5])
            .unwrap();
        let loss = hinge_d_loss(&mut tape, &[real], &[fake]).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 0.0);

        // Single scale, real = fake = 0: 1 + 1 = 2.
        let zero = tape.constant(&[1, 1, 1, 1], vec![0.0]).unwrap();
        let loss = hinge_d_loss(&mut tape, &[zero], &[zero]).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 2.0);

        assert!(hinge_d_loss(&mut tape, &[], &[]).is_err());
    }

    #[test]
    fn hinge_d_matches_direct_formula() {
        let mut rng = Rng::from_seed(21);
        let real = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut rng).unwrap();
        let fake = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut rng).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let r = tape.leaf(&real);
        let f = tape.leaf(&fake);
        let loss = hinge_d_loss(&mut tape, &[r], &[f]).unwrap();
        let direct = {
            let rm: f64 = real.data().iter().map(|&v| (1.0 - v).max(0.0)).sum::<f64>()
                / real.numel() as f64;
            let fm: f64 = fake.data().iter().map(|&v| (1.0 + v).max(0.0)).sum::<f64>()
                / fake.numel() as f64;
            rm + fm
        };
        assert!((tape.scalar(loss).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn hinge_g_loss_values() {
        let mut tape: Tape<f64> = Tape::new();
        let fake = tape.constant(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let loss = hinge_g_loss(&mut tape, &[fake]).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), -2.0);

        let zeros = tape.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let loss = hinge_g_loss(&mut tape, &[zeros]).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 0.0);

        // Two scales with means m1, m2 -> -(m1 + m2).
        let a = tape.constant(&[1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let b = tape.constant(&[1, 1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let loss = hinge_g_loss(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), -3.0);

        assert!(hinge_g_loss(&mut tape, &[]).is_err());
    }
}
