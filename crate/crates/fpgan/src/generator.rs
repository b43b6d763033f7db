//! The generator: latent -> 4x4 seed block -> chain of upsampling blocks
//! (conv kind switchable per variant) with skip-layer-excitation gates, then
//! a toRGB conv with tanh.
//!
//! Variant semantics:
//! - `baseline`: standard convolutions everywhere.
//! - `fpg-g`: depthwise-separable convolutions in the UpBlocks only; the SLE
//!   gate convs stay standard.
//! - `fpg-dg`: separable convolutions in the UpBlocks, in the SLE gate convs,
//!   and in the discriminator stacks (see `discriminator`).
//!
//! toRGB and the 1-channel discriminator heads stay standard in every
//! variant.

use std::collections::BTreeMap;

use crate::cost::{ConvKind, ConvSpec, DscOrder};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, ConvLayer, Mode};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    FpgG,
    FpgDg,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FpgG => "fpg-g",
            Variant::FpgDg => "fpg-dg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fpg-g" => Ok(Variant::FpgG),
            "fpg-dg" => Ok(Variant::FpgDg),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected baseline|fpg-g|fpg-dg)"
            ))),
        }
    }

    /// Conv kind used inside generator UpBlocks.
    pub fn upblock_kind(&self) -> ConvKind {
        match self {
            Variant::Baseline => ConvKind::Standard,
            Variant::FpgG | Variant::FpgDg => ConvKind::Separable,
        }
    }

    /// Conv kind used for the K>1 SLE gate conv.
    pub fn sle_kind(&self) -> ConvKind {
        match self {
            Variant::Baseline | Variant::FpgG => ConvKind::Standard,
            Variant::FpgDg => ConvKind::Separable,
        }
    }

    /// Conv kind used in discriminator body stacks.
    pub fn disc_kind(&self) -> ConvKind {
        match self {
            Variant::Baseline | Variant::FpgG => ConvKind::Standard,
            Variant::FpgDg => ConvKind::Separable,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub output_resolution: usize,
    pub base_channels: usize,
    pub channel_schedule: BTreeMap<usize, usize>,
    pub sle_pairs: Vec<(usize, usize)>,
    pub variant: Variant,
    pub dsc_order: DscOrder,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Default schedule: channels(4) = 16 * base, halving as resolution
    /// doubles, floored at 32 (at 16*base for tiny bases). Default SLE pairs
    /// (8,128) and (16,256), clipped to the resolutions present.
    pub fn new(
        output_resolution: usize,
        base_channels: usize,
        latent_dim: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        if base_channels == 0 || latent_dim == 0 {
            return Err(Error::config("base_channels and latent_dim must be >= 1"));
        }
        let floor = 32.min(16 * base_channels);
        let mut channel_schedule = BTreeMap::new();
        let mut res = 4usize;
        let mut ch = 16 * base_channels;
        loop {
            channel_schedule.insert(res, ch.max(floor));
            if res >= output_resolution {
                break;
            }
            res *= 2;
            ch /= 2;
        }
        let sle_pairs = [(8usize, 128usize), (16, 256)]
            .into_iter()
            .filter(|(lo, hi)| {
                channel_schedule.contains_key(lo) && channel_schedule.contains_key(hi)
            })
            .collect();
        let cfg = GeneratorConfig {
            latent_dim,
            output_resolution,
            base_channels,
            channel_schedule,
            sle_pairs,
            variant,
            dsc_order: DscOrder::DepthwiseFirst,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.output_resolution;
        if r < 16 || !r.is_power_of_two() {
            return Err(Error::config(format!(
                "output_resolution must be a power of two >= 16, got {r}"
            )));
        }
        let mut res = 4usize;
        while res <= r {
            if !self.channel_schedule.contains_key(&res) {
                return Err(Error::config(format!(
                    "channel_schedule missing resolution {res}"
                )));
            }
            res *= 2;
        }
        for &(lo, hi) in &self.sle_pairs {
            if lo >= hi {
                return Err(Error::config(format!("sle pair ({lo},{hi}) needs low < high")));
            }
            if !self.channel_schedule.contains_key(&lo)
                || !self.channel_schedule.contains_key(&hi)
                || hi > r
            {
                return Err(Error::config(format!(
                    "sle pair ({lo},{hi}) not covered by the schedule"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, resolution: usize) -> usize {
        self.channel_schedule[&resolution]
    }
}

/// One upsampling stage: upsample x2 -> conv (emitting 2x the target
/// channels) -> batch norm -> GLU (halving back).
#[derive(Debug)]
pub struct UpBlock<T: Element> {
    pub in_res: usize,
    pub conv: ConvLayer<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> UpBlock<T> {
    fn build(
        in_res: usize,
        in_ch: usize,
        out_ch: usize,
        kind: ConvKind,
        order: DscOrder,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = ConvSpec::new(kind, in_ch, 2 * out_ch, 3)
            .with_padding(1)
            .with_order(order);
        Ok(UpBlock {
            in_res,
            conv: ConvLayer::build(spec, rng)?,
            bn: BatchNorm2d::new(2 * out_ch)?,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<NodeId> {
        let up = tape.upsample_nearest(x, 2)?;
        let conv = self.conv.forward(tape, up, trainable)?;
        let normed = self.bn.forward(tape, conv, mode, trainable)?;
        tape.glu(normed)
    }
}

/// Skip-layer excitation: pools the low-resolution map to 4x4, squeezes it
/// to per-channel gates through a K=4 valid conv and a pointwise conv, and
/// multiplies the sigmoid gates onto the high-resolution map.
#[derive(Debug)]
pub struct SleBlock<T: Element> {
    pub low_res: usize,
    pub high_res: usize,
    pub gate_conv: ConvLayer<T>,
    pub gate_pw: ConvLayer<T>,
}

impl<T: Element> SleBlock<T> {
    fn build(
        low_res: usize,
        high_res: usize,
        low_ch: usize,
        high_ch: usize,
        kind: ConvKind,
        order: DscOrder,
        rng: &mut Rng,
    ) -> Result<Self> {
        let gate_spec = ConvSpec::new(kind, low_ch, high_ch, 4)
            .with_bias(true)
            .with_order(order);
        let pw_spec = ConvSpec::new(ConvKind::Pointwise, high_ch, high_ch, 1).with_bias(true);
        Ok(SleBlock {
            low_res,
            high_res,
            gate_conv: ConvLayer::build(gate_spec, rng)?,
            gate_pw: ConvLayer::build(pw_spec, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        low: NodeId,
        high: NodeId,
        trainable: bool,
    ) -> Result<NodeId> {
        let low_dims = tape.dims(low).to_vec();
        let high_dims = tape.dims(high).to_vec();
        if low_dims.len() != 4 || high_dims.len() != 4 {
            return Err(Error::shape("sle inputs must be 4-D"));
        }
        if low_dims[2] != self.low_res || high_dims[2] != self.high_res {
            return Err(Error::shape(format!(
                "sle pair expects resolutions ({},{}), got ({},{})",
                self.low_res, self.high_res, low_dims[2], high_dims[2]
            )));
        }
        let block = (low_dims[2] / 4).max(1);
        let pooled = tape.avg_pool(low, block)?;
        let squeezed = self.gate_conv.forward(tape, pooled, trainable)?;
        let act = tape.leaky_relu(squeezed, T::from_f64(0.1))?;
        let mixed = self.gate_pw.forward(tape, act, trainable)?;
        let gate = tape.sigmoid(mixed)?;
        tape.mul(high, gate)
    }
}

#[derive(Debug)]
pub struct Generator<T: Element> {
    pub cfg: GeneratorConfig,
    pub seed_fc: ConvLayer<T>,
    pub seed_bn: BatchNorm2d<T>,
    pub upblocks: Vec<UpBlock<T>>,
    pub sle_blocks: Vec<SleBlock<T>>,
    pub to_rgb: ConvLayer<T>,
}

impl<T: Element> Generator<T> {
    /// Deterministic build: all draws come from `rng` in a fixed order.
    pub fn build(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let ch4 = cfg.channels(4);
        // Latent enters as [N, latent, 1, 1]; the seed map is a pointwise
        // conv to 2*ch4*16 features, reshaped to [N, 2*ch4, 4, 4] so the
        // norm + GLU leave ch4 channels at 4x4.
        let seed_spec = ConvSpec::new(ConvKind::Pointwise, cfg.latent_dim, 2 * ch4 * 16, 1);
        let seed_fc = ConvLayer::build(seed_spec, rng)?;
        let seed_bn = BatchNorm2d::new(2 * ch4)?;

        let mut upblocks = Vec::new();
        let mut res = 4usize;
        while res < cfg.output_resolution {
            upblocks.push(UpBlock::build(
                res,
                cfg.channels(res),
                cfg.channels(res * 2),
                cfg.variant.upblock_kind(),
                cfg.dsc_order,
                rng,
            )?);
            res *= 2;
        }

        let mut sle_blocks = Vec::new();
        for &(lo, hi) in &cfg.sle_pairs {
            sle_blocks.push(SleBlock::build(
                lo,
                hi,
                cfg.channels(lo),
                cfg.channels(hi),
                cfg.variant.sle_kind(),
                cfg.dsc_order,
                rng,
            )?);
        }

        let rgb_spec = ConvSpec::new(
            ConvKind::Standard,
            cfg.channels(cfg.output_resolution),
            3,
            3,
        )
        .with_padding(1)
        .with_bias(true);
        let to_rgb = ConvLayer::build(rgb_spec, rng)?;

        Ok(Generator {
            cfg: cfg.clone(),
            seed_fc,
            seed_bn,
            upblocks,
            sle_blocks,
            to_rgb,
        })
    }

    /// Latent `[N, latent_dim]` to image `[N, 3, R, R]` in [-1, 1].
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        z: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<NodeId> {
        let z_dims = tape.dims(z).to_vec();
        if z_dims.len() != 2 || z_dims[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent dims {:?} do not match [N, {}]",
                z_dims, self.cfg.latent_dim
            )));
        }
        let n = z_dims[0];
        let ch4 = self.cfg.channels(4);

        let z4 = tape.reshape(z, &[n, self.cfg.latent_dim, 1, 1])?;
        let fc = self.seed_fc.forward(tape, z4, trainable)?;
        let grid = tape.reshape(fc, &[n, 2 * ch4, 4, 4])?;
        let normed = self.seed_bn.forward(tape, grid, mode, trainable)?;
        let mut x = tape.glu(normed)?;

        let mut feats: BTreeMap<usize, NodeId> = BTreeMap::new();
        feats.insert(4, x);
        let mut res = 4usize;
        for ub in &mut self.upblocks {
            x = ub.forward(tape, x, mode, trainable)?;
            res *= 2;
            for sle in &self.sle_blocks {
                if sle.high_res == res {
                    let low = feats[&sle.low_res];
                    x = sle.forward(tape, low, x, trainable)?;
                }
            }
            feats.insert(res, x);
        }

        let rgb = self.to_rgb.forward(tape, x, trainable)?;
        tape.tanh(rgb)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.seed_fc.visit("g.seed.fc", f);
        self.seed_bn.visit("g.seed.bn", f);
        for ub in &self.upblocks {
            let p = format!("g.up{}", ub.in_res * 2);
            ub.conv.visit(&format!("{p}.conv"), f);
            ub.bn.visit(&format!("{p}.bn"), f);
        }
        for sle in &self.sle_blocks {
            let p = format!("g.sle{}_{}", sle.low_res, sle.high_res);
            sle.gate_conv.visit(&format!("{p}.gate"), f);
            sle.gate_pw.visit(&format!("{p}.pw"), f);
        }
        self.to_rgb.visit("g.to_rgb", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.seed_fc.visit_mut("g.seed.fc", f);
        self.seed_bn.visit_mut("g.seed.bn", f);
        for ub in &mut self.upblocks {
            let p = format!("g.up{}", ub.in_res * 2);
            ub.conv.visit_mut(&format!("{p}.conv"), f);
            ub.bn.visit_mut(&format!("{p}.bn"), f);
        }
        for sle in &mut self.sle_blocks {
            let p = format!("g.sle{}_{}", sle.low_res, sle.high_res);
            sle.gate_conv.visit_mut(&format!("{p}.gate"), f);
            sle.gate_pw.visit_mut(&format!("{p}.pw"), f);
        }
        self.to_rgb.visit_mut("g.to_rgb", f);
    }

    /// All tensors as (name, tensor) pairs in traversal order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }
}

// ---------------------------------------------------------------------------
// Parameter report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub label: String,
    pub params: u64,
    pub param_bytes: u64,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub rows: Vec<ReportRow>,
    pub total_params: u64,
    pub total_param_bytes: u64,
    pub total_flops: u64,
}

impl ParamReport {
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(5)
            .max("TOTAL".len());
        s.push_str(&format!(
            "{:<width$}  {:>12}  {:>14}  {:>16}\n",
            "block", "params", "param_bytes", "flops"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:>12}  {:>14}  {:>16}\n",
                r.label, r.params, r.param_bytes, r.flops
            ));
        }
        s.push_str(&format!(
            "{:<width$}  {:>12}  {:>14}  {:>16}\n",
            "TOTAL", self.total_params, self.total_param_bytes, self.total_flops
        ));
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("block,params,param_bytes,flops\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.label, r.params, r.param_bytes, r.flops
            ));
        }
        s.push_str(&format!(
            "TOTAL,{},{},{}\n",
            self.total_params, self.total_param_bytes, self.total_flops
        ));
        s
    }
}

/// Per-block parameter/FLOP table. Conv costs come from the analytic
/// counter at each block's operating resolution; batch-norm affine
/// parameters are included in the params column, normalization FLOPs are
/// not counted.
pub fn generator_param_report<T: Element>(g: &Generator<T>) -> ParamReport {
    let width = T::DTYPE.width() as u64;
    let mut rows = Vec::new();

    let seed_cost = g.seed_fc.cost((1, 1));
    rows.push(ReportRow {
        label: "seed".into(),
        params: seed_cost.params + g.seed_bn.affine_param_count(),
        param_bytes: (seed_cost.params + g.seed_bn.affine_param_count()) * width,
        flops: seed_cost.flops,
    });

    for ub in &g.upblocks {
        let hw = ub.in_res * 2;
        let cost = ub.conv.cost((hw, hw));
        let params = cost.params + ub.bn.affine_param_count();
        rows.push(ReportRow {
            label: format!("up{}", hw),
            params,
            param_bytes: params * width,
            flops: cost.flops,
        });
    }

    for sle in &g.sle_blocks {
        let gate = sle.gate_conv.cost((4, 4));
        let pw = sle.gate_pw.cost((1, 1));
        rows.push(ReportRow {
            label: format!("sle{}_{}", sle.low_res, sle.high_res),
            params: gate.params + pw.params,
            param_bytes: (gate.params + pw.params) * width,
            flops: gate.flops + pw.flops,
        });
    }

    let r = g.cfg.output_resolution;
    let rgb = g.to_rgb.cost((r, r));
    rows.push(ReportRow {
        label: "to_rgb".into(),
        params: rgb.params,
        param_bytes: rgb.params * width,
        flops: rgb.flops,
    });

    let total_params = rows.iter().map(|r| r.params).sum();
    let total_param_bytes = rows.iter().map(|r| r.param_bytes).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    ParamReport {
        rows,
        total_params,
        total_param_bytes,
        total_flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> GeneratorConfig {
        GeneratorConfig::new(32, 2, 16, variant, 1234).unwrap()
    }

    #[test]
    fn build_is_bitwise_reproducible() {
        let cfg = tiny_cfg(Variant::FpgG);
        let a: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(cfg.seed, "weights_g", 0)).unwrap();
        let b: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(cfg.seed, "weights_g", 0)).unwrap();
        let ta = a.named_tensors();
        let tb = b.named_tensors();
        assert_eq!(ta.len(), tb.len());
        for ((na, va), (nb, vb)) in ta.iter().zip(&tb) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data(), "tensor {na} differs");
        }
    }

    #[test]
    fn forward_shape_and_range() {
        let cfg = tiny_cfg(Variant::Baseline);
        let mut g: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(cfg.seed, "weights_g", 0)).unwrap();
        let mut rng = Rng::from_seed(5);
        let z = Tensor::<f32>::randn(&[8, 16], &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let zid = tape.leaf(&z);
        let out = g.forward(&mut tape, zid, Mode::Training, true).unwrap();
        assert_eq!(tape.dims(out), &[8, 3, 32, 32]);
        assert!(tape.value(out).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn latent_dim_mismatch_rejected() {
        let cfg = tiny_cfg(Variant::Baseline);
        let mut g: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(cfg.seed, "weights_g", 0)).unwrap();
        let z = Tensor::<f32>::zeros(&[2, 9]).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let zid = tape.leaf(&z);
        assert!(g.forward(&mut tape, zid, Mode::Training, true).is_err());
    }

    #[test]
    fn variant_changes_upblocks_not_sle() {
        // At R=256 the default SLE pairs exist; compare baseline vs fpg-g.
        let base = GeneratorConfig::new(256, 4, 64, Variant::Baseline, 7).unwrap();
        let fpg = GeneratorConfig::new(256, 4, 64, Variant::FpgG, 7).unwrap();
        let gb: Generator<f32> =
            Generator::build(&base, &mut Rng::stream(7, "weights_g", 0)).unwrap();
        let gf: Generator<f32> =
            Generator::build(&fpg, &mut Rng::stream(7, "weights_g", 0)).unwrap();
        let rb = generator_param_report(&gb);
        let rf = generator_param_report(&gf);
        for (a, b) in rb.rows.iter().zip(&rf.rows) {
            assert_eq!(a.label, b.label);
            if a.label.starts_with("sle") || a.label == "seed" || a.label == "to_rgb" {
                assert_eq!(a.params, b.params, "row {} should match", a.label);
            } else {
                assert!(b.params < a.params, "row {} should shrink", a.label);
            }
        }
        assert!(rf.total_params < rb.total_params);
    }

    #[test]
    fn report_rows_sum_to_total() {
        let cfg = tiny_cfg(Variant::FpgDg);
        let g: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(cfg.seed, "weights_g", 0)).unwrap();
        let rep = generator_param_report(&g);
        assert_eq!(rep.total_params, rep.rows.iter().map(|r| r.params).sum::<u64>());
        // Totals also match the live tensor count (params + bn affine only).
        let live: u64 = g
            .named_tensors()
            .iter()
            .filter(|(n, t)| t.requires_grad() && !n.contains("running"))
            .map(|(_, t)| t.numel() as u64)
            .sum();
        assert_eq!(rep.total_params, live);
    }

    #[test]
    fn sle_gate_saturation() {
        let cfg = GeneratorConfig {
            sle_pairs: vec![(4, 16)],
            ..GeneratorConfig::new(16, 2, 8, Variant::Baseline, 3).unwrap()
        };
        let g: Generator<f64> =
            Generator::build(&cfg, &mut Rng::stream(3, "weights_g", 0)).unwrap();
        let sle = &g.sle_blocks[0];
        let mut rng = Rng::from_seed(9);
        let low = Tensor::<f64>::randn(&[1, cfg.channels(4), 4, 4], &mut rng).unwrap();
        let high = Tensor::<f64>::randn(&[1, cfg.channels(16), 16, 16], &mut rng).unwrap();

        // Saturate the gate by forcing the pointwise bias far positive, then
        // far negative.
        for (sign, check) in [(20.0, true), (-20.0, false)] {
            let mut g2: Generator<f64> =
                Generator::build(&cfg, &mut Rng::stream(3, "weights_g", 0)).unwrap();
            let sle2 = &mut g2.sle_blocks[0];
            sle2.gate_pw.visit_mut("pw", &mut |name, t| {
                if name.ends_with(".b") {
                    t.data_mut().fill(sign);
                } else {
                    t.data_mut().fill(0.0);
                }
            });
            let mut tape: Tape<f64> = Tape::new();
            let lo = tape.leaf(&low);
            let hi = tape.leaf(&high);
            let out = g2.sle_blocks[0].forward(&mut tape, lo, hi, true).unwrap();
            assert_eq!(tape.dims(out), high.dims());
            for (o, h) in tape.value(out).iter().zip(high.data()) {
                if check {
                    assert!((o - h).abs() < 1e-6);
                } else {
                    assert!(o.abs() < 1e-6);
                }
            }
        }
        let _ = sle;
    }
}
