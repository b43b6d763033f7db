//! Wall-clock layer benchmarks and analytic memory estimation.
//!
//! Benchmarks must run on an otherwise idle machine on a single thread for
//! the numbers to mean anything; the FLOP column is analytic and does not
//! depend on the measurement.

use std::time::Instant;

use crate::cost::{count_cost, ConvKind, ConvSpec};
use crate::element::Dtype;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{ConvLayer, Mode};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub label: String,
    pub wall_ns_median: u64,
    pub wall_ns_min: u64,
    pub flops: u64,
    pub params: u64,
    pub bytes_touched: u64,
}

impl BenchReport {
    pub fn text(&self) -> String {
        format!(
            "{}\n  params        {}\n  flops         {}\n  bytes_touched {}\n  wall_ns med   {}\n  wall_ns min   {}\n",
            self.label,
            self.params,
            self.flops,
            self.bytes_touched,
            self.wall_ns_median,
            self.wall_ns_min
        )
    }
}

/// Times forward+backward of one conv layer on random input: one warm-up
/// pass, then `iters` timed passes; reports median and minimum.
pub fn bench_layer(
    spec: &ConvSpec,
    input_hw: (usize, usize),
    batch: usize,
    iters: usize,
) -> Result<BenchReport> {
    if iters < 3 {
        return Err(Error::contract("bench requires iters >= 3"));
    }
    spec.validate()?;
    let cost = count_cost(spec, input_hw, Dtype::F32)?;
    let layer: ConvLayer<f32> = ConvLayer::build(*spec, &mut Rng::from_seed(0x42))?;
    let x = Tensor::<f32>::randn(
        &[batch, spec.in_channels, input_hw.0, input_hw.1],
        &mut Rng::from_seed(0x43),
    )?
    .with_requires_grad();

    let run = || -> Result<u64> {
        let start = Instant::now();
        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(&x);
        let y = layer.forward(&mut tape, xid, true)?;
        let loss = tape.sum(y, &[])?;
        tape.backward(loss)?;
        Ok(start.elapsed().as_nanos() as u64)
    };

    run()?; // warm-up
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        times.push(run()?);
    }
    times.sort_unstable();
    let median = times[times.len() / 2];
    let min = times[0];

    let (ho, wo) = spec.out_hw(input_hw);
    let elems_in = (batch * spec.in_channels * input_hw.0 * input_hw.1) as u64;
    let elems_out = (batch * spec.out_channels * ho * wo) as u64;
    let elems_mid = match spec.kind {
        ConvKind::Separable => (batch * spec.in_channels * ho * wo) as u64,
        _ => 0,
    };
    let bytes_touched = (elems_in + elems_out + elems_mid + cost.params) * 4;

    Ok(BenchReport {
        label: format!(
            "{:?} conv {}x{}x{} K{} s{} p{} batch {}",
            spec.kind,
            spec.in_channels,
            input_hw.0,
            input_hw.1,
            spec.kernel,
            spec.stride,
            spec.padding,
            batch
        ),
        wall_ns_median: median,
        wall_ns_min: min,
        flops: cost.flops,
        params: cost.params,
        bytes_touched,
    })
}

/// Analytic training-memory breakdown for a generator at a batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    /// Trainable parameter storage.
    pub param_bytes: u64,
    /// One gradient buffer per trainable parameter.
    pub grad_bytes: u64,
    /// Adam first and second moments.
    pub optimizer_bytes: u64,
    /// Sum of forward activation buffers at the given batch size.
    pub activation_bytes: u64,
}

impl MemoryEstimate {
    pub fn total(&self) -> u64 {
        self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes
    }
}

/// Pure function of (model structure, batch): parameters, gradients, Adam
/// state, and the forward activation footprint measured on a zeros latent.
pub fn memory_estimate(g: &mut Generator<f32>, batch: usize) -> Result<MemoryEstimate> {
    if batch == 0 {
        return Err(Error::contract("batch must be >= 1"));
    }
    let mut param_elems = 0u64;
    g.visit(&mut |_, t| {
        if t.requires_grad() {
            param_elems += t.numel() as u64;
        }
    });
    let width = 4u64;
    let z = Tensor::<f32>::zeros(&[batch, g.cfg.latent_dim])?;
    let mut tape: Tape<f32> = Tape::new();
    let zid = tape.frozen(&z);
    g.forward(&mut tape, zid, Mode::Inference, false)?;
    Ok(MemoryEstimate {
        param_bytes: param_elems * width,
        grad_bytes: param_elems * width,
        optimizer_bytes: 2 * param_elems * width,
        activation_bytes: tape.activation_bytes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GeneratorConfig, Variant};

    #[test]
    fn report_fields_are_consistent() {
        let spec = ConvSpec::new(ConvKind::Standard, 4, 4, 3).with_padding(1);
        let r = bench_layer(&spec, (16, 16), 2, 5).unwrap();
        assert!(r.wall_ns_min <= r.wall_ns_median);
        assert!(r.wall_ns_min > 0);
        assert_eq!(r.flops, count_cost(&spec, (16, 16), Dtype::F32).unwrap().flops);
    }

    #[test]
    fn too_few_iters_rejected() {
        let spec = ConvSpec::new(ConvKind::Standard, 2, 2, 3);
        assert!(bench_layer(&spec, (8, 8), 1, 2).is_err());
    }

    #[test]
    fn activations_grow_with_batch() {
        let cfg = GeneratorConfig::new(16, 2, 8, Variant::Baseline, 3).unwrap();
        let mut g: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(3, "weights_g", 0)).unwrap();
        let m1 = memory_estimate(&mut g, 1).unwrap();
        let m2 = memory_estimate(&mut g, 2).unwrap();
        assert!(m2.activation_bytes > m1.activation_bytes);
        assert_eq!(m1.param_bytes, m2.param_bytes);
        assert_eq!(m1.optimizer_bytes, 2 * m1.param_bytes);
    }

    #[test]
    fn estimate_is_deterministic() {
        let cfg = GeneratorConfig::new(16, 2, 8, Variant::FpgG, 3).unwrap();
        let mut g: Generator<f32> =
            Generator::build(&cfg, &mut Rng::stream(3, "weights_g", 0)).unwrap();
        assert_eq!(
            memory_estimate(&mut g, 2).unwrap(),
            memory_estimate(&mut g, 2).unwrap()
        );
    }
}
