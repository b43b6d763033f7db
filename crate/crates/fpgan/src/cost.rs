//! Analytic parameter and FLOP accounting for convolution layers.
//!
//! FLOPs are counted as 2 x multiply-accumulates of the convolution proper;
//! bias adds and normalization are excluded as dominated terms, which keeps
//! the separable/standard ratios exact:
//! params(separable)/params(standard) = 1/C_out + 1/K^2 when C_in == C_out.

use crate::element::Dtype;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
    Separable,
}

/// Stage order inside a separable convolution. The classic decomposition is
/// depthwise-first; pointwise-first is kept as an explicit variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DscOrder {
    #[default]
    DepthwiseFirst,
    PointwiseFirst,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
    pub dsc_order: DscOrder,
}

impl ConvSpec {
    pub fn new(kind: ConvKind, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            has_bias: false,
            dsc_order: DscOrder::DepthwiseFirst,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_order(mut self, order: DscOrder) -> Self {
        self.dsc_order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::config("conv spec extents must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        match self.kind {
            ConvKind::Depthwise if self.in_channels != self.out_channels => Err(Error::config(
                "depthwise requires in_channels == out_channels",
            )),
            ConvKind::Pointwise if self.kernel != 1 => {
                Err(Error::config("pointwise requires K == 1"))
            }
            _ => Ok(()),
        }
    }

    /// Output spatial extents using floor division; `conv2d` itself insists
    /// on exact divisibility, counting does not.
    pub fn out_hw(&self, input_hw: (usize, usize)) -> (usize, usize) {
        let ext = |v: usize| (v + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (ext(input_hw.0), ext(input_hw.1))
    }

    /// Weight (+bias) element count.
    pub fn param_count(&self) -> u64 {
        let (ci, co, k2) = (
            self.in_channels as u64,
            self.out_channels as u64,
            (self.kernel * self.kernel) as u64,
        );
        let bias = if self.has_bias { co } else { 0 };
        match self.kind {
            ConvKind::Standard => co * ci * k2 + bias,
            ConvKind::Depthwise => ci * k2 + bias,
            ConvKind::Pointwise => co * ci + bias,
            ConvKind::Separable => ci * k2 + ci * co + bias,
        }
    }

    /// FLOPs (2 x MACs) at a given input size. For separable convs the two
    /// stages run at the resolutions implied by `dsc_order`.
    pub fn flop_count(&self, input_hw: (usize, usize)) -> u64 {
        let (ci, co, k2) = (
            self.in_channels as u64,
            self.out_channels as u64,
            (self.kernel * self.kernel) as u64,
        );
        let (ho, wo) = self.out_hw(input_hw);
        let out_px = (ho * wo) as u64;
        match self.kind {
            ConvKind::Standard => 2 * out_px * co * ci * k2,
            ConvKind::Depthwise => 2 * out_px * ci * k2,
            ConvKind::Pointwise => 2 * out_px * co * ci,
            ConvKind::Separable => match self.dsc_order {
                // depthwise carries stride/padding; pointwise runs at the
                // reduced resolution.
                DscOrder::DepthwiseFirst => 2 * out_px * ci * k2 + 2 * out_px * ci * co,
                // pointwise runs at input resolution; depthwise then strides.
                DscOrder::PointwiseFirst => {
                    let in_px = (input_hw.0 * input_hw.1) as u64;
                    2 * in_px * ci * co + 2 * out_px * co * k2
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRatio {
    pub params: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CostReport {
    pub params: u64,
    pub param_bytes: u64,
    pub flops: u64,
    /// For separable specs: analytic cost relative to the equivalent
    /// standard convolution.
    pub ratio_vs_standard: Option<CostRatio>,
}

pub fn count_cost(spec: &ConvSpec, input_hw: (usize, usize), dtype: Dtype) -> Result<CostReport> {
    spec.validate()?;
    let params = spec.param_count();
    let flops = spec.flop_count(input_hw);
    let ratio_vs_standard = match spec.kind {
        ConvKind::Separable => {
            let std_spec = ConvSpec {
                kind: ConvKind::Standard,
                ..*spec
            };
            Some(CostRatio {
                params: params as f64 / std_spec.param_count() as f64,
                flops: flops as f64 / std_spec.flop_count(input_hw) as f64,
            })
        }
        _ => None,
    };
    Ok(CostReport {
        params,
        param_bytes: params * dtype.width() as u64,
        flops,
        ratio_vs_standard,
    })
}
