//! Shared test oracles: finite-difference gradient checking and a
//! nested-loop reference convolution. Both are deliberately independent of
//! the implementation paths they verify.

#![allow(dead_code)]

pub mod sweeps;

use fpgan::conv::ConvGeom;
use fpgan::tape::{NodeId, Tape};
use fpgan::tensor::{finite_diff_grad, Tensor};
use fpgan::Result;

/// Mixed relative/absolute error used by all gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Checks analytic gradients of `build` (a tape program over the given
/// inputs ending in a scalar) against central differences, for every input
/// marked `requires_grad`.
pub fn gradcheck<F>(name: &str, inputs: &mut [Tensor<f64>], build: F, eps: f64, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
    tape.backward(loss)
        .unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));

    for k in 0..inputs.len() {
        if !inputs[k].requires_grad() {
            continue;
        }
        let analytic = tape
            .leaf_grad(&inputs[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let others: &[Tensor<f64>] = inputs;
        let numeric = finite_diff_grad(
            &mut |probe: &Tensor<f64>| {
                let mut t: Tape<f64> = Tape::new();
                let ids: Vec<NodeId> = others
                    .iter()
                    .enumerate()
                    .map(|(i, inp)| if i == k { t.leaf(probe) } else { t.leaf(inp) })
                    .collect();
                let loss = build(&mut t, &ids)?;
                t.scalar(loss)
            },
            &inputs[k],
            eps,
        )
        .unwrap_or_else(|e| panic!("{name}: finite diff failed: {e}"));
        let err = max_rel_err(&analytic, numeric.data());
        assert!(
            err <= tol,
            "{name}: input {k} gradient mismatch, max rel err {err:.3e} > {tol:.1e}\n analytic: {:?}\n numeric:  {:?}",
            &analytic[..analytic.len().min(8)],
            &numeric.data()[..numeric.data().len().min(8)]
        );
    }
}

/// Seven-deep nested-loop reference convolution (cross-correlation), the
/// oracle for every conv-family kernel.
pub fn conv_reference<TN: Copy + Into<f64>>(
    x: &[TN],
    g: &ConvGeom,
    w: &[TN],
    bias: Option<&[TN]>,
) -> Vec<f64> {
    let mut y = vec![0.0f64; g.n * g.c_out * g.h_out * g.w_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0f64;
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xi =
                                    ((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize;
                                let wi = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                                acc += x[xi].into() * w[wi].into();
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[co].into();
                    }
                    y[((n * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
    }
    y
}

/// Depthwise reference: output channel c convolves input channel c only.
pub fn depthwise_reference<TN: Copy + Into<f64>>(
    x: &[TN],
    g: &ConvGeom,
    w: &[TN],
    bias: Option<&[TN]>,
) -> Vec<f64> {
    let mut y = vec![0.0f64; g.n * g.c_in * g.h_out * g.w_out];
    for n in 0..g.n {
        for c in 0..g.c_in {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0f64;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            let xi = ((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize;
                            acc += x[xi].into() * w[(c * g.k + ky) * g.k + kx].into();
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[c].into();
                    }
                    y[((n * g.c_in + c) * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
    }
    y
}

/// Shifts values away from zero so kinked activations (relu family) stay on
/// one side of the kink during central differencing.
pub fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}
