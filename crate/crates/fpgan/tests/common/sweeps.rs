//! Per-op gradient sweeps shared by the gradients test and the acceptance
//! suite: float64 central differences at rel-err <= 1e-4.

use fpgan::tape::EwiseKind;
use fpgan::tensor::Tensor;
use fpgan::Rng;

use super::{away_from_zero, gradcheck};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

fn randn(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(dims, &mut Rng::from_seed(seed))
        .unwrap()
        .with_requires_grad()
}

pub fn ewise_equal_dims() {
    for kind in [EwiseKind::Add, EwiseKind::Sub, EwiseKind::Mul] {
        let mut inputs = [randn(&[2, 3], 1), randn(&[2, 3], 2)];
        gradcheck(
            &format!("ewise {kind:?}"),
            &mut inputs,
            |t, ids| {
                let y = t.ewise(kind, ids[0], ids[1])?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
    }
}

pub fn ewise_channel_vector() {
    for kind in [EwiseKind::Add, EwiseKind::Sub, EwiseKind::Mul] {
        let mut inputs = [randn(&[2, 3, 4, 4], 3), randn(&[3], 4)];
        gradcheck(
            &format!("ewise bcast {kind:?}"),
            &mut inputs,
            |t, ids| {
                let y = t.ewise(kind, ids[0], ids[1])?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
    }
}

pub fn ewise_channel_map() {
    let mut inputs = [randn(&[2, 3, 4, 4], 5), randn(&[2, 3, 1, 1], 6)];
    gradcheck(
        "ewise gate mul",
        &mut inputs,
        |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
}

pub fn affine() {
    let mut inputs = [randn(&[3, 3], 7)];
    gradcheck(
        "affine",
        &mut inputs,
        |t, ids| {
            let y = t.affine(ids[0], -2.5, 0.75)?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
}

pub fn activations() {
    let mut x = randn(&[2, 4, 3, 3], 8);
    away_from_zero(&mut x, 0.05);
    let mut inputs = [x];
    gradcheck(
        "leaky_relu",
        &mut inputs,
        |t, ids| {
            let y = t.leaky_relu(ids[0], 0.2)?;
            t.sum(y, &[])
        },
        EPS,
        TOL,
    );
    gradcheck(
        "relu",
        &mut inputs,
        |t, ids| {
            let y = t.relu(ids[0])?;
            t.sum(y, &[])
        },
        EPS,
        TOL,
    );
    gradcheck(
        "sigmoid",
        &mut inputs,
        |t, ids| {
            let y = t.sigmoid(ids[0])?;
            t.sum(y, &[])
        },
        EPS,
        TOL,
    );
    gradcheck(
        "tanh",
        &mut inputs,
        |t, ids| {
            let y = t.tanh(ids[0])?;
            t.sum(y, &[])
        },
        EPS,
        TOL,
    );
}

pub fn glu() {
    let mut inputs = [randn(&[2, 6, 3, 3], 9)];
    gradcheck(
        "glu",
        &mut inputs,
        |t, ids| {
            let y = t.glu(ids[0])?;
            t.sum(y, &[])
        },
        EPS,
        TOL,
    );
}

pub fn reductions() {
    let mut inputs = [randn(&[2, 3, 4], 10)];
    for axes in [vec![], vec![0], vec![1], vec![0, 2]] {
        gradcheck(
            &format!("sum axes {axes:?}"),
            &mut inputs,
            |t, ids| {
                let y = t.sum(ids[0], &axes)?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
        gradcheck(
            &format!("mean axes {axes:?}"),
            &mut inputs,
            |t, ids| {
                let y = t.mean(ids[0], &axes)?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
    }
}

pub fn pooling() {
    let mut inputs = [randn(&[2, 3, 4, 4], 11)];
    gradcheck(
        "global_avg_pool",
        &mut inputs,
        |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
    gradcheck(
        "avg_pool block 2",
        &mut inputs,
        |t, ids| {
            let y = t.avg_pool(ids[0], 2)?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
}

pub fn shape_ops() {
    let mut inputs = [randn(&[1, 2, 3, 3], 12)];
    gradcheck(
        "reshape",
        &mut inputs,
        |t, ids| {
            let y = t.reshape(ids[0], &[2, 9])?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
    for factor in [2usize, 3] {
        gradcheck(
            &format!("upsample x{factor}"),
            &mut inputs,
            |t, ids| {
                let y = t.upsample_nearest(ids[0], factor)?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
    }
}

pub fn conv2d() {
    let mut inputs = [
        randn(&[2, 3, 5, 5], 13),
        randn(&[4, 3, 3, 3], 14),
        randn(&[4], 15),
    ];
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        gradcheck(
            &format!("conv2d s{stride} p{pad}"),
            &mut inputs,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
    }
}

pub fn depthwise() {
    let mut inputs = [
        randn(&[2, 3, 5, 5], 16),
        randn(&[3, 1, 3, 3], 17),
        randn(&[3], 18),
    ];
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        gradcheck(
            &format!("depthwise s{stride} p{pad}"),
            &mut inputs,
            |t, ids| {
                let y = t.depthwise_conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                let sq = t.mul(y, y)?;
                t.sum(sq, &[])
            },
            EPS,
            TOL,
        );
    }
}

pub fn pointwise() {
    let mut inputs = [
        randn(&[2, 3, 4, 4], 19),
        randn(&[5, 3, 1, 1], 20),
        randn(&[5], 21),
    ];
    gradcheck(
        "pointwise",
        &mut inputs,
        |t, ids| {
            let y = t.pointwise_conv2d(ids[0], ids[1], Some(ids[2]))?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
}

pub fn batch_norm() {
    let mut inputs = [randn(&[3, 2, 3, 3], 22), randn(&[2], 23), randn(&[2], 24)];
    gradcheck(
        "batch_norm training",
        &mut inputs,
        |t, ids| {
            let (y, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
    gradcheck(
        "batch_norm inference",
        &mut inputs,
        |t, ids| {
            let y = t.batch_norm_eval(ids[0], ids[1], ids[2], &[0.1, -0.2], &[0.9, 1.3], 1e-5)?;
            let sq = t.mul(y, y)?;
            t.sum(sq, &[])
        },
        EPS,
        TOL,
    );
}

pub fn composite_conv_net() {
    let mut inputs = [
        randn(&[2, 2, 6, 6], 25),
        randn(&[4, 2, 3, 3], 26),
        randn(&[4, 1, 3, 3], 27),
        randn(&[3, 4, 1, 1], 28),
        randn(&[3], 29),
    ];
    gradcheck(
        "three-layer conv net",
        &mut inputs,
        |t, ids| {
            let h1 = t.conv2d(ids[0], ids[1], None, 1, 1)?;
            let a1 = t.leaky_relu(h1, 0.2)?;
            let h2 = t.depthwise_conv2d(a1, ids[2], None, 1, 1)?;
            let a2 = t.sigmoid(h2)?;
            let h3 = t.pointwise_conv2d(a2, ids[3], Some(ids[4]))?;
            let a3 = t.tanh(h3)?;
            t.mean(a3, &[])
        },
        EPS,
        TOL,
    );
}

/// Hinge discriminator loss through a small conv discriminator, checked
/// against finite differences of inputs and weights.
pub fn hinge_d_loss_small_discriminator() {
    use fpgan::discriminator::hinge_d_loss;
    let mut inputs = [
        randn(&[2, 3, 8, 8], 40), // real features
        randn(&[2, 3, 8, 8], 41), // fake features
        randn(&[4, 3, 4, 4], 42), // body conv K4 s2 p1
        randn(&[4], 43),
        randn(&[1, 4, 3, 3], 44), // head conv
        randn(&[1], 45),
    ];
    gradcheck(
        "hinge_d_loss small discriminator",
        &mut inputs,
        |t, ids| {
            let mut logits = Vec::new();
            for &x in &ids[..2] {
                let h = t.conv2d(x, ids[2], Some(ids[3]), 2, 1)?;
                let a = t.leaky_relu(h, 0.2)?;
                logits.push(t.conv2d(a, ids[4], Some(ids[5]), 1, 1)?);
            }
            hinge_d_loss(t, &logits[..1], &logits[1..])
        },
        EPS,
        TOL,
    );
}

/// Runs every sweep; the acceptance suite calls this as criterion coverage.
pub fn run_all() {
    ewise_equal_dims();
    ewise_channel_vector();
    ewise_channel_map();
    affine();
    activations();
    glu();
    reductions();
    pooling();
    shape_ops();
    conv2d();
    depthwise();
    pointwise();
    batch_norm();
    composite_conv_net();
    hinge_d_loss_small_discriminator();
}
