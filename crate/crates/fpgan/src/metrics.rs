//! Evaluation metrics over a pluggable feature extractor: Frechet distance
//! between Gaussian feature fits (FID), unbiased kernel MMD^2 with a cubic
//! polynomial kernel (KID), and k-NN manifold precision/recall.
//!
//! The default extractor is a seeded random 3-stage conv net with global
//! average pooling (d = 64). It is a desk-scale stand-in: values are
//! internally consistent and deterministic but NOT comparable to published
//! numbers computed with pretrained Inception features.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::checkpoint::Checkpoint;
use crate::cost::{ConvKind, ConvSpec};
use crate::error::{Error, Result};
use crate::nn::ConvLayer;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Channel widths of the extractor stages; the last is the feature dim.
const EXTRACTOR_CHANNELS: [usize; 3] = [16, 32, 64];
pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorSource {
    SeededRandom(u64),
    Checkpoint(String),
}

/// Frozen feature extractor mapping `[N,3,R,R]` images (R divisible by 8)
/// to `[N, 64]` feature rows.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub source: ExtractorSource,
    stages: Vec<ConvLayer<f32>>,
}

impl FeatureExtractor {
    pub fn seeded_random(seed: u64) -> Result<Self> {
        let mut rng = Rng::stream(seed, "extractor", 0);
        let mut stages = Vec::new();
        let mut c_in = 3usize;
        for &c_out in EXTRACTOR_CHANNELS.iter() {
            let spec = ConvSpec::new(ConvKind::Standard, c_in, c_out, 4)
                .with_stride(2)
                .with_padding(1)
                .with_bias(true);
            let mut stage = ConvLayer::build(spec, &mut rng)?;
            stage.set_trainable(false);
            stages.push(stage);
            c_in = c_out;
        }
        Ok(FeatureExtractor {
            source: ExtractorSource::SeededRandom(seed),
            stages,
        })
    }

    /// Loads extractor weights from an FPGN container written by
    /// [`FeatureExtractor::save`].
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut ex = Self::seeded_random(0)?;
        ex.source = ExtractorSource::Checkpoint(path.display().to_string());
        for (i, stage) in ex.stages.iter_mut().enumerate() {
            stage.visit_mut(&format!("ext.stage{i}"), &mut |name, t| {
                // Propagate the first error through a best-effort fill; dims
                // are checked by load_into.
                if let Err(e) = ck.load_into(&name, t) {
                    panic!("extractor checkpoint: {e}");
                }
            });
        }
        for s in ex.stages.iter_mut() {
            s.set_trainable(false);
        }
        Ok(ex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.visit(&format!("ext.stage{i}"), &mut |name, t| {
                ck.insert(&name, t);
            });
        }
        ck.save(path)
    }

    /// Feature rows for a batch of images; deterministic.
    pub fn features(&self, images: &Tensor<f32>) -> Result<FeatureSet> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::shape(format!(
                "extractor expects [N,3,R,R], got {dims:?}"
            )));
        }
        if dims[2] % 8 != 0 || dims[2] != dims[3] {
            return Err(Error::shape(format!(
                "extractor needs square images with side divisible by 8, got {}x{}",
                dims[2], dims[3]
            )));
        }
        let mut tape: Tape<f32> = Tape::new();
        let mut h = tape.frozen(images);
        for stage in &self.stages {
            h = stage.forward(&mut tape, h, false)?;
            h = tape.leaky_relu(h, 0.2)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let n = dims[0];
        let rows: Vec<f64> = tape.value(pooled).iter().map(|&v| v as f64).collect();
        debug_assert_eq!(rows.len(), n * FEATURE_DIM);
        Ok(FeatureSet {
            d: FEATURE_DIM,
            rows,
        })
    }
}

/// Row-major feature matrix `[n, d]` in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub d: usize,
    pub rows: Vec<f64>,
}

impl FeatureSet {
    pub fn from_rows(d: usize, rows: Vec<f64>) -> Result<Self> {
        if d == 0 || rows.len() % d != 0 {
            return Err(Error::contract("feature rows not a multiple of d"));
        }
        Ok(FeatureSet { d, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub n: usize,
    pub mu: Vec<f64>,
    /// Row-major d x d covariance, divisor n - 1.
    pub sigma: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn from_features(feats: &FeatureSet) -> Result<Self> {
        let (n, d) = (feats.len(), feats.d);
        if n < 2 {
            return Err(Error::InsufficientSamples { need: 2, got: n });
        }
        let mut mu = vec![0.0f64; d];
        for i in 0..n {
            for (m, &v) in mu.iter_mut().zip(feats.row(i)) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= n as f64;
        }
        let mut sigma = vec![0.0f64; d * d];
        for i in 0..n {
            let row = feats.row(i);
            for a in 0..d {
                let da = row[a] - mu[a];
                for b in a..d {
                    sigma[a * d + b] += da * (row[b] - mu[b]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = sigma[a * d + b] / denom;
                sigma[a * d + b] = v;
                sigma[b * d + a] = v;
            }
        }
        Ok(GaussianStats { n, mu, sigma })
    }

    /// Stats sidecar in the FPGN container with names mu/sigma/n.
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut ck = Checkpoint::new();
        ck.insert("mu", &Tensor::<f64>::from_vec(&[d], self.mu.clone())?);
        ck.insert(
            "sigma",
            &Tensor::<f64>::from_vec(&[d, d], self.sigma.clone())?,
        );
        ck.insert_u64("n", self.n as u64);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mu = ck.tensor::<f64>("mu")?;
        let sigma = ck.tensor::<f64>("sigma")?;
        let n = ck.u64_value("n")? as usize;
        let d = mu.numel();
        if sigma.dims() != [d, d] {
            return Err(Error::Corrupt("sigma dims do not match mu".into()));
        }
        for a in 0..d {
            for b in 0..d {
                if (sigma.data()[a * d + b] - sigma.data()[b * d + a]).abs() > 1e-9 {
                    return Err(Error::Corrupt("sigma is not symmetric".into()));
                }
            }
        }
        Ok(GaussianStats {
            n,
            mu: mu.data().to_vec(),
            sigma: sigma.data().to_vec(),
        })
    }
}

/// Convenience: stats of extracted features.
pub fn feature_stats(images: &Tensor<f32>, e: &FeatureExtractor) -> Result<GaussianStats> {
    GaussianStats::from_features(&e.features(images)?)
}

fn sym_eigenvalues(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let se = m
        .try_symmetric_eigen(1e-13, 100_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    Ok((se.eigenvalues, se.eigenvectors))
}

/// Frechet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`,
/// with negative eigenvalues clamped to zero and the result clamped at 0.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::contract(format!(
            "stat dims differ: {d} vs {}",
            b.dim()
        )));
    }
    let mean_diff: f64 = a
        .mu
        .iter()
        .zip(&b.mu)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = DMatrix::from_row_slice(d, d, &a.sigma);
    let sb = DMatrix::from_row_slice(d, d, &b.sigma);
    let (va, ua) = sym_eigenvalues(sa.clone())?;
    let sqrt_diag = DMatrix::from_diagonal(&va.map(|x| x.max(0.0).sqrt()));
    let sqrt_a = &ua * sqrt_diag * ua.transpose();
    let prod = &sqrt_a * &sb * &sqrt_a;
    let sym = (&prod + prod.transpose()) * 0.5;
    let (vp, _) = sym_eigenvalues(sym)?;
    let tr_sqrt: f64 = vp.iter().map(|&x| x.max(0.0).sqrt()).sum();
    let value = mean_diff + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64], d: usize) -> f64 {
    let mut dot = 0.0;
    for i in 0..d {
        dot += x[i] * y[i];
    }
    let base = dot / d as f64 + 1.0;
    base * base * base
}

/// Unbiased MMD^2 with kernel `(x.y/d + 1)^3`: off-diagonal means of the
/// within-set kernels minus twice the full cross-kernel mean. The unbiased
/// estimator can be slightly negative.
///
/// Operands are ordered canonically before summation so `kid(a, b)` and
/// `kid(b, a)` run the identical float reduction and agree exactly.
pub fn kid(feats_a: &FeatureSet, feats_b: &FeatureSet) -> Result<f64> {
    if feats_a.d != feats_b.d {
        return Err(Error::contract("feature dims differ"));
    }
    let swap = match feats_a.len().cmp(&feats_b.len()) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => {
            let mut swap = false;
            for (x, y) in feats_a.rows.iter().zip(&feats_b.rows) {
                match x.to_bits().cmp(&y.to_bits()) {
                    std::cmp::Ordering::Equal => continue,
                    o => {
                        swap = o == std::cmp::Ordering::Greater;
                        break;
                    }
                }
            }
            swap
        }
    };
    let (feats_a, feats_b) = if swap {
        (feats_b, feats_a)
    } else {
        (feats_a, feats_b)
    };
    let (na, nb, d) = (feats_a.len(), feats_b.len(), feats_a.d);
    if na < 2 || nb < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: na.min(nb),
        });
    }
    let mut kaa = 0.0;
    for i in 0..na {
        for j in 0..na {
            if i != j {
                kaa += poly_kernel(feats_a.row(i), feats_a.row(j), d);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..nb {
        for j in 0..nb {
            if i != j {
                kbb += poly_kernel(feats_b.row(i), feats_b.row(j), d);
            }
        }
    }
    let mut kab = 0.0;
    for i in 0..na {
        for j in 0..nb {
            kab += poly_kernel(feats_a.row(i), feats_b.row(j), d);
        }
    }
    Ok(kaa / (na * (na - 1)) as f64 + kbb / (nb * (nb - 1)) as f64
        - 2.0 * kab / (na * nb) as f64)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += (a - b) * (a - b);
    }
    s
}

/// k-th nearest-neighbor squared radius of every point within one set,
/// self excluded.
fn knn_radii(set: &FeatureSet, k: usize) -> Vec<f64> {
    let n = set.len();
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_dist(set.row(i), set.row(j)))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radii.push(dists[k - 1]);
    }
    radii
}

fn manifold_coverage(candidates: &FeatureSet, manifold: &FeatureSet, radii: &[f64]) -> f64 {
    let mut hits = 0usize;
    for i in 0..candidates.len() {
        let c = candidates.row(i);
        let inside = (0..manifold.len()).any(|j| sq_dist(c, manifold.row(j)) <= radii[j]);
        if inside {
            hits += 1;
        }
    }
    hits as f64 / candidates.len() as f64
}

/// Improved precision/recall: a generated point counts toward precision if
/// it falls inside some real point's k-NN ball; recall swaps the roles.
pub fn precision_recall(
    real: &FeatureSet,
    fake: &FeatureSet,
    k: usize,
) -> Result<(f64, f64)> {
    if real.d != fake.d {
        return Err(Error::contract("feature dims differ"));
    }
    if k == 0 || real.len() < k + 1 || fake.len() < k + 1 {
        return Err(Error::contract(format!(
            "precision_recall needs at least k+1 = {} points per set, got {} and {}",
            k + 1,
            real.len(),
            fake.len()
        )));
    }
    let real_radii = knn_radii(real, k);
    let fake_radii = knn_radii(fake, k);
    let precision = manifold_coverage(fake, real, &real_radii);
    let recall = manifold_coverage(real, fake, &fake_radii);
    Ok((precision, recall))
}
