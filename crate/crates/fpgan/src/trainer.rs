//! Deterministic adversarial training: alternating Adam updates with hinge
//! losses, step-indexed latent streams, checkpointing, metric logging, and
//! the ablation runner over conv variants.
//!
//! Determinism contract: (config, seed, dataset) fixes every weight, latent,
//! batch, and loss bitwise. Latents for step s come from the child streams
//! `(seed, "latents", 2s)` (D phase) and `(seed, "latents", 2s+1)` (G
//! phase), and batch order is a pure function of the step index, so resuming
//! from a checkpoint at step k replays exactly the run that never stopped.
//! The only nondeterministic output is the wall-clock `step_ms` column.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::adam::{Adam, AdamHyper};
use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::cost::DscOrder;
use crate::dataset::Dataset;
use crate::discriminator::{
    build_feature_network, hinge_d_loss, hinge_g_loss, FeatureNetwork, MultiScaleDiscriminator,
    ProjectionSet,
};
use crate::error::{Error, Result};
use crate::generator::{generator_param_report, Generator, GeneratorConfig, Variant};
use crate::metrics::{feature_stats, fid, FeatureExtractor, GaussianStats};
use crate::nn::Mode;
use crate::rng::{stream_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,loss_g,loss_d,step_ms,fid,params_g,param_bytes_g";
pub const CHECKPOINT_FILE: &str = "last.fpgn";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";

/// Images used for toy-FID evaluation (both real and generated sides).
const EVAL_SAMPLES: usize = 64;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub resolution: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub dsc_order: DscOrder,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let data_dir = cfg
            .data_dir
            .clone()
            .ok_or_else(|| Error::config("missing required key \"data_dir\""))?;
        let out_dir = cfg
            .out_dir
            .clone()
            .ok_or_else(|| Error::config("missing required key \"out_dir\""))?;
        Ok(TrainConfig {
            variant: cfg.variant,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            adam_eps: 1e-8,
            batch_size: cfg.batch_size,
            total_steps: cfg.steps,
            seed: cfg.seed,
            eval_every: cfg.eval_every,
            resolution: cfg.resolution,
            latent_dim: cfg.latent_dim,
            base_channels: cfg.base_channels,
            dsc_order: cfg.dsc_order,
            data_dir,
            out_dir,
        })
    }

    pub fn to_config_file(&self) -> ConfigFile {
        ConfigFile {
            resolution: self.resolution,
            latent_dim: self.latent_dim,
            base_channels: self.base_channels,
            variant: self.variant,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            steps: self.total_steps,
            seed: self.seed,
            eval_every: self.eval_every,
            dsc_order: self.dsc_order,
            data_dir: Some(self.data_dir.clone()),
            out_dir: Some(self.out_dir.clone()),
        }
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::new(
            self.resolution,
            self.base_channels,
            self.latent_dim,
            self.variant,
            self.seed,
        )?;
        g.dsc_order = self.dsc_order;
        Ok(g)
    }

    pub fn with_variant(&self, variant: Variant, out_dir: PathBuf) -> TrainConfig {
        TrainConfig {
            variant,
            out_dir,
            ..self.clone()
        }
    }
}

/// Everything that evolves during a run.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: MultiScaleDiscriminator<f32>,
    pub features: FeatureNetwork<f32>,
    pub projections: ProjectionSet<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let gen_cfg = cfg.generator_config()?;
        let generator = Generator::build(&gen_cfg, &mut Rng::stream(cfg.seed, "weights_g", 0))?;
        let (features, projections) = build_feature_network(cfg.resolution, cfg.seed)?;
        let discriminator = MultiScaleDiscriminator::build(
            cfg.resolution,
            cfg.variant,
            cfg.dsc_order,
            &mut Rng::stream(cfg.seed, "weights_d", 0),
        )?;
        let hyper = AdamHyper::<f32> {
            lr: cfg.lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.adam_eps as f32,
        };
        Ok(TrainState {
            cfg: cfg.clone(),
            generator,
            discriminator,
            features,
            projections,
            adam_g: Adam::new(hyper),
            adam_d: Adam::new(hyper),
            step: 0,
        })
    }

    fn latents(&self, phase: u64, n: usize) -> Result<Tensor<f32>> {
        let mut rng = Rng::stream(self.cfg.seed, "latents", 2 * self.step + phase);
        Tensor::randn(&[n, self.cfg.latent_dim], &mut rng)
    }

    /// One alternating update: D on real vs detached fakes, then G on fresh
    /// latents. Frozen components stay bitwise untouched.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<(f32, f32)> {
        let dims = batch.dims().to_vec();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.cfg.resolution {
            return Err(Error::shape(format!(
                "batch dims {dims:?} do not match [B,3,{0},{0}]",
                self.cfg.resolution
            )));
        }
        let b = dims[0];
        let executing = self.step + 1;

        // Discriminator phase: fakes are generated with frozen generator
        // weights, so no gradient flows back into G.
        let loss_d = {
            let mut tape: Tape<f32> = Tape::new();
            let z = self.latents(0, b)?;
            let zid = tape.frozen(&z);
            let fakes = self
                .generator
                .forward(&mut tape, zid, Mode::Training, false)?;
            let real = tape.frozen(batch);
            let real_pyr = self
                .features
                .extract_and_project(&self.projections, &mut tape, real)?;
            let fake_pyr = self
                .features
                .extract_and_project(&self.projections, &mut tape, fakes)?;
            let real_logits = self.discriminator.forward(&mut tape, &real_pyr, true)?;
            let fake_logits = self.discriminator.forward(&mut tape, &fake_pyr, true)?;
            let loss = hinge_d_loss(&mut tape, &real_logits, &fake_logits)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: executing,
                    which: "loss_d".into(),
                });
            }
            tape.backward(loss)?;
            apply_adam(&mut self.adam_d, &tape, &mut |f| {
                self.discriminator.visit_mut(f)
            })?;
            value
        };

        // Generator phase: fresh latents, D and the feature net frozen.
        let loss_g = {
            let mut tape: Tape<f32> = Tape::new();
            let z = self.latents(1, b)?;
            let zid = tape.frozen(&z);
            let fakes = self
                .generator
                .forward(&mut tape, zid, Mode::Training, true)?;
            let fake_pyr = self
                .features
                .extract_and_project(&self.projections, &mut tape, fakes)?;
            let fake_logits = self.discriminator.forward(&mut tape, &fake_pyr, false)?;
            let loss = hinge_g_loss(&mut tape, &fake_logits)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: executing,
                    which: "loss_g".into(),
                });
            }
            tape.backward(loss)?;
            apply_adam(&mut self.adam_g, &tape, &mut |f| self.generator.visit_mut(f))?;
            value
        };

        self.step = executing;
        Ok((loss_d, loss_g))
    }

    /// Deterministic sample grid at the current weights (inference mode).
    pub fn generate(&mut self, n: usize, seed: u64) -> Result<Tensor<f32>> {
        let mut rng = Rng::stream(seed, "generate", 0);
        let mut out: Vec<f32> = Vec::new();
        let r = self.cfg.resolution;
        let mut remaining = n;
        while remaining > 0 {
            let b = remaining.min(self.cfg.batch_size.max(1));
            let z = Tensor::<f32>::randn(&[b, self.cfg.latent_dim], &mut rng)?;
            let mut tape: Tape<f32> = Tape::new();
            let zid = tape.frozen(&z);
            let img = self
                .generator
                .forward(&mut tape, zid, Mode::Inference, false)?;
            out.extend_from_slice(tape.value(img));
            remaining -= b;
        }
        Tensor::from_vec(&[n, 3, r, r], out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.generator.visit(&mut |name, t| ck.insert(&name, t));
        self.discriminator.visit(&mut |name, t| ck.insert(&name, t));
        self.features.visit(&mut |name, t| ck.insert(&name, t));
        self.projections.visit(&mut |name, t| ck.insert(&name, t));
        insert_adam(&mut ck, "opt_g", &self.adam_g);
        insert_adam(&mut ck, "opt_d", &self.adam_d);
        ck.insert_u64("meta.step", self.step);
        ck.insert_text("meta.config", &self.cfg.to_config_file().to_json());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let echo = ck.text_value("meta.config")?;
        let cfg = TrainConfig::from_config(&ConfigFile::parse(&echo)?)?;
        let mut state = TrainState::init(&cfg)?;
        let mut first_err: Option<Error> = None;
        {
            let mut fill = |name: String, t: &mut Tensor<f32>| {
                if first_err.is_none() {
                    if let Err(e) = ck.load_into(&name, t) {
                        first_err = Some(e);
                    }
                }
            };
            state.generator.visit_mut(&mut fill);
            state.discriminator.visit_mut(&mut fill);
            state.features.visit_mut(&mut fill);
            state.projections.visit_mut(&mut fill);
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        restore_adam(ck, "opt_g", &mut state.adam_g)?;
        restore_adam(ck, "opt_d", &mut state.adam_d)?;
        state.step = ck.u64_value("meta.step")?;
        Ok(state)
    }
}

fn apply_adam(
    opt: &mut Adam<f32>,
    tape: &Tape<f32>,
    visit_mut: &mut dyn FnMut(&mut dyn FnMut(String, &mut Tensor<f32>)),
) -> Result<()> {
    opt.begin_step();
    let mut first_err: Option<Error> = None;
    visit_mut(&mut |name, t| {
        if first_err.is_some() || !t.requires_grad() {
            return;
        }
        if let Some(grad) = tape.leaf_grad(t) {
            let grad = grad.to_vec();
            if let Err(e) = opt.update(&name, t, &grad) {
                first_err = Some(e);
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn insert_adam(ck: &mut Checkpoint, prefix: &str, opt: &Adam<f32>) {
    let (m, v, t) = opt.state();
    for (name, buf) in m {
        let tensor = Tensor::<f32>::from_vec(&[buf.len().max(1)], buf.clone())
            .expect("adam buffers are non-empty");
        ck.insert(&format!("{prefix}.m.{name}"), &tensor);
    }
    for (name, buf) in v {
        let tensor = Tensor::<f32>::from_vec(&[buf.len().max(1)], buf.clone())
            .expect("adam buffers are non-empty");
        ck.insert(&format!("{prefix}.v.{name}"), &tensor);
    }
    ck.insert_u64(&format!("{prefix}.t"), t);
}

fn restore_adam(ck: &Checkpoint, prefix: &str, opt: &mut Adam<f32>) -> Result<()> {
    let m_prefix = format!("{prefix}.m.");
    let v_prefix = format!("{prefix}.v.");
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let names: Vec<String> = ck.names().map(str::to_string).collect();
    for name in names {
        if let Some(key) = name.strip_prefix(&m_prefix) {
            m.insert(key.to_string(), ck.tensor::<f32>(&name)?.data().to_vec());
        } else if let Some(key) = name.strip_prefix(&v_prefix) {
            v.insert(key.to_string(), ck.tensor::<f32>(&name)?.data().to_vec());
        }
    }
    let t = ck.u64_value(&format!("{prefix}.t"))?;
    opt.restore(m, v, t);
    Ok(())
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

/// Toy-FID of the current generator against the dataset, using the seeded
/// default extractor. Inference mode; completely outside the training RNG
/// streams.
pub fn evaluate_fid(
    state: &mut TrainState,
    extractor: &FeatureExtractor,
    real_stats: &GaussianStats,
    dataset: &Dataset,
) -> Result<f64> {
    let n = dataset.len().min(EVAL_SAMPLES);
    let fakes = state.generate(n, stream_seed(state.cfg.seed, "eval", state.step))?;
    let fake_stats = feature_stats(&fakes, extractor)?;
    fid(real_stats, &fake_stats)
}

fn eval_real_stats(
    dataset: &Dataset,
    extractor: &FeatureExtractor,
) -> Result<GaussianStats> {
    let n = dataset.len().min(EVAL_SAMPLES);
    let idx: Vec<usize> = (0..n).collect();
    let plane = 3 * dataset.resolution * dataset.resolution;
    let mut data = vec![0.0f32; n * plane];
    for (row, &i) in idx.iter().enumerate() {
        data[row * plane..(row + 1) * plane].copy_from_slice(dataset.item(i).data());
    }
    let imgs = Tensor::from_vec(&[n, 3, dataset.resolution, dataset.resolution], data)?;
    feature_stats(&imgs, extractor)
}

#[derive(Debug, Clone, Copy)]
pub struct RunStats {
    pub steps_run: u64,
    pub mean_step_ms: f64,
    pub final_fid: Option<f64>,
}

/// Advances `state` to `total_steps`, appending one CSV row per step. The
/// partial log is flushed row by row, so a divergence error leaves every
/// completed step on disk.
pub fn run_steps(
    state: &mut TrainState,
    dataset: &Dataset,
    csv: &mut dyn Write,
) -> Result<RunStats> {
    let report = generator_param_report(&state.generator);
    let (params_g, param_bytes_g) = (report.total_params, report.total_param_bytes);
    let extractor =
        FeatureExtractor::seeded_random(stream_seed(state.cfg.seed, "metrics_extractor", 0))?;
    let real_stats = eval_real_stats(dataset, &extractor)?;

    let mut total_ms = 0.0f64;
    let mut steps_run = 0u64;
    let mut final_fid = None;
    while state.step < state.cfg.total_steps {
        let batch = dataset.batch(state.step, state.cfg.batch_size)?;
        let t0 = Instant::now();
        let (loss_d, loss_g) = state.train_step(&batch)?;
        let step_ms = t0.elapsed().as_secs_f64() * 1e3;
        total_ms += step_ms;
        steps_run += 1;

        let fid_cell = if state.step % state.cfg.eval_every == 0 {
            let v = evaluate_fid(state, &extractor, &real_stats, dataset)?;
            final_fid = Some(v);
            format!("{v}")
        } else {
            String::new()
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            state.step, loss_g, loss_d, step_ms, fid_cell, params_g, param_bytes_g
        )?;
        csv.flush()?;
    }
    Ok(RunStats {
        steps_run,
        mean_step_ms: if steps_run > 0 {
            total_ms / steps_run as f64
        } else {
            0.0
        },
        final_fid,
    })
}

/// Full training entry point: resumes from `out_dir/last.fpgn` when present,
/// logs metrics, and writes the final checkpoint. Returns the checkpoint and
/// the metrics CSV path.
pub fn train_loop(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, PathBuf)> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join(CONFIG_ECHO_FILE),
        cfg.to_config_file().to_json(),
    )?;
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let csv_path = cfg.out_dir.join(METRICS_FILE);

    let (mut state, resuming) = if ckpt_path.is_file() {
        let ck = Checkpoint::load(&ckpt_path)?;
        let mut state = TrainState::from_checkpoint(&ck)?;
        // Everything except the step budget must match; resuming with a
        // larger `steps` is the intended continuation path.
        let mut stored = state.cfg.to_config_file();
        let mut current = cfg.to_config_file();
        stored.steps = 0;
        current.steps = 0;
        if stored != current {
            return Err(Error::config(format!(
                "checkpoint at {} was trained with a different config",
                ckpt_path.display()
            )));
        }
        state.cfg.total_steps = cfg.total_steps;
        (state, true)
    } else {
        (TrainState::init(cfg)?, false)
    };

    let mut csv_file = if resuming && csv_path.is_file() {
        std::fs::OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "{CSV_HEADER}")?;
        f
    };

    let result = run_steps(&mut state, dataset, &mut csv_file);
    // Divergence still flushes the partial log before propagating.
    csv_file.flush()?;
    result?;

    let ck = state.to_checkpoint();
    ck.save(&ckpt_path)?;
    Ok((ck, csv_path))
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub params_g: u64,
    pub params_d: u64,
    pub mean_step_ms: f64,
    pub fid_initial: f64,
    pub fid_final: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let mut s =
            String::from("variant,params_g,params_d,mean_step_ms,fid_initial,fid_final,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.3},{},{},{}\n",
                r.variant, r.params_g, r.params_d, r.mean_step_ms, r.fid_initial, r.fid_final,
                r.status
            ));
        }
        s
    }

    pub fn text_table(&self) -> String {
        let mut s = format!(
            "{:<10}  {:>12}  {:>12}  {:>14}  {:>12}  {:>12}  {:>10}\n",
            "variant", "params_g", "params_d", "mean_step_ms", "fid_initial", "fid_final", "status"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10}  {:>12}  {:>12}  {:>14.3}  {:>12.4}  {:>12.4}  {:>10}\n",
                r.variant.as_str(),
                r.params_g,
                r.params_d,
                r.mean_step_ms,
                r.fid_initial,
                r.fid_final,
                r.status
            ));
        }
        s
    }
}

/// Trains each variant from scratch under the shared base config and
/// reports parameters, wall time, and toy-FID movement. A diverged variant
/// is recorded in its row; the others still run.
pub fn ablation_run(base_cfg: &TrainConfig, variants: &[Variant]) -> Result<AblationTable> {
    if variants.len() < 2 {
        return Err(Error::contract("ablation needs at least 2 variants"));
    }
    let dataset = crate::dataset::load_dataset(
        &base_cfg.data_dir,
        base_cfg.resolution,
        stream_seed(base_cfg.seed, "data_shuffle", 0),
    )?;
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = base_cfg.with_variant(variant, base_cfg.out_dir.join(variant.as_str()));
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::write(
            cfg.out_dir.join(CONFIG_ECHO_FILE),
            cfg.to_config_file().to_json(),
        )?;
        let mut state = TrainState::init(&cfg)?;
        let extractor =
            FeatureExtractor::seeded_random(stream_seed(cfg.seed, "metrics_extractor", 0))?;
        let real_stats = eval_real_stats(&dataset, &extractor)?;
        let fid_initial = evaluate_fid(&mut state, &extractor, &real_stats, &dataset)?;
        let params_g = generator_param_report(&state.generator).total_params;
        let params_d = state.discriminator.param_count();

        let csv_path = cfg.out_dir.join(METRICS_FILE);
        let mut csv = std::fs::File::create(&csv_path)?;
        writeln!(csv, "{CSV_HEADER}")?;
        let (mean_step_ms, fid_final, status) =
            match run_steps(&mut state, &dataset, &mut csv) {
                Ok(stats) => {
                    state.to_checkpoint().save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
                    let fid_final = match stats.final_fid {
                        Some(v) if state.step % cfg.eval_every == 0 => v,
                        _ => evaluate_fid(&mut state, &extractor, &real_stats, &dataset)?,
                    };
                    (stats.mean_step_ms, fid_final, "ok".to_string())
                }
                Err(Error::Divergence { step, which }) => {
                    (f64::NAN, f64::NAN, format!("diverged at step {step} ({which})"))
                }
                Err(e) => return Err(e),
            };
        rows.push(AblationRow {
            variant,
            params_g,
            params_d,
            mean_step_ms,
            fid_initial,
            fid_final,
            status,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::write_synthetic_dataset;

    fn tiny_cfg(dir: &std::path::Path) -> TrainConfig {
        TrainConfig {
            variant: Variant::Baseline,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 2,
            total_steps: 3,
            seed: 11,
            eval_every: 3,
            resolution: 32,
            latent_dim: 16,
            base_channels: 2,
            dsc_order: DscOrder::DepthwiseFirst,
            data_dir: dir.join("data"),
            out_dir: dir.join("out"),
        }
    }

    fn with_dataset(cfg: &TrainConfig) -> Dataset {
        write_synthetic_dataset(&cfg.data_dir, 6, cfg.resolution, 5).unwrap();
        crate::dataset::load_dataset(
            &cfg.data_dir,
            cfg.resolution,
            stream_seed(cfg.seed, "data_shuffle", 0),
        )
        .unwrap()
    }

    #[test]
    fn two_runs_are_bitwise_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_a = tiny_cfg(dir_a.path());
        let cfg_b = TrainConfig {
            data_dir: dir_b.path().join("data"),
            out_dir: dir_b.path().join("out"),
            ..cfg_a.clone()
        };
        let ds_a = with_dataset(&cfg_a);
        let ds_b = with_dataset(&cfg_b);
        let (ck_a, _) = train_loop(&cfg_a, &ds_a).unwrap();
        let (ck_b, _) = train_loop(&cfg_b, &ds_b).unwrap();
        // Config echoes differ (paths), so compare all non-meta tensors.
        let names: Vec<String> = ck_a
            .names()
            .filter(|n| !n.starts_with("meta."))
            .map(str::to_string)
            .collect();
        for name in names {
            let a = ck_a.tensor::<f32>(&name);
            let b = ck_b.tensor::<f32>(&name);
            match (a, b) {
                (Ok(a), Ok(b)) => assert_eq!(a.data(), b.data(), "tensor {name}"),
                _ => {
                    // Counters stored as u64 bit patterns.
                    assert_eq!(
                        ck_a.u64_value(&name).unwrap(),
                        ck_b.u64_value(&name).unwrap(),
                        "counter {name}"
                    );
                }
            }
        }
    }

    #[test]
    fn frozen_nets_unchanged_by_training() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ds = with_dataset(&cfg);
        let mut state = TrainState::init(&cfg).unwrap();
        let mut before = Vec::new();
        state.features.visit(&mut |n, t| before.push((n, t.data().to_vec())));
        state
            .projections
            .visit(&mut |n, t| before.push((n, t.data().to_vec())));
        for s in 0..3 {
            let batch = ds.batch(s, cfg.batch_size).unwrap();
            state.train_step(&batch).unwrap();
        }
        let mut after = Vec::new();
        state.features.visit(&mut |n, t| after.push((n, t.data().to_vec())));
        state
            .projections
            .visit(&mut |n, t| after.push((n, t.data().to_vec())));
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_equivalence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_full = TrainConfig {
            total_steps: 6,
            ..tiny_cfg(dir.path())
        };
        let ds = with_dataset(&cfg_full);

        // Uninterrupted 6-step run.
        let full_dir = dir.path().join("full");
        let cfg_a = TrainConfig {
            out_dir: full_dir,
            ..cfg_full.clone()
        };
        let (ck_full, _) = train_loop(&cfg_a, &ds).unwrap();

        // 3 steps, then resume to 6 in the same out_dir.
        let resume_dir = dir.path().join("resumed");
        let cfg_half = TrainConfig {
            total_steps: 3,
            out_dir: resume_dir.clone(),
            ..cfg_full.clone()
        };
        train_loop(&cfg_half, &ds).unwrap();
        let cfg_rest = TrainConfig {
            total_steps: 6,
            out_dir: resume_dir,
            ..cfg_full.clone()
        };
        let (ck_resumed, _) = train_loop(&cfg_rest, &ds).unwrap();

        let names: Vec<String> = ck_full
            .names()
            .filter(|n| !n.starts_with("meta.config"))
            .map(str::to_string)
            .collect();
        for name in names {
            match ck_full.tensor::<f32>(&name) {
                Ok(a) => {
                    let b = ck_resumed.tensor::<f32>(&name).unwrap();
                    assert_eq!(a.data(), b.data(), "tensor {name}");
                }
                Err(_) => {
                    assert_eq!(
                        ck_full.u64_value(&name).unwrap(),
                        ck_resumed.u64_value(&name).unwrap(),
                        "counter {name}"
                    );
                }
            }
        }
    }

    #[test]
    fn divergence_is_typed_and_flushed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.lr = 1e18;
        cfg.total_steps = 10;
        let ds = with_dataset(&cfg);
        let err = train_loop(&cfg, &ds).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert!(step >= 1),
            other => panic!("expected divergence, got {other}"),
        }
        // Partial CSV exists with the header and over zero rows.
        let csv = std::fs::read_to_string(cfg.out_dir.join(METRICS_FILE)).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
    }

    #[test]
    fn losses_stay_finite_on_tiny_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ds = with_dataset(&cfg);
        let mut state = TrainState::init(&cfg).unwrap();
        for s in 0..3 {
            let batch = ds.batch(s, cfg.batch_size).unwrap();
            let (ld, lg) = state.train_step(&batch).unwrap();
            assert!(ld.is_finite() && lg.is_finite());
        }
    }
}
