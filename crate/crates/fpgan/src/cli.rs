//! Command-line surface.
//!
//! Subcommands: train, ablate, bench, params, generate, eval. Exit codes:
//! 0 success, 1 usage error, 2 data/format error, 3 training divergence.
//! Every error prints to stderr as one line with a stable class prefix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bench::bench_layer;
use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::cost::{ConvKind, ConvSpec};
use crate::dataset;
use crate::error::{Error, Result};
use crate::generator::{generator_param_report, Generator, Variant};
use crate::metrics::{
    fid, kid, precision_recall, FeatureExtractor, FeatureSet, GaussianStats,
};
use crate::ppm;
use crate::rng::{stream_seed, Rng};
use crate::tensor::Tensor;
use crate::trainer::{ablation_run, train_loop, TrainConfig, TrainState};

const USAGE: &str = "\
usage: fpgan <subcommand> [flags]

subcommands:
  train    --config FILE [--override key=value]...
  ablate   --config FILE --variants baseline,fpg-g,fpg-dg
  bench    conv --kind standard|separable --cin N --cout N --k N --hw N --batch N --iters N
  params   --config FILE
  generate --ckpt FILE --n N --seed S --out DIR
  eval     --metric fid|kid|pr --real DIR --fake DIR [--extractor random:SEED|ckpt:PATH]

exit codes: 0 success, 1 usage error, 2 data/format error, 3 training divergence";

pub fn run_cli(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            if matches!(e, Error::Usage(_)) {
                eprintln!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        return Err(Error::Usage("no subcommand".into()));
    };
    let rest = &args[1..];
    match cmd.as_str() {
        "train" => cmd_train(rest),
        "ablate" => cmd_ablate(rest),
        "bench" => cmd_bench(rest),
        "params" => cmd_params(rest),
        "generate" => cmd_generate(rest),
        "eval" => cmd_eval(rest),
        other => Err(Error::Usage(format!("unknown subcommand {other:?}"))),
    }
}

/// `--key value` pairs; only `--override` may repeat.
fn parse_flags(args: &[String], allowed: &[&str]) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let flag = args[i]
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected a --flag, found {:?}", args[i])))?;
        if !allowed.contains(&flag) {
            return Err(Error::Usage(format!("unknown flag --{flag}")));
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Usage(format!("flag --{flag} needs a value")))?;
        let entry = out.entry(flag.to_string()).or_default();
        if !entry.is_empty() && flag != "override" {
            return Err(Error::Usage(format!("flag --{flag} given twice")));
        }
        entry.push(value.clone());
        i += 2;
    }
    Ok(out)
}

fn need<'m>(flags: &'m BTreeMap<String, Vec<String>>, key: &str) -> Result<&'m str> {
    flags
        .get(key)
        .map(|v| v[0].as_str())
        .ok_or_else(|| Error::Usage(format!("missing required flag --{key}")))
}

fn need_usize(flags: &BTreeMap<String, Vec<String>>, key: &str) -> Result<usize> {
    need(flags, key)?
        .parse()
        .map_err(|_| Error::Usage(format!("flag --{key} expects an integer")))
}

fn load_config(flags: &BTreeMap<String, Vec<String>>) -> Result<ConfigFile> {
    let path = PathBuf::from(need(flags, "config")?);
    let mut cfg = ConfigFile::parse_file(&path)?;
    if let Some(overrides) = flags.get("override") {
        for o in overrides {
            cfg.apply_override(o)?;
        }
    }
    Ok(cfg)
}

fn open_dataset(cfg: &TrainConfig) -> Result<dataset::Dataset> {
    dataset::load_dataset(
        &cfg.data_dir,
        cfg.resolution,
        stream_seed(cfg.seed, "data_shuffle", 0),
    )
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["config", "override"])?;
    let cfg = TrainConfig::from_config(&load_config(&flags)?)?;
    let ds = open_dataset(&cfg)?;
    let (_, csv_path) = train_loop(&cfg, &ds)?;
    println!(
        "trained {} steps; checkpoint {}; metrics {}",
        cfg.total_steps,
        cfg.out_dir.join(crate::trainer::CHECKPOINT_FILE).display(),
        csv_path.display()
    );
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["config", "variants"])?;
    let cfg = TrainConfig::from_config(&load_config(&flags)?)?;
    let variants: Vec<Variant> = need(&flags, "variants")?
        .split(',')
        .map(Variant::parse)
        .collect::<Result<_>>()?;
    let table = ablation_run(&cfg, &variants)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("ablation.csv");
    std::fs::write(&csv_path, table.csv())?;
    print!("{}", table.text_table());
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_bench(args: &[String]) -> Result<()> {
    let Some(first) = args.first() else {
        return Err(Error::Usage("bench needs a target, e.g. `bench conv`".into()));
    };
    if first != "conv" {
        return Err(Error::Usage(format!("unknown bench target {first:?}")));
    }
    let flags = parse_flags(
        &args[1..],
        &["kind", "cin", "cout", "k", "hw", "batch", "iters"],
    )?;
    let kind = match need(&flags, "kind")? {
        "standard" => ConvKind::Standard,
        "separable" => ConvKind::Separable,
        other => {
            return Err(Error::Usage(format!(
                "unknown kind {other:?} (expected standard|separable)"
            )))
        }
    };
    let (cin, cout, k) = (
        need_usize(&flags, "cin")?,
        need_usize(&flags, "cout")?,
        need_usize(&flags, "k")?,
    );
    let (hw, batch, iters) = (
        need_usize(&flags, "hw")?,
        need_usize(&flags, "batch")?,
        need_usize(&flags, "iters")?,
    );
    let spec = ConvSpec::new(kind, cin, cout, k).with_padding((k.max(1) - 1) / 2);
    let report = bench_layer(&spec, (hw, hw), batch, iters)?;
    print!("{}", report.text());
    if let Some(ratio) = crate::cost::count_cost(&spec, (hw, hw), crate::element::Dtype::F32)?
        .ratio_vs_standard
    {
        println!("param_ratio_vs_standard {}", ratio.params);
        println!("flop_ratio_vs_standard  {}", ratio.flops);
    }
    Ok(())
}

fn cmd_params(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["config", "override"])?;
    let cfg = load_config(&flags)?;
    let mut gen_cfg = crate::generator::GeneratorConfig::new(
        cfg.resolution,
        cfg.base_channels,
        cfg.latent_dim,
        cfg.variant,
        cfg.seed,
    )?;
    gen_cfg.dsc_order = cfg.dsc_order;
    let g: Generator<f32> = Generator::build(&gen_cfg, &mut Rng::stream(cfg.seed, "weights_g", 0))?;
    let report = generator_param_report(&g);
    print!("{}", report.text_table());
    if let Some(out_dir) = &cfg.out_dir {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("params_{}.csv", cfg.variant.as_str()));
        std::fs::write(&path, report.csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_generate(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["ckpt", "n", "seed", "out"])?;
    let ckpt_path = PathBuf::from(need(&flags, "ckpt")?);
    let n = need_usize(&flags, "n")?;
    let seed: u64 = need(&flags, "seed")?
        .parse()
        .map_err(|_| Error::Usage("flag --seed expects an integer".into()))?;
    let out = PathBuf::from(need(&flags, "out")?);

    let ck = Checkpoint::load(&ckpt_path)?;
    let mut state = TrainState::from_checkpoint(&ck)?;
    let images = state.generate(n, seed)?;
    std::fs::create_dir_all(&out)?;
    let r = state.cfg.resolution;
    let plane = 3 * r * r;
    for i in 0..n {
        let img = Tensor::from_vec(
            &[3, r, r],
            images.data()[i * plane..(i + 1) * plane].to_vec(),
        )?;
        ppm::save_ppm(&img, &out.join(format!("gen_{i:04}.ppm")))?;
    }
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn parse_extractor(spec: &str) -> Result<FeatureExtractor> {
    if let Some(seed) = spec.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Usage("extractor random:SEED needs an integer seed".into()))?;
        FeatureExtractor::seeded_random(seed)
    } else if let Some(path) = spec.strip_prefix("ckpt:") {
        FeatureExtractor::from_checkpoint(Path::new(path))
    } else {
        Err(Error::Usage(format!(
            "unknown extractor {spec:?} (expected random:SEED or ckpt:PATH)"
        )))
    }
}

/// Largest multiple of 8 not exceeding the first decodable image's short
/// side; the shared resolution for metric evaluation.
fn probe_resolution(dir: &Path) -> Result<usize> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::Dataset(format!("dataset directory {} does not exist", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    for p in paths {
        let t = match p.extension().and_then(|e| e.to_str()) {
            Some("ppm") => ppm::load_ppm(&p),
            Some("ften") => dataset::load_ften::<f32>(&p),
            _ => continue,
        };
        if let Ok(t) = t {
            if t.dims().len() == 3 {
                let side = t.dims()[1].min(t.dims()[2]);
                if side >= 8 {
                    return Ok(side / 8 * 8);
                }
                return Err(Error::Dataset(format!(
                    "image {} is smaller than 8x8",
                    p.display()
                )));
            }
        }
    }
    Err(Error::Dataset(format!(
        "no decodable image in {}",
        dir.display()
    )))
}

fn dir_features(dir: &Path, resolution: usize, e: &FeatureExtractor) -> Result<FeatureSet> {
    let ds = dataset::load_dataset(dir, resolution, 0)?;
    let all = ds.all()?;
    e.features(&all)
}

fn cmd_eval(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["metric", "real", "fake", "extractor"])?;
    let metric = need(&flags, "metric")?.to_string();
    if !matches!(metric.as_str(), "fid" | "kid" | "pr") {
        return Err(Error::Usage(format!(
            "unknown metric {metric:?} (expected fid|kid|pr)"
        )));
    }
    let real_dir = PathBuf::from(need(&flags, "real")?);
    let fake_dir = PathBuf::from(need(&flags, "fake")?);
    let extractor = parse_extractor(
        flags
            .get("extractor")
            .map(|v| v[0].as_str())
            .unwrap_or("random:0"),
    )?;
    let resolution = probe_resolution(&real_dir)?;
    let real = dir_features(&real_dir, resolution, &extractor)?;
    let fake = dir_features(&fake_dir, resolution, &extractor)?;
    match metric.as_str() {
        "fid" => {
            let a = GaussianStats::from_features(&real)?;
            let b = GaussianStats::from_features(&fake)?;
            println!("fid,{}", fid(&a, &b)?);
        }
        "kid" => {
            println!("kid,{}", kid(&real, &fake)?);
        }
        "pr" => {
            let (p, r) = precision_recall(&real, &fake, 3)?;
            println!("precision,{p}");
            println!("recall,{r}");
        }
        _ => unreachable!("metric validated above"),
    }
    Ok(())
}
