//! JSON run configuration: strict unknown-key rejection, documented
//! defaults, `k=v` overrides, and a canonical resolved echo.

use std::path::PathBuf;

use serde_json::Value;

use crate::cost::DscOrder;
use crate::error::{Error, Result};
use crate::generator::Variant;

pub const KEYS: [&str; 14] = [
    "resolution",
    "latent_dim",
    "base_channels",
    "variant",
    "lr",
    "beta1",
    "beta2",
    "batch_size",
    "steps",
    "seed",
    "eval_every",
    "dsc_order",
    "data_dir",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub resolution: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub variant: Variant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub dsc_order: DscOrder,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn want_uint(v: &Value, key: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::config(format!("key {key:?} expects a non-negative integer")))
}

fn want_float(v: &Value, key: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::config(format!("key {key:?} expects a number")))
}

fn want_str<'v>(v: &'v Value, key: &str) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::config(format!("key {key:?} expects a string")))
}

fn dsc_order_from_str(s: &str) -> Result<DscOrder> {
    match s {
        "depthwise-first" => Ok(DscOrder::DepthwiseFirst),
        "pointwise-first" => Ok(DscOrder::PointwiseFirst),
        other => Err(Error::config(format!(
            "unknown dsc_order {other:?} (expected depthwise-first|pointwise-first)"
        ))),
    }
}

fn dsc_order_str(o: DscOrder) -> &'static str {
    match o {
        DscOrder::DepthwiseFirst => "depthwise-first",
        DscOrder::PointwiseFirst => "pointwise-first",
    }
}

impl ConfigFile {
    /// Parses JSON text, filling missing keys from defaults and rejecting
    /// unknown keys. `resolution` is required.
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::config("config must be a JSON object"))?;
        for key in obj.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown key {key:?}")));
            }
        }

        let mut cfg = ConfigFile {
            resolution: 0,
            latent_dim: 256,
            base_channels: 64,
            variant: Variant::Baseline,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            batch_size: 8,
            steps: 500,
            seed: 1,
            eval_every: 100,
            dsc_order: DscOrder::DepthwiseFirst,
            data_dir: None,
            out_dir: None,
        };
        for (key, v) in obj {
            cfg.apply(key, v)?;
        }
        if cfg.resolution == 0 {
            return Err(Error::config("missing required key \"resolution\""));
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "resolution" => self.resolution = want_uint(v, key)? as usize,
            "latent_dim" => self.latent_dim = want_uint(v, key)? as usize,
            "base_channels" => self.base_channels = want_uint(v, key)? as usize,
            "variant" => self.variant = Variant::parse(want_str(v, key)?)?,
            "lr" => self.lr = want_float(v, key)?,
            "beta1" => self.beta1 = want_float(v, key)?,
            "beta2" => self.beta2 = want_float(v, key)?,
            "batch_size" => self.batch_size = want_uint(v, key)? as usize,
            "steps" => self.steps = want_uint(v, key)?,
            "seed" => self.seed = want_uint(v, key)?,
            "eval_every" => self.eval_every = want_uint(v, key)?,
            "dsc_order" => self.dsc_order = dsc_order_from_str(want_str(v, key)?)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(want_str(v, key)?)),
            "out_dir" => self.out_dir = Some(PathBuf::from(want_str(v, key)?)),
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies one `key=value` override; values parse as JSON when possible
    /// and fall back to strings, so `variant=fpg-g` and `lr=1e-3` both work.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::Usage(format!("override {assignment:?} is not of the form key=value"))
        })?;
        if !KEYS.contains(&key) {
            return Err(Error::config(format!("unknown key {key:?}")));
        }
        let value = serde_json::from_str::<Value>(raw)
            .unwrap_or_else(|_| Value::String(raw.to_string()));
        self.apply(key, &value)?;
        self.check()
    }

    fn check(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        Ok(())
    }

    /// Canonical resolved form with every key materialized; keys sort
    /// deterministically.
    pub fn to_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("resolution".into(), (self.resolution as u64).into());
        obj.insert("latent_dim".into(), (self.latent_dim as u64).into());
        obj.insert("base_channels".into(), (self.base_channels as u64).into());
        obj.insert("variant".into(), self.variant.as_str().into());
        obj.insert("lr".into(), self.lr.into());
        obj.insert("beta1".into(), self.beta1.into());
        obj.insert("beta2".into(), self.beta2.into());
        obj.insert("batch_size".into(), (self.batch_size as u64).into());
        obj.insert("steps".into(), self.steps.into());
        obj.insert("seed".into(), self.seed.into());
        obj.insert("eval_every".into(), self.eval_every.into());
        obj.insert("dsc_order".into(), dsc_order_str(self.dsc_order).into());
        if let Some(d) = &self.data_dir {
            obj.insert("data_dir".into(), d.display().to_string().into());
        }
        if let Some(d) = &self.out_dir {
            obj.insert("out_dir".into(), d.display().to_string().into());
        }
        serde_json::to_string_pretty(&Value::Object(obj)).expect("valid JSON")
    }
}
