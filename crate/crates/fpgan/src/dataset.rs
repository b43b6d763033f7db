//! Dataset ingestion: folders of `.ppm` images and `.ften` raw tensors,
//! center-crop + nearest-resize to the training resolution, and seeded
//! epoch shuffling.
//!
//! Iteration order is a pure function of (file list, seed, epoch): epoch e
//! shuffles with the child stream `(seed, "epoch", e)`, so any batch index
//! can be reproduced without replaying earlier ones.

use std::path::{Path, PathBuf};

use crate::element::{Dtype, Element};
use crate::error::{Error, Result};
use crate::ppm;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FTEN_MAGIC: &[u8; 5] = b"FTEN1";

/// Raw tensor file: magic "FTEN1", u8 dtype, u8 ndim, ndim x u64 dims,
/// little-endian data.
pub fn save_ften<T: Element>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FTEN_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_ften<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 7 {
        return Err(Error::Corrupt("ften file shorter than header".into()));
    }
    if &bytes[..5] != FTEN_MAGIC {
        return Err(Error::Format("bad magic, expected \"FTEN1\"".into()));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "ften dtype {dtype} does not match expected {}",
            T::DTYPE
        )));
    }
    let ndim = bytes[6] as usize;
    let mut pos = 7;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if pos + 8 > bytes.len() {
            return Err(Error::Corrupt("ften header truncated".into()));
        }
        dims.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
        pos += 8;
    }
    let numel: usize = dims.iter().product();
    let need = numel * T::DTYPE.width();
    if bytes.len() - pos != need {
        return Err(Error::Corrupt(format!(
            "ften data length {} does not match dims {dims:?}",
            bytes.len() - pos
        )));
    }
    let data: Vec<T> = bytes[pos..]
        .chunks_exact(T::DTYPE.width())
        .map(|c| T::read_le(c))
        .collect();
    Tensor::from_vec(&dims, data)
}

/// Center-crops `[3,H,W]` to square, then nearest-resizes to `[3,R,R]`.
/// The nearest rule is pixel-center: src = floor((dst + 0.5) * S / R).
pub fn center_crop_resize(t: &Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let dims = t.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::shape(format!("expected [3,H,W], got {dims:?}")));
    }
    let (h, w) = (dims[1], dims[2]);
    let side = h.min(w);
    let top = (h - side) / 2;
    let left = (w - side) / 2;
    if side == resolution && h == w {
        return Ok(t.clone());
    }
    let mut out = vec![0.0f32; 3 * resolution * resolution];
    for c in 0..3 {
        for y in 0..resolution {
            let sy = (((y as f64 + 0.5) * side as f64 / resolution as f64) as usize).min(side - 1);
            for x in 0..resolution {
                let sx =
                    (((x as f64 + 0.5) * side as f64 / resolution as f64) as usize).min(side - 1);
                out[(c * resolution + y) * resolution + x] =
                    t.data()[(c * h + top + sy) * w + left + sx];
            }
        }
    }
    Tensor::from_vec(&[3, resolution, resolution], out)
}

/// An in-memory dataset with deterministic epoch shuffling.
#[derive(Debug)]
pub struct Dataset {
    pub resolution: usize,
    pub files: Vec<PathBuf>,
    items: Vec<Tensor<f32>>,
    shuffle_seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, i: usize) -> &Tensor<f32> {
        &self.items[i]
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> u64 {
        (self.len() as u64).div_ceil(batch_size as u64)
    }

    /// Epoch order: a seeded permutation, pure in (seed, epoch).
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::stream(self.shuffle_seed, "epoch", epoch).shuffle(&mut order);
        order
    }

    /// Batch by global index; the final batch of each epoch may be short
    /// (drop_last = false).
    pub fn batch(&self, index: u64, batch_size: usize) -> Result<Tensor<f32>> {
        if batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        let nb = self.batches_per_epoch(batch_size);
        let epoch = index / nb;
        let slot = (index % nb) as usize;
        let order = self.epoch_order(epoch);
        let lo = slot * batch_size;
        let hi = (lo + batch_size).min(order.len());
        self.gather(&order[lo..hi])
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let r = self.resolution;
        let plane = 3 * r * r;
        let mut data = vec![0.0f32; indices.len() * plane];
        for (row, &i) in indices.iter().enumerate() {
            data[row * plane..(row + 1) * plane].copy_from_slice(self.items[i].data());
        }
        Tensor::from_vec(&[indices.len(), 3, r, r], data)
    }

    /// The whole dataset as one `[N,3,R,R]` tensor, file order.
    pub fn all(&self) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }
}

/// Loads every decodable `.ppm`/`.ften` in `dir` (lexicographic order),
/// cropping and resizing to `resolution`. Fails only when nothing decodes,
/// listing the offenders.
pub fn load_dataset(dir: &Path, resolution: usize, shuffle_seed: u64) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("ften")
            )
        })
        .collect();
    paths.sort();

    let mut items = Vec::new();
    let mut files = Vec::new();
    let mut offenders = Vec::new();
    for p in paths {
        let decoded = match p.extension().and_then(|e| e.to_str()) {
            Some("ppm") => ppm::load_ppm(&p),
            _ => load_ften::<f32>(&p),
        };
        match decoded.and_then(|t| center_crop_resize(&t, resolution)) {
            Ok(t) => {
                items.push(t);
                files.push(p);
            }
            Err(e) => offenders.push(format!("{}: {e}", p.display())),
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(if offenders.is_empty() {
            format!("no .ppm or .ften files in {}", dir.display())
        } else {
            format!("zero decodable files; offenders: {}", offenders.join("; "))
        }));
    }
    Ok(Dataset {
        resolution,
        files,
        items,
        shuffle_seed,
    })
}
