//! Dataset ingestion and preprocessing: IDX files, binarization and
//! dequantization views, mask generation for conditional tasks, image-grid
//! emission, and the in-repo synthetic datasets used by the acceptance runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{BinarizeMode, MaskSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{io as tio, Tensor};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Preprocessing applied when an epoch view is materialized. The record is
/// serialized alongside derived artifacts so results are reproducible from
/// (raw data, record, seed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrepRecord {
    pub binarize: BinarizeMode,
    pub dequantize: bool,
}

impl PrepRecord {
    pub fn none() -> Self {
        PrepRecord { binarize: BinarizeMode::None, dequantize: false }
    }

    pub fn describe(&self) -> String {
        format!(
            "binarize={} dequantize={}",
            match self.binarize {
                BinarizeMode::None => "none",
                BinarizeMode::Dynamic => "dynamic",
                BinarizeMode::FixedThreshold => "fixed",
            },
            self.dequantize
        )
    }
}

/// Image dataset with values in [0,1], optional labels, and a preprocessing
/// record. Stochastic preprocessing (dynamic binarization, dequantization)
/// is applied per epoch view with streams derived from (seed, epoch), so
/// loader parallelism cannot reorder randomness.
#[derive(Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub prep: PrepRecord,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<u8>>, seed: u64) -> Result<Self> {
        if images.shape().rank() != 4 {
            return Err(Error::Data(format!("dataset images must be rank-4, got {}", images.shape())));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("dataset values must lie in [0,1]".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape().batch() {
                return Err(Error::Data(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape().batch()
                )));
            }
        }
        Ok(Dataset { images, labels: None, prep: PrepRecord::none(), seed }.with_labels(labels))
    }

    fn with_labels(mut self, labels: Option<Vec<u8>>) -> Self {
        self.labels = labels;
        self
    }

    pub fn len(&self) -> usize {
        self.images.shape().batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    /// Deterministic split into (train, val) by a seed-keyed shuffle.
    pub fn split(&self, val_fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let n_val = ((n as f64) * val_fraction).floor() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(self.seed, 0x5b117);
        rng.shuffle(&mut idx);
        let val_idx = &idx[..n_val];
        let train_idx = &idx[n_val..];
        (self.subset(train_idx), self.subset(val_idx))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect::<Vec<u8>>());
        Dataset {
            images: Tensor::from_vec(data, &[indices.len().max(1), c, h, w]),
            labels,
            prep: self.prep,
            seed: self.seed,
        }
    }

    /// Materialize the epoch view: dynamic binarization and dequantization
    /// are resampled per epoch from streams keyed by (seed, epoch).
    pub fn epoch_view(&self, epoch: u64) -> Tensor<f32> {
        let mut data = self.images.data().to_vec();
        match self.prep.binarize {
            BinarizeMode::None => {}
            BinarizeMode::FixedThreshold => {
                for v in data.iter_mut() {
                    *v = if *v > 0.5 { 1.0 } else { 0.0 };
                }
            }
            BinarizeMode::Dynamic => {
                let mut rng = Rng::new(self.seed, 0xb1a).split(epoch);
                for v in data.iter_mut() {
                    *v = if rng.uniform() < *v as f64 { 1.0 } else { 0.0 };
                }
            }
        }
        if self.prep.dequantize {
            let mut rng = Rng::new(self.seed, 0xdeca).split(epoch);
            for v in data.iter_mut() {
                let level = (*v as f64 * 255.0).round();
                *v = ((level + rng.uniform()) / 256.0) as f32;
            }
        }
        Tensor::from_vec(data, self.images.dims())
    }

    /// Extract a batch from a materialized view.
    pub fn batch_from_view(&self, view: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&view.data()[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(data, &[indices.len(), c, h, w])
    }
}

/// Set the binarization mode. Fixed thresholding is applied immediately and
/// is idempotent; dynamic binarization is deferred to epoch views.
pub fn binarize(mut d: Dataset, mode: BinarizeMode) -> Result<Dataset> {
    match mode {
        BinarizeMode::None => {
            d.prep.binarize = BinarizeMode::None;
        }
        BinarizeMode::FixedThreshold => {
            let data = d.images.data().iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
            d.images = Tensor::from_vec(data, d.images.dims());
            d.prep.binarize = BinarizeMode::FixedThreshold;
        }
        BinarizeMode::Dynamic => {
            d.prep.binarize = BinarizeMode::Dynamic;
        }
    }
    Ok(d)
}

/// Enable per-epoch uniform dequantization: x <- (255 x + u) / 256.
pub fn dequantize(mut d: Dataset) -> Dataset {
    d.prep.dequantize = true;
    d
}

fn read_be_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file (and optional IDX label file) into a dataset.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, seed: u64) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(images_path)?);
    let magic = read_be_u32(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let n = read_be_u32(&mut r)? as usize;
    let h = read_be_u32(&mut r)? as usize;
    let w = read_be_u32(&mut r)? as usize;
    if h == 0 || w == 0 || n == 0 {
        return Err(Error::Data(format!("degenerate IDX dims {n}x{h}x{w}")));
    }
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Data("IDX dims overflow".into()))?;
    let mut payload = vec![0u8; total];
    r.read_exact(&mut payload).map_err(|e| Error::Data(format!("truncated IDX payload: {e}")))?;
    let data: Vec<f32> = payload.iter().map(|b| *b as f32 / 255.0).collect();
    let images = Tensor::from_vec(data, &[n, 1, h, w]);

    let labels = match labels_path {
        None => None,
        Some(p) => {
            let mut r = BufReader::new(File::open(p)?);
            let magic = read_be_u32(&mut r)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::Data(format!(
                    "bad IDX label magic {magic}, expected {IDX_LABELS_MAGIC}"
                )));
            }
            let ln = read_be_u32(&mut r)? as usize;
            if ln != n {
                return Err(Error::Data(format!("{ln} labels for {n} images")));
            }
            let mut lbl = vec![0u8; ln];
            r.read_exact(&mut lbl).map_err(|e| Error::Data(format!("truncated IDX labels: {e}")))?;
            Some(lbl)
        }
    };
    Dataset::new(images, labels, seed)
}

/// Write [0,1] grayscale images as an IDX file (tooling and tests).
pub fn save_idx(path: &Path, images: &Tensor<f32>) -> Result<()> {
    if images.shape().rank() != 4 || images.shape().features() != 1 {
        return Err(Error::Data(format!("save_idx expects (n,1,h,w), got {}", images.shape())));
    }
    let d = images.dims();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(d[0] as u32).to_be_bytes())?;
    w.write_all(&(d[2] as u32).to_be_bytes())?;
    w.write_all(&(d[3] as u32).to_be_bytes())?;
    for v in images.data() {
        w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Generate a binary mask batch (1 = known) for the given image shape.
pub fn make_mask(spec: &MaskSpec, dims: &[usize], rng: &mut Rng) -> Result<Tensor<f32>> {
    if dims.len() != 4 {
        return Err(Error::Data(format!("mask shape must be rank-4, got {dims:?}")));
    }
    let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let plane = h * w;
    let mut mask = vec![1.0f32; b * c * plane];
    match spec {
        MaskSpec::None => {}
        MaskSpec::Quadrants { .. } | MaskSpec::QuadrantsRandom => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Data(format!("quadrant masks need even dims, got {h}x{w}")));
            }
            for bi in 0..b {
                let known = match spec {
                    MaskSpec::Quadrants { known } => *known,
                    _ => 1 + rng.below(3),
                };
                if !(1..=3).contains(&known) {
                    return Err(Error::Data(format!("quadrant count {known} out of 1..=3")));
                }
                let keep = rng.choose_distinct(4, known);
                for q in 0..4 {
                    if keep.contains(&q) {
                        continue;
                    }
                    let (r0, c0) = ((q / 2) * (h / 2), (q % 2) * (w / 2));
                    for ci in 0..c {
                        for r in r0..r0 + h / 2 {
                            for cc in c0..c0 + w / 2 {
                                mask[(bi * c + ci) * plane + r * w + cc] = 0.0;
                            }
                        }
                    }
                }
            }
        }
        MaskSpec::Occluders { count, size } => {
            if *size > h || *size > w {
                return Err(Error::Data(format!(
                    "occluder {size}x{size} larger than image {h}x{w}"
                )));
            }
            for bi in 0..b {
                for _ in 0..*count {
                    let r0 = rng.below(h - size + 1);
                    let c0 = rng.below(w - size + 1);
                    for ci in 0..c {
                        for r in r0..r0 + size {
                            for cc in c0..c0 + size {
                                mask[(bi * c + ci) * plane + r * w + cc] = 0.0;
                            }
                        }
                    }
                }
            }
        }
        MaskSpec::File(path) => {
            let t: Tensor<f32> = tio::load_tensor(Path::new(path))?;
            if !t.data().iter().all(|v| *v == 0.0 || *v == 1.0) {
                return Err(Error::Data("mask file must be binary".into()));
            }
            let src = t.data();
            match t.dims() {
                [mh, mw] if *mh == h && *mw == w => {
                    for bi in 0..b {
                        for ci in 0..c {
                            mask[(bi * c + ci) * plane..(bi * c + ci + 1) * plane].copy_from_slice(src);
                        }
                    }
                }
                [mc, mh, mw] if *mc == c && *mh == h && *mw == w => {
                    for bi in 0..b {
                        mask[bi * c * plane..(bi + 1) * c * plane].copy_from_slice(src);
                    }
                }
                d if d == dims => mask.copy_from_slice(src),
                other => {
                    return Err(Error::Data(format!(
                        "mask file shape {other:?} does not fit images {dims:?}"
                    )))
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, dims))
}

/// Write images tiled into a binary PGM (grayscale) or PPM (3-channel) grid
/// with 1-pixel separators. Each cell is (h+1) x (w+1); total dims are
/// rows*(h+1) x cols*(w+1).
pub fn emit_grid(images: &Tensor<f32>, rows: usize, cols: usize, path: &Path) -> Result<()> {
    if images.shape().rank() != 4 {
        return Err(Error::Data(format!("grid expects rank-4 images, got {}", images.shape())));
    }
    let d = images.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    if rows * cols < n {
        return Err(Error::Data(format!("{rows}x{cols} layout cannot hold {n} images")));
    }
    if c != 1 && c != 3 {
        return Err(Error::Data(format!("grid supports 1 or 3 channels, got {c}")));
    }
    const SEP: u8 = 128;
    let gh = rows * (h + 1);
    let gw = cols * (w + 1);
    let mut pixels = vec![SEP; gh * gw * c];
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        for r in 0..h {
            for cc in 0..w {
                for ci in 0..c {
                    let v = images.data()[((i * c + ci) * h + r) * w + cc];
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    let y = gr * (h + 1) + r;
                    let x = gc * (w + 1) + cc;
                    pixels[(y * gw + x) * c + ci] = byte;
                }
            }
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    if c == 1 {
        write!(out, "P5\n{gw} {gh}\n255\n")?;
    } else {
        write!(out, "P6\n{gw} {gh}\n255\n")?;
    }
    out.write_all(&pixels)?;
    out.flush()?;
    Ok(())
}

/// Parse a binary PGM/PPM file back into a [0,1] tensor (1, c, h, w).
pub fn parse_pnm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = || Error::Data("malformed PNM header".into());
    if bytes.len() < 2 {
        return Err(header_err());
    }
    let channels = match &bytes[..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(Error::Data("unsupported PNM magic".into())),
    };
    // read three whitespace-separated tokens (w, h, maxval), skipping comments
    let mut pos = 2;
    let mut tokens = Vec::new();
    while tokens.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?;
        tokens.push(tok.parse::<usize>().map_err(|_| header_err())?);
    }
    if tokens.len() != 3 || tokens[2] != 255 {
        return Err(header_err());
    }
    let (w, h) = (tokens[0], tokens[1]);
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Data("truncated PNM payload".into()));
    }
    let payload = &bytes[pos..pos + need];
    // interleaved -> planar
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..channels {
                data[(ci * h + y) * w + x] = payload[(y * w + x) * channels + ci] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, &[1, channels, h, w]))
}

/// The in-repo synthetic acceptance dataset: 8x8 binary images of two base
/// patterns (a cross and a square outline) with independent 5% pixel flips.
pub fn synthetic_two_pattern(n: usize, seed: u64) -> Dataset {
    let mut cross = [0.0f32; 64];
    let mut square = [0.0f32; 64];
    for i in 0..8 {
        for j in 0..8 {
            if (3..5).contains(&i) || (3..5).contains(&j) {
                cross[i * 8 + j] = 1.0;
            }
            let on_border = (i == 1 || i == 6) && (1..=6).contains(&j);
            let on_side = (j == 1 || j == 6) && (1..=6).contains(&i);
            if on_border || on_side {
                square[i * 8 + j] = 1.0;
            }
        }
    }
    let mut rng = Rng::new(seed, 0x2ba5e);
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u8;
        let base = if class == 0 { &cross } else { &square };
        labels.push(class);
        for px in base {
            let flipped = if rng.uniform() < 0.05 { 1.0 - px } else { *px };
            data.push(flipped);
        }
    }
    Dataset::new(Tensor::from_vec(data, &[n, 1, 8, 8]), Some(labels), seed).expect("values in range")
}

/// Procedural 28x28 stroke glyphs for desk-scale structured-prediction runs:
/// six shape classes with positional jitter, rendered binary.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed, 0xd161);
    let mut data = vec![0.0f32; n * 28 * 28];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 6) as u8;
        labels.push(class);
        let img = &mut data[i * 784..(i + 1) * 784];
        let jx = rng.below(7) as i32 - 3;
        let jy = rng.below(7) as i32 - 3;
        let mut set = |r: i32, c: i32| {
            let (r, c) = (r + jy, c + jx);
            if (0..28).contains(&r) && (0..28).contains(&c) {
                img[(r * 28 + c) as usize] = 1.0;
            }
        };
        match class {
            0 => {
                // ring
                for a in 0..360 {
                    let th = a as f64 * std::f64::consts::PI / 180.0;
                    for rad in [7.0, 8.0] {
                        set(
                            (14.0 + rad * th.sin()).round() as i32,
                            (14.0 + rad * th.cos()).round() as i32,
                        );
                    }
                }
            }
            1 => {
                // vertical bar
                for r in 5..23 {
                    for c in 12..15 {
                        set(r, c);
                    }
                }
            }
            2 => {
                // horizontal bar
                for r in 12..15 {
                    for c in 5..23 {
                        set(r, c);
                    }
                }
            }
            3 => {
                // cross
                for r in 5..23 {
                    for c in 12..15 {
                        set(r, c);
                    }
                }
                for r in 12..15 {
                    for c in 5..23 {
                        set(r, c);
                    }
                }
            }
            4 => {
                // L corner
                for r in 5..23 {
                    for c in 7..10 {
                        set(r, c);
                    }
                }
                for r in 20..23 {
                    for c in 7..21 {
                        set(r, c);
                    }
                }
            }
            _ => {
                // diagonal
                for d in 4..24 {
                    for tk in 0..3 {
                        set(d, d + tk - 1);
                    }
                }
            }
        }
    }
    Dataset::new(Tensor::from_vec(data, &[n, 1, 28, 28]), Some(labels), seed).expect("values in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        let imgs = Tensor::from_vec(
            (0..2 * 16).map(|i| (i % 256) as f32 / 255.0).collect(),
            &[2, 1, 4, 4],
        );
        save_idx(&path, &imgs).unwrap();
        let ds = load_idx(&path, None, 1).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.dims(), &[2, 1, 4, 4]);
        // byte 255 -> 1.0 and values preserved through the u8 grid
        for (a, b) in ds.images.data().iter().zip(imgs.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        // corrupt the magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] = 9;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_idx(&bad, None, 1).is_err());

        // truncate the payload
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_idx(&bad, None, 1).is_err());
    }

    #[test]
    fn idx_roundtrip_through_mtn_container() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_two_pattern(8, 3);
        let path = dir.path().join("imgs.mtn");
        tio::save_tensor(&path, &ds.images).unwrap();
        let back: Tensor<f32> = tio::load_tensor(&path).unwrap();
        assert_eq!(back.data(), ds.images.data());
    }

    #[test]
    fn fixed_threshold_is_idempotent() {
        let ds = Dataset::new(
            Tensor::from_vec(vec![0.2, 0.7, 0.5, 1.0], &[1, 1, 2, 2]),
            None,
            1,
        )
        .unwrap();
        let once = binarize(ds, BinarizeMode::FixedThreshold).unwrap();
        assert_eq!(once.images.data(), &[0.0, 1.0, 0.0, 1.0]);
        let twice = binarize(once.clone(), BinarizeMode::FixedThreshold).unwrap();
        assert_eq!(once.images.data(), twice.images.data());
    }

    #[test]
    fn dynamic_binarization_matches_pixel_probability() {
        let p = 0.3f32;
        let ds = binarize(
            Dataset::new(Tensor::from_vec(vec![p; 4], &[1, 1, 2, 2]), None, 9).unwrap(),
            BinarizeMode::Dynamic,
        )
        .unwrap();
        let n = 10_000;
        let mut acc = 0.0f64;
        for e in 0..n {
            let v = ds.epoch_view(e);
            acc += v.data()[0] as f64;
            // extremes stay fixed
            assert!(v.data().iter().all(|x| *x == 0.0 || *x == 1.0));
        }
        let mean = acc / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((mean - 0.3).abs() < 4.0 * se, "mean {mean}");
        // epoch views are reproducible
        assert_eq!(ds.epoch_view(5).data(), ds.epoch_view(5).data());
    }

    #[test]
    fn binarize_extremes_are_deterministic() {
        let ds = binarize(
            Dataset::new(Tensor::from_vec(vec![0.0, 1.0], &[1, 1, 1, 2]), None, 4).unwrap(),
            BinarizeMode::Dynamic,
        )
        .unwrap();
        for e in 0..50 {
            let v = ds.epoch_view(e);
            assert_eq!(v.data(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn dequantize_interval_and_mean() {
        let x = 0.5f32; // level 127.5 -> rounds to 128
        let ds = dequantize(Dataset::new(Tensor::from_vec(vec![x; 2], &[1, 1, 1, 2]), None, 8).unwrap());
        let level = (x as f64 * 255.0).round();
        let (lo, hi) = (level / 256.0, (level + 1.0) / 256.0);
        let n = 20_000;
        let mut acc = 0.0f64;
        for e in 0..n {
            let v = ds.epoch_view(e).data()[0] as f64;
            assert!((lo..hi).contains(&v), "{v} outside [{lo},{hi})");
            acc += v;
        }
        let mean = acc / n as f64;
        let expect = (level + 0.5) / 256.0;
        assert!((mean - expect).abs() < 4.0 * (1.0 / 12.0f64).sqrt() / 256.0 / (n as f64).sqrt() * 256.0);

        // disabled dequantization leaves data untouched
        let plain = Dataset::new(Tensor::from_vec(vec![x; 2], &[1, 1, 1, 2]), None, 8).unwrap();
        assert_eq!(plain.epoch_view(3).data(), &[x, x]);
    }

    #[test]
    fn quadrant_masks_have_exact_cardinality() {
        let mut rng = Rng::new(5, 0);
        let m = make_mask(&MaskSpec::Quadrants { known: 2 }, &[4, 1, 28, 28], &mut rng).unwrap();
        for bi in 0..4 {
            let zeros = m.data()[bi * 784..(bi + 1) * 784].iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 392);
        }
        let m3 = make_mask(&MaskSpec::Quadrants { known: 3 }, &[2, 1, 28, 28], &mut rng).unwrap();
        for bi in 0..2 {
            let zeros = m3.data()[bi * 784..(bi + 1) * 784].iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 196, "exactly 25% unknown for 3 known quadrants");
        }
    }

    #[test]
    fn occluder_mask_bounds_and_rejection() {
        let mut rng = Rng::new(6, 0);
        let m = make_mask(&MaskSpec::Occluders { count: 1, size: 20 }, &[1, 1, 28, 28], &mut rng).unwrap();
        let ones = m.data().iter().filter(|v| **v == 1.0).count();
        assert_eq!(ones, 784 - 400, "no clipping by placement rule");
        assert!(make_mask(&MaskSpec::Occluders { count: 3, size: 20 }, &[1, 1, 16, 16], &mut rng).is_err());
    }

    #[test]
    fn occluder_placement_is_uniform_chi_squared() {
        // top-left positions over 10^5 draws, chi-squared at 1% with 80 dof
        let mut rng = Rng::new(7, 0);
        let draws = 100_000;
        let cells = 9 * 9; // 28 - 20 + 1 = 9 placements per axis
        let mut counts = vec![0usize; cells];
        for _ in 0..draws {
            let r0 = rng.below(9);
            let c0 = rng.below(9);
            counts[r0 * 9 + c0] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // critical value of chi-squared with 80 dof at the 1% level
        assert!(chi2 < 112.33, "chi2 {chi2}");
    }

    #[test]
    fn grid_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.pgm");
        let mut rng = Rng::new(8, 0);
        let imgs = Tensor::from_vec(
            (0..784).map(|_| rng.uniform() as f32).collect(),
            &[1, 1, 28, 28],
        );
        emit_grid(&imgs, 1, 1, &path).unwrap();
        let parsed = parse_pnm(&path).unwrap();
        assert_eq!(parsed.dims(), &[1, 1, 29, 29], "single image grid is 29x29 with border");
        for r in 0..28 {
            for c in 0..28 {
                let orig = imgs.data()[r * 28 + c];
                let back = parsed.data()[r * 29 + c];
                assert!((orig - back).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
        // full-white pixel maps to byte 255
        let white = Tensor::from_vec(vec![1.0; 4], &[1, 1, 2, 2]);
        let wpath = dir.path().join("white.pgm");
        emit_grid(&white, 1, 1, &wpath).unwrap();
        let bytes = std::fs::read(&wpath).unwrap();
        assert_eq!(*bytes.last().unwrap(), 128, "trailing separator");
        assert!(bytes.windows(2).any(|w| w == [255, 255]));
    }

    #[test]
    fn grid_layout_validation() {
        let imgs = Tensor::<f32>::zeros(&[5, 1, 4, 4]);
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_grid(&imgs, 2, 2, &dir.path().join("x.pgm")).is_err());
        let rgb = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(emit_grid(&rgb, 1, 1, &dir.path().join("y.pgm")).is_err());
    }

    #[test]
    fn synthetic_datasets_are_deterministic_and_balanced() {
        let a = synthetic_two_pattern(512, 42);
        let b = synthetic_two_pattern(512, 42);
        assert_eq!(a.images.data(), b.images.data());
        let labels = a.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|l| **l == 0).count(), 256);
        let d = synthetic_digits(60, 1);
        assert_eq!(d.len(), 60);
        assert!(d.images.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = synthetic_two_pattern(100, 9);
        let (train, val) = ds.split(0.2);
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 20);
    }
}
