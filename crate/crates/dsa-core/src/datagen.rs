//! Synthetic shortcut-learning benchmark.
//!
//! Each image carries two independent cues: a *target* cue (bright cross
//! for y=1, hollow square for y=0, drawn at a random location) and a
//! *sensitive* cue (designated corner patch tinted red for s=1, blue for
//! s=0). In the training split s agrees with y for a `rho` fraction of
//! each class — the tint is the easy shortcut a biased model latches
//! onto. The test split is always balanced over the four (y, s) cells.
//!
//! Label/cell assignment is exact and RNG-free (stratified by index), so
//! group counts never wobble with sampling noise; pixels come from a
//! per-example counter RNG keyed by (seed, split, index), so generation
//! is order-independent. Pixels are quantized to f32 at generation time —
//! the in-memory dataset and a file round trip are bitwise identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsaError, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DSAD";
pub const VERSION: u16 = 1;

/// Tint of the sensitive corner patch, before noise: (r, g, b).
const TINT_S1: [f64; 3] = [0.75, 0.15, 0.15];
const TINT_S0: [f64; 3] = [0.15, 0.15, 0.75];
const BACKGROUND: f64 = 0.5;
const CUE_BRIGHT: f64 = 0.9;
/// Side of the square region a target cue occupies.
const CUE_SPAN: usize = 8;
const NOISE_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// P(s = y) within each training class; test is always balanced.
    pub rho: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch grid used for ground-truth indices; must match the model's.
    pub patch_size: usize,
    /// Patch ids rendered as the sensitive cue (default: top-left patch).
    pub spurious_patches: Vec<u16>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 2000,
            n_test: 500,
            rho: 0.95,
            seed: 0,
            height: 32,
            width: 32,
            channels: 3,
            patch_size: 8,
            spurious_patches: vec![0],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.rho) {
            return Err(DsaError::Config(format!("rho must lie in [0.5, 1.0], got {}", self.rho)));
        }
        if self.channels != 3 {
            return Err(DsaError::Config("generator renders RGB; channels must be 3".into()));
        }
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(DsaError::Config(format!(
                "geometry {}×{} not divisible by patch_size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.height < CUE_SPAN || self.width < CUE_SPAN {
            return Err(DsaError::Config(format!("image must be at least {CUE_SPAN}×{CUE_SPAN}")));
        }
        let n_patches = (self.height / self.patch_size) * (self.width / self.patch_size);
        if self.spurious_patches.is_empty() || self.spurious_patches.iter().any(|&p| p as usize >= n_patches) {
            return Err(DsaError::Config(format!(
                "spurious patch ids must be non-empty and < {n_patches}"
            )));
        }
        // at least one cue position must avoid the spurious patches
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExample {
    /// (C, H, W) row-major pixels in [0, 1], f32-quantized.
    pub image: Vec<f32>,
    pub y: u8,
    pub s: u8,
    pub spurious_patches: Vec<u16>,
    pub real_patches: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub examples: Vec<SyntheticExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Image i as a (C, H, W) f64 tensor.
    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::from_f32(vec![self.channels, self.height, self.width], &self.examples[i].image)
            .expect("stored pixels are finite")
    }

    pub fn labels_y(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.y).collect()
    }

    pub fn labels_s(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.s).collect()
    }
}

/// Exact per-class misalignment pattern: j-th example of a class is
/// misaligned (s = 1−y) iff the running fraction crosses the next
/// multiple of (1−rho). Gives floor(m·(1−rho)) misaligned per class of m.
fn misaligned(j: usize, rho: f64) -> bool {
    let q = 1.0 - rho;
    ((j + 1) as f64 * q).floor() > (j as f64 * q).floor()
}

fn render_example(spec: &DatasetSpec, split: u64, index: usize, y: u8, s: u8) -> SyntheticExample {
    let (h, w) = (spec.height, spec.width);
    let ps = spec.patch_size;
    let gw = spec.grid_w();
    let mut rng = CounterRng::new(spec.seed, (split << 32) | index as u64);

    // background and sensitive tint (before noise)
    let tint = if s == 1 { TINT_S1 } else { TINT_S0 };
    let mut img = vec![BACKGROUND; 3 * h * w];
    for &pid in &spec.spurious_patches {
        let (pr, pc) = (pid as usize / gw, pid as usize % gw);
        for c in 0..3 {
            for py in 0..ps {
                for px in 0..ps {
                    img[c * h * w + (pr * ps + py) * w + (pc * ps + px)] = tint[c];
                }
            }
        }
    }

    // target cue position: uniform over the interior, rejecting any spot
    // whose bounding box touches a spurious patch
    let (top, left) = loop {
        let top = rng.below(h - CUE_SPAN + 1);
        let left = rng.below(w - CUE_SPAN + 1);
        let pr0 = top / ps;
        let pr1 = (top + CUE_SPAN - 1) / ps;
        let pc0 = left / ps;
        let pc1 = (left + CUE_SPAN - 1) / ps;
        let clean = (pr0..=pr1).all(|pr| {
            (pc0..=pc1).all(|pc| !spec.spurious_patches.contains(&((pr * gw + pc) as u16)))
        });
        if clean {
            break (top, left);
        }
    };

    // draw the shape and collect the patches its pixels land in
    let mut real: Vec<u16> = Vec::new();
    let mut put = |r: usize, c: usize, img: &mut Vec<f64>| {
        for ch in 0..3 {
            img[ch * h * w + r * w + c] = CUE_BRIGHT;
        }
        let pid = ((r / ps) * gw + c / ps) as u16;
        if !real.contains(&pid) {
            real.push(pid);
        }
    };
    if y == 1 {
        // cross: thickness-2 bars through the middle of the span
        for d in 0..CUE_SPAN {
            for t in [3usize, 4] {
                put(top + t, left + d, &mut img);
                put(top + d, left + t, &mut img);
            }
        }
    } else {
        // hollow square: thickness-2 ring around the span
        for d in 0..CUE_SPAN {
            for t in [0usize, 1, CUE_SPAN - 2, CUE_SPAN - 1] {
                put(top + t, left + d, &mut img);
                put(top + d, left + t, &mut img);
            }
        }
    }
    real.sort_unstable();

    // additive Gaussian noise everywhere, clamp, quantize
    let image: Vec<f32> = img
        .iter()
        .map(|&v| (v + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect();

    SyntheticExample {
        image,
        y,
        s,
        spurious_patches: spec.spurious_patches.clone(),
        real_patches: real,
    }
}

/// Generates (train, test). Training labels alternate y = i mod 2 with
/// the exact stratified s-assignment; the test split cycles through the
/// four (y, s) cells so every group has n_test/4 ± 1 members.
pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.n_train);
    let mut class_count = [0usize; 2];
    for i in 0..spec.n_train {
        let y = (i % 2) as u8;
        let j = class_count[y as usize];
        class_count[y as usize] += 1;
        let s = if misaligned(j, spec.rho) { 1 - y } else { y };
        train.push(render_example(spec, 0, i, y, s));
    }
    let mut test = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        let cell = i % 4;
        let y = (cell >> 1) as u8;
        let s = (cell & 1) as u8;
        test.push(render_example(spec, 1, i, y, s));
    }
    let mk = |examples| Dataset {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        examples,
    };
    Ok((mk(train), mk(test)))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], detail: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DsaError::Truncated { what: "dataset", detail: detail.to_string() }
        } else {
            DsaError::Io(e)
        }
    })
}

/// Dataset file format ("DSAD"), all little-endian:
///
/// ```text
/// magic b"DSAD", version u16 = 1
/// H u16, W u16, C u16, count u32
/// per example:
///   y u8, s u8
///   n_spurious u8, spurious ids u16 × n
///   n_real     u8, real ids     u16 × n
///   pixels f32 × C·H·W   (C,H,W row-major)
/// ```
pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for dim in [ds.height, ds.width, ds.channels] {
        w.write_all(&(dim as u16).to_le_bytes())?;
    }
    w.write_all(&(ds.examples.len() as u32).to_le_bytes())?;
    for ex in &ds.examples {
        w.write_all(&[ex.y, ex.s])?;
        for ids in [&ex.spurious_patches, &ex.real_patches] {
            w.write_all(&[ids.len() as u8])?;
            for &id in ids.iter() {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        for px in &ex.image {
            w.write_all(&px.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "missing magic")?;
    if magic != MAGIC {
        return Err(DsaError::BadMagic { what: "dataset", expected: MAGIC, found: magic });
    }
    let mut u16b = [0u8; 2];
    read_exact(&mut r, &mut u16b, "missing version")?;
    let version = u16::from_le_bytes(u16b);
    if version != VERSION {
        return Err(DsaError::VersionMismatch { what: "dataset", found: version, supported: VERSION });
    }
    let mut dims = [0usize; 3];
    for (i, name) in ["height", "width", "channels"].iter().enumerate() {
        read_exact(&mut r, &mut u16b, &format!("missing {name}"))?;
        dims[i] = u16::from_le_bytes(u16b) as usize;
    }
    let (height, width, channels) = (dims[0], dims[1], dims[2]);
    let mut u32b = [0u8; 4];
    read_exact(&mut r, &mut u32b, "missing example count")?;
    let count = u32::from_le_bytes(u32b) as usize;

    let px_count = channels * height * width;
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let mut ys = [0u8; 2];
        read_exact(&mut r, &mut ys, &format!("example {i}: missing labels"))?;
        let (y, s) = (ys[0], ys[1]);
        if y > 1 || s > 1 {
            return Err(DsaError::Malformed {
                what: "dataset",
                detail: format!("example {i}: labels must be binary, got y={y} s={s}"),
            });
        }
        let read_ids = |r: &mut BufReader<File>, kind: &str| -> Result<Vec<u16>> {
            let mut nb = [0u8; 1];
            read_exact(r, &mut nb, &format!("example {i}: missing {kind} count"))?;
            let mut ids = Vec::with_capacity(nb[0] as usize);
            for _ in 0..nb[0] {
                let mut b = [0u8; 2];
                read_exact(r, &mut b, &format!("example {i}: {kind} ids cut short"))?;
                ids.push(u16::from_le_bytes(b));
            }
            Ok(ids)
        };
        let spurious = read_ids(&mut r, "spurious")?;
        let real = read_ids(&mut r, "real")?;
        let mut buf = vec![0u8; px_count * 4];
        read_exact(&mut r, &mut buf, &format!("example {i}: pixels cut short"))?;
        let image: Vec<f32> = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if image.iter().any(|v| !v.is_finite()) {
            return Err(DsaError::Malformed {
                what: "dataset",
                detail: format!("example {i}: non-finite pixel"),
            });
        }
        examples.push(SyntheticExample { image, y, s, spurious_patches: spurious, real_patches: real });
    }
    Ok(Dataset { height, width, channels, examples })
}
