//! Synthetic spectrogram tasks, deterministic splits, and tensor file I/O.
//!
//! The synthetic task assigns each class a fixed time-frequency rectangle;
//! a sample is Gaussian noise plus pattern energy inside its class's
//! rectangle. Rectangles are disjoint, patch-grid aligned where possible,
//! and equally sized, so class identity is carried by *where* energy sits
//! rather than by how much of it there is.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Ground truth for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Single-label class index.
    Class(usize),
    /// Multi-label indicator vector.
    Multi(Vec<bool>),
}

/// One spectrogram with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramSample<S> {
    pub spectrogram: Tensor<S>,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

/// Description of a synthetic task.
#[derive(Clone, Debug)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    /// Reference grid `(T, F)`.
    pub grid: (usize, usize),
    pub kind: TaskKind,
    /// Energy added inside a class rectangle.
    pub pattern_energy: f64,
    /// Standard deviation of the background noise.
    pub noise_sigma: f64,
    /// Alternative time lengths, cycled round-robin; empty means the
    /// reference length only.
    pub length_profile: Vec<usize>,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(num_classes: usize, grid: (usize, usize), kind: TaskKind, seed: u64) -> Self {
        SyntheticTaskSpec {
            num_classes,
            grid,
            kind,
            pattern_energy: 3.0,
            noise_sigma: 0.5,
            length_profile: vec![],
            seed,
        }
    }

    fn lengths(&self) -> Vec<usize> {
        if self.length_profile.is_empty() {
            vec![self.grid.0]
        } else {
            self.length_profile.clone()
        }
    }
}

/// Class rectangle on the reference grid.
#[derive(Clone, Copy, Debug)]
struct Rect {
    t0: usize,
    t1: usize,
    f0: usize,
    f1: usize,
}

impl Rect {
    /// Rescales the time span for a sample of length `t_len`.
    fn at_length(&self, t_len: usize, base_t: usize) -> Rect {
        Rect {
            t0: self.t0 * t_len / base_t,
            t1: (self.t1 * t_len).div_ceil(base_t),
            f0: self.f0,
            f1: self.f1,
        }
    }
}

/// Disjoint class rectangles, deterministic in `(seed, class)`.
///
/// The grid is cut into equal cells, one per class (cells are shuffled by
/// the seed), and each rectangle is centered in its cell. The first half of
/// the classes get half-cell rectangles, the second half third-cell ones:
/// total pattern energy alone separates the two groups linearly, while only
/// rectangle *position* tells the classes within a group apart. A frozen
/// encoder's pooled features carry the energy channel; the positional
/// channel rewards fine-tuning that can reshape spatial mixing.
fn class_rects(spec: &SyntheticTaskSpec) -> Result<Vec<Rect>> {
    let (t, f) = spec.grid;
    let c = spec.num_classes;
    if c == 0 {
        return Err(Error::config("num_classes must be positive"));
    }
    let cells_t = (c as f64).sqrt().ceil() as usize;
    let cells_f = c.div_ceil(cells_t);
    let (cell_t, cell_f) = (t / cells_t, f / cells_f);
    if cell_t < 3 || cell_f < 3 {
        return Err(Error::config(format!(
            "cannot place {c} disjoint rectangles on a {t}x{f} grid"
        )));
    }
    let mut cells: Vec<(usize, usize)> = (0..cells_t)
        .flat_map(|i| (0..cells_f).map(move |j| (i, j)))
        .collect();
    cells.shuffle(&mut rng::stream(spec.seed, "class-cells"));
    Ok(cells
        .into_iter()
        .take(c)
        .enumerate()
        .map(|(class, (i, j))| {
            let divisor = if 2 * class < c { 2 } else { 3 };
            let (side_t, side_f) = (cell_t / divisor, cell_f / divisor);
            let t0 = i * cell_t + (cell_t - side_t) / 2;
            let f0 = j * cell_f + (cell_f - side_f) / 2;
            Rect {
                t0,
                t1: t0 + side_t,
                f0,
                f1: f0 + side_f,
            }
        })
        .collect())
}

fn render_sample<S: Scalar>(
    spec: &SyntheticTaskSpec,
    rects: &[Rect],
    stream_label: &str,
    index: usize,
    t_len: usize,
) -> SpectrogramSample<S> {
    let f_len = spec.grid.1;
    let mut rng = rng::indexed_stream(spec.seed, stream_label, index as u64);
    let label = match spec.kind {
        TaskKind::SingleLabel => Label::Class(index % spec.num_classes),
        TaskKind::MultiLabel => {
            let mut active: Vec<bool> = (0..spec.num_classes)
                .map(|_| rng.random::<f64>() < 0.3)
                .collect();
            if !active.iter().any(|&a| a) {
                let forced = rng.random_range(0..spec.num_classes);
                active[forced] = true;
            }
            Label::Multi(active)
        }
    };
    let mut data = vec![S::zero(); t_len * f_len];
    if spec.noise_sigma > 0.0 {
        for v in &mut data {
            let z: f64 = rng.sample(StandardNormal);
            *v = cast(z * spec.noise_sigma);
        }
    }
    let energy = cast::<S>(spec.pattern_energy);
    let mut paint = |class: usize| {
        let r = rects[class].at_length(t_len, spec.grid.0);
        for ti in r.t0..r.t1.min(t_len) {
            for fi in r.f0..r.f1.min(f_len) {
                data[ti * f_len + fi] += energy;
            }
        }
    };
    match &label {
        Label::Class(c) => paint(*c),
        Label::Multi(active) => {
            for (c, &on) in active.iter().enumerate() {
                if on {
                    paint(c);
                }
            }
        }
    }
    SpectrogramSample {
        spectrogram: Tensor::new(vec![t_len, f_len], data).expect("length agrees"),
        label,
    }
}

/// Generates deterministic train and test lists.
///
/// Single-label classes cycle `0, 1, ..., C-1` within each list, keeping
/// per-class counts within one of each other; sample lengths cycle through
/// the length profile.
pub fn generate_dataset<S: Scalar>(
    spec: &SyntheticTaskSpec,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<SpectrogramSample<S>>, Vec<SpectrogramSample<S>>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::contract("dataset sizes must be at least 1"));
    }
    let rects = class_rects(spec)?;
    let lengths = spec.lengths();
    let make = |stream_label: &str, n: usize| -> Vec<SpectrogramSample<S>> {
        (0..n)
            .map(|i| {
                let t_len = lengths[i % lengths.len()];
                render_sample(spec, &rects, stream_label, i, t_len)
            })
            .collect()
    };
    Ok((make("train", n_train), make("test", n_test)))
}

/// Seeded permutation followed by a prefix split.
pub fn split<S: Scalar>(
    dataset: &[SpectrogramSample<S>],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SpectrogramSample<S>>, Vec<SpectrogramSample<S>>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let cut = (dataset.len() as f64 * fraction).floor() as usize;
    if cut == 0 || cut == dataset.len() {
        return Err(Error::contract(format!(
            "split of {} samples at {fraction} leaves an empty part",
            dataset.len()
        )));
    }
    let part_a = order[..cut].iter().map(|&i| dataset[i].clone()).collect();
    let part_b = order[cut..].iter().map(|&i| dataset[i].clone()).collect();
    Ok((part_a, part_b))
}

// ── tensor container ────────────────────────────────────────────────────
//
// Little-endian binary layout:
//   magic "AATT", version u32 = 1, entry count u32;
//   per entry: name length u32, UTF-8 name, rank u32, dims u64 each,
//   payload f64 per element.

const MAGIC: &[u8; 4] = b"AATT";
const VERSION: u32 = 1;

/// Writes a named tensor map; the round trip through
/// [`load_tensors`] is bit-exact for `f64` tensors.
pub fn save_tensors<S: Scalar>(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, Tensor<S>>,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        if name.is_empty() {
            return Err(Error::contract("tensor names must be non-empty"));
        }
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            bytes.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            let as_f64 = v.to_f64().ok_or_else(|| {
                Error::contract(format!("value in '{name}' not representable as f64"))
            })?;
            bytes.extend_from_slice(&as_f64.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::format(
                self.offset as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Reads a file written by [`save_tensors`].
pub fn load_tensors<S: Scalar>(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<S>>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected AATT"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_offset = r.offset as u64;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(name_offset + 4, "name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = f64::from_bits(r.u64("payload")?);
            data.push(cast::<S>(raw));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(name_offset, format!("duplicate name '{name}'")));
        }
    }
    if r.offset != bytes.len() {
        return Err(Error::format(
            r.offset as u64,
            format!("{} trailing bytes", bytes.len() - r.offset),
        ));
    }
    Ok(out)
}

/// Writes a dataset as a tensor container using the reserved names
/// `spectrogram/<i>` and `label/<i>`.
pub fn save_dataset<S: Scalar>(
    path: impl AsRef<Path>,
    samples: &[SpectrogramSample<S>],
) -> Result<()> {
    let mut map = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        map.insert(format!("spectrogram/{i}"), sample.spectrogram.clone());
        let label = match &sample.label {
            Label::Class(c) => Tensor::scalar(cast::<S>(*c as f64)),
            Label::Multi(active) => Tensor::new(
                vec![active.len()],
                active
                    .iter()
                    .map(|&a| if a { S::one() } else { S::zero() })
                    .collect(),
            )?,
        };
        map.insert(format!("label/{i}"), label);
    }
    save_tensors(path, &map)
}

/// Reads a dataset written by [`save_dataset`]. Label rank selects the
/// task kind: rank 0 is a class index, rank 1 a multi-label vector.
pub fn load_dataset<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<SpectrogramSample<S>>> {
    let map = load_tensors::<S>(path)?;
    let n = map.len() / 2;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let spectrogram = map
            .get(&format!("spectrogram/{i}"))
            .ok_or_else(|| Error::contract(format!("missing spectrogram/{i}")))?
            .clone();
        let label_tensor = map
            .get(&format!("label/{i}"))
            .ok_or_else(|| Error::contract(format!("missing label/{i}")))?;
        let label = match label_tensor.rank() {
            0 => Label::Class(label_tensor.data()[0].to_f64().unwrap_or(0.0) as usize),
            1 => Label::Multi(
                label_tensor
                    .data()
                    .iter()
                    .map(|&v| v != S::zero())
                    .collect(),
            ),
            r => return Err(Error::contract(format!("label/{i} has rank {r}"))),
        };
        samples.push(SpectrogramSample { spectrogram, label });
    }
    Ok(samples)
}
