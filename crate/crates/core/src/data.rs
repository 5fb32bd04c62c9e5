//! Hyperspectral cube container, preprocessing, patch extraction, splits,
//! synthetic data, and batch iteration.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A labeled pixel position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

/// Hyperspectral data cube: band-major floats plus an aligned label map
/// (0 = unlabeled).
#[derive(Clone, Debug)]
pub struct HsiCube {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// bands x height x width, band-major (then row, then column).
    pub data: Vec<f32>,
    /// height x width, row-major.
    pub labels: Vec<u16>,
    /// Names for classes 1..=K.
    pub class_names: Vec<String>,
}

impl HsiCube {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn value(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn label(&self, pixel: Pixel) -> u16 {
        self.labels[pixel.row * self.width + pixel.col]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.bands * self.height * self.width {
            return Err(Error::shape(
                "hsi_cube",
                format!(
                    "data length {} != bands*height*width = {}",
                    self.data.len(),
                    self.bands * self.height * self.width
                ),
            ));
        }
        if self.labels.len() != self.height * self.width {
            return Err(Error::shape(
                "hsi_cube",
                format!(
                    "labels length {} != height*width = {}",
                    self.labels.len(),
                    self.height * self.width
                ),
            ));
        }
        let k = self.num_classes() as u16;
        if let Some(bad) = self.labels.iter().find(|&&l| l > k) {
            return Err(Error::invalid(
                "hsi_cube",
                format!("label {bad} exceeds num_classes {k}"),
            ));
        }
        Ok(())
    }

    /// All labeled pixels in row-major scan order.
    pub fn labeled_pixels(&self) -> Vec<Pixel> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if self.labels[row * self.width + col] != 0 {
                    out.push(Pixel { row, col });
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct CubeMeta {
    bands: usize,
    height: usize,
    width: usize,
    dtype: String,
    num_classes: usize,
    class_names: Vec<String>,
}

const DTYPE_TAG: &str = "f32le";

/// Write a cube directory: `meta` (text), `cube.f32` (raw little-endian
/// floats, band-major), `labels.u16` (raw little-endian, row-major).
pub fn save_cube(dir: &Path, cube: &HsiCube) -> Result<()> {
    cube.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = CubeMeta {
        bands: cube.bands,
        height: cube.height,
        width: cube.width,
        dtype: DTYPE_TAG.to_string(),
        num_classes: cube.num_classes(),
        class_names: cube.class_names.clone(),
    };
    let meta_path = dir.join("meta");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    let cube_path = dir.join("cube.f32");
    let mut buf = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&cube_path, buf).map_err(|e| Error::io(cube_path.display().to_string(), e))?;

    let labels_path = dir.join("labels.u16");
    let mut buf = Vec::with_capacity(cube.labels.len() * 2);
    for v in &cube.labels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&labels_path, buf).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

/// Load a cube directory written by [`save_cube`]; the round trip is exact.
pub fn load_cube(dir: &Path) -> Result<HsiCube> {
    let meta_path = dir.join("meta");
    let meta_text =
        fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: CubeMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", meta_path.display(), e.line(), e.column()),
        details: e.to_string(),
    })?;
    if meta.dtype != DTYPE_TAG {
        return Err(Error::format(
            meta_path.display().to_string(),
            format!("unknown dtype tag {:?}, expected {DTYPE_TAG:?}", meta.dtype),
        ));
    }
    if meta.class_names.len() != meta.num_classes {
        return Err(Error::format(
            meta_path.display().to_string(),
            format!(
                "{} class names for num_classes {}",
                meta.class_names.len(),
                meta.num_classes
            ),
        ));
    }

    let cube_path = dir.join("cube.f32");
    let raw = read_file(&cube_path)?;
    let expected = 4 * meta.bands * meta.height * meta.width;
    if raw.len() != expected {
        return Err(Error::format(
            cube_path.display().to_string(),
            format!("byte length {} != 4*bands*height*width = {expected}", raw.len()),
        ));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let labels_path = dir.join("labels.u16");
    let raw = read_file(&labels_path)?;
    let expected = 2 * meta.height * meta.width;
    if raw.len() != expected {
        return Err(Error::format(
            labels_path.display().to_string(),
            format!("byte length {} != 2*height*width = {expected}", raw.len()),
        ));
    }
    let labels: Vec<u16> = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let cube = HsiCube {
        bands: meta.bands,
        height: meta.height,
        width: meta.width,
        data,
        labels,
        class_names: meta.class_names,
    };
    cube.validate()?;
    Ok(cube)
}

/// Per-band z-score over all pixels: x' = (x - mean_b) / (std_b + 1e-8).
/// Labels are untouched; reapplication is idempotent up to rounding.
pub fn normalize_bands(cube: &HsiCube) -> HsiCube {
    let plane = cube.height * cube.width;
    let mut data = cube.data.clone();
    for b in 0..cube.bands {
        let slice = &cube.data[b * plane..(b + 1) * plane];
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = slice
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        let denom = var.sqrt() + 1e-8;
        for (o, &v) in data[b * plane..(b + 1) * plane].iter_mut().zip(slice) {
            *o = ((v as f64 - mean) / denom) as f32;
        }
    }
    HsiCube {
        data,
        ..cube.clone()
    }
}

/// Mirror-reflect an index about the borders, excluding the edge pixel from
/// doubling: -1 maps to 1, n maps to n-2.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// A patch cube centered on a labeled pixel.
#[derive(Clone, Debug)]
pub struct Patch {
    pub center: Pixel,
    /// Shape (1, 1, bands, P, P).
    pub tensor: Tensor<f32>,
    /// Center-pixel class minus 1 (0-based).
    pub label: usize,
}

/// Extract a P x P spatial window at full spectral depth, mirror-padding
/// out-of-bounds indices.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, patch_size: usize) -> Result<Patch> {
    if patch_size.is_multiple_of(2) || patch_size == 0 {
        return Err(Error::invalid(
            "extract_patch",
            format!("patch size must be odd, got {patch_size}"),
        ));
    }
    let center = Pixel { row, col };
    let label = cube.label(center);
    if label == 0 {
        return Err(Error::invalid(
            "extract_patch",
            format!("pixel ({row}, {col}) is unlabeled"),
        ));
    }
    let half = (patch_size / 2) as isize;
    let mut values = Vec::with_capacity(cube.bands * patch_size * patch_size);
    for b in 0..cube.bands {
        for dr in -half..=half {
            let r = reflect(row as isize + dr, cube.height);
            for dc in -half..=half {
                let c = reflect(col as isize + dc, cube.width);
                values.push(cube.value(b, r, c));
            }
        }
    }
    Ok(Patch {
        center,
        tensor: Tensor::from_vec(&[1, 1, cube.bands, patch_size, patch_size], values)?,
        label: label as usize - 1,
    })
}

/// Split protocol.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Per class: shuffle, take `train` then `val`, remainder is test. A
    /// class with fewer than train+val+1 pixels falls back to
    /// floor(count/2) train, floor(count/4) val.
    PerClass { train: usize, val: usize },
    /// Stratified allocation of `total` pixels across classes
    /// (largest-remainder rounding, minimum 1 per class), each class split
    /// by `train_fraction` into train/val; the rest of the labeled pixels
    /// are test.
    TotalBudget { total: usize, train_fraction: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Pixel>,
    pub val: Vec<Pixel>,
    pub test: Vec<Pixel>,
}

fn pixels_by_class(cube: &HsiCube) -> Vec<Vec<Pixel>> {
    let mut per_class: Vec<Vec<Pixel>> = vec![Vec::new(); cube.num_classes()];
    for row in 0..cube.height {
        for col in 0..cube.width {
            let label = cube.labels[row * cube.width + col];
            if label != 0 {
                per_class[label as usize - 1].push(Pixel { row, col });
            }
        }
    }
    per_class
}

/// Stratified counts for `total` over `sizes` by largest-remainder rounding
/// with a minimum of 1, capped at each class size.
fn budget_allocation(sizes: &[usize], total: usize) -> Vec<usize> {
    let labeled: usize = sizes.iter().sum();
    let mut alloc: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(sizes.len());
    let mut assigned = 0usize;
    for (k, &size) in sizes.iter().enumerate() {
        let quota = total as f64 * size as f64 / labeled as f64;
        let base = (quota.floor() as usize).clamp(1, size);
        alloc.push(base);
        assigned += base;
        remainders.push((k, quota - quota.floor()));
    }
    // Distribute leftovers to the largest remainders; drain overshoot from
    // the largest allocations. Ties resolve to the lower class index.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut i = 0;
    while assigned < total {
        let (k, _) = remainders[i % remainders.len()];
        if alloc[k] < sizes[k] {
            alloc[k] += 1;
            assigned += 1;
        }
        i += 1;
        if i > remainders.len() * (total + 1) {
            break;
        }
    }
    while assigned > total {
        let k = (0..alloc.len()).max_by_key(|&k| alloc[k]).unwrap();
        if alloc[k] > 1 {
            alloc[k] -= 1;
            assigned -= 1;
        } else {
            break;
        }
    }
    alloc
}

/// Seeded stratified splits; all three lists are pairwise disjoint.
pub fn make_splits(cube: &HsiCube, spec: SplitSpec, seed: u64) -> Result<Splits> {
    let per_class = pixels_by_class(cube);
    if per_class.iter().all(|p| p.is_empty()) {
        return Err(Error::invalid("make_splits", "no labeled pixels"));
    }
    let mut splits = Splits::default();
    match spec {
        SplitSpec::PerClass { train, val } => {
            if train == 0 || val == 0 {
                return Err(Error::invalid("make_splits", "requested counts must be >= 1"));
            }
            for (k, pixels) in per_class.iter().enumerate() {
                if pixels.is_empty() {
                    continue;
                }
                let mut pool = pixels.clone();
                let mut rng = Rng::stream_indexed(seed, "split.per_class", k as u64);
                rng.shuffle(&mut pool);
                let (n_train, n_val) = if pool.len() < train + val + 1 {
                    (pool.len() / 2, pool.len() / 4)
                } else {
                    (train, val)
                };
                splits.train.extend(&pool[..n_train]);
                splits.val.extend(&pool[n_train..n_train + n_val]);
                splits.test.extend(&pool[n_train + n_val..]);
            }
        }
        SplitSpec::TotalBudget { total, train_fraction } => {
            let sizes: Vec<usize> = per_class.iter().map(|p| p.len()).collect();
            let labeled: usize = sizes.iter().sum();
            if total < per_class.len() || total > labeled {
                return Err(Error::invalid(
                    "make_splits",
                    format!(
                        "budget {total} outside [num_classes={}, labeled={labeled}]",
                        per_class.len()
                    ),
                ));
            }
            if !(0.0..=1.0).contains(&train_fraction) {
                return Err(Error::invalid("make_splits", "train_fraction must be in [0, 1]"));
            }
            let alloc = budget_allocation(&sizes, total);
            for (k, pixels) in per_class.iter().enumerate() {
                let mut pool = pixels.clone();
                let mut rng = Rng::stream_indexed(seed, "split.budget", k as u64);
                rng.shuffle(&mut pool);
                let n_k = alloc[k];
                let mut n_train = (n_k as f64 * train_fraction).floor() as usize;
                if n_k >= 2 {
                    n_train = n_train.clamp(1, n_k - 1);
                }
                splits.train.extend(&pool[..n_train]);
                splits.val.extend(&pool[n_train..n_k]);
                splits.test.extend(&pool[n_k..]);
            }
        }
    }
    Ok(splits)
}

/// Generator settings for the synthetic verification cube.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
}

impl SyntheticSpec {
    /// Spectrum template for class k (0-based): a Gaussian bump with evenly
    /// spaced centers and width bands / (2 K).
    pub fn template(&self, class: usize, band: usize) -> f64 {
        let center = (class as f64 + 0.5) * self.bands as f64 / self.classes as f64;
        let width = self.bands as f64 / (2.0 * self.classes as f64);
        let d = band as f64 - center;
        (-d * d / (2.0 * width * width)).exp()
    }
}

/// Build a fully labeled synthetic cube: seeded Voronoi regions, one class
/// per region, Gaussian-bump spectra plus Normal(0, noise) perturbation.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<HsiCube> {
    if spec.classes < 2 {
        return Err(Error::invalid("gen_synthetic", "need at least 2 classes"));
    }
    if spec.height * spec.width < spec.classes {
        return Err(Error::invalid("gen_synthetic", "domain smaller than class count"));
    }
    // Distinct Voronoi sites.
    let mut site_rng = Rng::stream(seed, "synthetic.sites");
    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(spec.classes);
    while sites.len() < spec.classes {
        let r = site_rng.next_below(spec.height as u64) as usize;
        let c = site_rng.next_below(spec.width as u64) as usize;
        if !sites.contains(&(r, c)) {
            sites.push((r, c));
        }
    }
    let mut labels = vec![0u16; spec.height * spec.width];
    for row in 0..spec.height {
        for col in 0..spec.width {
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (k, &(sr, sc)) in sites.iter().enumerate() {
                let dr = row.abs_diff(sr);
                let dc = col.abs_diff(sc);
                let d = dr * dr + dc * dc;
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            labels[row * spec.width + col] = best as u16 + 1;
        }
    }
    let mut noise_rng = Rng::stream(seed, "synthetic.noise");
    let mut data = vec![0.0f32; spec.bands * spec.height * spec.width];
    for b in 0..spec.bands {
        for row in 0..spec.height {
            for col in 0..spec.width {
                let class = labels[row * spec.width + col] as usize - 1;
                let clean = spec.template(class, b);
                let noisy = clean + spec.noise * noise_rng.next_normal();
                data[(b * spec.height + row) * spec.width + col] = noisy as f32;
            }
        }
    }
    Ok(HsiCube {
        bands: spec.bands,
        height: spec.height,
        width: spec.width,
        data,
        labels,
        class_names: (1..=spec.classes).map(|k| format!("class_{k}")).collect(),
    })
}

/// One materialized batch of patches.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Shape (n, 1, bands, P, P).
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub pixels: Vec<Pixel>,
}

/// Deterministic batch iterator over a pixel list. Shuffles once at
/// construction when asked; emits the final short batch.
pub struct BatchIter<'a> {
    cube: &'a HsiCube,
    order: Vec<Pixel>,
    patch_size: usize,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        cube: &'a HsiCube,
        pixels: &[Pixel],
        patch_size: usize,
        batch_size: usize,
        shuffle: Option<&mut Rng>,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_iter", "batch_size must be >= 1"));
        }
        if patch_size.is_multiple_of(2) || patch_size == 0 {
            return Err(Error::invalid("batch_iter", "patch size must be odd"));
        }
        let mut order = pixels.to_vec();
        if let Some(rng) = shuffle {
            rng.shuffle(&mut order);
        }
        Ok(BatchIter {
            cube,
            order,
            patch_size,
            batch_size,
            cursor: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.cursor..end];
        self.cursor = end;
        Some(materialize_batch(self.cube, chunk, self.patch_size))
    }
}

/// Assemble one batch tensor of shape (n, 1, bands, P, P).
pub fn materialize_batch(cube: &HsiCube, pixels: &[Pixel], patch_size: usize) -> Result<Batch> {
    let per = cube.bands * patch_size * patch_size;
    let mut values = Vec::with_capacity(pixels.len() * per);
    let mut labels = Vec::with_capacity(pixels.len());
    for px in pixels {
        let patch = extract_patch(cube, px.row, px.col, patch_size)?;
        values.extend_from_slice(patch.tensor.data());
        labels.push(patch.label);
    }
    Ok(Batch {
        inputs: Tensor::from_vec(
            &[pixels.len(), 1, cube.bands, patch_size, patch_size],
            values,
        )?,
        labels,
        pixels: pixels.to_vec(),
    })
}
