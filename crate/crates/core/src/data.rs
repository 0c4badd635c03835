//! Dataset loading, stratified splitting, view construction, batching and
//! the synthetic lesion generator.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{
    apply_mask, augment, boundary_band, erode_n, read_gray, read_mask, roughness, write_gray,
    write_mask, BinaryMask, GrayImage, Interp,
};
use crate::moe::ViewBatch;
use crate::train::{Seeds, Stream};
use crate::{Error, Real, Result, Tensor};

/// Erosion and dilation depth used to derive the core and boundary views.
pub const VIEW_ITERATIONS: usize = 5;

pub const CLASS_DIRS: [&str; 2] = ["benign", "malignant"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    /// 0 benign, 1 malignant.
    pub label: u8,
}

/// Aligned whole/core/boundary views of one sample, each `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub id: String,
    pub whole: Tensor,
    pub core: Tensor,
    pub boundary: Tensor,
    pub label: u8,
    /// Erosion passes actually used for the core (5 unless the lesion is
    /// too small).
    pub erosion_iterations: usize,
}

fn find_with_ext(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads `root/{benign,malignant}/<id>.{png,pgm}` with `<id>_mask.*`, resized
/// to `size` (bilinear for images, nearest for masks). Samples come out in
/// class order, then by id. Samples with an empty mask are skipped.
pub fn load_dataset(root: &Path, size: (usize, usize)) -> Result<Vec<Sample>> {
    let (w, h) = size;
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (label, class) in CLASS_DIRS.iter().enumerate() {
        let dir = root.join(class);
        let entries = fs::read_dir(&dir)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
        let mut stems = BTreeSet::new();
        for entry in entries {
            let path = entry?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
            if !(ext.eq_ignore_ascii_case("png") || ext.eq_ignore_ascii_case("pgm")) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if !stem.ends_with("_mask") {
                    stems.insert(stem.to_string());
                }
            }
        }
        if stems.is_empty() {
            return Err(Error::Dataset(format!("class directory {} has no images", dir.display())));
        }
        let missing: Vec<&str> = stems
            .iter()
            .filter(|s| find_with_ext(&dir, &format!("{s}_mask")).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "missing masks in {} for: {}",
                dir.display(),
                missing.join(", ")
            )));
        }
        for stem in &stems {
            if !seen.insert(stem.clone()) {
                return Err(Error::Dataset(format!("duplicate sample id `{stem}`")));
            }
            let image = read_gray(&find_with_ext(&dir, stem).expect("listed above"))?;
            let mask = read_mask(&find_with_ext(&dir, &format!("{stem}_mask")).expect("checked"))?;
            let image = image.resize(w, h, Interp::Bilinear)?;
            let mask = mask.resize(w, h, Interp::Nearest)?;
            if mask.is_empty() {
                log::warn!("skipping `{stem}`: empty lesion mask");
                continue;
            }
            samples.push(Sample {
                id: stem.clone(),
                image,
                mask,
                label: label as u8,
            });
        }
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    /// Fraction of the non-test remainder used for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.15,
            val_fraction: 0.1765,
            seed: 42,
        }
    }
}

impl SplitSpec {
    /// Per-class `(train, val, test)` sizes with floor rounding.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let test = (n as f64 * self.test_fraction).floor() as usize;
        let val = ((n - test) as f64 * self.val_fraction).floor() as usize;
        (n - test - val, val, test)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Split {
    pub fn parts(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Shuffles each class with the split seed and carves test, then val, off
/// the front. Each part is returned sorted by id.
pub fn stratified_split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Split> {
    let seeds = Seeds::new(spec.seed);
    let mut split = Split::default();
    for label in 0..2u8 {
        let mut class: Vec<Sample> = samples.iter().filter(|s| s.label == label).cloned().collect();
        class.sort_by(|a, b| a.id.cmp(&b.id));
        let (train, val, test) = spec.sizes(class.len());
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Dataset(format!(
                "class {} has {} samples, too few for a {train}/{val}/{test} split",
                CLASS_DIRS[label as usize],
                class.len()
            )));
        }
        class.shuffle(&mut seeds.rng(Stream::Split, 0, label as u64));
        let rest = class.split_off(test);
        split.test.extend(class);
        let mut rest = rest;
        let train_part = rest.split_off(val);
        split.val.extend(rest);
        split.train.extend(train_part);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(split)
}

/// `id,label,part` rows for every sample of the split.
pub fn manifest_csv(split: &Split) -> String {
    let mut out = String::from("id,label,part\n");
    for (name, part) in split.parts() {
        for s in part {
            let _ = writeln!(out, "{},{},{}", s.id, s.label, name);
        }
    }
    out
}

/// Erodes with `VIEW_ITERATIONS` passes, backing off one pass at a time
/// while the result is empty. `None` only for an empty mask.
pub fn erode_with_fallback(mask: &BinaryMask) -> Option<(BinaryMask, usize)> {
    (0..=VIEW_ITERATIONS)
        .rev()
        .map(|k| (erode_n(mask, k), k))
        .find(|(m, _)| !m.is_empty())
}

/// Builds the three views, optionally after augmenting the (image, mask)
/// pair so all views share one transform.
pub fn make_views<R: Rng + ?Sized>(sample: &Sample, rng: Option<&mut R>) -> Result<MultiViewSample> {
    let augmented = rng.map(|r| augment(&sample.image, &sample.mask, r));
    let (image, mask) = match &augmented {
        // a rotation can in principle push a lesion off the frame
        Some((img, m)) if !m.is_empty() => (img, m),
        _ => (&sample.image, &sample.mask),
    };
    let (core_mask, erosion_iterations) = erode_with_fallback(mask)
        .ok_or_else(|| Error::Dataset(format!("sample `{}` has an empty mask", sample.id)))?;
    let band = boundary_band(mask, VIEW_ITERATIONS);
    Ok(MultiViewSample {
        id: sample.id.clone(),
        whole: image.to_pseudo_rgb(),
        core: apply_mask(image, &core_mask)?.to_pseudo_rgb(),
        boundary: apply_mask(image, &band)?.to_pseudo_rgb(),
        label: sample.label,
        erosion_iterations,
    })
}

/// One training or evaluation batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub views: ViewBatch,
    pub labels: Vec<Real>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn from_views(views: Vec<MultiViewSample>) -> Result<Self> {
        let whole: Vec<Tensor> = views.iter().map(|v| v.whole.clone()).collect();
        let core: Vec<Tensor> = views.iter().map(|v| v.core.clone()).collect();
        let boundary: Vec<Tensor> = views.iter().map(|v| v.boundary.clone()).collect();
        Ok(Self {
            ids: views.iter().map(|v| v.id.clone()).collect(),
            labels: views.iter().map(|v| Real::from(v.label)).collect(),
            views: ViewBatch {
                whole: Tensor::stack(&whole)?,
                core: Some(Tensor::stack(&core)?),
                boundary: Some(Tensor::stack(&boundary)?),
            },
        })
    }
}

/// Batch schedule for one pass over a part.
///
/// The order depends only on `(seeds, epoch)`; each sample's augmentation
/// stream is keyed by its position in the part, so the batches are the same
/// for any worker count.
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augment: Option<(Seeds, u64)>,
    workers: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub augment: bool,
    pub workers: usize,
}

pub fn batch_iter<'a>(
    samples: &'a [Sample],
    opts: BatchOptions,
    seeds: Seeds,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot batch an empty part".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if opts.shuffle {
        order.shuffle(&mut seeds.rng(Stream::Shuffle, epoch, 0));
    }
    Ok(BatchIter {
        samples,
        order,
        batch_size: opts.batch_size,
        cursor: 0,
        augment: opts.augment.then_some((seeds, epoch)),
        workers: opts.workers.max(1),
    })
}

impl BatchIter<'_> {
    fn view(&self, index: usize) -> Result<MultiViewSample> {
        let sample = &self.samples[index];
        match self.augment {
            Some((seeds, epoch)) => {
                let mut rng = seeds.rng(Stream::Augment, epoch, index as u64);
                make_views(sample, Some(&mut rng))
            }
            None => make_views::<rand_chacha::ChaCha8Rng>(sample, None),
        }
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
        let start = self.cursor;
        self.cursor = end;
        let this = &*self;
        let idx = &this.order[start..end];
        let views: Result<Vec<MultiViewSample>> = if self.workers == 1 || idx.len() == 1 {
            idx.iter().map(|&i| this.view(i)).collect()
        } else {
            let chunk = idx.len().div_ceil(this.workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> = idx
                    .chunks(chunk)
                    .map(|part| scope.spawn(move || part.iter().map(|&i| this.view(i)).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("view worker panicked"))
                    .collect()
            })
        };
        Some(views.and_then(Batch::from_views))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub seed: u64,
}

/// Roughness bounds every generated lesion satisfies.
pub const BENIGN_MAX_ROUGHNESS: f64 = 20.0;
pub const MALIGNANT_MIN_ROUGHNESS: f64 = 30.0;

/// Radius of the lesion outline at angle `phi`.
struct Outline {
    a: f64,
    b: f64,
    theta: f64,
    /// `(angle, half_width, relative_height)` of each spike.
    spikes: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn radius(&self, phi: f64) -> f64 {
        let t = phi - self.theta;
        let base = self.a * self.b / ((self.b * t.cos()).powi(2) + (self.a * t.sin()).powi(2)).sqrt();
        let mut bump: f64 = 0.0;
        for &(angle, half, height) in &self.spikes {
            let d = (phi - angle + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            bump = bump.max(height * (1.0 - d.abs() / half).max(0.0));
        }
        base * (1.0 + bump)
    }
}

fn render_sample<R: Rng>(rng: &mut R, label: u8, size: usize) -> (GrayImage, BinaryMask) {
    use std::f64::consts::TAU;
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let a = rng.random_range(0.15..0.22) * s;
    let b = a * rng.random_range(0.65..1.0);
    let theta = rng.random_range(0.0..TAU);
    let spikes = if label == 1 {
        let n = rng.random_range(8..=16);
        (0..n)
            .map(|i| {
                let angle = TAU * (i as f64 + rng.random_range(0.0..0.6)) / n as f64;
                (angle, rng.random_range(0.09..0.16), rng.random_range(0.45..0.8))
            })
            .collect()
    } else {
        Vec::new()
    };
    let outline = Outline { a, b, theta, spikes };
    let mask = BinaryMask::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (dx * dx + dy * dy).sqrt() <= outline.radius(dy.atan2(dx))
    });

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (speckle, background) = if label == 1 { (0.32, 120.0) } else { (0.16, 125.0) };
    let interior = if label == 1 { 55.0 } else { 60.0 };
    // low-frequency blobs for the heterogeneous malignant interior
    let blobs: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-35.0..35.0)))
        .collect();
    let gradient = rng.random_range(-20.0..20.0);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = if mask.get(x, y) {
                let mut v = interior;
                if label == 1 {
                    for &(bx, by, amp) in &blobs {
                        let (dx, dy) = ((x as f64 - cx) / a - bx, (y as f64 - cy) / a - by);
                        v += amp * (-(dx * dx + dy * dy) * 2.0).exp();
                    }
                }
                v
            } else {
                background + gradient * (y as f64 / s - 0.5)
            };
            let n: f64 = normal.sample(rng);
            pixels.push((base * (1.0 + speckle * n)).round().clamp(0.0, 255.0) as u8);
        }
    }
    (GrayImage::new(size, size, pixels).expect("square raster"), mask)
}

/// One synthetic sample; malignant lesions are spiculated, benign ones are
/// smooth ellipses. Resamples until the roughness bounds hold.
pub fn synth_sample(spec: &SyntheticSpec, label: u8, index: usize) -> Result<Sample> {
    let seeds = Seeds::new(spec.seed);
    let mut rng = seeds.rng(Stream::Synth, label as u64, index as u64);
    for _ in 0..64 {
        let (image, mask) = render_sample(&mut rng, label, spec.size);
        let r = roughness(&mask);
        let ok = if label == 1 {
            r > MALIGNANT_MIN_ROUGHNESS
        } else {
            r < BENIGN_MAX_ROUGHNESS
        };
        if ok && !mask.is_empty() {
            let prefix = if label == 1 { "m" } else { "b" };
            return Ok(Sample {
                id: format!("{prefix}{index:05}"),
                image,
                mask,
                label,
            });
        }
    }
    Err(Error::Dataset(format!(
        "could not synthesize a {} lesion at size {}",
        CLASS_DIRS[label as usize], spec.size
    )))
}

/// `per_class` samples of each class, benign first.
pub fn synth_samples(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.per_class == 0 || spec.size < 16 {
        return Err(Error::Usage("synthetic data needs per_class >= 1 and size >= 16".into()));
    }
    let mut out = Vec::with_capacity(2 * spec.per_class);
    for label in 0..2u8 {
        for i in 0..spec.per_class {
            out.push(synth_sample(spec, label, i)?);
        }
    }
    Ok(out)
}

/// Writes the samples in the `load_dataset` layout (PNG) plus a
/// `manifest.csv` with every part set to `unsplit`.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for class in CLASS_DIRS {
        fs::create_dir_all(root.join(class))?;
    }
    let mut manifest = String::from("id,label,part\n");
    for s in samples {
        let dir = root.join(CLASS_DIRS[s.label as usize]);
        write_gray(&dir.join(format!("{}.png", s.id)), &s.image)?;
        write_mask(&dir.join(format!("{}_mask.png", s.id)), &s.mask)?;
        let _ = writeln!(manifest, "{},{},unsplit", s.id, s.label);
    }
    fs::write(root.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Generates and writes a synthetic dataset.
pub fn synth_generate(spec: &SyntheticSpec, root: &Path) -> Result<Vec<Sample>> {
    let samples = synth_samples(spec)?;
    write_dataset(root, &samples)?;
    Ok(samples)
}

#[cfg(test)]
mod tests;
