//! Datasets, the synthetic grating benchmark, augmentation and splitting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, sin, sqrt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
    /// Generator seed or file digest.
    pub provenance: String,
    /// Set once the images have been standardized.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: &str, provenance: &str) -> Result<Self> {
        let d = Dataset { images, labels, classes, name: name.into(), provenance: provenance.into(), standardization: None };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let [n, _, _, _] = self.images.dims4()?;
        if n != self.labels.len() {
            bail!(Input, "{} images but {} labels", n, self.labels.len());
        }
        if self.classes < 2 {
            bail!(Input, "a dataset needs at least two classes, got {}", self.classes);
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            bail!(Input, "label {} out of range for {} classes", bad, self.classes);
        }
        if let Some(s) = &self.standardization {
            let c = self.images.shape()[1];
            if s.mean.len() != c || s.std.len() != c {
                bail!(Input, "standardization for {} channels on {}-channel images", s.mean.len(), c);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        let [c, h, w] = self.image_shape();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.images.data()[i * l..(i + 1) * l]
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(vec![idx.len(), c, h, w], data).expect("sized from the image shape");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize], name: &str) -> Dataset {
        let (images, labels) = self.batch(idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            name: name.into(),
            provenance: self.provenance.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> Standardization {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let count = (self.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..self.len() {
            for (ch, p) in self.image(i).chunks(plane).enumerate() {
                mean[ch] += p.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..self.len() {
            for (ch, p) in self.image(i).chunks(plane).enumerate() {
                var[ch] += p.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| sqrt(v / count).max(1e-8)).collect();
        Standardization { mean, std }
    }

    /// Applies `(x - mean) / std` per channel and records the statistics.
    pub fn standardize(&mut self, stats: &Standardization) -> Result<()> {
        if self.standardization.is_some() {
            bail!(Usage, "dataset {} is already standardized", self.name);
        }
        let [c, h, w] = self.image_shape();
        if stats.mean.len() != c || stats.std.len() != c {
            bail!(Dimension, "statistics for {} channels on {}-channel images", stats.mean.len(), c);
        }
        let plane = h * w;
        for (k, p) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = k % c;
            p.iter_mut().for_each(|v| *v = (*v - stats.mean[ch]) / stats.std[ch]);
        }
        self.standardization = Some(stats.clone());
        Ok(())
    }
}

/// Standardizes both splits with statistics of the training split.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<()> {
    let stats = train.channel_stats();
    train.standardize(&stats)?;
    test.standardize(&stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard].into_iter().find(|d| d.name() == s)
    }

    /// `(pixel noise σ, orientation jitter in radians, contrast)`
    fn levels(self) -> (f64, f64, f64) {
        match self {
            Difficulty::Easy => (0.08, 0.05, 0.45),
            Difficulty::Medium => (0.2, 0.12, 0.35),
            Difficulty::Hard => (0.3, 0.2, 0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: 4, samples: 2000, size: 16, channels: 3, seed: 0, difficulty: Difficulty::Medium }
    }
}

/// Oriented gratings with random phase, frequency and colour plus pixel noise.
/// Class `k` of `K` is the orientation `kπ/K`; the random phase makes the
/// class invisible to any linear read-out of the pixels.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        bail!(Config, "synthetic data needs at least two classes, got {}", spec.classes);
    }
    if spec.samples == 0 || spec.size == 0 || spec.channels == 0 {
        bail!(Config, "synthetic data needs positive samples, size and channels");
    }
    let (noise, jitter, contrast) = spec.difficulty.levels();
    let (c, s) = (spec.channels, spec.size);
    let mut r = rng::stream(spec.seed, Stream::Data);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(spec.samples * c * s * s);
    for &label in &labels {
        let theta = PI * label as f64 / spec.classes as f64 + jitter * normal.sample(&mut r);
        let freq = r.random_range(1.5..3.0) / s as f64;
        let phase = r.random_range(0.0..2.0 * PI);
        let (dx, dy) = (cos(theta), sin(theta));
        let colour: Vec<f64> = (0..c).map(|_| r.random_range(0.5..1.0)).collect();
        let start = data.len();
        data.resize(start + c * s * s, 0.0);
        for (ch, plane) in data[start..].chunks_mut(s * s).enumerate() {
            for y in 0..s {
                for x in 0..s {
                    let u = x as f64 * dx + y as f64 * dy;
                    let v = 0.5 + contrast * colour[ch] * sin(2.0 * PI * freq * u + phase);
                    plane[y * s + x] = v;
                }
            }
        }
        for v in &mut data[start..] {
            *v = (*v + noise * normal.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    let images = Tensor::new(vec![spec.samples, c, s, s], data)?;
    let provenance = format!(
        "synth classes={} samples={} size={} channels={} seed={} difficulty={}",
        spec.classes,
        spec.samples,
        spec.size,
        spec.channels,
        spec.seed,
        spec.difficulty.name()
    );
    Dataset::new(images, labels, spec.classes, "synthetic", &provenance)
}

/// Distributes `target` items over classes proportionally to `quota`,
/// flooring first and then handing out the remainder by largest fractional
/// part (lowest class first on ties), never exceeding `cap`.
fn allocate(quota: &[f64], cap: &[usize], target: usize) -> Vec<usize> {
    let mut take: Vec<usize> = quota.iter().zip(cap).map(|(&q, &c)| (q as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - take[a] as f64;
        let fb = quota[b] - take[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(take.iter().sum());
    while left > 0 {
        let before = left;
        for &k in &order {
            if left == 0 {
                break;
            }
            if take[k] < cap[k] {
                take[k] += 1;
                left -= 1;
            }
        }
        if before == left {
            break;
        }
    }
    take
}

/// Disjoint label-stratified index sets of sizes `floor(f·N)` for each fraction.
pub fn stratified_indices(labels: &[usize], classes: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        bail!(Config, "cannot split an empty dataset");
    }
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        bail!(Config, "split fractions must be positive and sum to at most 1, got {:?}", fractions);
    }
    let mut r = rng::stream(seed, Stream::Split);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            bail!(Input, "label {} out of range for {} classes", l, classes);
        }
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut r);
    }
    let n = labels.len();
    let mut used = vec![0usize; classes];
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let target = (f * n as f64) as usize;
        if target == 0 {
            bail!(Config, "split fraction {} of {} items is empty", f, n);
        }
        let quota: Vec<f64> = by_class.iter().map(|m| f * m.len() as f64).collect();
        let cap: Vec<usize> = by_class.iter().zip(&used).map(|(m, &u)| m.len() - u).collect();
        let take = allocate(&quota, &cap, target);
        let mut part = Vec::with_capacity(target);
        for (k, &t) in take.iter().enumerate() {
            part.extend_from_slice(&by_class[k][used[k]..used[k] + t]);
            used[k] += t;
        }
        part.sort_unstable();
        out.push(part);
    }
    Ok(out)
}

/// Train/validation split of a dataset.
pub fn split_dataset(data: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let parts = stratified_indices(&data.labels, data.classes, &[fractions.0, fractions.1], seed)?;
    Ok((data.subset(&parts[0], &format!("{}.train", data.name)), data.subset(&parts[1], &format!("{}.val", data.name))))
}

/// Shuffled mini-batches of `0..n`; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPolicy {
    /// Zero padding before the random crop; 0 disables.
    pub pad_crop: usize,
    pub flip: bool,
    /// Cutout side length; 0 disables.
    pub cutout: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { pad_crop: 4, flip: true, cutout: 16 }
    }
}

/// Crop of the zero-padded image at offset `(dy, dx)` in `0..=2·pad`.
pub fn pad_crop(img: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y + dy;
            if sy < pad || sy >= h + pad {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < pad || sx >= w + pad {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy - pad) * w + sx - pad];
            }
        }
    }
    out
}

pub fn hflip(img: &mut [f64], shape: [usize; 3]) {
    let w = shape[2];
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Zeroes the `length × length` square centred at `(cy, cx)`, clipped at the borders.
pub fn cutout_at(img: &mut [f64], shape: [usize; 3], length: usize, cy: usize, cx: usize) {
    if length == 0 {
        return;
    }
    let [c, h, w] = shape;
    let half = length / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + length - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + length - half).min(w));
    for ch in 0..c {
        for y in y0..y1 {
            img[(ch * h + y) * w + x0..(ch * h + y) * w + x1].fill(0.0);
        }
    }
}

/// Cutout of a `[C, H, W]` image with a uniformly placed centre.
pub fn cutout(image: &Tensor, length: usize, rng: &mut Rng) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        bail!(Dimension, "cutout expects a [C,H,W] image, got {:?}", image.shape());
    };
    let mut out = image.clone();
    if length > 0 {
        let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
        cutout_at(out.data_mut(), [c, h, w], length, cy, cx);
    }
    Ok(out)
}

/// Random crop, flip and cutout of one image, drawing in that order.
pub fn augment(img: &[f64], shape: [usize; 3], policy: &AugmentPolicy, rng: &mut Rng) -> Vec<f64> {
    let [_, h, w] = shape;
    let mut out = if policy.pad_crop > 0 {
        let span = 2 * policy.pad_crop + 1;
        let (dy, dx) = (rng.random_range(0..span), rng.random_range(0..span));
        pad_crop(img, shape, policy.pad_crop, dy, dx)
    } else {
        img.to_vec()
    };
    if policy.flip && rng.random_bool(0.5) {
        hflip(&mut out, shape);
    }
    if policy.cutout > 0 {
        let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
        cutout_at(&mut out, shape, policy.cutout, cy, cx);
    }
    out
}

/// Augments every image of an `[N, C, H, W]` batch.
pub fn augment_batch(images: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Tensor> {
    let [n, c, h, w] = images.dims4()?;
    let l = c * h * w;
    let mut data = Vec::with_capacity(n * l);
    for img in images.data().chunks(l) {
        data.extend(augment(img, [c, h, w], policy, rng));
    }
    Tensor::new(vec![n, c, h, w], data)
}
