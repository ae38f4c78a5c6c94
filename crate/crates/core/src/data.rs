//! Datasets: the synthetic glyph task, an IDX reader and seeded batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

/// Images in `[0,1]` (stored as `f32`, `N×C×H×W`) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    shape: [usize; 3],
    labels: Vec<usize>,
    classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        shape: [usize; 3],
        labels: Vec<usize>,
        classes: usize,
        split: &str,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if images.len() != per * labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                detail: format!(
                    "{} pixels for {} images of {shape:?}",
                    images.len(),
                    labels.len()
                ),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidValue("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            shape,
            labels,
            classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.shape.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }

    /// Images `indices` as a `B×C×H×W` tensor, with their labels.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image(0).len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| s::<F>(v as f64)));
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` images, or all of them.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.shape.iter().product::<usize>();
        Dataset {
            images: self.images[..n * per].to_vec(),
            shape: self.shape,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }
}

/// Rendering knobs of the glyph task besides noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphStyle {
    /// Background level before noise.
    pub background: f64,
    /// Stroke level minus background.
    pub contrast: f64,
    /// Maximum offset in pixels along each axis.
    pub jitter: i64,
    /// Amplitude of a class-keyed ±texture added to every pixel (0 disables).
    pub cue: f64,
    /// Probability that the drawn glyph is the labelled class; otherwise a
    /// uniformly chosen other glyph is drawn.
    pub agreement: f64,
}

impl Default for GlyphStyle {
    fn default() -> Self {
        GlyphStyle {
            background: 0.0,
            contrast: 1.0,
            jitter: 2,
            cue: 0.0,
            agreement: 1.0,
        }
    }
}

/// Sign of texture `class` at pixel `(r, c)`: stripes, checkers and gratings
/// that a 3×3 filter can tell apart.
fn texture(class: usize, r: usize, c: usize) -> f64 {
    let on = match class {
        0 => r.is_multiple_of(2),
        1 => c.is_multiple_of(2),
        2 => (r + c).is_multiple_of(2),
        3 => (r / 2).is_multiple_of(2),
        4 => (c / 2).is_multiple_of(2),
        5 => ((r + c) / 2).is_multiple_of(2),
        6 => ((r + 64 - c) / 2).is_multiple_of(2),
        7 => (r / 2 + c / 2).is_multiple_of(2),
        8 => r.is_multiple_of(3),
        _ => c.is_multiple_of(3),
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

/// Stroke mask of glyph `class` on an `m×m` box.
fn glyph(class: usize, m: usize) -> Vec<bool> {
    let mut g = vec![false; m * m];
    let last = m - 1;
    let mid = m / 2;
    let mut set = |r: usize, c: usize| g[r * m + c] = true;
    match class {
        // horizontal bar
        0 => (0..m).for_each(|c| set(mid, c)),
        // vertical bar
        1 => (0..m).for_each(|r| set(r, mid)),
        // diagonal
        2 => (0..m).for_each(|i| set(i, i)),
        // anti-diagonal
        3 => (0..m).for_each(|i| set(i, last - i)),
        // plus
        4 => (0..m).for_each(|i| {
            set(mid, i);
            set(i, mid);
        }),
        // saltire
        5 => (0..m).for_each(|i| {
            set(i, i);
            set(i, last - i);
        }),
        // ring
        6 => {
            let c = last as f64 / 2.0;
            let rad = c - 0.5;
            for r in 0..m {
                for q in 0..m {
                    let d = ((r as f64 - c).powi(2) + (q as f64 - c).powi(2)).sqrt();
                    if (d - rad).abs() < 0.75 {
                        set(r, q);
                    }
                }
            }
        }
        // square outline
        7 => (0..m).for_each(|i| {
            set(0, i);
            set(last, i);
            set(i, 0);
            set(i, last);
        }),
        // corner, L-shaped
        8 => (0..m).for_each(|i| {
            set(i, 0);
            set(last, i);
        }),
        // tee
        _ => (0..m).for_each(|i| {
            set(0, i);
            set(i, mid);
        }),
    }
    g
}

/// Procedural glyph classification task: `classes` (≤ 10) stroke patterns at
/// random offsets with additive Gaussian noise, clipped to `[0,1]`. Samples
/// are interleaved by class.
pub fn synth_glyphs(
    n_per_class: usize,
    classes: usize,
    size: usize,
    noise_sigma: f64,
    seed: u64,
    style: GlyphStyle,
) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::InvalidValue(format!("glyph size {size} below 8")));
    }
    if !(2..=10).contains(&classes) {
        return Err(Error::InvalidValue(format!(
            "{classes} glyph classes (2 to 10 supported)"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Empty("glyph dataset"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidValue(format!("noise sigma {noise_sigma}")));
    }
    let j = style.jitter.max(0);
    let m = size - 2 * j as usize;
    if m < 4 {
        return Err(Error::InvalidValue(format!(
            "jitter {j} leaves no room on a {size} canvas"
        )));
    }
    if !(0.0..=1.0).contains(&style.agreement) {
        return Err(Error::InvalidValue(format!(
            "glyph agreement {}",
            style.agreement
        )));
    }
    let masks: Vec<Vec<bool>> = (0..classes).map(|c| glyph(c, m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let n = n_per_class * classes;
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let shown = if style.agreement < 1.0 && rng.random::<f64>() >= style.agreement {
            (class + 1 + rng.random_range(0..classes - 1)) % classes
        } else {
            class
        };
        let (dy, dx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        for r in 0..size {
            for c in 0..size {
                let (gr, gc) = (r as i64 - j - dy, c as i64 - j - dx);
                let on = gr >= 0
                    && gc >= 0
                    && (gr as usize) < m
                    && (gc as usize) < m
                    && masks[shown][gr as usize * m + gc as usize];
                let mut base = style.background + if on { style.contrast } else { 0.0 };
                if style.cue != 0.0 {
                    base += style.cue * texture(class, r, c);
                }
                let v = base
                    + if noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                images.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(class);
    }
    Dataset::new(images, [1, size, size], labels, classes, "synthetic")
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_err(offset, "truncated header"))
}

/// Parses big-endian IDX image/label buffers; pixels are divided by 255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(idx_err(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        ));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let need = 16 + n * rows * cols;
    if images.len() < need {
        return Err(idx_err(
            images.len(),
            format!("image payload truncated, expected {need} bytes"),
        ));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS {
        return Err(idx_err(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        ));
    }
    let nl = be_u32(labels, 4)? as usize;
    if nl != n {
        return Err(idx_err(4, format!("{nl} labels for {n} images")));
    }
    if labels.len() < 8 + n {
        return Err(idx_err(
            labels.len(),
            format!("label payload truncated, expected {} bytes", 8 + n),
        ));
    }
    let pixels = images[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(pixels, [1, rows, cols], labels, classes.max(2), "idx")
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Shuffled mini-batches; the permutation of each epoch depends only on `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("dataset"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidValue("batch size 0".into()));
        }
        Ok(BatchIterator {
            len,
            batch_size,
            seed,
            epoch: 0,
            order: Self::permutation(len, seed, 0),
            pos: 0,
        })
    }

    pub fn permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Next batch of indices; the last batch of an epoch may be short.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.len {
            self.epoch += 1;
            self.order = Self::permutation(self.len, self.seed, self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.len);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn next_batch<F: Scalar>(&mut self, data: &Dataset) -> (Tensor<F>, Vec<usize>) {
        let idx = self.next_indices();
        data.batch(&idx)
    }
}
