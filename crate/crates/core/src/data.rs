//! Datasets: MNIST IDX files, the translation jitter onto a larger canvas,
//! and a synthetic spectro-temporal stand-in for monophone speech frames.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How an input vector is laid out, for rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum InputLayout {
    /// Row-major `height x width` image.
    Image { height: usize, width: usize },
    /// `frames` consecutive frames of `bins` frequency values, frame-major.
    Spectrogram { frames: usize, bins: usize },
    Flat,
}

impl InputLayout {
    /// Renders one input as a 2-D picture. Spectrograms put frequency on the
    /// vertical axis and time on the horizontal one.
    pub fn render(&self, input: &[f64]) -> Matrix {
        match *self {
            InputLayout::Image { height, width } => {
                Matrix::from_vec(height, width, input.to_vec()).expect("image layout")
            }
            InputLayout::Spectrogram { frames, bins } => {
                let mut m = Matrix::zeros(bins, frames);
                for f in 0..frames {
                    for b in 0..bins {
                        m.set(b, f, input[f * bins + b]);
                    }
                }
                m
            }
            InputLayout::Flat => Matrix::row_vector(input),
        }
    }
}

/// Inputs (one per row), class labels and optional translation offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `(dx, dy)` applied to each example, when it was jittered.
    pub offsets: Option<Vec<(i32, i32)>>,
    pub layout: InputLayout,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize, layout: InputLayout) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Data(format!("label {y} of example {i} is >= {classes} classes")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
            offsets: None,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// The listed examples, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            offsets: self.offsets.as_ref().map(|o| indices.iter().map(|&i| o[i]).collect()),
            layout: self.layout,
        }
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header at offset {offset}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "images: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Data(format!(
            "images: truncated at offset {}, header promises {need} pixel bytes",
            16 + body.len()
        )));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "labels: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Data(format!(
            "labels: truncated at offset {}, header promises {n} labels",
            8 + body.len()
        )));
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair. Pixel byte `v` becomes `v / 255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let img_bytes = read_file(images_path.as_ref())?;
    let lbl_bytes = read_file(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} has {n} images but {} has {} labels (count at offset 4)",
            images_path.as_ref().display(),
            labels_path.as_ref().display(),
            labels.len()
        )));
    }
    let inputs = Matrix::from_vec(n, rows * cols, pixels.iter().map(|&v| v as f64 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(inputs, labels, classes, InputLayout::Image { height: rows, width: cols })
}

/// Loads `train-*` or `t10k-*` files from an MNIST directory.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<LabeledDataset> {
    let prefix = if train { "train" } else { "t10k" };
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Quantizes a value in `[0, 1]` back to a pixel byte.
pub fn to_pixel(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// IDX encodings of an image dataset: `(images, labels)`.
pub fn encode_idx(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w) = match ds.layout {
        InputLayout::Image { height, width } => (height, width),
        _ => return Err(Error::Data("only image datasets can be written as IDX".into())),
    };
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.inputs.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(h as u32).to_be_bytes());
    images.extend_from_slice(&(w as u32).to_be_bytes());
    images.extend(ds.inputs.data().iter().map(|&v| to_pixel(v)));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for &y in &ds.labels {
        let b = u8::try_from(y).map_err(|_| Error::Data(format!("label {y} does not fit a byte")))?;
        labels.push(b);
    }
    Ok((images, labels))
}

pub fn write_idx(ds: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path.as_ref(), images).map_err(|e| Error::io(images_path.as_ref(), e))?;
    fs::write(labels_path.as_ref(), labels).map_err(|e| Error::io(labels_path.as_ref(), e))
}

/// Translation jitter of a `source x source` image onto a blank
/// `canvas x canvas` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    pub max_offset: i32,
    pub source: usize,
    pub canvas: usize,
    pub seed: u64,
}

impl JitterSpec {
    /// 28x28 digits moved by up to 4 pixels on a 36x36 canvas.
    pub fn mnist(seed: u64) -> Self {
        JitterSpec {
            max_offset: 4,
            source: 28,
            canvas: 36,
            seed,
        }
    }

    /// Number of distinct offsets per axis.
    pub fn grid(&self) -> usize {
        (2 * self.max_offset + 1) as usize
    }

    /// Places `image` with its top-left corner at `(max + dy, max + dx)`.
    pub fn apply(&self, image: &[f64], dx: i32, dy: i32) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.canvas * self.canvas];
        self.apply_into(image, dx, dy, &mut out)?;
        Ok(out)
    }

    fn check(&self, dx: i32, dy: i32) -> Result<()> {
        if dx.abs() > self.max_offset || dy.abs() > self.max_offset {
            return Err(Error::Config(format!(
                "offset ({dx}, {dy}) exceeds +-{}",
                self.max_offset
            )));
        }
        Ok(())
    }

    fn apply_into(&self, image: &[f64], dx: i32, dy: i32, out: &mut [f64]) -> Result<()> {
        self.check(dx, dy)?;
        if image.len() != self.source * self.source {
            return Err(Error::Shape(format!(
                "jitter expects {} pixels, got {}",
                self.source * self.source,
                image.len()
            )));
        }
        let top = (self.max_offset + dy) as usize;
        let left = (self.max_offset + dx) as usize;
        for r in 0..self.source {
            let dst = (top + r) * self.canvas + left;
            out[dst..dst + self.source].copy_from_slice(&image[r * self.source..(r + 1) * self.source]);
        }
        Ok(())
    }

    /// Inverse of [`JitterSpec::apply`].
    pub fn crop(&self, canvas: &[f64], dx: i32, dy: i32) -> Result<Vec<f64>> {
        self.check(dx, dy)?;
        let top = (self.max_offset + dy) as usize;
        let left = (self.max_offset + dx) as usize;
        let mut out = Vec::with_capacity(self.source * self.source);
        for r in 0..self.source {
            let src = (top + r) * self.canvas + left;
            out.extend_from_slice(&canvas[src..src + self.source]);
        }
        Ok(out)
    }

    /// Offset for one example. Each `(seed, mode, index)` has its own stream,
    /// so the draw does not depend on processing order.
    pub fn draw_offset(&self, mode: JitterMode, index: usize) -> (i32, i32) {
        let path: Vec<u64> = match mode {
            JitterMode::FixedOnce => vec![0, index as u64],
            JitterMode::PerEpoch(epoch) => vec![1, epoch as u64, index as u64],
        };
        let mut rng = Rng::substream(self.seed, &path);
        let g = self.grid();
        let dx = rng.below(g) as i32 - self.max_offset;
        let dy = rng.below(g) as i32 - self.max_offset;
        (dx, dy)
    }
}

/// Convenience form of [`JitterSpec::apply`] for 28x28 digits on 36x36.
pub fn jitter(image28: &[f64], dx: i32, dy: i32) -> Result<Vec<f64>> {
    JitterSpec::mnist(0).apply(image28, dx, dy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterMode {
    /// One offset per example, the same every time (test sets).
    FixedOnce,
    /// Fresh offsets for the given epoch (training augmentation).
    PerEpoch(usize),
}

/// Jitters every example of a `source x source` image dataset, recording the
/// offsets.
pub fn jitter_dataset(ds: &LabeledDataset, spec: &JitterSpec, mode: JitterMode) -> Result<LabeledDataset> {
    match ds.layout {
        InputLayout::Image { height, width } if height == spec.source && width == spec.source => {}
        other => {
            return Err(Error::Data(format!(
                "jitter needs {0}x{0} images, dataset layout is {other:?}",
                spec.source
            )))
        }
    }
    let d = spec.canvas * spec.canvas;
    let mut inputs = Matrix::zeros(ds.len(), d);
    let mut offsets = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (dx, dy) = spec.draw_offset(mode, i);
        spec.apply_into(ds.inputs.row(i), dx, dy, inputs.row_mut(i))?;
        offsets.push((dx, dy));
    }
    Ok(LabeledDataset {
        inputs,
        labels: ds.labels.clone(),
        classes: ds.classes,
        offsets: Some(offsets),
        layout: InputLayout::Image {
            height: spec.canvas,
            width: spec.canvas,
        },
    })
}

/// Parameters of the synthetic speech-frame generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechSynth {
    pub frames: usize,
    pub bins: usize,
    pub classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl Default for SpeechSynth {
    fn default() -> Self {
        SpeechSynth {
            frames: 11,
            bins: 40,
            classes: 40,
            noise: 0.35,
        }
    }
}

impl SpeechSynth {
    pub fn dim(&self) -> usize {
        self.frames * self.bins
    }

    /// Class template: two or three formant-like bands whose centre
    /// frequencies drift linearly over the frames, on a low floor.
    pub fn template(&self, seed: u64, class: usize) -> Vec<f64> {
        let mut rng = Rng::substream(seed, &[0, class as u64]);
        let bands = 2 + rng.below(2);
        let bins = self.bins as f64;
        let specs: Vec<(f64, f64, f64, f64)> = (0..bands)
            .map(|_| {
                let start = rng.uniform(0.0, bins);
                let drift = rng.uniform(-0.6, 0.6);
                let width = rng.uniform(1.5, 4.0);
                let amp = rng.uniform(0.4, 0.9);
                (start, drift, width, amp)
            })
            .collect();
        let floor = rng.uniform(0.05, 0.2);
        let mut t = vec![0.0; self.dim()];
        for f in 0..self.frames {
            for b in 0..self.bins {
                let mut v = floor;
                for &(start, drift, width, amp) in &specs {
                    let centre = start + drift * f as f64;
                    let z = (b as f64 - centre) / width;
                    v += amp * (-0.5 * z * z).exp();
                }
                t[f * self.bins + b] = v.clamp(0.0, 1.0);
            }
        }
        t
    }

    /// `n` examples, labels cycling through the classes (balanced to within
    /// one). Each sample is its class template plus noise, clipped to [0, 1].
    pub fn generate(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        if n == 0 || self.classes == 0 || self.dim() == 0 {
            return Err(Error::Config("synthetic speech needs n, classes, frames, bins >= 1".into()));
        }
        let templates: Vec<Vec<f64>> = (0..self.classes).map(|c| self.template(seed, c)).collect();
        let d = self.dim();
        let mut inputs = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.classes;
            let mut rng = Rng::substream(seed, &[1, i as u64]);
            for (o, &t) in inputs.row_mut(i).iter_mut().zip(&templates[c]) {
                let v = if self.noise > 0.0 { t + self.noise * rng.normal() } else { t };
                *o = v.clamp(0.0, 1.0);
            }
            labels.push(c);
        }
        LabeledDataset::new(
            inputs,
            labels,
            self.classes,
            InputLayout::Spectrogram {
                frames: self.frames,
                bins: self.bins,
            },
        )
    }
}

/// 440-dimensional, 40-class synthetic speech frames with default noise.
pub fn synth_monophone(n: usize, seed: u64) -> Result<LabeledDataset> {
    SpeechSynth::default().generate(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digit(rng: &mut Rng) -> Vec<f64> {
        (0..784)
            .map(|i| if (i / 28 + i % 28) % 3 == 0 { rng.uniform(0.1, 1.0) } else { 0.0 })
            .collect()
    }

    fn tiny_images(n: usize) -> LabeledDataset {
        let mut rng = Rng::new(3);
        let mut inputs = Matrix::zeros(n, 784);
        for i in 0..n {
            for v in inputs.row_mut(i).iter_mut() {
                *v = rng.below(256) as f64 / 255.0;
            }
        }
        LabeledDataset::new(inputs, (0..n).map(|i| i % 10).collect(), 10, InputLayout::Image { height: 28, width: 28 })
            .unwrap()
    }

    #[test]
    fn centered_jitter_has_empty_border() {
        let mut rng = Rng::new(1);
        let img = vec![1.0; 784];
        let out = jitter(&img, 0, 0).unwrap();
        for r in 0..36 {
            for c in 0..36 {
                let inside = (4..32).contains(&r) && (4..32).contains(&c);
                assert_eq!(out[r * 36 + c], if inside { 1.0 } else { 0.0 });
            }
        }
        let img = digit(&mut rng);
        let sum: f64 = img.iter().sum();
        for (dx, dy) in [(3, -2), (-4, 4), (1, 1)] {
            let out = jitter(&img, dx, dy).unwrap();
            assert_eq!(out.iter().sum::<f64>(), sum);
        }
    }

    #[test]
    fn extreme_offset_is_flush_with_right_and_top_edges() {
        let img = vec![1.0; 784];
        let out = jitter(&img, 4, -4).unwrap();
        assert_eq!(out[35], 1.0); // top-right corner
        assert_eq!(out[0 * 36 + 8], 1.0);
        assert_eq!(out[0 * 36 + 7], 0.0);
        assert_eq!(out[28 * 36 + 35], 0.0);
        assert!(jitter(&img, 5, 0).is_err());
        assert!(jitter(&img, 0, -5).is_err());
    }

    #[test]
    fn fixed_jitter_is_reproducible_and_invertible() {
        let ds = tiny_images(50);
        let spec = JitterSpec::mnist(77);
        let a = jitter_dataset(&ds, &spec, JitterMode::FixedOnce).unwrap();
        let b = jitter_dataset(&ds, &spec, JitterMode::FixedOnce).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 1296);
        let offsets = a.offsets.as_ref().unwrap();
        for i in 0..50 {
            let (dx, dy) = offsets[i];
            assert!(dx.abs() <= 4 && dy.abs() <= 4);
            assert_eq!(spec.crop(a.inputs.row(i), dx, dy).unwrap(), ds.inputs.row(i));
        }
        let e0 = jitter_dataset(&ds, &spec, JitterMode::PerEpoch(0)).unwrap();
        let e1 = jitter_dataset(&ds, &spec, JitterMode::PerEpoch(1)).unwrap();
        assert_ne!(e0.offsets, e1.offsets);
    }

    #[test]
    fn recorded_offsets_match_the_bounding_box() {
        // a fully-lit source makes the bounding box exactly the placed square
        let mut ds = tiny_images(30);
        ds.inputs = Matrix::filled(30, 784, 1.0);
        let spec = JitterSpec::mnist(5);
        let j = jitter_dataset(&ds, &spec, JitterMode::PerEpoch(3)).unwrap();
        for (i, &(dx, dy)) in j.offsets.as_ref().unwrap().iter().enumerate() {
            let row = j.inputs.row(i);
            let top = (0..36).find(|&r| (0..36).any(|c| row[r * 36 + c] > 0.0)).unwrap();
            let left = (0..36).find(|&c| (0..36).any(|r| row[r * 36 + c] > 0.0)).unwrap();
            assert_eq!((left as i32 - 4, top as i32 - 4), (dx, dy));
        }
    }

    #[test]
    fn offset_histogram_is_uniform() {
        let spec = JitterSpec::mnist(2024);
        let mut counts = [0usize; 81];
        let draws = 100_000;
        for i in 0..draws {
            let (dx, dy) = spec.draw_offset(JitterMode::PerEpoch(i / 60_000), i);
            counts[((dy + 4) * 9 + dx + 4) as usize] += 1;
        }
        let expected = draws as f64 / 81.0;
        for (cell, &c) in counts.iter().enumerate() {
            assert!(((c as f64) - expected).abs() <= 0.1 * expected, "cell {cell}: {c}");
        }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_images(12);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back, ds);
        let (img2, lbl2) = encode_idx(&back).unwrap();
        assert_eq!(img2, fs::read(&ip).unwrap());
        assert_eq!(lbl2, fs::read(&lp).unwrap());

        let mut bytes = fs::read(&ip).unwrap();
        // pixel byte 255 maps to exactly 1.0
        bytes[16] = 255;
        let (_, _, _, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!(px[0] as f64 / 255.0, 1.0);

        bytes[..4].copy_from_slice(&[0, 0, 0, 0]);
        let err = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");

        let good = fs::read(&ip).unwrap();
        let err = parse_idx_images(&good[..good.len() - 5]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let short = tiny_images(11);
        let lp2 = dir.path().join("lbl2");
        write_idx(&short, dir.path().join("img2"), &lp2).unwrap();
        assert!(matches!(load_idx(&ip, &lp2), Err(Error::Data(_))));
        assert!(matches!(load_idx(dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn synthetic_speech_shapes() {
        let ds = synth_monophone(400, 9).unwrap();
        assert_eq!(ds.dim(), 440);
        assert_eq!(ds.classes, 40);
        assert!(ds.labels.iter().all(|&y| y < 40));
        let mut counts = [0usize; 40];
        ds.labels.iter().for_each(|&y| counts[y] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(ds.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noiseless_speech_equals_templates() {
        let synth = SpeechSynth { noise: 0.0, ..SpeechSynth::default() };
        let ds = synth.generate(80, 4).unwrap();
        for i in 0..80 {
            assert_eq!(ds.inputs.row(i), synth.template(4, ds.labels[i]).as_slice());
        }
    }

    #[test]
    fn nearest_centroid_separates_synthetic_classes() {
        let train = synth_monophone(4000, 21).unwrap();
        // held-out data: same templates, different noise draws
        let all = synth_monophone(6000, 21).unwrap();
        let held: Vec<usize> = (4000..6000).collect();
        let test = all.subset(&held);

        let mut centroids = vec![vec![0.0; 440]; 40];
        let mut counts = vec![0usize; 40];
        for i in 0..train.len() {
            let y = train.labels[i];
            counts[y] += 1;
            for (c, v) in centroids[y].iter_mut().zip(train.inputs.row(i)) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.inputs.row(i);
                let best = (0..40)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == test.labels[i]
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn spectrogram_render_puts_frequency_vertically() {
        let layout = InputLayout::Spectrogram { frames: 3, bins: 2 };
        let m = layout.render(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.row(0), &[1.0, 3.0, 5.0]);
        assert_eq!(m.row(1), &[2.0, 4.0, 6.0]);
    }
}
