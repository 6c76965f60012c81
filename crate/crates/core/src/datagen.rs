//! Seeded synthetic forgery-analog images and a small raster-folder loader.
//!
//! Real images are smooth random fields with a low-frequency sinusoidal
//! texture. A fake is a real image with a patch from another real image
//! blended in through a raised-cosine mask, plus a faint high-frequency
//! DCT basis pattern inside the same mask. `artifact_strength` scales both
//! cues; at zero a fake equals its source exactly.
//!
//! Raster files (`.tkr`) are little-endian: `u32 width | u32 height |
//! u8 channels | u8 pixels`, pixels row-major with channels interleaved
//! (`y, x, c`). The manifest is a CSV with header `filename,label,split`.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{FrequencyTransform, HighPassSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    freq_images: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    highpass: HighPassSpec,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, splits: Vec<Split>, highpass: HighPassSpec) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        let n = images.dim(0);
        if labels.len() != n || splits.len() != n {
            return Err(Error::Data(format!(
                "{n} images, {} labels, {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {l} is not binary")));
        }
        let ft = FrequencyTransform::new(images.dim(2), images.dim(3), highpass);
        let freq_images = ft.apply_batch(&images)?;
        Ok(Self { images, freq_images, labels, splits, highpass })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn freq_images(&self) -> &Tensor {
        &self.freq_images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn highpass(&self) -> HighPassSpec {
        self.highpass
    }

    /// Per-sample image shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// `(x, x^F, labels)` for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        Ok((
            self.images.select_rows(idx)?,
            self.freq_images.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Fisher-Yates shuffle of a copy of `idx`.
pub fn shuffled<R: Rng + ?Sized>(idx: &[usize], rng: &mut R) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub channels: usize,
    pub artifact_strength: f64,
    /// Blend patch radius range as a fraction of the image size.
    pub blend_radius: (f64, f64),
    /// Range of the pattern's DCT frequency indices, as a fraction of the
    /// image size; the default keeps it in the top quartile.
    pub checker_frequency: (f64, f64),
    /// Peak amplitude of the high-frequency pattern at full strength.
    pub checker_amplitude: f64,
    /// Standard deviation of per-pixel sensor noise on every image.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_train: 600,
            n_val: 200,
            n_test: 200,
            image_size: 64,
            channels: 3,
            artifact_strength: 0.8,
            blend_radius: (0.2, 0.35),
            checker_frequency: (0.75, 1.0),
            checker_amplitude: 0.06,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn n_samples(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples() < 4 {
            return bad(format!("need at least 4 samples, got {}", self.n_samples()));
        }
        if self.image_size < 4 || self.channels == 0 {
            return bad(format!("image size {} / channels {}", self.image_size, self.channels));
        }
        if !(0.0..=1.0).contains(&self.artifact_strength) {
            return bad(format!("artifact strength {} outside [0, 1]", self.artifact_strength));
        }
        let (r0, r1) = self.blend_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 0.5) {
            return bad(format!("blend radius range {:?}", self.blend_radius));
        }
        let (f0, f1) = self.checker_frequency;
        if !(0.0..=1.0).contains(&f0) || !(f0 < f1 && f1 <= 1.0) {
            return bad(format!("checker frequency range {:?}", self.checker_frequency));
        }
        if self.checker_amplitude < 0.0 || self.noise_std < 0.0 {
            return bad("amplitudes must be nonnegative".into());
        }
        Ok(())
    }
}

/// One generated sample, with the provenance needed by tests.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub image: Tensor,
    pub label: usize,
    /// The real image a fake was made from (equal to `image` for reals).
    pub source: Tensor,
    /// Patch center `(y, x)` and outer radius, for fakes.
    pub patch: Option<(f64, f64, f64)>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with wrap-around borders.
fn blur(field: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let ni = n as isize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[y * n + ((x as isize + k as isize - r).rem_euclid(ni)) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[((y as isize + k as isize - r).rem_euclid(ni)) as usize * n + x])
                .sum();
        }
    }
    out
}

fn unit_std(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
    v
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn smooth_field<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| gaussian(rng)).collect();
    unit_std(blur(&noise, n, &gaussian_kernel(sigma)))
}

/// A "real" image: correlated smooth colour fields plus a low-frequency
/// sinusoid, mapped into `[0, 1]`.
fn real_image<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> Tensor {
    let n = spec.image_size;
    let sigma = (n as f64 / 10.0).max(0.8);
    let base = smooth_field(n, sigma, rng);
    let cycles = rng.gen_range(1.0..3.0);
    let angle = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (fy, fx) = (cycles * angle.sin() / n as f64, cycles * angle.cos() / n as f64);
    let brightness = rng.gen_range(0.4..0.6);
    let mut data = Vec::with_capacity(spec.channels * n * n);
    for _ in 0..spec.channels {
        let own = smooth_field(n, sigma, rng);
        let tint = rng.gen_range(-0.05..0.05);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let wave = (2.0 * PI * (fy * y as f64 + fx * x as f64) + phase).sin();
                let v = 0.8 * base[i] + 0.6 * own[i] + 0.5 * wave;
                let p = brightness + tint + 0.11 * v + spec.noise_std * gaussian(rng);
                data.push(p.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![spec.channels, n, n], data).expect("image shape")
}

/// Raised-cosine radial mask: 1 inside `radius / 2`, 0 beyond `radius`.
pub fn blend_mask(n: usize, cy: f64, cx: f64, radius: f64) -> Vec<f64> {
    let inner = 0.5 * radius;
    let mut m = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let rho = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            m[y * n + x] = if rho <= inner {
                1.0
            } else if rho < radius {
                0.5 * (1.0 + (PI * (rho - inner) / (radius - inner)).cos())
            } else {
                0.0
            };
        }
    }
    m
}

/// Generate sample `index` (even indices real, odd fake within a split).
pub fn generate_sample(spec: &GenSpec, index: usize, label: usize) -> GeneratedSample {
    let mut rng = sample_rng(spec.seed, index);
    let source = real_image(spec, &mut rng);
    if label == 0 {
        return GeneratedSample { image: source.clone(), label, source, patch: None };
    }
    let donor = real_image(spec, &mut rng);
    let n = spec.image_size;
    let nf = n as f64;
    let radius = rng.gen_range(spec.blend_radius.0..=spec.blend_radius.1) * nf;
    let cy = rng.gen_range(radius.min(nf / 2.0)..=(nf - radius).max(nf / 2.0));
    let cx = rng.gen_range(radius.min(nf / 2.0)..=(nf - radius).max(nf / 2.0));
    let lo = ((spec.checker_frequency.0 * nf).ceil() as usize).min(n - 1);
    let hi = ((spec.checker_frequency.1 * nf).ceil() as usize).clamp(lo + 1, n);
    let u = rng.gen_range(lo..hi);
    let v = rng.gen_range(lo..hi);
    let mask = blend_mask(n, cy, cx, radius);
    let s = spec.artifact_strength;
    let mut img = source.clone();
    let plane = n * n;
    for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
        let d = &donor.data()[c * plane..(c + 1) * plane];
        for y in 0..n {
            let by = (PI * (2 * y + 1) as f64 * u as f64 / (2.0 * nf)).cos();
            for x in 0..n {
                let i = y * n + x;
                if mask[i] == 0.0 {
                    continue;
                }
                let bx = (PI * (2 * x + 1) as f64 * v as f64 / (2.0 * nf)).cos();
                let blended = chunk[i] + s * mask[i] * (d[i] - chunk[i]);
                let cue = s * spec.checker_amplitude * mask[i] * by * bx;
                chunk[i] = (blended + cue).clamp(0.0, 1.0);
            }
        }
    }
    GeneratedSample { image: img, label, source, patch: Some((cy, cx, radius)) }
}

/// Deterministic dataset for `spec`. Within every split labels alternate
/// real/fake, so classes are balanced to within one sample.
pub fn generate(spec: &GenSpec, highpass: HighPassSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.n_samples();
    let mut data = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let parts = [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)];
    let mut index = 0;
    for (split, count) in parts {
        for j in 0..count {
            let label = j % 2;
            let s = generate_sample(spec, index, label);
            data.extend_from_slice(s.image.data());
            labels.push(label);
            splits.push(split);
            index += 1;
        }
    }
    let images = Tensor::new(vec![n, spec.channels, spec.image_size, spec.image_size], data)?;
    LabeledDataset::new(images, labels, splits, highpass)
}

pub fn write_raster(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.dim(0) > 255 {
        return Err(Error::Data(format!("cannot write raster of shape {:?}", image.shape())));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let mut buf = Vec::with_capacity(9 + c * h * w);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.push(c as u8);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.get(&[ch, y, x]).clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Read a raster as a `C×H×W` tensor in `[0, 1]`.
pub fn read_raster(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 9 {
        return Err(Error::Data(format!("{}: truncated header", path.display())));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let c = bytes[8] as usize;
    let px = &bytes[9..];
    if w == 0 || h == 0 || c == 0 || px.len() != w * h * c {
        return Err(Error::Data(format!(
            "{}: header {w}x{h}x{c} does not match {} pixel bytes",
            path.display(),
            px.len()
        )));
    }
    let mut t = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                t.set(&[ch, y, x], px[(y * w + x) * c + ch] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

fn resize_nearest(img: &Tensor, size: usize) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    if h == size && w == size {
        return img.clone();
    }
    let mut out = Tensor::zeros(&[c, size, size]);
    for ch in 0..c {
        for y in 0..size {
            let sy = (y * h / size).min(h - 1);
            for x in 0..size {
                let sx = (x * w / size).min(w - 1);
                out.set(&[ch, y, x], img.get(&[ch, sy, sx]));
            }
        }
    }
    out
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    filename: String,
    label: usize,
    split: String,
}

pub const MANIFEST: &str = "manifest.csv";

/// Write every sample as a raster plus `manifest.csv` into `dir`.
pub fn write_dataset_dir(data: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut wtr = csv::Writer::from_path(dir.join(MANIFEST)).map_err(|e| Error::Io(e.into()))?;
    let shape = data.image_shape();
    for i in 0..data.len() {
        let name = format!("{i:06}.tkr");
        let img = data.images().select_rows(&[i])?.reshape(&shape)?;
        write_raster(&dir.join(&name), &img)?;
        wtr.serialize(ManifestRow { filename: name, label: data.labels()[i], split: data.splits()[i].as_str().into() })
            .map_err(|e| Error::Io(e.into()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Load rasters listed in `manifest`, resized to `size×size` by nearest
/// neighbour.
pub fn load_image_dir(dir: &Path, manifest: &Path, size: usize, highpass: HighPassSpec) -> Result<LabeledDataset> {
    let mut rdr = csv::Reader::from_path(manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let mut rows = Vec::new();
    for r in rdr.deserialize::<ManifestRow>() {
        rows.push(r.map_err(|e| Error::Data(format!("manifest: {e}")))?);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no images", manifest.display())));
    }
    let missing: Vec<&str> = rows
        .iter()
        .filter(|r| !dir.join(&r.filename).is_file())
        .map(|r| r.filename.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("manifest lists missing files: {}", missing.join(", "))));
    }
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut splits = Vec::with_capacity(rows.len());
    let mut channels = None;
    for r in &rows {
        let img = resize_nearest(&read_raster(&dir.join(&r.filename))?, size);
        match channels {
            None => channels = Some(img.dim(0)),
            Some(c) if c != img.dim(0) => {
                return Err(Error::Data(format!("{}: {} channels, expected {c}", r.filename, img.dim(0))))
            }
            _ => {}
        }
        if r.label > 1 {
            return Err(Error::Data(format!("{}: label {} is not binary", r.filename, r.label)));
        }
        data.extend(img.into_data());
        labels.push(r.label);
        splits.push(Split::parse(&r.split)?);
    }
    let c = channels.expect("nonempty");
    let images = Tensor::new(vec![rows.len(), c, size, size], data)?;
    LabeledDataset::new(images, labels, splits, highpass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec { n_train: 8, n_val: 4, n_test: 4, image_size: 16, seed: 3, ..GenSpec::default() }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate(&small(), HighPassSpec::default()).unwrap();
        let b = generate(&small(), HighPassSpec::default()).unwrap();
        assert_eq!(a.images(), b.images());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.indices(Split::Val), vec![8, 9, 10, 11]);
    }

    #[test]
    fn zero_strength_fake_equals_source() {
        let spec = GenSpec { artifact_strength: 0.0, ..small() };
        let s = generate_sample(&spec, 5, 1);
        assert_eq!(s.image, s.source);
    }

    #[test]
    fn fake_differs_only_inside_patch() {
        let spec = small();
        for idx in [1, 3, 7] {
            let s = generate_sample(&spec, idx, 1);
            let (cy, cx, r) = s.patch.unwrap();
            let n = spec.image_size;
            let mut changed = 0;
            for c in 0..spec.channels {
                for y in 0..n {
                    for x in 0..n {
                        let d = (s.image.get(&[c, y, x]) - s.source.get(&[c, y, x])).abs();
                        let rho = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        if rho >= r {
                            assert_eq!(d, 0.0);
                        } else if d > 0.0 {
                            changed += 1;
                        }
                    }
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&GenSpec { n_train: 2, n_val: 1, n_test: 0, ..small() }, HighPassSpec::default()).is_err());
        assert!(generate(&GenSpec { artifact_strength: 1.5, ..small() }, HighPassSpec::default()).is_err());
        assert!(generate(&GenSpec { blend_radius: (0.3, 0.2), ..small() }, HighPassSpec::default()).is_err());
    }

    #[test]
    fn raster_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small(), HighPassSpec::default()).unwrap();
        write_dataset_dir(&data, dir.path()).unwrap();
        let back = load_image_dir(dir.path(), &dir.path().join(MANIFEST), 16, HighPassSpec::default()).unwrap();
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.splits(), data.splits());
        assert!(back.images().max_abs_diff(data.images()).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn empty_manifest_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST);
        fs::write(&m, "filename,label,split\n").unwrap();
        assert!(matches!(load_image_dir(dir.path(), &m, 8, HighPassSpec::default()), Err(Error::Data(_))));
        fs::write(&m, "filename,label,split\na.tkr,0,train\nb.tkr,1,train\n").unwrap();
        let err = load_image_dir(dir.path(), &m, 8, HighPassSpec::default()).unwrap_err();
        assert!(err.to_string().contains("a.tkr, b.tkr"), "{err}");
    }

    #[test]
    fn two_file_directory() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(&[3, 4, 4], 0.5);
        write_raster(&dir.path().join("a.tkr"), &img).unwrap();
        write_raster(&dir.path().join("b.tkr"), &img).unwrap();
        let m = dir.path().join(MANIFEST);
        fs::write(&m, "filename,label,split\na.tkr,0,train\nb.tkr,1,train\n").unwrap();
        let d = load_image_dir(dir.path(), &m, 8, HighPassSpec::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 1]);
        assert_eq!(d.image_shape(), [3, 8, 8]);
    }
}
