//! Image/label pairs on disk, the class palette, and synthetic scenes.
//!
//! A dataset directory holds `manifest.csv` (columns `split,image,label`,
//! paths relative to the directory) and PNG rasters. Labels are RGB images
//! whose colors map one-to-one to class ids through a [`ClassPalette`].

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One RGB image `[3, H, W]` with values in `[0, 1]` and its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub label: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, label: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || label.len() != s[1] * s[2] {
            return Err(Error::shape("SegSample", s, &[label.len()]));
        }
        Ok(Self { image, label })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        Self {
            names: ["impervious surface", "building", "low vegetation", "tree", "car"]
                .map(String::from)
                .to_vec(),
            colors: vec![[255, 255, 255], [0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0]],
        }
    }
}

impl ClassPalette {
    pub fn new(names: Vec<String>, colors: Vec<[u8; 3]>) -> Result<Self> {
        let p = Self { names, colors };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.colors.len() || self.colors.len() < 2 || self.colors.len() > 255 {
            return Err(Error::Config(format!(
                "palette needs 2..=255 classes with one color each, got {} names and {} colors",
                self.names.len(),
                self.colors.len()
            )));
        }
        for (i, c) in self.colors.iter().enumerate() {
            if self.colors[..i].contains(c) {
                return Err(Error::Config(format!("palette color {c:?} used twice")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.colors.iter().position(|&c| c == rgb).map(|i| i as u8)
    }

    /// Color raster to class ids; unknown colors report their pixel.
    pub fn decode(&self, img: &RgbImage) -> Result<Vec<u8>> {
        img.enumerate_pixels()
            .map(|(x, y, p)| {
                self.class_of(p.0).ok_or_else(|| {
                    Error::Dataset(format!("unknown label color {:?} at row {y}, col {x}", p.0))
                })
            })
            .collect()
    }

    pub fn encode(&self, label: &[u8], height: usize, width: usize) -> Result<RgbImage> {
        if label.len() != height * width {
            return Err(Error::shape("palette encode", &[label.len()], &[height, width]));
        }
        let mut img = RgbImage::new(width as u32, height as u32);
        for (i, &l) in label.iter().enumerate() {
            let c = self
                .colors
                .get(l as usize)
                .ok_or_else(|| Error::invalid(format!("class {l} has no palette color")))?;
            img.put_pixel((i % width) as u32, (i / width) as u32, Rgb(*c));
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub warnings: Vec<String>,
}

fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, px) = (i / (h * w), i % (h * w));
        raw[px * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("tensor_to_image", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(img)
}

fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(img.to_rgb8())
}

fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads one image and its label raster.
pub fn load_pair(image: &Path, label: &Path, palette: &ClassPalette) -> Result<SegSample> {
    let img = read_png(image)?;
    let lab = read_png(label)?;
    if img.dimensions() != lab.dimensions() {
        return Err(Error::Dataset(format!(
            "size mismatch: {} is {:?} but {} is {:?}",
            image.display(),
            img.dimensions(),
            label.display(),
            lab.dimensions()
        )));
    }
    let labels = palette
        .decode(&lab)
        .map_err(|e| Error::Dataset(format!("{}: {e}", label.display())))?;
    SegSample::new(image_to_tensor(&img), labels)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(image_to_tensor(&read_png(path)?))
}

/// Loads every pair listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path, palette: &ClassPalette) -> Result<Dataset> {
    let manifest = dir.join("manifest.csv");
    let file = std::fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["split", "image", "label"] {
        return Err(Error::Dataset(format!(
            "{}: expected header split,image,label",
            manifest.display()
        )));
    }
    let mut ds = Dataset::default();
    for record in reader.records() {
        let record = record?;
        let sample = load_pair(&dir.join(&record[1]), &dir.join(&record[2]), palette)?;
        match &record[0] {
            "train" => ds.train.push(sample),
            "val" => ds.val.push(sample),
            other => return Err(Error::Dataset(format!("unknown split {other:?} in manifest"))),
        }
    }
    if ds.train.is_empty() && ds.val.is_empty() {
        let msg = format!("{} lists no samples", manifest.display());
        log::warn!("{msg}");
        ds.warnings.push(msg);
    }
    Ok(ds)
}

/// Writes samples as PNG pairs and a manifest.
pub fn save_dataset(dir: &Path, ds: &Dataset, palette: &ClassPalette) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = dir.join("manifest.csv");
    let file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["split", "image", "label"])?;
    for (split, samples) in [("train", &ds.train), ("val", &ds.val)] {
        for (i, s) in samples.iter().enumerate() {
            let name = format!("{split}_{i:04}.png");
            let (img, lab) = (PathBuf::from("images").join(&name), PathBuf::from("labels").join(&name));
            write_png(&tensor_to_image(&s.image)?, &dir.join(&img))?;
            write_png(&palette.encode(&s.label, s.height(), s.width())?, &dir.join(&lab))?;
            w.write_record([split, &img.to_string_lossy(), &lab.to_string_lossy()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Mean color and texture noise of each synthetic class.
const SYNTH_COLORS: [[f32; 3]; 5] = [
    [0.55, 0.55, 0.55],
    [0.75, 0.35, 0.30],
    [0.55, 0.75, 0.35],
    [0.20, 0.50, 0.20],
    [0.20, 0.30, 0.80],
];
const SYNTH_NOISE: [f32; 5] = [0.06, 0.08, 0.06, 0.12, 0.06];

/// Number of classes the synthetic generator draws.
pub const SYNTH_CLASSES: usize = 5;

/// One random scene: class 0 background with rectangles (buildings, cars)
/// and ellipses (low vegetation, trees) painted over it.
pub fn synth_scene(size: usize, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    if size < 32 {
        return Err(Error::invalid(format!("synthetic scenes need size >= 32, got {size}")));
    }
    let mut label = vec![0u8; size * size];
    let unit = size as f64 / 64.0;
    let span = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo * unit..hi * unit);
    let rect = |label: &mut [u8], class: u8, y0: f64, x0: f64, h: f64, w: f64| {
        for y in (y0.max(0.0) as usize)..((y0 + h).min(size as f64) as usize) {
            for x in (x0.max(0.0) as usize)..((x0 + w).min(size as f64) as usize) {
                label[y * size + x] = class;
            }
        }
    };
    let ellipse = |label: &mut [u8], class: u8, cy: f64, cx: f64, ry: f64, rx: f64| {
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    label[y * size + x] = class;
                }
            }
        }
    };
    let side = size as f64;
    for _ in 0..rng.random_range(1..=2) {
        let (cy, cx) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        let (ry, rx) = (span(rng, 8.0, 16.0), span(rng, 8.0, 16.0));
        ellipse(&mut label, 2, cy, cx, ry, rx);
    }
    for _ in 0..rng.random_range(1..=3) {
        let (h, w) = (span(rng, 10.0, 22.0), span(rng, 10.0, 22.0));
        let (y0, x0) = (rng.random_range(-4.0..side - 6.0), rng.random_range(-4.0..side - 6.0));
        rect(&mut label, 1, y0, x0, h, w);
    }
    for _ in 0..rng.random_range(1..=3) {
        let (cy, cx) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        let r = span(rng, 4.0, 8.0);
        ellipse(&mut label, 3, cy, cx, r, r * rng.random_range(0.8..1.25));
    }
    for _ in 0..rng.random_range(1..=3) {
        let (long, short) = (span(rng, 7.0, 10.0), span(rng, 4.0, 5.0));
        let (h, w) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let (y0, x0) = (rng.random_range(0.0..side - h), rng.random_range(0.0..side - w));
        rect(&mut label, 4, y0, x0, h, w);
    }
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let brightness: f32 = rng.random_range(-0.08..0.08);
    let px = size * size;
    let mut image = vec![0f32; 3 * px];
    for (i, &l) in label.iter().enumerate() {
        let (base, sd) = (SYNTH_COLORS[l as usize], SYNTH_NOISE[l as usize]);
        for c in 0..3 {
            let v = base[c] + brightness + sd * normal.sample(rng);
            image[c * px + i] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    SegSample::new(Tensor::new(vec![3, size, size], image)?, label)
}

/// `images` scenes, the last `val` of which form the validation split.
/// Scene `i` depends only on `(seed, i)`.
pub fn synth_dataset(images: usize, val: usize, size: usize, seed: u64) -> Result<Dataset> {
    if val > images {
        return Err(Error::invalid(format!("validation count {val} exceeds {images} images")));
    }
    let mut ds = Dataset::default();
    for i in 0..images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let s = synth_scene(size, &mut rng)?;
        if i < images - val {
            ds.train.push(s);
        } else {
            ds.val.push(s);
        }
    }
    Ok(ds)
}
