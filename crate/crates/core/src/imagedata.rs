//! RGB images in the `[0, 1]` range, PNG I/O and dataset preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, Rng};

pub const CHANNELS: usize = 3;

/// An H×W×3 image with interleaved channels and intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x{CHANNELS} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    /// Builds an image from a per-pixel function returning RGB; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    /// Mutable access for in-crate producers that maintain the range invariant.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        Image {
            height,
            width,
            data,
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Ok(Image::from_raw_unchecked(height, width, data))
    }

    /// Mean of each channel over all pixels.
    pub fn channel_means(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        [(acc[0] / n) as f32, (acc[1] / n) as f32, (acc[2] / n) as f32]
    }

    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        let [r, g, b] = self.pixel(y, x);
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

/// Reads an 8-bit RGB PNG; values are `byte / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Image::from_raw_unchecked(h as usize, w as usize, data))
}

/// Quantizes a `[0, 1]` value to a byte, rounding half up.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
}

/// Where and how a dataset is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source_dir: PathBuf,
    pub max_images: usize,
    pub crop_size: usize,
    pub downsample_factor: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source_dir: PathBuf::from("."),
            max_images: 100,
            crop_size: 256,
            downsample_factor: 1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(Error::Parameter(format!(
                "crop_size {} must be a positive multiple of 4",
                self.crop_size
            )));
        }
        if self.downsample_factor == 0 {
            return Err(Error::Parameter("downsample_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Averages non-overlapping `factor`×`factor` blocks; trailing rows/columns that do
/// not fill a block are dropped.
pub fn box_downsample(image: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::Parameter("downsample factor 0".into()));
    }
    let (h, w) = (image.height / factor, image.width / factor);
    if h == 0 || w == 0 {
        return Err(Error::Size(format!(
            "{}x{} cannot be downsampled by {factor}",
            image.height, image.width
        )));
    }
    let norm = 1.0 / (factor * factor) as f32;
    Ok(Image::from_fn(h, w, |y, x| {
        let mut acc = [0f32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = image.pixel(y * factor + dy, x * factor + dx);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
        }
        acc.map(|v| v * norm)
    }))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    if (height, width) == image.dims() {
        return image.clone();
    }
    let sy = image.height as f32 / height as f32;
    let sx = image.width as f32 / width as f32;
    let sample_axis = |o: usize, scale: f32, len: usize| {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f32)
    };
    Image::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = sample_axis(y, sy, image.height);
        let (x0, x1, fx) = sample_axis(x, sx, image.width);
        let (a, b, c, d) = (
            image.pixel(y0, x0),
            image.pixel(y0, x1),
            image.pixel(y1, x0),
            image.pixel(y1, x1),
        );
        let mut out = [0f32; 3];
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bottom = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bottom - top) * fy;
        }
        out
    })
}

/// Downsample (factor > 1) or shorter-side resize (factor = 1), then a random square crop.
pub fn preprocess(image: &Image, spec: &DatasetSpec, rng: &mut Rng) -> Result<Image> {
    spec.validate()?;
    let crop = spec.crop_size;
    let scaled = if spec.downsample_factor > 1 {
        box_downsample(image, spec.downsample_factor)?
    } else {
        let (h, w) = image.dims();
        if h.min(w) < crop {
            return Err(Error::Size(format!(
                "{h}x{w} has a side shorter than the crop size {crop}"
            )));
        }
        let (nh, nw) = if h <= w {
            (crop, ((w as f64 * crop as f64 / h as f64).round() as usize).max(crop))
        } else {
            (((h as f64 * crop as f64 / w as f64).round() as usize).max(crop), crop)
        };
        resize_bilinear(image, nh, nw)
    };
    let (h, w) = scaled.dims();
    if h.min(w) < crop {
        return Err(Error::Size(format!(
            "{h}x{w} after downsampling by {} is smaller than the crop size {crop}",
            spec.downsample_factor
        )));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    scaled.crop(y0, x0, crop, crop)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of a directory in lexicographic filename order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads the first `max_images` decodable images of the directory and
/// preprocesses each one, keeping per-image preprocessing failures.
///
/// Undecodable files are skipped with a warning and do not count. The crop of
/// the i-th kept image depends only on `(spec.seed, i)`.
pub fn ingest_entries(spec: &DatasetSpec) -> Result<Vec<(String, Result<Image>)>> {
    spec.validate()?;
    let mut out = Vec::new();
    for path in list_images(&spec.source_dir)? {
        if out.len() == spec.max_images {
            break;
        }
        let image = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let mut rng = seeding::rng_from(spec.seed, &[seeding::label_tag("crop"), out.len() as u64]);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, preprocess(&image, spec, &mut rng)));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(spec.source_dir.clone()));
    }
    Ok(out)
}

/// Like [`ingest_entries`], failing on the first preprocessing error.
pub fn ingest_dataset(spec: &DatasetSpec) -> Result<Vec<(String, Image)>> {
    ingest_entries(spec)?
        .into_iter()
        .map(|(name, r)| r.map(|img| (name, img)))
        .collect()
}
