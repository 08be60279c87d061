//! Rasters, binary masks, PNG I/O, dataset manifests, and dataset splits.
//!
//! Two raster types keep the value-range contract explicit: [`Grid`] is an
//! unconstrained tensor (diffusion state may leave `[0, 1]`), while
//! [`ImageGrid`] guarantees every value lies in `[0, 1]` and is what the PNG
//! layer reads and writes. [`BinaryMask`] stores strict 0/1 bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageError, ImageFormat};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::rng_from_seed;

/// Row-major raster of `height * width * channels` scalars, indexed by
/// `(row, col, channel)` with channel fastest. Values are unconstrained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<S> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Grid {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: S) -> Result<Self> {
        Grid::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Grid::filled(width, height, channels, S::zero())
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Grid::new(width, height, channels, data)
    }

    /// Grid of i.i.d. standard-normal draws, filled in data order.
    pub fn standard_normal<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = width * height * channels;
        let data = (0..n).map(|_| S::standard_normal(rng)).collect();
        Grid::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Grid<S>) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Grid<S>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape_string(),
                got: other.shape_string(),
            })
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> S {
        self.data[self.idx(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: S) {
        let i = self.idx(row, col, channel);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Grid<S> {
        Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid<S>, f: impl Fn(S, S) -> S) -> Result<Grid<S>> {
        self.check_same_shape(other)?;
        Ok(Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> S {
        self.data.iter().copied().sum::<S>() / S::cast(self.data.len() as f64)
    }

    /// Clamp into `[0, 1]`. Non-finite values collapse deterministically:
    /// NaN and -inf to 0, +inf to 1.
    pub fn clamp_unit(&self) -> ImageGrid<S> {
        let clamped = self.map(|v| {
            // max/min return the other operand for NaN, so max first sends NaN to 0.
            v.max(S::zero()).min(S::one())
        });
        ImageGrid(clamped)
    }
}

/// A [`Grid`] whose values are all finite and within `[0, 1]`, with 1 or 3
/// channels. The unit of PNG exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageGrid<S>(Grid<S>);

impl<S: Scalar> ImageGrid<S> {
    pub fn new(grid: Grid<S>) -> Result<Self> {
        if grid.channels != 1 && grid.channels != 3 {
            return Err(Error::Config(format!(
                "images must have 1 or 3 channels, got {}",
                grid.channels
            )));
        }
        if let Some(v) = grid
            .data
            .iter()
            .find(|v| !v.is_finite() || **v < S::zero() || **v > S::one())
        {
            return Err(Error::Config(format!(
                "image values must lie in [0, 1], found {v}"
            )));
        }
        Ok(ImageGrid(grid))
    }

    pub fn grid(&self) -> &Grid<S> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<S> {
        self.0
    }
}

impl<S> Deref for ImageGrid<S> {
    type Target = Grid<S>;

    fn deref(&self) -> &Grid<S> {
        &self.0
    }
}

impl<S> AsRef<Grid<S>> for ImageGrid<S> {
    fn as_ref(&self) -> &Grid<S> {
        &self.0
    }
}

/// Strict 0/1 raster; one byte per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", width * height),
                got: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        BinaryMask::new(width, height, vec![0; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        BinaryMask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// One-channel float grid with values exactly 0 or 1.
    pub fn to_grid<S: Scalar>(&self) -> Grid<S> {
        Grid {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| S::cast(v as f64)).collect(),
        }
    }

    /// Threshold a one-channel grid: values `>= threshold` become foreground.
    /// NaN compares false and therefore maps to background.
    pub fn from_grid_threshold<S: Scalar>(grid: &Grid<S>, threshold: S) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::ShapeMismatch {
                expected: "1 channel".into(),
                got: format!("{} channels", grid.channels()),
            });
        }
        Ok(BinaryMask {
            width: grid.width(),
            height: grid.height(),
            data: grid
                .data()
                .iter()
                .map(|&v| (v >= threshold) as u8)
                .collect(),
        })
    }
}

fn image_error(path: &Path, err: ImageError) -> Error {
    match err {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::Decode {
            path: path.into(),
            message: other.to_string(),
        },
    }
}

/// Load an 8-bit grayscale or RGB PNG. Byte `v` maps to `v / 255`.
///
/// Any other colour layout (palette, 16-bit, alpha) is rejected rather than
/// silently converted.
pub fn load_image<S: Scalar>(path: &Path) -> Result<ImageGrid<S>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (width, height, channels, bytes) = match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (w as usize, h as usize, 1, buf.into_raw())
        }
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            (w as usize, h as usize, 3, buf.into_raw())
        }
        other => {
            return Err(Error::Decode {
                path: path.into(),
                message: format!(
                    "unsupported colour layout {:?}; expected 8-bit grayscale or RGB",
                    other.color()
                ),
            })
        }
    };
    let data = bytes
        .into_iter()
        .map(|v| S::cast(v as f64 / 255.0))
        .collect();
    ImageGrid::new(Grid::new(width, height, channels, data)?)
}

/// Write an image as an 8-bit PNG. Value `v` maps to `round(v * 255)`,
/// rounding halves up.
pub fn save_image<S: Scalar>(img: &ImageGrid<S>, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.as_f64() * 255.0).round() as u8)
        .collect();
    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => unreachable!("ImageGrid enforces 1 or 3 channels"),
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| image_error(path, e))
}

/// Load a mask from an 8-bit grayscale PNG. Bytes `>= 128` map to 1.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf
                .into_raw()
                .into_iter()
                .map(|v| (v >= 128) as u8)
                .collect();
            BinaryMask::new(w as usize, h as usize, data)
        }
        other => Err(Error::Decode {
            path: path.into(),
            message: format!(
                "masks must be 8-bit grayscale, got colour layout {:?}",
                other.color()
            ),
        }),
    }
}

/// Write a mask as an 8-bit grayscale PNG with foreground 255, background 0.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        mask.width() as u32,
        mask.height() as u32,
        ExtendedColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| image_error(path, e))
}

/// One dataset record: an image/mask pair plus its prompt tags.
///
/// Paths are stored as written (normally relative to the manifest's
/// directory). An empty `lesion_type` means "no lesion-type tag".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    #[serde(default)]
    pub lesion_type: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

/// Read a JSON-Lines manifest: one entry per line, blank lines ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), lineno + 1), e))?;
        if entry.image_path.is_empty() || entry.mask_path.is_empty() {
            return Err(Error::Decode {
                path: path.into(),
                message: format!(
                    "line {}: image_path and mask_path must be non-empty",
                    lineno + 1
                ),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Write a JSON-Lines manifest in entry order.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for entry in entries {
        let line =
            serde_json::to_string(entry).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Disjoint train/val/test partition of a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub seed: u64,
    pub ratio: (u32, u32, u32),
}

/// Shuffle `entries` with the seeded stream and partition by `ratio`.
///
/// Subset sizes are the floors `n * r_i / (r_0 + r_1 + r_2)`; leftover
/// entries go to train. The same `(entries, ratio, seed)` always produces the
/// same partition.
pub fn split_dataset(
    entries: &[ManifestEntry],
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<DatasetSplit> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("dataset entries".into()));
    }
    let (r0, r1, r2) = ratio;
    if r0 == 0 || r1 == 0 || r2 == 0 {
        return Err(Error::Config(format!(
            "split ratio components must be positive, got {r0}:{r1}:{r2}"
        )));
    }
    let mut shuffled = entries.to_vec();
    shuffled.shuffle(&mut rng_from_seed(seed));

    let n = shuffled.len() as u64;
    let total = (r0 + r1 + r2) as u64;
    let n_train = (n * r0 as u64 / total) as usize;
    let n_val = (n * r1 as u64 / total) as usize;
    let n_test = (n * r2 as u64 / total) as usize;

    let mut iter = shuffled.into_iter();
    let mut train: Vec<ManifestEntry> = iter.by_ref().take(n_train).collect();
    let val: Vec<ManifestEntry> = iter.by_ref().take(n_val).collect();
    let test: Vec<ManifestEntry> = iter.by_ref().take(n_test).collect();
    train.extend(iter);

    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;
    use proptest::prelude::*;

    fn entry(i: usize) -> ManifestEntry {
        ManifestEntry {
            image_path: format!("images/{i:05}.png"),
            mask_path: format!("masks/{i:05}.png"),
            lesion_type: if i % 3 == 0 {
                String::new()
            } else {
                "nevus".into()
            },
            attributes: if i % 2 == 0 {
                vec!["irregular_border".into()]
            } else {
                vec![]
            },
        }
    }

    #[test]
    fn grid_indexing_is_row_major_channel_fastest() {
        let g: Grid<f64> =
            Grid::from_fn(3, 2, 2, |r, c, ch| (r * 100 + c * 10 + ch) as f64).unwrap();
        assert_eq!(g.shape(), (2, 3, 2));
        assert_eq!(g.get(0, 0, 0), 0.0);
        assert_eq!(g.get(0, 0, 1), 1.0);
        assert_eq!(g.get(0, 1, 0), 10.0);
        assert_eq!(g.get(1, 2, 1), 121.0);
        assert_eq!(g.data()[g.idx(1, 2, 1)], 121.0);
    }

    #[test]
    fn grid_rejects_zero_dims_and_bad_lengths() {
        assert!(Grid::<f64>::new(0, 4, 1, vec![]).is_err());
        assert!(Grid::<f64>::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn clamp_unit_handles_non_finite_values() {
        let g = Grid::<f64>::new(
            5,
            1,
            1,
            vec![-0.5, 1.5, f64::NAN, f64::INFINITY, f64::NEG_INFINITY],
        )
        .unwrap();
        let c = g.clamp_unit();
        assert_eq!(c.data(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn image_grid_rejects_out_of_range_and_odd_channel_counts() {
        let g = Grid::<f64>::new(2, 1, 1, vec![0.0, 1.1]).unwrap();
        assert!(ImageGrid::new(g).is_err());
        let g = Grid::<f64>::zeros(2, 2, 2).unwrap();
        assert!(ImageGrid::new(g).is_err());
        let g = Grid::<f64>::zeros(2, 2, 3).unwrap();
        assert!(ImageGrid::new(g).is_ok());
    }

    #[test]
    fn mask_area_and_threshold() {
        let g = Grid::<f64>::new(4, 1, 1, vec![0.2, 0.5, 0.7, f64::NAN]).unwrap();
        let m = BinaryMask::from_grid_threshold(&g, 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1, 1, 0]);
        assert_eq!(m.area(), 2);
        let back: Grid<f64> = m.to_grid();
        assert_eq!(back.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
    }

    #[test]
    fn byte_to_unit_interval_round_trip_is_exact_for_all_bytes() {
        for b in 0u8..=255 {
            let v = b as f64 / 255.0;
            assert_eq!((v * 255.0).round() as u8, b);
        }
    }

    #[test]
    fn png_image_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let g =
            Grid::<f64>::from_fn(16, 11, 1, |r, c, _| ((r * 16 + c) % 256) as f64 / 255.0).unwrap();
        let img = ImageGrid::new(g).unwrap();
        save_image(&img, &path).unwrap();
        let loaded: ImageGrid<f64> = load_image(&path).unwrap();
        assert_eq!(loaded, img);
    }

    #[test]
    fn png_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let g = Grid::<f64>::from_fn(5, 4, 3, |r, c, ch| {
            ((r * 37 + c * 11 + ch * 5) % 256) as f64 / 255.0
        })
        .unwrap();
        let img = ImageGrid::new(g).unwrap();
        save_image(&img, &path).unwrap();
        let loaded: ImageGrid<f64> = load_image(&path).unwrap();
        assert_eq!(loaded, img);
    }

    #[test]
    fn png_save_quantizes_with_round_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // 0.5 * 255 = 127.5, which must round to 128.
        let g = Grid::<f64>::new(1, 1, 1, vec![0.5]).unwrap();
        save_image(&ImageGrid::new(g).unwrap(), &path).unwrap();
        let loaded: ImageGrid<f64> = load_image(&path).unwrap();
        assert_eq!(loaded.data()[0], 128.0 / 255.0);
    }

    #[test]
    fn mask_round_trip_and_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let m = BinaryMask::from_fn(6, 3, |r, c| (r + c) % 2 == 0);
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);

        // Gray values straddling 128 decode to 0 and 1 respectively.
        let gray = path.with_file_name("gray.png");
        image::save_buffer_with_format(
            &gray,
            &[127u8, 128u8],
            2,
            1,
            ExtendedColorType::L8,
            ImageFormat::Png,
        )
        .unwrap();
        assert_eq!(load_mask(&gray).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn loading_missing_file_is_an_io_error() {
        let err = load_image::<f64>(Path::new("/nonexistent/missing.png")).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Runtime);
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
    }

    #[test]
    fn loading_rgba_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        image::save_buffer_with_format(
            &path,
            &[0u8; 16],
            2,
            2,
            ExtendedColorType::Rgba8,
            ImageFormat::Png,
        )
        .unwrap();
        let err = load_image::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{err:?}");
        let err = load_mask(&path).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{err:?}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let entries: Vec<ManifestEntry> = (0..7).map(entry).collect();
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn manifest_defaults_missing_tag_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            "{\"image_path\":\"a.png\",\"mask_path\":\"b.png\"}\n\n",
        )
        .unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].lesion_type, "");
        assert!(entries[0].attributes.is_empty());
    }

    #[test]
    fn manifest_rejects_malformed_lines_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            "{\"image_path\":\"a.png\",\"mask_path\":\"b.png\"}\nnot json\n",
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn split_1000_at_7_1_2_gives_700_100_200() {
        let entries: Vec<ManifestEntry> = (0..1000).map(entry).collect();
        let split = split_dataset(&entries, (7, 1, 2), 11).unwrap();
        assert_eq!(split.train.len(), 700);
        assert_eq!(split.val.len(), 100);
        assert_eq!(split.test.len(), 200);
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let entries: Vec<ManifestEntry> = (0..1003).map(entry).collect();
        let split = split_dataset(&entries, (7, 1, 2), 11).unwrap();
        // floors: 702/100/200, remainder 1 -> train.
        assert_eq!(split.train.len(), 703);
        assert_eq!(split.val.len(), 100);
        assert_eq!(split.test.len(), 200);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let entries: Vec<ManifestEntry> = (0..120).map(entry).collect();
        let a = split_dataset(&entries, (7, 1, 2), 5).unwrap();
        let b = split_dataset(&entries, (7, 1, 2), 5).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&entries, (7, 1, 2), 6).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_rejects_empty_input_and_zero_ratio() {
        assert_eq!(
            split_dataset(&[], (7, 1, 2), 0).unwrap_err().kind(),
            ErrorKind::Validation
        );
        let entries: Vec<ManifestEntry> = (0..10).map(entry).collect();
        assert_eq!(
            split_dataset(&entries, (7, 0, 2), 0).unwrap_err().kind(),
            ErrorKind::Validation
        );
    }

    proptest! {
        #[test]
        fn split_is_a_partition(
            n in 1usize..300,
            r0 in 1u32..9,
            r1 in 1u32..9,
            r2 in 1u32..9,
            seed in any::<u64>(),
        ) {
            let entries: Vec<ManifestEntry> = (0..n).map(entry).collect();
            let split = split_dataset(&entries, (r0, r1, r2), seed).unwrap();

            let total = (r0 + r1 + r2) as u64;
            let nv = (n as u64 * r1 as u64 / total) as usize;
            let nt = (n as u64 * r2 as u64 / total) as usize;
            prop_assert_eq!(split.val.len(), nv);
            prop_assert_eq!(split.test.len(), nt);
            prop_assert_eq!(split.train.len(), n - nv - nt);

            // Same multiset of entries, no duplicates across subsets.
            let mut seen: Vec<&str> = split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .map(|e| e.image_path.as_str())
                .collect();
            seen.sort_unstable();
            let mut orig: Vec<&str> = entries.iter().map(|e| e.image_path.as_str()).collect();
            orig.sort_unstable();
            prop_assert_eq!(seen, orig);
        }
    }
}
