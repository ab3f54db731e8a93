//! RGB images, patch sampling and minibatch iteration.
//!
//! A patch of size p is vectorized channel-major: all R values in row-major
//! order, then all G values, then all B values, giving D = 3p² entries.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image with values in [0, 1], stored row-major and interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::shape(width * height * CHANNELS, pixels.len()));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Image::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * CHANNELS + c] = v.clamp(0.0, 1.0);
    }

    /// Vectorizes the `size`×`size` patch whose top-left corner is `(x0, y0)`.
    pub fn patch_vector(&self, x0: usize, y0: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size * CHANNELS);
        for c in 0..CHANNELS {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    out.push(self.get(x, y, c));
                }
            }
        }
        out
    }

    /// Inverse of [`Image::patch_vector`]: a `size`×`size` image.
    pub fn from_patch_vector(v: &[f64], size: usize) -> Result<Self> {
        let plane = size * size;
        if v.len() != plane * CHANNELS {
            return Err(Error::shape(plane * CHANNELS, v.len()));
        }
        let mut pixels = vec![0.0; plane * CHANNELS];
        for c in 0..CHANNELS {
            for i in 0..plane {
                pixels[i * CHANNELS + c] = v[c * plane + i];
            }
        }
        Image::new(size, size, pixels)
    }

    /// Copies `src` into this image with its top-left corner at `(x0, y0)`.
    pub fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            for x in 0..src.width.min(self.width.saturating_sub(x0)) {
                for c in 0..CHANNELS {
                    self.set(x0 + x, y0 + y, c, src.get(x, y, c));
                }
            }
        }
    }

    /// Binary PPM (P6, maxval 255) bytes; values are rounded to 8 bits.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let magic = next_token(&mut reader)?;
        if magic != "P6" {
            return Err(Error::format("PPM", format!("unsupported magic {magic:?}")));
        }
        let width = parse_header_number(&mut reader, "width")?;
        let height = parse_header_number(&mut reader, "height")?;
        let maxval = parse_header_number(&mut reader, "maxval")?;
        if maxval != 255 {
            return Err(Error::format(
                "PPM",
                format!("maxval {maxval} (only 255 is supported)"),
            ));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(CHANNELS))
            .ok_or_else(|| Error::format("PPM", "image too large"))?;
        let mut raw = vec![0u8; n];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::format("PPM", "truncated pixel data"))?;
        Image::new(
            width,
            height,
            raw.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Image::from_ppm_bytes(&fs::read(path)?)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments. The
/// single whitespace byte after the token is consumed.
fn next_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Err(Error::format("PPM", "truncated header"));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut line = Vec::new();
                reader.read_until(b'\n', &mut line)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    String::from_utf8(token).map_err(|_| Error::format("PPM", "non-ASCII header"))
}

fn parse_header_number<R: BufRead>(reader: &mut R, what: &str) -> Result<usize> {
    let tok = next_token(reader)?;
    tok.parse()
        .map_err(|_| Error::format("PPM", format!("bad {what} {tok:?}")))
}

/// Placement of inference patches on a strided grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    /// Left edges of the patch columns.
    pub xs: Vec<usize>,
    /// Top edges of the patch rows.
    pub ys: Vec<usize>,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

fn axis_origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = extent - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if stride == 0 || patch_size == 0 {
            return Err(Error::invalid("patch size and stride must be at least 1"));
        }
        if width < patch_size || height < patch_size {
            return Err(Error::invalid(format!(
                "image {width}x{height} is smaller than the {patch_size}px patch"
            )));
        }
        Ok(PatchGrid {
            patch_size,
            stride,
            xs: axis_origins(width, patch_size, stride),
            ys: axis_origins(height, patch_size, stride),
        })
    }

    pub fn cols(&self) -> usize {
        self.xs.len()
    }

    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major patch index of grid cell `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.cols(), index % self.cols())
    }

    pub fn rect(&self, index: usize) -> Rect {
        let (r, c) = self.cell(index);
        Rect {
            x0: self.xs[c],
            y0: self.ys[r],
            x1: self.xs[c] + self.patch_size,
            y1: self.ys[r] + self.patch_size,
        }
    }
}

/// Patches on a strided grid, one column per patch in grid index order. The
/// last row and column are clamped to the image border, so with
/// `stride <= patch_size` the patches cover every pixel.
pub fn grid_patches(
    image: &Image,
    patch_size: usize,
    stride: usize,
) -> Result<(PatchGrid, DMatrix<f64>)> {
    let grid = PatchGrid::new(image.width, image.height, patch_size, stride)?;
    let dim = patch_size * patch_size * CHANNELS;
    let mut data = DMatrix::zeros(dim, grid.len());
    for i in 0..grid.len() {
        let r = grid.rect(i);
        data.column_mut(i)
            .copy_from_slice(&image.patch_vector(r.x0, r.y0, patch_size));
    }
    Ok((grid, data))
}

/// `n` patches drawn uniformly over (image, x, y), one column each.
pub fn sample_random_patches(
    images: &[Image],
    n: usize,
    patch_size: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to sample from"));
    }
    if n == 0 || patch_size == 0 {
        return Err(Error::invalid("patch count and size must be at least 1"));
    }
    if let Some(img) = images
        .iter()
        .find(|im| im.width < patch_size || im.height < patch_size)
    {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {patch_size}px patch",
            img.width, img.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = patch_size * patch_size * CHANNELS;
    let mut data = DMatrix::zeros(dim, n);
    for t in 0..n {
        let img = &images[rng.random_range(0..images.len())];
        let x = rng.random_range(0..=img.width - patch_size);
        let y = rng.random_range(0..=img.height - patch_size);
        data.column_mut(t)
            .copy_from_slice(&img.patch_vector(x, y, patch_size));
    }
    Ok(data)
}

/// Shuffled index blocks for one epoch; the last block may be short.
pub fn minibatches(
    n_items: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
