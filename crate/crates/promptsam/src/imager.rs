//! Binary-to-image conversion.
//!
//! Multi-DEX section streams are merged per section (all headers, then all
//! ids, then all data), plotted row-major onto a fixed-width grid, colorized
//! so each section owns one RGB channel, and resized square with a Lanczos
//! a=3 filter. PE/arbitrary binaries render the same way in grayscale.
//!
//! All float work runs in f64 with round-half-to-even quantization so a given
//! input and config always produce bit-identical pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binfmt::{self, BinfmtError, DexModel, SectionKind, Span};

#[derive(Debug, Error)]
pub enum ImagerError {
    #[error("empty input")]
    EmptyInput,
    #[error("empty image")]
    EmptyImage,
    #[error(transparent)]
    Binfmt(#[from] BinfmtError),
    #[error("png encode: {0}")]
    Png(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagerError>;

/// Conversion settings. Widths outside {256, 512, 1024} are accepted but
/// flagged by [`ConvertConfig::is_standard_width`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertConfig {
    pub width: usize,
    pub colorize: bool,
    pub resample: Resample,
    pub pad_value: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resample {
    Lanczos3,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            width: 256,
            colorize: true,
            resample: Resample::Lanczos3,
            pad_value: 0,
        }
    }
}

impl ConvertConfig {
    pub fn is_standard_width(&self) -> bool {
        matches!(self.width, 256 | 512 | 1024)
    }
}

/// Multi-DEX sections concatenated per section, Fig-4 style:
/// `H1..Hn | I1..In | D1..Dn`.
#[derive(Debug, Clone)]
pub struct MergedStream {
    pub bytes: Vec<u8>,
    pub header_span: Span,
    pub ids_span: Span,
    pub data_span: Span,
    pub source_count: usize,
}

/// Interleaved row-major 8-bit image grid, 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Grid {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Pre-resize pixel range of one section, as (first_pixel, last_pixel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBounds {
    pub first_pixel: usize,
    pub last_pixel: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionPixelBounds {
    pub header: Option<PixelBounds>,
    pub ids: Option<PixelBounds>,
    pub data: Option<PixelBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub source_digest: String,
    pub config: ConvertConfig,
    pub section_pixel_bounds: SectionPixelBounds,
}

/// Final conversion product: pixels plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MalImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub meta: ImageMeta,
}

/// Merge parsed DEX models section-by-section.
pub fn merge_dex(models: &[DexModel]) -> Result<MergedStream> {
    if models.is_empty() {
        return Err(ImagerError::EmptyInput);
    }
    let mut bytes = Vec::new();
    let mut spans = [(0usize, 0usize); 3];
    for (si, kind) in [SectionKind::Header, SectionKind::Ids, SectionKind::Data]
        .into_iter()
        .enumerate()
    {
        let start = bytes.len();
        for model in models {
            bytes.extend_from_slice(binfmt::section_bytes(model, kind));
        }
        spans[si] = (start, bytes.len() - start);
    }
    Ok(MergedStream {
        bytes,
        header_span: spans[0],
        ids_span: spans[1],
        data_span: spans[2],
        source_count: models.len(),
    })
}

/// Row-major plot of bytes at a fixed width; the final row is zero-padded.
pub fn bytes_to_grid(bytes: &[u8], width: usize) -> Grid {
    assert!(width >= 1, "grid width must be positive");
    let height = bytes.len().div_ceil(width);
    let mut grid = Grid::new(width, height, 1);
    grid.data[..bytes.len()].copy_from_slice(bytes);
    grid
}

/// Channel-exclusive section coloring: header bytes go to R, ids to G,
/// data to B, with the byte value as intensity. Padding stays (0,0,0).
pub fn colorize_sections(stream: &MergedStream, width: usize) -> Grid {
    assert!(width >= 1, "grid width must be positive");
    let n = stream.bytes.len();
    let height = n.div_ceil(width);
    let mut grid = Grid::new(width, height, 3);
    for (k, &v) in stream.bytes.iter().enumerate() {
        let channel = if in_span(k, stream.header_span) {
            0
        } else if in_span(k, stream.ids_span) {
            1
        } else {
            2
        };
        grid.data[k * 3 + channel] = v;
    }
    grid
}

fn in_span(k: usize, (off, len): Span) -> bool {
    k >= off && k < off + len
}

/// Separable Lanczos (a = 3) resize with per-axis weight normalization,
/// edge-clamp addressing, and round-half-to-even output quantization.
pub fn resize_lanczos(grid: &Grid, out_w: usize, out_h: usize) -> Result<Grid> {
    if grid.width == 0 || grid.height == 0 || grid.data.is_empty() {
        return Err(ImagerError::EmptyImage);
    }
    let c = grid.channels;
    let hw = lanczos_weights(grid.width, out_w);
    let vw = lanczos_weights(grid.height, out_h);

    // horizontal pass
    let mut mid = vec![0f64; out_w * grid.height * c];
    for y in 0..grid.height {
        for (ox, taps) in hw.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0f64;
                for &(ix, w) in taps {
                    acc += w * grid.data[(y * grid.width + ix) * c + ch] as f64;
                }
                mid[(y * out_w + ox) * c + ch] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Grid::new(out_w, out_h, c);
    for (oy, taps) in vw.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut acc = 0f64;
                for &(iy, w) in taps {
                    acc += w * mid[(iy * out_w + ox) * c + ch];
                }
                out.data[(oy * out_w + ox) * c + ch] =
                    acc.round_ties_even().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Normalized Lanczos-3 tap sets, one per output coordinate, with source
/// indices clamped to the valid range.
fn lanczos_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    const A: f64 = 3.0;
    let scale = in_len as f64 / out_len as f64;
    let support = if scale > 1.0 { A * scale } else { A };
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).ceil() as i64;
            let hi = (center + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for j in lo..=hi {
                // When downscaling, the kernel is stretched by the scale factor.
                let x = (j as f64 - center) / if scale > 1.0 { scale } else { 1.0 };
                let w = lanczos3(x);
                if w != 0.0 {
                    let idx = j.clamp(0, in_len as i64 - 1) as usize;
                    taps.push((idx, w));
                    sum += w;
                }
            }
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

fn lanczos3(x: f64) -> f64 {
    const A: f64 = 3.0;
    let ax = x.abs();
    if ax >= A {
        return 0.0;
    }
    // Exact zeros at nonzero integers so a same-size resize collapses to a
    // unit tap and reproduces the input bit-for-bit.
    if (x - x.round()).abs() < 1e-9 {
        return if x.round() == 0.0 { 1.0 } else { 0.0 };
    }
    let pix = std::f64::consts::PI * x;
    A * (pix.sin() * (pix / A).sin()) / (pix * pix)
}

/// Full conversion pipeline for an APK: extract, parse, merge, plot,
/// colorize, resize square.
pub fn convert_apk(apk_bytes: &[u8], config: &ConvertConfig) -> Result<MalImage> {
    let entries = binfmt::extract_dex_entries(apk_bytes)?;
    let models = entries
        .dex_bytes()
        .into_iter()
        .map(binfmt::parse_dex)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stream = merge_dex(&models)?;
    let grid = if config.colorize {
        colorize_sections(&stream, config.width)
    } else {
        bytes_to_grid(&stream.bytes, config.width)
    };
    let resized = resize_lanczos(&grid, config.width, config.width)?;
    Ok(MalImage {
        width: resized.width,
        height: resized.height,
        channels: resized.channels,
        pixels: resized.data,
        meta: ImageMeta {
            source_digest: sha256_hex(apk_bytes),
            config: *config,
            section_pixel_bounds: SectionPixelBounds {
                header: bounds(stream.header_span),
                ids: bounds(stream.ids_span),
                data: bounds(stream.data_span),
            },
        },
    })
}

/// Grayscale conversion for PE or arbitrary binaries.
pub fn convert_pe(pe_bytes: &[u8], config: &ConvertConfig) -> Result<MalImage> {
    if pe_bytes.is_empty() {
        return Err(ImagerError::EmptyInput);
    }
    let grid = bytes_to_grid(pe_bytes, config.width);
    let resized = resize_lanczos(&grid, config.width, config.width)?;
    Ok(MalImage {
        width: resized.width,
        height: resized.height,
        channels: 1,
        pixels: resized.data,
        meta: ImageMeta {
            source_digest: sha256_hex(pe_bytes),
            config: *config,
            section_pixel_bounds: SectionPixelBounds::default(),
        },
    })
}

fn bounds((off, len): Span) -> Option<PixelBounds> {
    (len > 0).then(|| PixelBounds {
        first_pixel: off,
        last_pixel: off + len - 1,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write the image as an 8-bit non-interlaced PNG.
pub fn write_png(img: &MalImage, path: &Path) -> Result<()> {
    match img.channels {
        1 => {
            let buf = image::GrayImage::from_raw(
                img.width as u32,
                img.height as u32,
                img.pixels.clone(),
            )
            .expect("pixel buffer length matches dimensions");
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = image::RgbImage::from_raw(
                img.width as u32,
                img.height as u32,
                img.pixels.clone(),
            )
            .expect("pixel buffer length matches dimensions");
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        c => panic!("unsupported channel count {c}"),
    }
    Ok(())
}

/// Write the JSON sidecar carrying the image provenance.
pub fn write_sidecar(img: &MalImage, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&img.meta).expect("meta serializes");
    std::fs::write(path, json)?;
    Ok(())
}
