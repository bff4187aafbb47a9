//! Image decoding, normalization, patching and synthetic micrographs.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use mvaema_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::error::{CoreError, Result};

pub const IMAGE_SIZE: usize = 224;
pub const PATCH_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const GRID: usize = IMAGE_SIZE / PATCH_SIZE;
pub const NUM_PATCHES: usize = GRID * GRID;
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE * CHANNELS;

/// Decoded 8-bit RGB pixels, row-major and channel-last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 224×224×3 values in [-1, 1], row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        let want = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
        if data.len() != want {
            return Err(CoreError::contract(
                "image",
                format!("expected {want} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(CoreError::contract("image", "values must lie in [-1, 1]"));
        }
        Ok(ImageTensor { data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * IMAGE_SIZE + x) * CHANNELS + c]
    }
}

/// Maps a raw intensity in [0, 255] to [-1, 1].
pub fn normalize_value(x: f32) -> f32 {
    (x / 255.0 - 0.5) / 0.5
}

/// Inverse of [`normalize_value`].
pub fn denormalize_value(v: f32) -> f32 {
    (v * 0.5 + 0.5) * 255.0
}

fn format_err(e: impl ToString) -> CoreError {
    CoreError::Format(e.to_string())
}

fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(format_err)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(CoreError::Channel(format!("{depth:?}-bit samples, expected 8-bit")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CoreError::Format("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(format_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let pixels = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(CoreError::Channel(format!("{other:?} image, expected RGB or grayscale"))),
    };
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Whitespace-separated header fields of a netpbm file, skipping comments.
/// Returns the fields and the offset just past the single whitespace byte
/// that ends the header.
fn pnm_header(bytes: &[u8], fields: usize) -> Result<(Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(fields);
    let mut i = 2;
    while out.len() < fields {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(CoreError::Format("truncated netpbm header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..i]).map_err(format_err)?;
        out.push(text.parse().map_err(format_err)?);
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(CoreError::Format("malformed netpbm header".into()));
    }
    Ok((out, i + 1))
}

fn decode_pnm(bytes: &[u8]) -> Result<RgbImage> {
    let kind = bytes[1];
    let (hdr, start) = pnm_header(bytes, 3)?;
    let (w, h, maxval) = (hdr[0], hdr[1], hdr[2]);
    if w == 0 || h == 0 {
        return Err(CoreError::Format("zero-sized image".into()));
    }
    if maxval != 255 {
        return Err(CoreError::Channel(format!("maxval {maxval}, expected 8-bit (255)")));
    }
    let per_pixel = if kind == b'6' || kind == b'3' { 3 } else { 1 };
    let n = w * h * per_pixel;
    let samples: Vec<u8> = if kind == b'5' || kind == b'6' {
        let body = bytes
            .get(start..start + n)
            .ok_or_else(|| CoreError::Format("truncated pixel data".into()))?;
        body.to_vec()
    } else {
        let text = std::str::from_utf8(&bytes[start..]).map_err(format_err)?;
        let vals: Vec<u8> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u8>().map_err(format_err))
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(CoreError::Format("truncated pixel data".into()));
        }
        vals
    };
    let pixels = if per_pixel == 3 {
        samples
    } else {
        samples.iter().flat_map(|&g| [g, g, g]).collect()
    };
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Decodes PNG or binary/ASCII PPM/PGM bytes to 8-bit RGB; grayscale input
/// is replicated across the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.len() > 2 && bytes[0] == b'P' && matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        decode_pnm(bytes)
    } else {
        Err(CoreError::Format("neither PNG nor PPM/PGM".into()))
    }
}

/// Bilinear resampling with half-pixel centres; returns raw intensities.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0f32; out_w * out_h * CHANNELS];
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let px = |x: usize, y: usize, c: usize| img.pixels[(y * w + x) * CHANNELS + c] as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f32;
            for c in 0..CHANNELS {
                let top = px(x0, y0, c) * (1.0 - dx) + px(x1, y0, c) * dx;
                let bot = px(x0, y1, c) * (1.0 - dx) + px(x1, y1, c) * dx;
                out[(oy * out_w + ox) * CHANNELS + c] = top * (1.0 - dy) + bot * dy;
            }
        }
    }
    out
}

/// Decodes, resizes to 224×224 and maps intensities to [-1, 1].
pub fn load_normalize(bytes: &[u8]) -> Result<ImageTensor> {
    let img = decode_image(bytes)?;
    let raw = if img.width == IMAGE_SIZE && img.height == IMAGE_SIZE {
        img.pixels.iter().map(|&p| p as f32).collect()
    } else {
        resize_bilinear(&img, IMAGE_SIZE, IMAGE_SIZE)
    };
    let data = raw.into_iter().map(|x| normalize_value(x).clamp(-1.0, 1.0)).collect();
    ImageTensor::new(data)
}

pub fn load_image_file(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    load_normalize(&bytes)
}

/// The image cut into 32×32 patches, row-major over the 7×7 grid, each
/// flattened row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    patches: Vec<f32>,
    positions: Vec<usize>,
}

impl PatchSequence {
    /// Wraps a full `[49 x 3072]` buffer in grid order.
    pub fn from_data(patches: Vec<f32>) -> Result<Self> {
        if patches.len() != NUM_PATCHES * PATCH_DIM {
            return Err(CoreError::contract(
                "patch_sequence",
                format!("expected {} values, got {}", NUM_PATCHES * PATCH_DIM, patches.len()),
            ));
        }
        Ok(PatchSequence {
            patches,
            positions: (0..NUM_PATCHES).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * PATCH_DIM..(i + 1) * PATCH_DIM]
    }

    pub fn data(&self) -> &[f32] {
        &self.patches
    }

    /// `[49, 3072]` tensor of patch vectors.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.len(), PATCH_DIM], self.patches.clone()).expect("patch layout")
    }

    /// Swaps two patches (used to probe position sensitivity).
    pub fn swap(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for j in 0..PATCH_DIM {
            self.patches.swap(a * PATCH_DIM + j, b * PATCH_DIM + j);
        }
    }
}

pub fn patchify(img: &ImageTensor) -> Result<PatchSequence> {
    if img.data.len() != IMAGE_SIZE * IMAGE_SIZE * CHANNELS {
        return Err(CoreError::contract("patchify", "image must be 224x224x3"));
    }
    let mut patches = Vec::with_capacity(NUM_PATCHES * PATCH_DIM);
    let row = PATCH_SIZE * CHANNELS;
    for gy in 0..GRID {
        for gx in 0..GRID {
            for py in 0..PATCH_SIZE {
                let start = ((gy * PATCH_SIZE + py) * IMAGE_SIZE + gx * PATCH_SIZE) * CHANNELS;
                patches.extend_from_slice(&img.data[start..start + row]);
            }
        }
    }
    Ok(PatchSequence {
        patches,
        positions: (0..NUM_PATCHES).collect(),
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<ImageTensor> {
    if seq.len() != NUM_PATCHES || seq.patches.len() != NUM_PATCHES * PATCH_DIM {
        return Err(CoreError::contract("unpatchify", "expected 49 patches of 3072 values"));
    }
    let mut data = vec![0.0; IMAGE_SIZE * IMAGE_SIZE * CHANNELS];
    let row = PATCH_SIZE * CHANNELS;
    for (i, &pos) in seq.positions.iter().enumerate() {
        let (gy, gx) = (pos / GRID, pos % GRID);
        for py in 0..PATCH_SIZE {
            let dst = ((gy * PATCH_SIZE + py) * IMAGE_SIZE + gx * PATCH_SIZE) * CHANNELS;
            let src = i * PATCH_DIM + py * row;
            data[dst..dst + row].copy_from_slice(&seq.patches[src..src + row]);
        }
    }
    Ok(ImageTensor { data })
}

/// Encodes 8-bit RGB pixels as PNG.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(format_err)?;
        writer.write_image_data(&img.pixels).map_err(format_err)?;
    }
    Ok(out)
}

/// Encodes 8-bit RGB pixels as binary PPM.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Target mean intensity of a synthetic category; bands are 14 levels wide
/// and kept away from the extremes so texture is not clipped.
pub fn intensity_band(category: Category) -> (f64, f64) {
    let centre = 60.0 + 15.0 * category.index() as f64;
    (centre - 7.0, centre + 7.0)
}

const CONTRAST: f64 = 60.0;

fn texture(category: Category, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let mut t = vec![0.0; n * n];
    let set = |t: &mut Vec<f64>, x: i64, y: i64, v: f64| {
        if (0..n as i64).contains(&x) && (0..n as i64).contains(&y) {
            let p = &mut t[y as usize * n + x as usize];
            *p = p.max(v);
        }
    };
    match category {
        Category::Particles => {
            for _ in 0..rng.random_range(20..32) {
                let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                let r: f64 = rng.random_range(6.0..14.0);
                let ri = r.ceil() as i64;
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        let d = ((dx * dx + dy * dy) as f64).sqrt();
                        if d <= r {
                            set(&mut t, cx as i64 + dx, cy as i64 + dy, 1.0 - 0.3 * d / r);
                        }
                    }
                }
            }
        }
        Category::Fibres => {
            let base = rng.random_range(0.0..PI);
            for _ in 0..rng.random_range(25..35) {
                let a = base + rng.random_range(-0.25..0.25);
                let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                let len = rng.random_range(60.0..160.0);
                let mut s = -len / 2.0;
                while s < len / 2.0 {
                    let (x, y) = (cx + s * a.cos(), cy + s * a.sin());
                    for w in -1..=1 {
                        let (ox, oy) = (-a.sin() * w as f64, a.cos() * w as f64);
                        set(&mut t, (x + ox) as i64, (y + oy) as i64, 1.0);
                    }
                    s += 0.5;
                }
            }
        }
        Category::PatternedSurface => {
            let period = rng.random_range(14..20);
            let (px, py) = (rng.random_range(0..period), rng.random_range(0..period));
            for y in 0..n {
                for x in 0..n {
                    if (x + px) % period < 3 || (y + py) % period < 3 {
                        t[y * n + x] = 1.0;
                    }
                }
            }
        }
        Category::PorousSponge => {
            let g = 16;
            let coarse: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.random_range(0.0..1.0)).collect();
            let cell = n as f64 / g as f64;
            for y in 0..n {
                for x in 0..n {
                    let (fx, fy) = (x as f64 / cell, y as f64 / cell);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (dx, dy) = (fx - x0 as f64, fy - y0 as f64);
                    let c = |i: usize, j: usize| coarse[j * (g + 1) + i];
                    let v = c(x0, y0) * (1.0 - dx) * (1.0 - dy)
                        + c(x0 + 1, y0) * dx * (1.0 - dy)
                        + c(x0, y0 + 1) * (1.0 - dx) * dy
                        + c(x0 + 1, y0 + 1) * dx * dy;
                    t[y * n + x] = if v > 0.5 { 1.0 } else { 0.0 };
                }
            }
        }
        Category::Films => {
            let a = rng.random_range(0.0..2.0 * PI);
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 * a.cos() + y as f64 * a.sin()) / n as f64;
                    t[y * n + x] = 0.5 + 0.35 * u;
                }
            }
        }
        Category::Nanowires => {
            for _ in 0..rng.random_range(14..22) {
                let x0 = rng.random_range(0.0..n as f64);
                let slope = rng.random_range(-0.12..0.12);
                for y in 0..n {
                    let x = x0 + slope * (y as f64 - n as f64 / 2.0);
                    set(&mut t, x as i64, y as i64, 1.0);
                    set(&mut t, x as i64 + 1, y as i64, 0.8);
                }
            }
        }
        Category::Tips => {
            for _ in 0..rng.random_range(3..6) {
                let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                let r = rng.random_range(30.0..55.0);
                for y in 0..n {
                    for x in 0..n {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d < r {
                            set(&mut t, x as i64, y as i64, 1.0 - d / r);
                        }
                    }
                }
            }
        }
        Category::Mems => {
            for _ in 0..rng.random_range(3..6) {
                let (x0, y0) = (rng.random_range(0..n - 40), rng.random_range(0..n - 40));
                let (w, h) = (rng.random_range(30..90), rng.random_range(30..90));
                for y in y0..(y0 + h).min(n) {
                    for x in x0..(x0 + w).min(n) {
                        let edge = x < x0 + 3 || y < y0 + 3 || x + 3 >= x0 + w || y + 3 >= y0 + h;
                        set(&mut t, x as i64, y as i64, if edge { 1.0 } else { 0.55 });
                    }
                }
            }
        }
        Category::Powder => {
            for by in (0..n).step_by(2) {
                for bx in (0..n).step_by(2) {
                    let v = if rng.random_bool(0.35) { 1.0 } else { 0.0 };
                    for y in by..by + 2 {
                        for x in bx..bx + 2 {
                            t[y * n + x] = v;
                        }
                    }
                }
            }
        }
        Category::Biological => {
            for _ in 0..rng.random_range(6..12) {
                let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                let (ra, rb): (f64, f64) = (rng.random_range(12.0..28.0), rng.random_range(7.0..14.0));
                let th = rng.random_range(0.0..PI);
                let ext = ra.ceil() as i64;
                for dy in -ext..=ext {
                    for dx in -ext..=ext {
                        let (u, v) = (
                            dx as f64 * th.cos() + dy as f64 * th.sin(),
                            -(dx as f64) * th.sin() + dy as f64 * th.cos(),
                        );
                        let q = (u / ra).powi(2) + (v / rb).powi(2);
                        if q <= 1.0 {
                            let val = if q > 0.7 { 1.0 } else { 0.45 };
                            set(&mut t, cx as i64 + dx, cy as i64 + dy, val);
                        }
                    }
                }
            }
        }
    }
    t
}

/// Procedural grayscale micrograph for `category`, replicated to RGB and
/// encoded as PNG. The same `(category, seed)` always yields the same bytes.
pub fn synth_pixels(category: Category, seed: u64) -> RgbImage {
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(category.index() as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let t = texture(category, &mut rng);
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let (lo, hi) = intensity_band(category);
    let centre = (lo + hi) / 2.0;
    let mut pixels = Vec::with_capacity(t.len() * CHANNELS);
    for &v in &t {
        let noise: f64 = rng.random_range(-4.0..4.0);
        let g = (centre + CONTRAST * (v - mean) + noise).round().clamp(0.0, 255.0) as u8;
        pixels.extend_from_slice(&[g, g, g]);
    }
    RgbImage {
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        pixels,
    }
}

pub fn synth_micrograph(category: Category, seed: u64) -> Result<Vec<u8>> {
    encode_png(&synth_pixels(category, seed))
}

/// Like [`synth_micrograph`] but takes the category by name.
pub fn synth_micrograph_named(category: &str, seed: u64) -> Result<Vec<u8>> {
    synth_micrograph(category.parse()?, seed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub category: Category,
    pub seed: u64,
    pub path: PathBuf,
}

/// Writes `per_category` images of every category under `dir` plus a
/// `manifest.json` listing them. Paths in the manifest are relative to `dir`.
pub fn write_fixture_set(dir: &Path, per_category: usize, seed: u64) -> Result<Vec<FixtureEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut entries = Vec::with_capacity(per_category * Category::ALL.len());
    for cat in Category::ALL {
        for i in 0..per_category {
            let s = seed.wrapping_add(i as u64);
            let rel = PathBuf::from(format!("{}_{:04}.png", cat.name(), i));
            let path = dir.join(&rel);
            std::fs::write(&path, synth_micrograph(cat, s)?).map_err(|e| CoreError::io(&path, e))?;
            entries.push(FixtureEntry {
                category: cat,
                seed: s,
                path: rel,
            });
        }
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&manifest, text).map_err(|e| CoreError::io(&manifest, e))?;
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<FixtureEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: u8, w: usize, h: usize) -> RgbImage {
        RgbImage {
            width: w,
            height: h,
            pixels: vec![v; w * h * 3],
        }
    }

    #[test]
    fn normalization_endpoints() {
        for (v, want) in [(255u8, 1.0f32), (0, -1.0), (128, (128.0 / 255.0 - 0.5) / 0.5)] {
            let img = load_normalize(&encode_png(&solid(v, 224, 224)).unwrap()).unwrap();
            assert!(img.data().iter().all(|&x| (x - want).abs() < 1e-6), "{v}");
        }
        assert!((normalize_value(128.0) - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn resize_constant_image() {
        let img = load_normalize(&encode_ppm(&solid(255, 50, 80))).unwrap();
        assert!(img.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn bad_bytes_and_channels() {
        assert!(matches!(load_normalize(b"hello"), Err(CoreError::Format(_))));
        assert!(matches!(load_normalize(b"P6\n2 2\n65535\n"), Err(CoreError::Channel(_))));
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0; 16]).unwrap();
        }
        assert!(matches!(load_normalize(&out), Err(CoreError::Channel(_))));
    }

    #[test]
    fn grayscale_is_replicated() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[10, 200]).unwrap();
        }
        assert_eq!(decode_image(&out).unwrap().pixels, vec![10, 10, 10, 200, 200, 200]);
        let pgm = b"P2\n# c\n2 1\n255\n10 200\n";
        assert_eq!(decode_image(pgm).unwrap().pixels, vec![10, 10, 10, 200, 200, 200]);
    }

    #[test]
    fn patch_partition() {
        let img = load_normalize(&synth_micrograph(Category::Fibres, 3).unwrap()).unwrap();
        let p = patchify(&img).unwrap();
        assert_eq!(p.len(), 49);
        assert_eq!(p.data().len(), 49 * 3072);
        assert_eq!(unpatchify(&p).unwrap(), img);
        // top-left pixel of patch 8 is pixel (32, 32)
        assert_eq!(p.patch(8)[0], img.at(32, 32, 0));
        let flat = load_normalize(&encode_png(&solid(90, 224, 224)).unwrap()).unwrap();
        let q = patchify(&flat).unwrap();
        assert!((1..49).all(|i| q.patch(i) == q.patch(0)));
    }

    #[test]
    fn synthetic_determinism_and_separation() {
        let a = synth_micrograph(Category::Particles, 7).unwrap();
        assert_eq!(a, synth_micrograph(Category::Particles, 7).unwrap());
        assert_ne!(a, synth_micrograph(Category::Fibres, 7).unwrap());
        assert_ne!(a, synth_micrograph(Category::Particles, 8).unwrap());
        assert!(synth_micrograph_named("graphene", 1).is_err());
    }

    #[test]
    fn mean_intensity_in_band() {
        for cat in Category::ALL {
            for seed in 0..4 {
                let img = synth_pixels(cat, seed);
                let mean = img.pixels.iter().map(|&p| p as f64).sum::<f64>() / img.pixels.len() as f64;
                let (lo, hi) = intensity_band(cat);
                assert!(mean >= lo && mean < hi, "{cat} seed {seed}: {mean}");
            }
        }
    }
}
