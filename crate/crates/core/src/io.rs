//! Bit-exact file formats: Middlebury `.flo` flows, binary PGM images,
//! PPM flow renders, raw feature maps, and the JSON weights document.
//!
//! In-memory flows are planar f64 (`[all dx; all dy]`); on disk `.flo` is
//! interleaved f32 per the public format, so the converters are explicit.
//! Readers validate headers before allocating and never read past the
//! declared payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, GrayImage};
use crate::subspace::FeatureMap;

/// `.flo` magic: the little-endian bytes of 202021.25f32, i.e. `PIEH`.
pub const FLO_MAGIC: [u8; 4] = [0x50, 0x49, 0x45, 0x48];
/// Feature-map container magic.
pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";

// ---------------------------------------------------------------------------
// .flo
// ---------------------------------------------------------------------------

/// Serializes a flow as `.flo` bytes: magic, width/height as i32 LE, then
/// row-major interleaved (dx, dy) f32 LE pairs.
pub fn write_flo(f: &FlowField) -> Result<Vec<u8>> {
    let (w, h) = (f.width(), f.height());
    if (w as i64) * (h as i64) > (1i64 << 31) / 8 {
        return Err(Error::DimensionOverflow {
            width: w as i64,
            height: h as i64,
        });
    }
    let hw = w * h;
    let mut out = Vec::with_capacity(12 + 8 * hw);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let data = f.data();
    for idx in 0..hw {
        out.extend_from_slice(&(data[idx] as f32).to_le_bytes());
        out.extend_from_slice(&(data[hw + idx] as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses `.flo` bytes. Trailing bytes beyond the declared payload are a
/// header error; short payloads are `TruncatedFile`.
pub fn read_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile {
            expected: 12,
            got: bytes.len(),
        });
    }
    if bytes[0..4] != FLO_MAGIC {
        let mut got = [0u8; 4];
        got.copy_from_slice(&bytes[0..4]);
        return Err(Error::BadMagic {
            expected: "PIEH",
            got,
        });
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("slice is 4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("slice is 4 bytes"));
    if w <= 0 || h <= 0 || (w as i64) * (h as i64) > (1i64 << 31) / 8 {
        return Err(Error::DimensionOverflow {
            width: w as i64,
            height: h as i64,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let hw = w * h;
    let expected = 12 + 8 * hw;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::BadHeader(format!(
            "{} trailing bytes after the declared payload",
            bytes.len() - expected
        )));
    }
    let mut data = vec![0.0f64; 2 * hw];
    for idx in 0..hw {
        let off = 12 + 8 * idx;
        let dx = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        let dy = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().expect("4 bytes"));
        if !dx.is_finite() || !dy.is_finite() {
            return Err(Error::NonFinite("flo payload"));
        }
        data[idx] = dx as f64;
        data[hw + idx] = dy as f64;
    }
    FlowField::new(w, h, data)
}

pub fn write_flo_path(path: &Path, f: &FlowField) -> Result<()> {
    let bytes = write_flo(f)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_flo_path(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_flo(&bytes)
}

// ---------------------------------------------------------------------------
// PGM (P5)
// ---------------------------------------------------------------------------

/// Serializes as binary PGM with maxval 255; values are clamped to [0, 1]
/// and rounded half away from zero.
pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
    );
    out
}

/// Parses binary PGM (P5) with maxval 255 or 65535 (16-bit samples are
/// big-endian per the format). ASCII (`P2`) and color (`P6`) variants are
/// `UnsupportedFormat`.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (magic, rest) = next_token(bytes).ok_or_else(|| Error::BadHeader("empty file".into()))?;
    match magic {
        b"P5" => {}
        b"P2" | b"P3" | b"P6" => {
            return Err(Error::UnsupportedFormat(format!(
                "{} (only binary P5 is supported)",
                String::from_utf8_lossy(magic)
            )))
        }
        other => {
            return Err(Error::BadHeader(format!(
                "unknown magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    }
    let (w_tok, rest) = next_token(rest).ok_or_else(|| Error::BadHeader("missing width".into()))?;
    let (h_tok, rest) =
        next_token(rest).ok_or_else(|| Error::BadHeader("missing height".into()))?;
    let (mv_tok, rest) =
        next_token(rest).ok_or_else(|| Error::BadHeader("missing maxval".into()))?;
    let parse = |tok: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::BadHeader(format!("bad {what}")))
    };
    let w = parse(w_tok, "width")?;
    let h = parse(h_tok, "height")?;
    let maxval = parse(mv_tok, "maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::BadHeader(format!("empty image {w}x{h}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::BadHeader(format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if rest.is_empty() {
        return Err(Error::TruncatedFile {
            expected: 1,
            got: 0,
        });
    }
    let raster = &rest[1..];
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let expected = w * h * bytes_per;
    if raster.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            got: raster.len(),
        });
    }
    let mut pixels = Vec::with_capacity(w * h);
    if bytes_per == 1 {
        pixels.extend(
            raster[..expected]
                .iter()
                .map(|&b| b as f64 / maxval as f64),
        );
    } else {
        for chunk in raster[..expected].chunks_exact(2) {
            let v = u16::from_be_bytes([chunk[0], chunk[1]]);
            pixels.push(v as f64 / maxval as f64);
        }
    }
    if pixels.iter().any(|&v| v > 1.0) {
        return Err(Error::BadHeader(
            "sample exceeds the declared maxval".into(),
        ));
    }
    GrayImage::new(w, h, pixels)
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token(mut bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    loop {
        while let Some((&b, rest)) = bytes.split_first() {
            if b.is_ascii_whitespace() {
                bytes = rest;
            } else {
                break;
            }
        }
        if bytes.first() == Some(&b'#') {
            let end = bytes.iter().position(|&b| b == b'\n')?;
            bytes = &bytes[end + 1..];
            continue;
        }
        break;
    }
    if bytes.is_empty() {
        return None;
    }
    let end = bytes
        .iter()
        .position(|b| b.is_ascii_whitespace())
        .unwrap_or(bytes.len());
    Some((&bytes[..end], &bytes[end..]))
}

pub fn write_pgm_path(path: &Path, img: &GrayImage) -> Result<()> {
    fs::File::create(path)?.write_all(&write_pgm(img))?;
    Ok(())
}

pub fn read_pgm_path(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_pgm(&bytes)
}

// ---------------------------------------------------------------------------
// Flow colorization (PPM P6)
// ---------------------------------------------------------------------------

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// The 55-entry color wheel used by the standard optical-flow rendering:
/// ramps red-yellow-green-cyan-blue-magenta-red.
fn color_wheel() -> Vec<[f64; 3]> {
    const RY: usize = 15;
    const YG: usize = 6;
    const GC: usize = 4;
    const CB: usize = 11;
    const BM: usize = 13;
    const MR: usize = 6;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    for i in 0..RY {
        wheel.push([1.0, i as f64 / RY as f64, 0.0]);
    }
    for i in 0..YG {
        wheel.push([1.0 - i as f64 / YG as f64, 1.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 1.0, i as f64 / GC as f64]);
    }
    for i in 0..CB {
        wheel.push([0.0, 1.0 - i as f64 / CB as f64, 1.0]);
    }
    for i in 0..BM {
        wheel.push([i as f64 / BM as f64, 0.0, 1.0]);
    }
    for i in 0..MR {
        wheel.push([1.0, 0.0, 1.0 - i as f64 / MR as f64]);
    }
    wheel
}

/// Renders a flow with the standard color-wheel coding: hue encodes the
/// flow angle, saturation the magnitude relative to `max_mag` (derived from
/// the field when absent). Zero flow renders white.
pub fn colorize_flow(f: &FlowField, max_mag: Option<f64>) -> Result<RgbImage> {
    let max_mag = match max_mag {
        Some(m) if m > 0.0 => m,
        Some(m) => {
            return Err(Error::InvalidConfig(format!(
                "max_mag must be positive, got {m}"
            )))
        }
        None => {
            let m = f.max_magnitude();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let (w, h) = (f.width(), f.height());
    let mut data = vec![0u8; w * h * 3];
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = f.at(i, j);
            let rad = (dx.hypot(dy) / max_mag).min(1.0);
            let angle = (-dy).atan2(-dx) / std::f64::consts::PI;
            let fk = (angle + 1.0) / 2.0 * (ncols as f64 - 1.0);
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = (k0 + 1) % ncols;
            let frac = fk - k0 as f64;
            for c in 0..3 {
                let col = (1.0 - frac) * wheel[k0][c] + frac * wheel[k1][c];
                let col = 1.0 - rad * (1.0 - col);
                data[(i * w + j) * 3 + c] = (col * 255.0 + 0.5).floor() as u8;
            }
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Serializes an RGB image as binary PPM (P6, maxval 255).
pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm_path(path: &Path, img: &RgbImage) -> Result<()> {
    fs::File::create(path)?.write_all(&write_ppm(img))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// FMAP raw feature maps
// ---------------------------------------------------------------------------

/// Serializes a feature map: magic `FMAP`, u32 LE width/height/channels,
/// then row-major channel-innermost f32 LE samples.
pub fn write_fmap(m: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(&FMAP_MAGIC);
    out.extend_from_slice(&(m.width() as u32).to_le_bytes());
    out.extend_from_slice(&(m.height() as u32).to_le_bytes());
    out.extend_from_slice(&(m.channels() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses FMAP bytes.
pub fn read_fmap(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile {
            expected: 16,
            got: bytes.len(),
        });
    }
    if bytes[0..4] != FMAP_MAGIC {
        let mut got = [0u8; 4];
        got.copy_from_slice(&bytes[0..4]);
        return Err(Error::BadMagic {
            expected: "FMAP",
            got,
        });
    }
    let rd = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let (w, h, c) = (rd(4) as usize, rd(8) as usize, rd(12) as usize);
    if w == 0 || h == 0 || c == 0 || (w as u64) * (h as u64) * (c as u64) > (1u64 << 31) / 4 {
        return Err(Error::DimensionOverflow {
            width: w as i64,
            height: h as i64,
        });
    }
    let n = w * h * c;
    let expected = 16 + 4 * n;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::BadHeader(format!(
            "{} trailing bytes after the declared payload",
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[16..expected].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinite("fmap payload"));
        }
        data.push(v as f64);
    }
    FeatureMap::new(w, h, c, data)
}

pub fn write_fmap_path(path: &Path, m: &FeatureMap) -> Result<()> {
    fs::File::create(path)?.write_all(&write_fmap(m))?;
    Ok(())
}

pub fn read_fmap_path(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_fmap(&bytes)
}

// ---------------------------------------------------------------------------
// Weights document
// ---------------------------------------------------------------------------

/// Serialized basis weights. JSON float rendering is shortest-roundtrip, so
/// values survive write/read losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDoc {
    pub width: usize,
    pub height: usize,
    /// Coordinate convention tag ([`crate::bases::CONVENTION`]).
    pub convention: String,
    pub alpha: [f64; 8],
    pub residual: f64,
}

impl WeightsDoc {
    pub fn new(width: usize, height: usize, alpha: [f64; 8], residual: f64) -> Self {
        Self {
            width,
            height,
            convention: crate::bases::CONVENTION.to_string(),
            alpha,
            residual,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weights doc serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::BadHeader(format!("weights doc: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn one_pixel_zero_flow_is_exactly_twenty_bytes() {
        let bytes = write_flo(&FlowField::zeros(1, 1)).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[0..4], &FLO_MAGIC);
        assert!(bytes[12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn flo_bytes_round_trip_exactly() {
        let mut rng = CounterRng::new(21);
        let data: Vec<f64> = (0..2 * 63 * 48)
            .map(|_| (rng.uniform(-10.0, 10.0) as f32) as f64)
            .collect();
        let flow = FlowField::new(63, 48, data).unwrap();
        let bytes = write_flo(&flow).unwrap();
        let back = read_flo(&bytes).unwrap();
        assert_eq!(write_flo(&back).unwrap(), bytes);
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let mut bytes = write_flo(&FlowField::zeros(2, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_flo(&bad), Err(Error::BadMagic { .. })));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_flo(&bytes),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn pgm_fixture_divides_by_maxval() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = read_pgm(bytes).unwrap();
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(0, 1), 1.0);
        assert!((img.get(1, 0) - 128.0 / 255.0).abs() < 1e-12);
        assert!((img.get(1, 1) - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip_is_bit_identical() {
        let img = GrayImage::from_fn(7, 5, |i, j| ((i * 37 + j * 11) % 256) as f64 / 255.0);
        let bytes = write_pgm(&img);
        let back = read_pgm(&bytes).unwrap();
        assert_eq!(write_pgm(&back), bytes);
    }

    #[test]
    fn pgm_rejects_color_and_ascii_variants() {
        assert!(matches!(
            read_pgm(b"P6\n2 2\n255\n000000000000"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_pgm(b"P2\n2 2\n255\n0 0 0 0"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn pgm_supports_comments_and_16bit() {
        let bytes = b"P5 # comment\n# another\n2 1 65535\n\x00\x00\xff\xff";
        let img = read_pgm(bytes).unwrap();
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(0, 1), 1.0);
    }

    #[test]
    fn zero_flow_renders_white() {
        let rgb = colorize_flow(&FlowField::zeros(4, 3), None).unwrap();
        assert!(rgb.data.iter().all(|&b| b == 255));
    }

    #[test]
    fn saturated_flow_renders_the_zero_angle_color_uniformly() {
        let f = FlowField::constant(5, 4, 2.0, 0.0);
        let rgb = colorize_flow(&f, Some(2.0)).unwrap();
        let first = &rgb.data[0..3];
        for px in rgb.data.chunks_exact(3) {
            assert_eq!(px, first);
        }
        // Full saturation somewhere on the wheel: not white.
        assert_ne!(first, &[255, 255, 255]);
    }

    #[test]
    fn fmap_round_trip_and_errors() {
        let m = FeatureMap::new(3, 2, 2, (0..12).map(|v| v as f64 / 4.0).collect()).unwrap();
        let bytes = write_fmap(&m);
        let back = read_fmap(&bytes).unwrap();
        assert_eq!(write_fmap(&back), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_fmap(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn weights_doc_round_trips_all_digits() {
        let doc = WeightsDoc::new(
            64,
            48,
            [
                0.123456789012345678,
                -1.0 / 3.0,
                1e-17,
                2.0_f64.sqrt(),
                -0.0,
                5.55555555555555555e5,
                f64::MIN_POSITIVE,
                0.1 + 0.2,
            ],
            1.0 / 7.0,
        );
        let back = WeightsDoc::from_json(&doc.to_json()).unwrap();
        for (a, b) in doc.alpha.iter().zip(back.alpha.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(doc.residual.to_bits(), back.residual.to_bits());
    }
}
