//! Image values and their two on-disk encodings.
//!
//! * `pgm16`: binary PGM (`P5`), 16-bit big-endian samples, for raw electron
//!   counts. `pixel_scale` travels in a `<name>.meta` sidecar holding
//!   `pixel_scale_nm=<value>`.
//! * `rawf32`: magic `LDR1`, `u32` width, `u32` height, `f32` pixel scale
//!   (NaN when absent), then `width * height` little-endian `f32` samples in
//!   row-major order, for normalized images.
//!
//! Both encodings round-trip bit-exactly. Loading never clamps or rescales.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const RAWF32_MAGIC: &[u8; 4] = b"LDR1";
const SIDECAR_KEY: &str = "pixel_scale_nm";

/// Which intensity domain an image lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Electron counts (non-negative).
    Raw,
    /// Unit-interval intensities.
    Normalized,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Raw => "raw",
            Domain::Normalized => "normalized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm16,
    RawF32,
}

impl ImageFormat {
    /// Guess the format from a file extension (`.pgm`/`.pnm` or `.rawf32`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" | "pnm" => Some(ImageFormat::Pgm16),
            "rawf32" | "f32" => Some(ImageFormat::RawF32),
            _ => None,
        }
    }
}

/// Row-major grayscale image with optional physical pixel size.
///
/// Samples are stored as `f32` in both domains: raw counts up to 2^24 are
/// exact. Raw images produced by binning may hold non-integral block means;
/// only integral raw images can be written as `pgm16`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixel_scale: Option<f32>,
    domain: Domain,
    data: Vec<f32>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        domain: Domain,
        data: Vec<f32>,
        pixel_scale: Option<f32>,
    ) -> Result<Self> {
        let img = Image {
            width,
            height,
            pixel_scale,
            domain,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, Domain::Raw, data, None)
    }

    pub fn normalized(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, Domain::Normalized, data, None)
    }

    /// Build an image from raw `u16` counts.
    pub fn from_counts(width: usize, height: usize, counts: &[u16]) -> Result<Self> {
        Self::raw(
            width,
            height,
            counts.iter().map(|&c| f32::from(c)).collect(),
        )
    }

    pub fn filled(width: usize, height: usize, domain: Domain, value: f32) -> Result<Self> {
        Self::new(width, height, domain, vec![value; width * height], None)
    }

    pub fn with_pixel_scale(mut self, pixel_scale: Option<f32>) -> Result<Self> {
        self.pixel_scale = pixel_scale;
        self.validate()?;
        Ok(self)
    }

    /// Check every invariant: size, domain range, pixel scale.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidImage(format!(
                "empty image {}x{}",
                self.width, self.height
            )));
        }
        if self.data.len() != self.width * self.height {
            return Err(Error::PayloadMismatch {
                expected: self.width * self.height,
                actual: self.data.len(),
            });
        }
        if let Some(s) = self.pixel_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidImage(format!(
                    "pixel scale {s} must be finite and > 0"
                )));
            }
        }
        match self.domain {
            Domain::Normalized => {
                if let Some((index, &value)) = self
                    .data
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(0.0..=1.0).contains(*v))
                {
                    return Err(Error::OutsideUnitInterval { value, index });
                }
            }
            Domain::Raw => {
                if let Some(v) = self.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::InvalidImage(format!("raw value {v} is not a count")));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn pixel_scale(&self) -> Option<f32> {
        self.pixel_scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Replace the samples, keeping geometry and metadata; revalidates.
    pub fn map_data(&self, domain: Domain, data: Vec<f32>) -> Result<Image> {
        Image::new(self.width, self.height, domain, data, self.pixel_scale)
    }
}

/// An aligned (high-dose, low-dose) pair sharing one field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hde: Image,
    pub lde: Image,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, hde: Image, lde: Image) -> Result<Self> {
        if !hde.same_dims(&lde) {
            return Err(Error::InvalidImage(format!(
                "pair dimensions differ: hde {}x{}, lde {}x{}",
                hde.width, hde.height, lde.width, lde.height
            )));
        }
        if hde.domain != Domain::Normalized || lde.domain != Domain::Normalized {
            return Err(Error::WrongDomain {
                expected: "normalized",
            });
        }
        Ok(ImagePair {
            id: id.into(),
            hde,
            lde,
        })
    }
}

/// Path of the metadata sidecar that accompanies a PGM file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn load_image(path: &Path, format: ImageFormat) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Pgm16 => {
            let img = decode_pgm(&bytes)?;
            let sidecar = sidecar_path(path);
            let scale = if sidecar.exists() {
                let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
                parse_sidecar(&text)?
            } else {
                None
            };
            img.with_pixel_scale(scale)
        }
        ImageFormat::RawF32 => decode_rawf32(&bytes),
    }
}

pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pgm16 => encode_pgm(img)?,
        ImageFormat::RawF32 => encode_rawf32(img)?,
    };
    write_file(path, &bytes)?;
    if format == ImageFormat::Pgm16 {
        let sidecar = sidecar_path(path);
        match img.pixel_scale {
            Some(s) => write_file(&sidecar, format!("{SIDECAR_KEY}={s}\n").as_bytes())?,
            None if sidecar.exists() => {
                fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?
            }
            None => {}
        }
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn parse_sidecar(text: &str) -> Result<Option<f32>> {
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("sidecar line without '=': {line}")))?;
        if key.trim() == SIDECAR_KEY {
            let v: f32 = value
                .trim()
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad {SIDECAR_KEY}: {value}")))?;
            return Ok(Some(v));
        }
    }
    Ok(None)
}

/// Encode a raw image as 16-bit binary PGM.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.domain != Domain::Raw {
        return Err(Error::WrongDomain { expected: "raw" });
    }
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 2);
    for &v in &img.data {
        if v > 65535.0 {
            return Err(Error::RawOverflow { value: v as u32 });
        }
        if v.fract() != 0.0 {
            return Err(Error::InvalidImage(format!(
                "raw value {v} is not integral; pgm16 stores whole counts"
            )));
        }
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    Ok(out)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("unparseable {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::MalformedHeader("missing P5 magic".into()));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!(
            "maxval {maxval} out of range"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("no whitespace after maxval".into()));
    }
    let payload = &bytes[cur.pos + 1..];
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let expected = width * height;
    if payload.len() != expected * bytes_per_sample {
        return Err(Error::PayloadMismatch {
            expected,
            actual: payload.len() / bytes_per_sample,
        });
    }
    let data: Vec<f32> = if bytes_per_sample == 2 {
        payload
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        payload.iter().map(|&b| f32::from(b)).collect()
    };
    if let Some(v) = data.iter().find(|&&v| v > maxval as f32) {
        return Err(Error::MalformedHeader(format!(
            "sample {v} exceeds maxval {maxval}"
        )));
    }
    Image::raw(width, height, data)
}

pub fn encode_rawf32(img: &Image) -> Result<Vec<u8>> {
    if img.domain != Domain::Normalized {
        return Err(Error::WrongDomain {
            expected: "normalized",
        });
    }
    let w =
        u32::try_from(img.width).map_err(|_| Error::InvalidImage("width overflows u32".into()))?;
    let h = u32::try_from(img.height)
        .map_err(|_| Error::InvalidImage("height overflows u32".into()))?;
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(RAWF32_MAGIC);
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&img.pixel_scale.unwrap_or(f32::NAN).to_le_bytes());
    for &v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_rawf32(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader(format!(
            "rawf32 header needs 16 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != RAWF32_MAGIC {
        return Err(Error::MalformedHeader("missing LDR1 magic".into()));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let width = u32::from_le_bytes(word(4)) as usize;
    let height = u32::from_le_bytes(word(8)) as usize;
    let scale = f32::from_le_bytes(word(12));
    let pixel_scale = if scale.is_nan() { None } else { Some(scale) };
    let payload = &bytes[16..];
    let expected = width * height;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(Error::PayloadMismatch {
            expected,
            actual: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Image::new(width, height, Domain::Normalized, data, pixel_scale)
}
