//! Binary portable-pixmap I/O: P6 color images for dataset samples and
//! P5 graymaps for attention visualization.
//!
//! Images are held in memory as `f64` intensities in `[0, 1]`; files store
//! 8-bit samples with maxval 255. The decoder is defensive: it is safe to run
//! on untrusted bytes, enforces dimension limits before allocating, and never
//! panics on malformed input.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

/// Largest accepted edge length when decoding.
pub const MAX_DIM: usize = 4096;
/// Largest accepted pixel count when decoding.
pub const MAX_PIXELS: usize = 1 << 22;

/// RGB raster with row-major `f64` samples in `[0, 1]`, three per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Length `width * height * 3`, ordered R, G, B per pixel.
    pub samples: Vec<f64>,
}

#[derive(Debug)]
pub enum PpmError {
    Io(std::io::Error),
    /// Header or payload does not follow the P6/maxval-255 format.
    Malformed { detail: String },
    /// Dimensions exceed the decoder limits.
    TooLarge { width: usize, height: usize },
}

impl fmt::Display for PpmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PpmError::Io(e) => write!(f, "pixmap i/o error: {e}"),
            PpmError::Malformed { detail } => write!(f, "malformed pixmap: {detail}"),
            PpmError::TooLarge { width, height } => {
                write!(f, "pixmap dimensions {width}x{height} exceed decoder limits")
            }
        }
    }
}

impl std::error::Error for PpmError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PpmError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for PpmError {
    fn from(e: std::io::Error) -> Self {
        PpmError::Io(e)
    }
}

impl Image {
    /// Solid-color image; each channel intensity is clamped to `[0, 1]`.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Image {
        let mut samples = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            for c in rgb {
                samples.push(c.clamp(0.0, 1.0));
            }
        }
        Image { width, height, samples }
    }

    /// The three samples of the pixel at (column `x`, row `y`).
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let base = (y * self.width + x) * 3;
        [self.samples[base], self.samples[base + 1], self.samples[base + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let base = (y * self.width + x) * 3;
        self.samples[base] = rgb[0];
        self.samples[base + 1] = rgb[1];
        self.samples[base + 2] = rgb[2];
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as binary P6 with maxval 255. Deterministic byte output.
pub fn encode_p6(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + image.width * image.height * 3);
    // Header bytes are fixed-format so identical images encode identically.
    out.extend_from_slice(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes());
    for &v in &image.samples {
        out.push(quantize(v));
    }
    out
}

/// Encode a single-channel map as binary P5 with maxval 255.
pub fn encode_p5(width: usize, height: usize, samples: &[f64]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height, "graymap sample count");
    let mut out = Vec::with_capacity(32 + samples.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for &v in samples {
        out.push(quantize(v));
    }
    out
}

/// Decode a binary P6 pixmap with maxval 255.
///
/// Accepts standard header whitespace and `#` comments. Rejects other magics,
/// other maxvals, oversized dimensions, and truncated payloads.
pub fn decode_p6(bytes: &[u8]) -> Result<Image, PpmError> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(PpmError::Malformed { detail: "missing P6 magic".into() });
    }
    pos += 2;
    let width = read_header_number(bytes, &mut pos)?;
    let height = read_header_number(bytes, &mut pos)?;
    let maxval = read_header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PpmError::Malformed { detail: format!("unsupported maxval {maxval}") });
    }
    if width == 0 || height == 0 {
        return Err(PpmError::Malformed { detail: "zero dimension".into() });
    }
    if width > MAX_DIM || height > MAX_DIM || width * height > MAX_PIXELS {
        return Err(PpmError::TooLarge { width, height });
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(PpmError::Malformed { detail: "missing separator before payload".into() })
        }
    }
    let need = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(PpmError::Malformed {
            detail: format!("payload has {} bytes, need {need}", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(PpmError::Malformed {
            detail: format!("{} trailing bytes after payload", payload.len() - need),
        });
    }
    let samples = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image { width, height, samples })
}

/// Read one decimal field, skipping whitespace and `#` comments before it.
fn read_header_number(bytes: &[u8], pos: &mut usize) -> Result<usize, PpmError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(_) => {
                return Err(PpmError::Malformed { detail: "unexpected byte in header".into() })
            }
            None => return Err(PpmError::Malformed { detail: "truncated header".into() }),
        }
    }
    let mut value = 0usize;
    let mut digits = 0usize;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        if digits >= 9 {
            return Err(PpmError::Malformed { detail: "header number too long".into() });
        }
        value = value * 10 + usize::from(b - b'0');
        digits += 1;
        *pos += 1;
    }
    Ok(value)
}

pub fn save_p6(path: &Path, image: &Image) -> Result<(), PpmError> {
    let bytes = encode_p6(image);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_p6(path: &Path) -> Result<Image, PpmError> {
    let bytes = std::fs::read(path)?;
    decode_p6(&bytes)
}
