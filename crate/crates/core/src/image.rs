//! 8-bit RGB rasters, binary masks, and PPM/PGM encoding.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Nearest-neighbor enlargement by an integer factor.
    pub fn enlarge_nearest(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width * factor, self.height * factor);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                pixels.extend_from_slice(&self.pixel(x / factor, y / factor));
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Binary P6 encoding: header `P6\n<w> <h>\n255\n` then row-major RGB.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, body) = parse_netpbm(bytes)?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected P6, found {magic}")));
        }
        Self::new(width, height, body.to_vec())
    }

    pub fn digest(&self) -> String {
        digest_bytes(&self.to_ppm())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<String> {
        let bytes = self.to_ppm();
        std::fs::write(path, &bytes)?;
        Ok(digest_bytes(&bytes))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

/// Foreground mask; `true` marks subject pixels that evaluation keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("mask data length does not match size"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Reads a P5 graymap or P6 pixmap; a pixel is foreground when its gray
    /// level (channel mean for P6) is at least 128.
    pub fn from_netpbm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, body) = parse_netpbm(bytes)?;
        let data = match magic {
            "P5" => {
                if body.len() != width * height {
                    return Err(Error::Format("P5 body has wrong length".into()));
                }
                body.iter().map(|v| *v >= 128).collect()
            }
            "P6" => {
                if body.len() != width * height * 3 {
                    return Err(Error::Format("P6 body has wrong length".into()));
                }
                body.chunks_exact(3)
                    .map(|p| (u32::from(p[0]) + u32::from(p[1]) + u32::from(p[2])) >= 3 * 128)
                    .collect()
            }
            other => return Err(Error::Format(format!("unsupported mask format {other}"))),
        };
        Self::new(width, height, data)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| if *v { 255u8 } else { 0 }));
        out
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_netpbm(bytes: &[u8]) -> Result<(&'static str, usize, usize, &[u8])> {
    let mut pos = 0;
    let mut fields: Vec<String> = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the body
    pos += 1;
    let magic = match fields[0].as_str() {
        "P5" => "P5",
        "P6" => "P6",
        other => return Err(Error::Format(format!("unknown netpbm magic {other}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad netpbm header field {s}")))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    if parse(&fields[3])? != 255 {
        return Err(Error::Format("only 8-bit netpbm is supported".into()));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    Ok((magic, width, height, body))
}
