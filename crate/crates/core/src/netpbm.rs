//! Binary Netpbm codecs: P5 (gray), P6 (RGB), both with maxval 255, and
//! the grayscale float variant PFM (`Pf`).
//!
//! PFM stores rows bottom-to-top; a negative scale marks little-endian
//! payloads, and we always write `-1.0`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub data: Vec<f32>,
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    assert_eq!(img.data.len(), img.width * img.height);
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    assert_eq!(img.data.len(), img.width * img.height * 3);
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pfm(img: &FloatImage) -> Vec<u8> {
    assert_eq!(img.data.len(), img.width * img.height);
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for row in img.data.chunks(img.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

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

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Parse {
            offset: start,
            msg: "non-ASCII header token".into(),
        })
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        let tok = self.token()?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("expected positive integer, found `{tok}`"),
            })
    }

    /// Consumes the single whitespace byte that ends every header.
    fn end_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(self.err("missing whitespace after header")),
        }
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, HeaderReader<'a>)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic, expected {magic}"),
        });
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number()?;
    let height = r.number()?;
    Ok((width, height, r))
}

fn parse_u8_payload(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (width, height, mut r) = parse_header(bytes, magic)?;
    r.skip_space_and_comments();
    let at = r.pos;
    let maxval = r.number()?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported maxval {maxval}, expected 255"),
        });
    }
    let start = r.end_header()?;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: need {len} bytes"),
        });
    }
    Ok((width, height, bytes[start..start + len].to_vec()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, data) = parse_u8_payload(bytes, "P5", 1)?;
    Ok(GrayImage { width, height, data })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, data) = parse_u8_payload(bytes, "P6", 3)?;
    Ok(RgbImage { width, height, data })
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatImage> {
    let (width, height, mut r) = parse_header(bytes, "Pf")?;
    r.skip_space_and_comments();
    let at = r.pos;
    let scale: f32 = r.token()?.parse().map_err(|_| Error::Parse {
        offset: at,
        msg: "bad PFM scale".into(),
    })?;
    if scale == 0.0 {
        return Err(Error::Parse {
            offset: at,
            msg: "PFM scale must be nonzero".into(),
        });
    }
    let start = r.end_header()?;
    let len = width * height * 4;
    if bytes.len() < start + len {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: need {len} bytes"),
        });
    }
    let little = scale < 0.0;
    let mut rows: Vec<Vec<f32>> = bytes[start..start + len]
        .chunks_exact(width * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    if little {
                        f32::from_le_bytes(b)
                    } else {
                        f32::from_be_bytes(b)
                    }
                })
                .collect()
        })
        .collect();
    rows.reverse();
    Ok(FloatImage {
        width,
        height,
        data: rows.concat(),
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &encode_pgm(img))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn write_pfm(path: &Path, img: &FloatImage) -> Result<()> {
    write_atomic(path, &encode_pfm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_file(path)?)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_file(path)?)
}

pub fn read_pfm(path: &Path) -> Result<FloatImage> {
    decode_pfm(&read_file(path)?)
}
