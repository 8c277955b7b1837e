//! Binary per-frame masks, PGM encoding and 3x3 morphology.

use std::fs;
use std::path::Path;

use thiserror::Error;
use crate::fsutil::write_atomic;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dims {0}x{1} do not match {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("frame count {0} does not match {1}")]
    FrameMismatch(usize, usize),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A single H x W binary map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn invert(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// 3x3 square dilation. Pixels outside the image are ignored.
    pub fn dilate3(&self) -> Self {
        let mut out = Self::new(self.height, self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                let hit = neighborhood(row, col, self.height, self.width).any(|n| match n {
                    Some((r, c)) => self.get(r, c),
                    None => false,
                });
                out.set(row, col, hit);
            }
        }
        out
    }

    /// 3x3 square erosion. Pixels outside the image count as set, so that
    /// closing never clears an input pixel.
    pub fn erode3(&self) -> Self {
        let mut out = Self::new(self.height, self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                let all = neighborhood(row, col, self.height, self.width).all(|n| match n {
                    Some((r, c)) => self.get(r, c),
                    None => true,
                });
                out.set(row, col, all);
            }
        }
        out
    }

    /// Morphological closing with a 3x3 square element, evaluated as if the
    /// image were embedded in an unbounded empty plane.
    pub fn close3(&self) -> Self {
        let padded = Self::from_fn(self.height + 2, self.width + 2, |r, c| {
            r >= 1 && c >= 1 && r <= self.height && c <= self.width && self.get(r - 1, c - 1)
        });
        let closed = padded.dilate3().erode3();
        Self::from_fn(self.height, self.width, |r, c| closed.get(r + 1, c + 1))
    }

    /// Binary PGM (`P5`, maxval 255) with 0 = static, 255 = dynamic.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    /// Parses `P5` or `P2` graymaps; values above half of maxval are set.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut cursor = PgmCursor { bytes, pos: 0 };
        let magic = cursor.token()?;
        let binary = match magic {
            b"P5" => true,
            b"P2" => false,
            other => {
                return Err(MaskError::Pgm(format!(
                    "unsupported magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = cursor.number()?;
        let height = cursor.number()?;
        let maxval = cursor.number()?;
        if width == 0 || height == 0 {
            return Err(MaskError::Pgm("zero image extent".into()));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(MaskError::Pgm(format!("invalid maxval {maxval}")));
        }
        let n = width
            .checked_mul(height)
            .filter(|n| *n <= 1 << 28)
            .ok_or_else(|| MaskError::Pgm("image too large".into()))?;
        let half = maxval / 2;
        let mut data = Vec::with_capacity(n.min(bytes.len()));
        if binary {
            // exactly one whitespace byte separates the header from the raster
            match bytes.get(cursor.pos) {
                Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
                _ => return Err(MaskError::Pgm("missing raster separator".into())),
            }
            let sample_len = if maxval < 256 { 1 } else { 2 };
            let raster = &bytes[cursor.pos..];
            if raster.len() != n * sample_len {
                return Err(MaskError::Pgm(format!(
                    "raster has {} bytes, expected {}",
                    raster.len(),
                    n * sample_len
                )));
            }
            for chunk in raster.chunks_exact(sample_len) {
                let v = if sample_len == 1 {
                    chunk[0] as usize
                } else {
                    u16::from_be_bytes([chunk[0], chunk[1]]) as usize
                };
                if v > maxval {
                    return Err(MaskError::Pgm(format!("sample {v} exceeds maxval")));
                }
                data.push(v > half);
            }
        } else {
            for _ in 0..n {
                let v = cursor.number()?;
                if v > maxval {
                    return Err(MaskError::Pgm(format!("sample {v} exceeds maxval")));
                }
                data.push(v > half);
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

fn neighborhood(
    row: usize,
    col: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = Option<(usize, usize)>> {
    (-1i64..=1).flat_map(move |dr| {
        (-1i64..=1).map(move |dc| {
            let r = row as i64 + dr;
            let c = col as i64 + dc;
            if r < 0 || c < 0 || r >= height as i64 || c >= width as i64 {
                None
            } else {
                Some((r as usize, c as usize))
            }
        })
    })
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], MaskError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(MaskError::Pgm("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize, MaskError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.len() <= 9 && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| MaskError::Pgm(format!("bad number {:?}", String::from_utf8_lossy(tok))))
    }
}

/// T binary maps sharing one H x W shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    frames: Vec<Mask>,
}

impl MaskStack {
    pub fn new(frames: Vec<Mask>) -> Result<Self, MaskError> {
        if let Some(first) = frames.first() {
            for m in &frames[1..] {
                if (m.height, m.width) != (first.height, first.width) {
                    return Err(MaskError::DimMismatch(
                        m.height,
                        m.width,
                        first.height,
                        first.width,
                    ));
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames: vec![Mask::new(height, width); frames],
        }
    }

    pub fn frames(&self) -> &[Mask] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Mask] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|m| (m.height, m.width))
    }

    /// Total set pixels over all frames.
    pub fn count(&self) -> usize {
        self.frames.iter().map(Mask::count).sum()
    }

    pub fn check_compatible(&self, other: &MaskStack) -> Result<(), MaskError> {
        if self.len() != other.len() {
            return Err(MaskError::FrameMismatch(self.len(), other.len()));
        }
        match (self.dims(), other.dims()) {
            (Some((h, w)), Some((h2, w2))) if (h, w) != (h2, w2) => {
                Err(MaskError::DimMismatch(h, w, h2, w2))
            }
            _ => Ok(()),
        }
    }
}

pub fn write_pgm(mask: &Mask, path: &Path) -> Result<(), MaskError> {
    write_atomic(path, &mask.to_pgm()).map_err(|source| MaskError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_pgm(path: &Path) -> Result<Mask, MaskError> {
    let bytes = fs::read(path).map_err(|source| MaskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Mask::from_pgm(&bytes)
}
