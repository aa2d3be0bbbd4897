//! Reader for level-5 MAT files.
//!
//! Only two-dimensional real numeric matrices of class double or int16 are
//! returned. Other classes (char, struct, cell, sparse, other numeric
//! classes) are skipped by name with a warning. Both byte orders and
//! deflate-compressed elements are supported.

use std::io::Read;
use std::path::Path;

use flate2::read::ZlibDecoder;
use log::warn;

const HEADER_LEN: usize = 128;

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

const MX_DOUBLE: u8 = 6;
const MX_INT16: u8 = 10;

const FLAG_COMPLEX: u32 = 0x0800;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatError {
    #[error("not a MAT-v5 file: {0}")]
    NotMat(&'static str),
    #[error("truncated element at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("malformed element at byte offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("cannot inflate compressed element at byte offset {offset}")]
    Inflate { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatClass {
    Double,
    Int16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub class: MatClass,
    /// Column-major values.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatFile {
    pub arrays: Vec<MatArray>,
    /// Names of variables that were present but not returned.
    pub skipped: Vec<String>,
}

impl MatFile {
    pub fn get(&self, name: &str) -> Option<&MatArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

/// Cursor over a byte slice. `base` is the offset of `buf[0]` in the file so
/// errors report file positions (for compressed payloads, the offset of the
/// compressed element).
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
    endian: Endian,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MatError> {
        if self.buf.len() - self.pos < n {
            return Err(MatError::Truncated { offset: self.offset() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MatError> {
        let b: [u8; 4] = self.take(4)?.try_into().unwrap();
        Ok(match self.endian {
            Endian::Little => u32::from_le_bytes(b),
            Endian::Big => u32::from_be_bytes(b),
        })
    }

    /// Reads a tag and its payload, returning `(type, payload, tag offset)`.
    /// Handles the packed small-element form and skips 8-byte padding.
    fn element(&mut self) -> Result<(u32, &'a [u8], usize), MatError> {
        let at = self.offset();
        let first = self.u32()?;
        if first >> 16 != 0 {
            let (ty, n) = (first & 0xffff, (first >> 16) as usize);
            if n > 4 {
                return Err(MatError::Malformed { offset: at, msg: format!("small element claims {n} bytes") });
            }
            let payload = self.take(4)?;
            return Ok((ty, &payload[..n], at));
        }
        let n = self.u32()? as usize;
        let payload = self.take(n)?;
        if first != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            // The final element of a file may omit trailing padding.
            let pad = pad.min(self.buf.len() - self.pos);
            self.pos += pad;
        }
        Ok((first, payload, at))
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

// The width check is trivially true for one-byte types.
#[allow(clippy::modulo_one)]
fn numeric(ty: u32, bytes: &[u8], endian: Endian, offset: usize) -> Result<Vec<f64>, MatError> {
    macro_rules! conv {
        ($t:ty) => {{
            const W: usize = std::mem::size_of::<$t>();
            if bytes.len() % W != 0 {
                return Err(MatError::Malformed { offset, msg: format!("{} bytes is not a whole number of values", bytes.len()) });
            }
            bytes
                .chunks_exact(W)
                .map(|c| {
                    let a: [u8; W] = c.try_into().unwrap();
                    (match endian {
                        Endian::Little => <$t>::from_le_bytes(a),
                        Endian::Big => <$t>::from_be_bytes(a),
                    }) as f64
                })
                .collect()
        }};
    }
    Ok(match ty {
        MI_INT8 => conv!(i8),
        MI_UINT8 => conv!(u8),
        MI_INT16 => conv!(i16),
        MI_UINT16 => conv!(u16),
        MI_INT32 => conv!(i32),
        MI_UINT32 => conv!(u32),
        MI_SINGLE => conv!(f32),
        MI_DOUBLE => conv!(f64),
        MI_INT64 => conv!(i64),
        MI_UINT64 => conv!(u64),
        other => return Err(MatError::Malformed { offset, msg: format!("data type {other} is not numeric") }),
    })
}

enum Parsed {
    Array(MatArray),
    Skipped(String),
}

fn parse_matrix(payload: &[u8], base: usize, endian: Endian) -> Result<Parsed, MatError> {
    let mut r = Reader { buf: payload, pos: 0, base, endian };
    if payload.is_empty() {
        return Ok(Parsed::Skipped(String::new()));
    }
    let (ty, flags, at) = r.element()?;
    if ty != MI_UINT32 || flags.len() != 8 {
        return Err(MatError::Malformed { offset: at, msg: "array flags missing".into() });
    }
    let flags = numeric(MI_UINT32, flags, endian, at)?;
    let (flag_word, class) = (flags[0] as u32, (flags[0] as u32 & 0xff) as u8);

    let (ty, dims, at) = r.element()?;
    if ty != MI_INT32 {
        return Err(MatError::Malformed { offset: at, msg: "dimensions missing".into() });
    }
    let dims: Vec<usize> = numeric(MI_INT32, dims, endian, at)?.into_iter().map(|d| d as usize).collect();

    let (ty, name, at) = r.element()?;
    if ty != MI_INT8 {
        return Err(MatError::Malformed { offset: at, msg: "array name missing".into() });
    }
    let name = String::from_utf8_lossy(name).into_owned();

    let class = match class {
        MX_DOUBLE => MatClass::Double,
        MX_INT16 => MatClass::Int16,
        other => {
            warn!("skipping variable {name:?}: unsupported array class {other}");
            return Ok(Parsed::Skipped(name));
        }
    };
    if flag_word & FLAG_COMPLEX != 0 {
        warn!("skipping variable {name:?}: complex values are not supported");
        return Ok(Parsed::Skipped(name));
    }
    if dims.len() != 2 {
        warn!("skipping variable {name:?}: {} dimensions", dims.len());
        return Ok(Parsed::Skipped(name));
    }
    let (ty, real, at) = r.element()?;
    let data = numeric(ty, real, endian, at)?;
    if data.len() != dims[0] * dims[1] {
        return Err(MatError::Malformed {
            offset: at,
            msg: format!("{name}: {} values for a {}x{} array", data.len(), dims[0], dims[1]),
        });
    }
    Ok(Parsed::Array(MatArray { name, rows: dims[0], cols: dims[1], class, data }))
}

fn parse_elements(r: &mut Reader<'_>, out: &mut MatFile) -> Result<(), MatError> {
    while !r.done() {
        let (ty, payload, at) = r.element()?;
        match ty {
            MI_MATRIX => match parse_matrix(payload, at + 8, r.endian)? {
                Parsed::Array(a) => out.arrays.push(a),
                Parsed::Skipped(n) => out.skipped.push(n),
            },
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(payload)
                    .read_to_end(&mut inflated)
                    .map_err(|_| MatError::Inflate { offset: at })?;
                let mut inner = Reader { buf: &inflated, pos: 0, base: at, endian: r.endian };
                parse_elements(&mut inner, out)?;
            }
            other => warn!("skipping top-level element of type {other} at byte {at}"),
        }
    }
    Ok(())
}

pub fn parse_mat(bytes: &[u8]) -> Result<MatFile, MatError> {
    if bytes.len() < HEADER_LEN {
        return Err(MatError::NotMat("shorter than the 128-byte header"));
    }
    let endian = match &bytes[126..128] {
        b"IM" => Endian::Little,
        b"MI" => Endian::Big,
        _ => return Err(MatError::NotMat("missing endian indicator")),
    };
    let version = match endian {
        Endian::Little => u16::from_le_bytes([bytes[124], bytes[125]]),
        Endian::Big => u16::from_be_bytes([bytes[124], bytes[125]]),
    };
    if version != 0x0100 {
        return Err(MatError::NotMat("unsupported version"));
    }
    let mut out = MatFile::default();
    let mut r = Reader { buf: &bytes[HEADER_LEN..], pos: 0, base: HEADER_LEN, endian };
    parse_elements(&mut r, &mut out)?;
    Ok(out)
}

pub fn read_mat(path: &Path) -> Result<MatFile, crate::Error> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    parse_mat(&bytes).map_err(|e| crate::Error::Mat { path: path.to_owned(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_a_header_error() {
        assert!(matches!(parse_mat(&[]), Err(MatError::NotMat(_))));
    }

    #[test]
    fn header_only_file_has_no_arrays() {
        let mut h = vec![b' '; 124];
        h.extend_from_slice(&[0x00, 0x01, b'I', b'M']);
        assert_eq!(parse_mat(&h).unwrap(), MatFile::default());
    }
}
