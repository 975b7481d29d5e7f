//! NPY version 1.0 reader and writer (C order, little-endian `u8`/`f32`/`f64`).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::Scalar;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE: usize = 10;

/// A parsed array: element type, shape and raw little-endian payload.
///
/// The header text is kept as read so that writing a parsed file reproduces
/// it byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
    header: Option<Vec<u8>>,
}

impl NpyArray {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expect = shape.iter().product::<usize>() * dtype.size();
        if data.len() != expect {
            return Err(Error::Npy(format!(
                "payload of {} bytes for shape {shape:?} of {dtype:?} (expected {expect})",
                data.len()
            )));
        }
        Ok(Self {
            dtype,
            shape,
            data,
            header: None,
        })
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(DType::U8, shape, data)
    }

    pub fn from_floats<T: Scalar>(shape: Vec<usize>, values: &[T]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
        for &v in values {
            v.write_le(&mut data);
        }
        Self::new(T::DTYPE, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Always false: only C-order arrays are accepted.
    pub fn fortran_order(&self) -> bool {
        false
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Element `i` in row-major order as `f64` (raw value, no scaling).
    pub fn get_f64(&self, i: usize) -> f64 {
        match self.dtype {
            DType::U8 => self.data[i] as f64,
            DType::F32 => f32::read_le(&self.data[i * 4..i * 4 + 4]) as f64,
            DType::F64 => f64::read_le(&self.data[i * 8..i * 8 + 8]),
        }
    }
}

fn descr(dtype: DType) -> &'static str {
    match dtype {
        DType::U8 => "|u1",
        DType::F32 => "<f4",
        DType::F64 => "<f8",
    }
}

fn canonical_header(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut h = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}",
        descr(dtype)
    )
    .into_bytes();
    // pad with spaces so the payload starts on a 64-byte boundary
    let total = PREAMBLE + h.len() + 1;
    h.resize(h.len() + (64 - total % 64) % 64, b' ');
    h.push(b'\n');
    h
}

/// Serializes an array. Arrays that came from [`parse_npy`] keep their
/// original header.
pub fn write_npy(array: &NpyArray) -> Vec<u8> {
    let header = array
        .header
        .clone()
        .unwrap_or_else(|| canonical_header(array.dtype, &array.shape));
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + array.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&array.data);
    out
}

/// Value following `'key':` in a header dictionary, up to the next comma at
/// nesting depth zero.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::Npy(format!("header has no '{key}' entry")))?
        + pat.len();
    let rest = header[start..].trim_start();
    let mut depth = 0i32;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' | '}' if depth == 0 => return Ok(rest[..i].trim()),
            _ => {}
        }
    }
    Err(Error::Npy(format!("unterminated '{key}' entry")))
}

/// Element type and shape from the header text.
fn parse_header(text: &str) -> Result<(DType, Vec<usize>)> {
    let dtype = match dict_value(text, "descr")?.trim_matches(|c| c == '\'' || c == '"') {
        "|u1" | "<u1" | "u1" => DType::U8,
        "<f4" => DType::F32,
        "<f8" => DType::F64,
        other => return Err(Error::Npy(format!("unsupported dtype '{other}'"))),
    };
    match dict_value(text, "fortran_order")? {
        "False" => {}
        "True" => {
            return Err(Error::Npy(
                "fortran_order=True arrays are not supported".into(),
            ))
        }
        other => return Err(Error::Npy(format!("bad fortran_order value '{other}'"))),
    }
    let shape_text = dict_value(text, "shape")?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Npy(format!("bad shape '{shape_text}'")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape '{shape_text}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, shape))
}

/// Checks the preamble and returns the header length.
fn preamble(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Npy("truncated preamble".into()));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::Npy("bad magic".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::Npy(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    Ok(u16::from_le_bytes([bytes[8], bytes[9]]) as usize)
}

pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    let hlen = preamble(bytes)?;
    let header = bytes
        .get(PREAMBLE..PREAMBLE + hlen)
        .ok_or_else(|| Error::Npy("truncated header".into()))?;
    let text = std::str::from_utf8(header).map_err(|_| Error::Npy("header is not ASCII".into()))?;
    let (dtype, shape) = parse_header(text)?;
    let payload = &bytes[PREAMBLE + hlen..];
    let expect = shape.iter().product::<usize>() * dtype.size();
    if payload.len() != expect {
        return Err(Error::Npy(format!(
            "payload has {} bytes, shape {shape:?} needs {expect}",
            payload.len()
        )));
    }
    Ok(NpyArray {
        dtype,
        shape,
        data: payload.to_vec(),
        header: Some(header.to_vec()),
    })
}

/// Reads only the header of an NPY file.
pub fn read_npy_header(path: &Path) -> Result<(DType, Vec<usize>)> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = [0u8; PREAMBLE];
    f.read_exact(&mut pre).map_err(|e| Error::io(path, e))?;
    let hlen = preamble(&pre)?;
    let mut header = vec![0u8; hlen];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let text =
        std::str::from_utf8(&header).map_err(|_| Error::Npy("header is not ASCII".into()))?;
    parse_header(text)
}

pub fn load_npy(path: &Path) -> Result<NpyArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_npy(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layout() {
        let a = NpyArray::from_u8(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = write_npy(&a);
        assert_eq!(&bytes[..6], MAGIC);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((PREAMBLE + hlen) % 64, 0);
        assert_eq!(bytes[PREAMBLE + hlen - 1], b'\n');
        let text = std::str::from_utf8(&bytes[PREAMBLE..PREAMBLE + hlen]).unwrap();
        assert!(text.starts_with("{'descr': '|u1', 'fortran_order': False, 'shape': (2, 3), }"));
        let back = parse_npy(&bytes).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.raw(), a.raw());
        assert_eq!(write_npy(&back), bytes);
    }

    #[test]
    fn one_dimensional_shape_has_trailing_comma() {
        let a = NpyArray::from_floats::<f64>(vec![2], &[1.5, -2.0]).unwrap();
        let back = parse_npy(&write_npy(&a)).unwrap();
        assert_eq!(back.shape(), &[2]);
        assert_eq!(back.get_f64(1), -2.0);
    }

    #[test]
    fn foreign_header_round_trips_byte_exact() {
        // unusual spacing and key order, as written by other tools
        let mut header = b"{'shape':(2,2),'fortran_order':False,'descr':'<f4'}".to_vec();
        header.resize(118, b' ');
        header.push(b'\n');
        let mut bytes = MAGIC.to_vec();
        bytes.extend([1, 0]);
        bytes.extend((header.len() as u16).to_le_bytes());
        bytes.extend(&header);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend(v.to_le_bytes());
        }
        let a = parse_npy(&bytes).unwrap();
        assert_eq!(a.dtype(), DType::F32);
        assert_eq!(a.get_f64(3), 4.0);
        assert_eq!(write_npy(&a), bytes);
    }

    #[test]
    fn errors() {
        let good = write_npy(&NpyArray::from_u8(vec![4], vec![0; 4]).unwrap());
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(parse_npy(&bad), Err(Error::Npy(m)) if m == "bad magic"));
        assert!(parse_npy(&good[..good.len() - 1]).is_err());
        assert!(parse_npy(&good[..5]).is_err());

        let replace = |from: &[u8], to: &[u8]| {
            let at = good.windows(from.len()).position(|w| w == from).unwrap();
            let mut b = good.clone();
            b[at..at + to.len()].copy_from_slice(to);
            b
        };
        let fortran = replace(b"False", b"True ");
        assert!(matches!(parse_npy(&fortran), Err(Error::Npy(m)) if m.contains("fortran")));
        let int = replace(b"|u1", b"<i4");
        assert!(matches!(parse_npy(&int), Err(Error::Npy(m)) if m.contains("<i4")));
    }
}
