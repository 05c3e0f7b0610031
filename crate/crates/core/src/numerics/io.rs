//! `TALLTEN1` tensor container.
//!
//! Layout: 8-byte magic, u8 dtype code, u8 rank, `rank` little-endian u64
//! extents, then the values as little-endian f32 or f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::tensor::{DType, Tensor};
use crate::error::{Result, TallError};

pub const MAGIC: &[u8; 8] = b"TALLTEN1";

/// Header of a serialized tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn byte_len(&self) -> u64 {
        10 + 8 * self.shape.len() as u64
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.len() * t.dtype().size_of());
    write_header(&mut out, t.dtype(), t.shape());
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub(crate) fn write_header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

/// Decodes a tensor, reporting the byte offset of the first problem.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let header = decode_header(bytes)?;
    let start = header.byte_len() as usize;
    let width = header.dtype.size_of();
    let need = header.element_count() * width;
    let body = &bytes[start..];
    if body.len() < need {
        let complete = body.len() / width * width;
        return Err(TallError::Format {
            offset: (start + complete) as u64,
            message: format!(
                "truncated payload: expected {need} bytes of values, found {}",
                body.len()
            ),
        });
    }
    if body.len() > need {
        return Err(TallError::Format {
            offset: (start + need) as u64,
            message: format!("{} trailing bytes after tensor payload", body.len() - need),
        });
    }
    let data = decode_values(&body[..need], header.dtype);
    Tensor::with_dtype(&header.shape, data, header.dtype)
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    let fmt = |offset: usize, message: String| TallError::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 8 {
        return Err(fmt(bytes.len(), "truncated magic".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt(0, "bad magic, expected TALLTEN1".into()));
    }
    if bytes.len() < 10 {
        return Err(fmt(bytes.len(), "truncated header".into()));
    }
    let dtype = DType::from_code(bytes[8])
        .ok_or_else(|| fmt(8, format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    if rank == 0 {
        return Err(fmt(9, "rank must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 10 + 8 * i;
        let Some(chunk) = bytes.get(off..off + 8) else {
            return Err(fmt(off, format!("truncated extent {i}")));
        };
        let e = u64::from_le_bytes(chunk.try_into().unwrap());
        if e == 0 {
            return Err(fmt(off, format!("extent {i} is zero")));
        }
        shape.push(e as usize);
    }
    Ok(Header { dtype, shape })
}

pub(crate) fn decode_values(body: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| TallError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(t)).map_err(|e| TallError::io(path, e))?;
    w.flush().map_err(|e| TallError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| TallError::io(path, e))?;
    decode(&bytes)
}

/// Reads `count` consecutive outer-axis slices starting at `first`, without
/// loading the rest of the payload.
pub fn read_outer_range(path: &Path, first: usize, count: usize) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| TallError::io(path, e))?;
    let mut r = BufReader::new(file);
    // a short file is a format problem, not an I/O one
    let short = |offset: u64| {
        move |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => TallError::Format {
                offset,
                message: "truncated header".into(),
            },
            _ => TallError::io(path, e),
        }
    };
    let mut head = vec![0u8; 10];
    r.read_exact(&mut head).map_err(short(0))?;
    let rank = head[9] as usize;
    let mut ext = vec![0u8; 8 * rank];
    r.read_exact(&mut ext).map_err(short(10))?;
    head.extend_from_slice(&ext);
    let header = decode_header(&head)?;
    if count == 0 || first + count > header.shape[0] {
        return Err(TallError::config(format!(
            "outer range {first}..{} outside extent {}",
            first + count,
            header.shape[0]
        )));
    }
    let inner: usize = header.shape[1..].iter().product();
    let width = header.dtype.size_of();
    let offset = header.byte_len() + (first * inner * width) as u64;
    r.seek(SeekFrom::Start(offset)).map_err(|e| TallError::io(path, e))?;
    let mut body = vec![0u8; count * inner * width];
    r.read_exact(&mut body).map_err(|_| TallError::Format {
        offset,
        message: "truncated payload".into(),
    })?;
    let mut shape = header.shape.clone();
    shape[0] = count;
    Tensor::with_dtype(&shape, decode_values(&body, header.dtype), header.dtype)
}
