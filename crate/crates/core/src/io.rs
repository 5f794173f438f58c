//! Matrix file formats and little-endian helpers shared by the quantized
//! tensor formats.
//!
//! Binary matrix layout: `"R2QM"`, `u32` version (1), `u32` rows, `u32` cols,
//! then `rows * cols` little-endian `f32` values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"R2QM";
pub const MATRIX_VERSION: u32 = 1;

pub(crate) struct LeWriter<W: Write> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub(crate) fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn i32(&mut self, v: i32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn i64(&mut self, v: i64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct LeReader<R: Read> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.array()?;
        if &got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Fails unless the stream is exhausted.
    pub(crate) fn end(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes".into())),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

/// Peek at the 4-byte magic of a file.
pub fn sniff_magic(path: impl AsRef<Path>) -> Result<[u8; 4]> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(truncated)?;
    Ok(magic)
}

pub fn write_matrix<W: Write>(w: W, m: &Matrix) -> Result<()> {
    let mut w = LeWriter::new(w);
    w.bytes(MATRIX_MAGIC)?;
    w.u32(MATRIX_VERSION)?;
    w.u32(dim_u32(m.rows())?)?;
    w.u32(dim_u32(m.cols())?)?;
    for &v in m.as_slice() {
        w.f32(v as f32)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: R) -> Result<Matrix> {
    let mut r = LeReader::new(r);
    r.magic(MATRIX_MAGIC)?;
    r.version(MATRIX_VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f32()? as f64);
    }
    r.end()?;
    Matrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_matrix(BufWriter::new(File::create(path)?), m)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read_matrix(BufReader::new(File::open(path)?))
}

/// Parse a whitespace-separated text matrix, one row per line. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_text_matrix(text: &str) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("not a number: '{tok}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-finite value '{tok}'"),
                });
            }
            data.push(v);
        }
        let n = data.len() - before;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("row has {n} values, expected {c}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

pub fn load_text_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_text_matrix(&std::fs::read_to_string(path)?)
}

/// Load either format: binary when the file starts with the matrix magic,
/// text otherwise.
pub fn load_matrix_any(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MATRIX_MAGIC) {
        read_matrix(bytes.as_slice())
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            line: 0,
            msg: "not a binary matrix and not UTF-8 text".into(),
        })?;
        parse_text_matrix(&text)
    }
}

pub(crate) fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} exceeds u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip_of_f32_values() {
        let m = Matrix::new(2, 3, vec![1.0, -2.5, 0.125, 3.0, 0.0, -0.75]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"R2QM");
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn bad_magic_and_version() {
        let m = Matrix::zeros(1, 1);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_matrix(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_matrix(bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_matrix(short), Err(Error::Format(_))));
    }

    #[test]
    fn text_loader() {
        let m = parse_text_matrix("# weights\n1 2 3\n\n-4.5 5e-1 6\n").unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.row(1), &[-4.5, 0.5, 6.0]);
        assert!(matches!(parse_text_matrix("1 2\n3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_text_matrix("1 x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_text_matrix("1 nan\n").is_err());
    }
}
