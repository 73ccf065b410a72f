//! Binary dataset container and CSV export.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "ORLD" | version u32 | p u32 | N u32 | flags u32
//! p*N f64, row-major (feature i occupies values i*N .. (i+1)*N)
//! N f64 responses                      if flags & 1
//! ceil(N/8) bytes, inlier mask LSB-first if flags & 2
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{check_dim, OrlError, Result};

const MAGIC: &[u8; 4] = b"ORLD";
pub const VERSION: u32 = 1;
const HAS_RESPONSE: u32 = 1;
const HAS_MASK: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: DMatrix<f64>,
    pub response: Option<Vec<f64>>,
    pub inlier_mask: Option<Vec<bool>>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| OrlError::Format(format!("{what} {v} exceeds u32")))
}

impl Dataset {
    pub fn new(
        samples: DMatrix<f64>,
        response: Option<Vec<f64>>,
        inlier_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = samples.ncols();
        if let Some(y) = &response {
            check_dim("dataset response", n, y.len())?;
        }
        if let Some(m) = &inlier_mask {
            check_dim("dataset mask", n, m.len())?;
        }
        Ok(Self {
            samples,
            response,
            inlier_mask,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let (p, n) = self.samples.shape();
        let mut flags = 0;
        if self.response.is_some() {
            flags |= HAS_RESPONSE;
        }
        if self.inlier_mask.is_some() {
            flags |= HAS_MASK;
        }
        w.write_all(MAGIC)?;
        for v in [VERSION, to_u32(p, "p")?, to_u32(n, "N")?, flags] {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..p {
            for j in 0..n {
                w.write_all(&self.samples[(i, j)].to_le_bytes())?;
            }
        }
        if let Some(y) = &self.response {
            for v in y {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        if let Some(mask) = &self.inlier_mask {
            let mut bytes = vec![0u8; n.div_ceil(8)];
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                bytes[i / 8] |= 1 << (i % 8);
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(OrlError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(OrlError::Format(format!("unsupported version {version}")));
        }
        let p = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let flags = read_u32(r)?;
        if flags & !(HAS_RESPONSE | HAS_MASK) != 0 {
            return Err(OrlError::Format(format!("unknown flags {flags:#x}")));
        }
        let samples = DMatrix::from_row_slice(p, n, &read_f64s(r, p * n)?);
        let response = if flags & HAS_RESPONSE != 0 {
            Some(read_f64s(r, n)?)
        } else {
            None
        };
        let inlier_mask = if flags & HAS_MASK != 0 {
            let mut bytes = vec![0u8; n.div_ceil(8)];
            r.read_exact(&mut bytes)?;
            Some((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
        } else {
            None
        };
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(OrlError::Format("trailing bytes".into()));
        }
        Self::new(samples, response, inlier_mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// One row per sample: `x0..x{p-1}`, then `y` and `inlier` when present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let p = self.samples.nrows();
        let mut header: Vec<String> = (0..p).map(|i| format!("x{i}")).collect();
        if self.response.is_some() {
            header.push("y".into());
        }
        if self.inlier_mask.is_some() {
            header.push("inlier".into());
        }
        w.write_record(&header)?;
        for (j, col) in self.samples.column_iter().enumerate() {
            let mut row: Vec<String> = col.iter().map(|v| format!("{v:.16e}")).collect();
            if let Some(y) = &self.response {
                row.push(format!("{:.16e}", y[j]));
            }
            if let Some(m) = &self.inlier_mask {
                row.push(u8::from(m[j]).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
