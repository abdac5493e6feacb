use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Sample};

pub const DATASET_MAGIC: &[u8; 4] = b"DBFD";
pub const DATASET_VERSION: u16 = 1;
/// magic + version + n + H + W + K
pub const DATASET_HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1;
const CRC_LEN: usize = 4;

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let n = u32::try_from(ds.samples.len()).map_err(|_| DataError::Invalid("too many samples".into()))?;
    let h = u16::try_from(ds.height).map_err(|_| DataError::Invalid("height exceeds u16".into()))?;
    let w = u16::try_from(ds.width).map_err(|_| DataError::Invalid("width exceeds u16".into()))?;
    let p = ds.height * ds.width;
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + ds.samples.len() * p * 9 + CRC_LEN);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.push(ds.classes);
    for s in &ds.samples {
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.mask);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < DATASET_HEADER_LEN + CRC_LEN {
        return Err(DataError::Truncated {
            expected: DATASET_HEADER_LEN + CRC_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(DataError::Magic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(DataError::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let w = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let k = bytes[14];
    let p = h * w;
    let expected = DATASET_HEADER_LEN + n * p * 9 + CRC_LEN;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::Invalid(format!(
            "{} trailing bytes after dataset",
            bytes.len() - expected
        )));
    }
    let body = &bytes[..expected - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    let mut samples = Vec::with_capacity(n);
    let mut off = DATASET_HEADER_LEN;
    for _ in 0..n {
        let image = body[off..off + 8 * p]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += 8 * p;
        let mask = body[off..off + p].to_vec();
        off += p;
        samples.push(Sample::new(h, w, image, mask)?);
    }
    Dataset::new(h, w, k, samples)
}

pub fn dataset_save(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let bytes = dataset_to_bytes(ds)?;
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn dataset_load(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    dataset_from_bytes(&bytes)
}

/// Binary PGM (P5, maxval 255), min-max scaled; constant inputs map to 0.
pub fn pgm_bytes(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<(), DataError> {
    if values.len() != height * width {
        return Err(DataError::Invalid(format!(
            "{} values for a {height}x{width} image",
            values.len()
        )));
    }
    fs::write(path, pgm_bytes(values, height, width)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
