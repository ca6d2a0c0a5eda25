//! Raw binary dataset container:
//! `"SCDS"`, version `u16`, then `N, H, W, C, num_classes` as little-endian `u32`,
//! then `N·H·W·C` pixel bytes, then `N` label bytes.

use std::io::{Read, Write};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const SCDS_MAGIC: &[u8; 4] = b"SCDS";
pub const SCDS_VERSION: u16 = 1;

pub fn write_scds(data: &Dataset, mut w: impl Write) -> Result<()> {
    if data.num_classes > 256 {
        return Err(Error::Format("label bytes hold at most 256 classes".into()));
    }
    w.write_all(SCDS_MAGIC)?;
    w.write_all(&SCDS_VERSION.to_le_bytes())?;
    for v in [data.len(), data.height, data.width, data.channels, data.num_classes] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&data.pixels)?;
    let labels: Vec<u8> = data.labels.iter().map(|&l| l as u8).collect();
    w.write_all(&labels)?;
    Ok(())
}

pub fn read_scds(mut r: impl Read, split: Split) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != SCDS_MAGIC {
        return Err(Error::Format("not an SCDS file".into()));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version).map_err(|_| Error::Format("truncated header".into()))?;
    let version = u16::from_le_bytes(version);
    if version != SCDS_VERSION {
        return Err(Error::Format(format!("unsupported SCDS version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated header".into()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [n, h, w, c, classes] = dims;
    let mut pixels = vec![0u8; n * h * w * c];
    r.read_exact(&mut pixels).map_err(|_| Error::Format("truncated pixel block".into()))?;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels).map_err(|_| Error::Format("truncated label block".into()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Dataset::new(h, w, c, classes, pixels, labels.into_iter().map(usize::from).collect(), split)
}
