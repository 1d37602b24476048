//! Bag cache file.
//!
//! Layout (little-endian): magic `MILBAGS1`, `u32` header length, JSON header,
//! then per bag: `u32` cardinality, `u8` target tag (0 none, 1 binary,
//! 2 count), `u32` target value, one label byte per instance, and the raw
//! pixel bytes of every instance.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Bag, BagTarget, ScenarioKind, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MILBAGS1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagCacheHeader {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub n_bags: usize,
    pub m: f64,
    pub sigma: f64,
    pub outlier_count: usize,
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
}

pub fn write_bag_cache(mut out: impl Write, header: &BagCacheHeader, bags: &[Bag]) -> Result<()> {
    if header.n_bags != bags.len() {
        return Err(Error::Consistency(format!(
            "header declares {} bags, writing {}",
            header.n_bags,
            bags.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for bag in bags {
        if bag.rows() != header.rows || bag.cols() != header.cols {
            return Err(Error::Consistency("bag image size differs from header".into()));
        }
        out.write_all(&(bag.len() as u32).to_le_bytes())?;
        let (tag, value) = match bag.target() {
            None => (0u8, 0u32),
            Some(BagTarget::Binary(b)) => (1, u32::from(b)),
            Some(BagTarget::Count(c)) => (2, c),
        };
        out.write_all(&[tag])?;
        out.write_all(&value.to_le_bytes())?;
        out.write_all(bag.latent_labels())?;
        for img in bag.instances() {
            out.write_all(img)?;
        }
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Length(format!("bag cache truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Length(format!("bag cache truncated: {e}")))
}

pub fn read_bag_cache(mut input: impl Read) -> Result<(BagCacheHeader, Vec<Bag>)> {
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bag cache: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let len = read_u32(&mut input)? as usize;
    let mut json = vec![0u8; len];
    read_exact(&mut input, &mut json)?;
    let header: BagCacheHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("bag cache header: {e}")))?;
    let side = header.rows * header.cols;
    let mut bags = Vec::with_capacity(header.n_bags);
    for _ in 0..header.n_bags {
        let m = read_u32(&mut input)? as usize;
        let mut tag = [0u8];
        read_exact(&mut input, &mut tag)?;
        let value = read_u32(&mut input)?;
        let target = match tag[0] {
            0 => None,
            1 => Some(BagTarget::Binary(value != 0)),
            2 => Some(BagTarget::Count(value)),
            t => return Err(Error::Format(format!("bag cache: unknown target tag {t}"))),
        };
        let mut labels = vec![0u8; m];
        read_exact(&mut input, &mut labels)?;
        let mut instances = Vec::with_capacity(m);
        for _ in 0..m {
            let mut px = vec![0u8; side];
            read_exact(&mut input, &mut px)?;
            instances.push(Arc::from(px));
        }
        bags.push(Bag::new(header.rows, header.cols, instances, labels, target)?);
    }
    Ok((header, bags))
}
