//! Binary field container plus JSON sidecar.
//!
//! Layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `NSFC` |
//! | 4     | format version (u32, currently 1) |
//! | 4     | dim n (u32) |
//! | 4     | points per axis N (u32) |
//! | 8     | box length L (f64) |
//! | 4     | component count (u32) |
//! | 1     | representation: 0 physical, 1 spectral |
//! | 3     | zero padding |
//!
//! followed by the components in order, each a row-major `N^n` array of f64
//! (physical) or of interleaved `re, im` f64 pairs (spectral).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Components, Representation};
use crate::grid::GridSpec;

const MAGIC: &[u8; 4] = b"NSFC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Scalar,
    Vector,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub kind: FieldKind,
    pub grid: GridSpec,
    pub components: usize,
    pub representation: Representation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(c: &Components) -> Vec<u8> {
    let g = c.grid();
    let spectral = c.repr() == Representation::Spectral;
    let per = if spectral { 16 } else { 8 };
    let mut out = Vec::with_capacity(HEADER_LEN + c.count() * g.len() * per);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(g.dim as u32).to_le_bytes());
    out.extend_from_slice(&(g.points_per_axis as u32).to_le_bytes());
    out.extend_from_slice(&g.box_length.to_le_bytes());
    out.extend_from_slice(&(c.count() as u32).to_le_bytes());
    out.push(spectral as u8);
    out.extend_from_slice(&[0u8; 3]);
    for comp in c.data() {
        for v in comp {
            out.extend_from_slice(&v.re.to_le_bytes());
            if spectral {
                out.extend_from_slice(&v.im.to_le_bytes());
            }
        }
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Decodes a container; the dealias fraction is not stored and takes `dealias`.
pub fn decode(bytes: &[u8], dealias: f64) -> Result<Components> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a field container".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dim = u32_at(bytes, 8) as usize;
    let n = u32_at(bytes, 12) as usize;
    let l = f64_at(bytes, 16);
    let count = u32_at(bytes, 24) as usize;
    let repr = match bytes[28] {
        0 => Representation::Physical,
        1 => Representation::Spectral,
        t => return Err(Error::Format(format!("unknown representation tag {t}"))),
    };
    let grid = GridSpec::new(dim, n, l)?.with_dealias(dealias)?;
    let per = if repr == Representation::Spectral { 16 } else { 8 };
    let expected = HEADER_LEN + count * grid.len() * per;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "container holds {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    let mut at = HEADER_LEN;
    for _ in 0..count {
        let mut comp = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            let re = f64_at(bytes, at);
            let im = if per == 16 { f64_at(bytes, at + 8) } else { 0.0 };
            comp.push(Complex64::new(re, im));
            at += per;
        }
        data.push(comp);
    }
    let mut c = Components::zeros(&grid, repr, 0);
    *c.data_vec_mut() = data;
    Ok(c)
}

pub fn write_field(path: &Path, c: &Components, kind: FieldKind, time: Option<f64>) -> Result<()> {
    write_field_with(path, c, kind, time, BTreeMap::new())
}

pub fn write_field_with(
    path: &Path,
    c: &Components,
    kind: FieldKind,
    time: Option<f64>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&encode(c))?;
    let side = Sidecar {
        format: "nsforce-field".into(),
        version: VERSION,
        kind,
        grid: c.grid().clone(),
        components: c.count(),
        representation: c.repr(),
        time,
        metadata,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(Components, Sidecar)> {
    let side_path = sidecar_path(path);
    if !side_path.exists() {
        return Err(Error::MissingArtifact(side_path.display().to_string()));
    }
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(&side_path)?)?;
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    let c = decode(&bytes, side.grid.dealias_fraction)?;
    if c.grid() != &side.grid || c.count() != side.components || c.repr() != side.representation {
        return Err(Error::Format(format!(
            "sidecar {} disagrees with container header",
            side_path.display()
        )));
    }
    Ok((c, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_representations() {
        let g = GridSpec::new(2, 16, 3.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<Vec<f64>> = (0..2).map(|c| (0..g.len()).map(|i| (i * (c + 1)) as f64 * 0.1).collect()).collect();
        let phys = Components::from_physical(&g, vals).unwrap();
        let spec = Components::from_spectral(&g, vec![vec![Complex64::new(1.5, -2.0); g.len()]]).unwrap();
        for (name, c) in [("p.bin", &phys), ("s.bin", &spec)] {
            let p = dir.path().join(name);
            write_field(&p, c, FieldKind::Vector, Some(0.5)).unwrap();
            let (back, side) = read_field(&p).unwrap();
            assert_eq!(back.data(), c.data());
            assert_eq!(back.repr(), c.repr());
            assert_eq!(side.time, Some(0.5));
        }
    }

    #[test]
    fn rejects_truncated_data() {
        let g = GridSpec::new(2, 16, 1.0).unwrap();
        let c = Components::zeros(&g, Representation::Physical, 2);
        let mut b = encode(&c);
        b.pop();
        assert!(matches!(decode(&b, 2.0 / 3.0), Err(Error::Format(_))));
        assert!(decode(b"junk", 2.0 / 3.0).is_err());
    }
}
