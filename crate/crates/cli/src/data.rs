//! Dataset and checkpoint files, all in the named-array container.
//!
//! A volume file holds `target` (spatial extents), `full` and `kspace`
//! (coils first), `mask` and `acs` (one `[start, end)` row per axis).
//! Later stages add `filled` (RAKI) or `coils` (K-Net images). Scalar
//! settings are stored as one-element `meta:<key>` entries.

use std::path::Path;

use fasterfc::container::{Container, PROVENANCE_PREFIX};
use fasterfc::kspace::AcsRegion;
use fasterfc::volume::KSpaceVolume;
use fasterfc::{CArray, Error, Result, Tensor};

pub fn put_meta(c: &mut Container, key: &str, v: f64) -> Result<()> {
    c.push(format!("meta:{key}"), Tensor::scalar(v))
}

pub fn meta(c: &Container, key: &str) -> Result<f64> {
    Ok(c.tensor(&format!("meta:{key}"))?.data()[0])
}

pub fn meta_usize(c: &Container, key: &str) -> Result<usize> {
    let v = meta(c, key)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Container {
            msg: format!("meta:{key} = {v} is not a count"),
            offset: 0,
        });
    }
    Ok(v as usize)
}

fn acs_tensor(acs: &AcsRegion) -> Tensor {
    let flat = acs.ranges.iter().flat_map(|r| [r.start as f64, r.end as f64]).collect();
    Tensor::from_vec(&[acs.ranges.len(), 2], flat).expect("two columns")
}

fn acs_from(t: &Tensor) -> AcsRegion {
    AcsRegion {
        ranges: t.data().chunks_exact(2).map(|p| p[0] as usize..p[1] as usize).collect(),
    }
}

/// Adds the measurement entries of `k` to `c`.
pub fn put_kspace(c: &mut Container, k: &KSpaceVolume) -> Result<()> {
    c.push("kspace", k.data.clone())?;
    c.push("mask", k.mask.clone())?;
    c.push("acs", acs_tensor(&k.acs))
}

/// Measured k-space with its mask and calibration region.
pub fn kspace(c: &Container) -> Result<KSpaceVolume> {
    let data = c.complex("kspace")?;
    let acs = acs_from(c.tensor("acs")?);
    acs.validate(&data.shape()[1..])?;
    KSpaceVolume::undersample(data, c.tensor("mask")?, acs)
}

pub fn tensor(c: &Container, name: &str) -> Result<Tensor> {
    c.tensor(name).cloned()
}

pub fn complex(c: &Container, name: &str) -> Result<CArray> {
    c.complex(name).cloned()
}

/// Copies every entry except provenance, for stages that extend a file.
pub fn copy_entries(from: &Container, to: &mut Container) -> Result<()> {
    for (name, a) in &from.entries {
        if name.starts_with(PROVENANCE_PREFIX) {
            continue;
        }
        to.push(name.clone(), a.clone())?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    Container::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Writes `c` after creating the parent directory.
pub fn save(c: &Container, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    c.save(path)
}
