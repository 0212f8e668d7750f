//! Binary artifact formats (little-endian, 32-bit floats on disk) and JSON
//! helpers.
//!
//! | format | layout |
//! |--------|--------|
//! | GSB1 | `b"GSB1\0\0\0\0"`, u32 P, u32 C, P × (mean 3, scale 3, quat wxyz 4, opacity 1, logits C) f32, P × (view, row, col) u32 |
//! | DPM1 | `b"DPM1"`, u32 H, u32 W, H·W f32 depth, H·W f32 uncertainty |
//! | OCC1 | `b"OCC1"`, u32 X, Y, Z, f32 origin ×3, f32 voxel size, u32 empty id (= C), X·Y·Z u8 labels |
//! | OCP1 | `b"OCP1"`, u32 X, Y, Z, u32 channels, X·Y·Z·channels f32 |

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{DepthMap, GaussianPrimitive, GaussianSet, GridGeometry, OccupancyGrid, Provenance, Quat};
use crate::render::SemanticOccupancyField;

pub const GSB_MAGIC: &[u8; 8] = b"GSB1\0\0\0\0";
pub const DPM_MAGIC: &[u8; 4] = b"DPM1";
pub const OCC_MAGIC: &[u8; 4] = b"OCC1";
pub const PROBS_MAGIC: &[u8; 4] = b"OCP1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(Error::Format(format!("{}: bad magic", self.what)));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_gsb(g: &GaussianSet) -> Result<Vec<u8>> {
    let c = g.num_classes();
    let mut out = Vec::with_capacity(16 + g.len() * (4 * (11 + c) + 12));
    out.extend_from_slice(GSB_MAGIC);
    put_u32(&mut out, g.len())?;
    put_u32(&mut out, c)?;
    for p in g.primitives() {
        for v in p.mean.iter().chain(p.scale.iter()) {
            put_f32(&mut out, *v);
        }
        for v in p.rotation.to_array() {
            put_f32(&mut out, v);
        }
        put_f32(&mut out, p.opacity);
        for v in &p.semantics {
            put_f32(&mut out, *v);
        }
    }
    for s in g.provenance() {
        for v in [s.view, s.row, s.col] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_gsb(buf: &[u8]) -> Result<GaussianSet> {
    let mut r = Reader::new(buf, "GSB1");
    r.magic(GSB_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let mut prims = Vec::with_capacity(n.min(buf.len() / 44));
    for _ in 0..n {
        let f = r.f32s(11 + c)?;
        let rotation = Quat::new(f[6], f[7], f[8], f[9]);
        // f32 storage can push a unit quaternion off unit norm by ~1e-7.
        let rotation = if rotation.is_unit() { rotation } else { rotation.normalized() };
        prims.push(GaussianPrimitive::new(
            Vector3::new(f[0], f[1], f[2]),
            Vector3::new(f[3], f[4], f[5]),
            rotation,
            f[10],
            f[11..].to_vec(),
        )?);
    }
    let mut prov = Vec::with_capacity(n);
    for _ in 0..n {
        prov.push(Provenance::new(r.u32()?, r.u32()?, r.u32()?));
    }
    r.finish()?;
    GaussianSet::new(c, prims, prov)
}

pub fn encode_dpm(d: &DepthMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * d.depth.len());
    out.extend_from_slice(DPM_MAGIC);
    put_u32(&mut out, d.height)?;
    put_u32(&mut out, d.width)?;
    for v in d.depth.iter().chain(&d.uncertainty) {
        put_f32(&mut out, *v);
    }
    Ok(out)
}

pub fn decode_dpm(buf: &[u8]) -> Result<DepthMap> {
    let mut r = Reader::new(buf, "DPM1");
    r.magic(DPM_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let depth = r.f32s(h * w)?;
    let unc = r.f32s(h * w)?;
    r.finish()?;
    DepthMap::new(h, w, depth, unc)
}

pub fn encode_occ(g: &OccupancyGrid) -> Result<Vec<u8>> {
    let geo = &g.geometry;
    let mut out = Vec::with_capacity(36 + g.labels.len());
    out.extend_from_slice(OCC_MAGIC);
    for d in geo.dims {
        put_u32(&mut out, d)?;
    }
    for v in geo.origin.iter() {
        put_f32(&mut out, *v);
    }
    put_f32(&mut out, geo.voxel_size);
    put_u32(&mut out, g.num_classes)?;
    out.extend_from_slice(&g.labels);
    Ok(out)
}

pub fn decode_occ(buf: &[u8]) -> Result<OccupancyGrid> {
    let mut r = Reader::new(buf, "OCC1");
    r.magic(OCC_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
    let voxel = r.f32()?;
    let c = r.u32()? as usize;
    let geometry = GridGeometry::new(dims, origin, voxel)?;
    let labels = r.take(geometry.num_voxels())?.to_vec();
    r.finish()?;
    OccupancyGrid::new(geometry, c, labels)
}

pub fn encode_probs(f: &SemanticOccupancyField) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 4 * f.probs.len());
    out.extend_from_slice(PROBS_MAGIC);
    for d in f.geometry.dims {
        put_u32(&mut out, d)?;
    }
    put_u32(&mut out, f.channels())?;
    for v in &f.probs {
        put_f32(&mut out, *v);
    }
    Ok(out)
}

/// Dims, channel count and the flat probability field of an OCP1 dump.
pub fn decode_probs(buf: &[u8]) -> Result<([usize; 3], usize, Vec<f64>)> {
    let mut r = Reader::new(buf, "OCP1");
    r.magic(PROBS_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let ch = r.u32()? as usize;
    let data = r.f32s(dims.iter().product::<usize>() * ch)?;
    r.finish()?;
    Ok((dims, ch, data))
}

/// Path with `.partial` appended to the file name.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes to `<path>.partial`, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_gsb(path: &Path, g: &GaussianSet) -> Result<()> {
    write_atomic(path, &encode_gsb(g)?)
}

pub fn read_gsb(path: &Path) -> Result<GaussianSet> {
    decode_gsb(&fs::read(path)?)
}

pub fn write_dpm(path: &Path, d: &DepthMap) -> Result<()> {
    write_atomic(path, &encode_dpm(d)?)
}

pub fn read_dpm(path: &Path) -> Result<DepthMap> {
    decode_dpm(&fs::read(path)?)
}

pub fn write_occ(path: &Path, g: &OccupancyGrid) -> Result<()> {
    write_atomic(path, &encode_occ(g)?)
}

pub fn read_occ(path: &Path) -> Result<OccupancyGrid> {
    decode_occ(&fs::read(path)?)
}

pub fn write_probs(path: &Path, f: &SemanticOccupancyField) -> Result<()> {
    write_atomic(path, &encode_probs(f)?)
}

/// Rounds every stored float through f32 so in-memory data matches a reload.
pub fn quantize_gsb(g: &GaussianSet) -> Result<GaussianSet> {
    decode_gsb(&encode_gsb(g)?)
}

pub fn quantize_dpm(d: &DepthMap) -> Result<DepthMap> {
    decode_dpm(&encode_dpm(d)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> GaussianSet {
        let q = Quat::new(0.5, -0.5, 0.5, 0.5);
        let a = GaussianPrimitive::new(Vector3::new(1.25, -2.5, 0.75), Vector3::new(0.25, 0.5, 1.0), q, 0.5, vec![1.0, -3.0, 0.5])
            .unwrap();
        let b = GaussianPrimitive::new(Vector3::zeros(), Vector3::repeat(0.125), Quat::IDENTITY, 1.0, vec![0.0; 3]).unwrap();
        GaussianSet::new(3, vec![a, b], vec![Provenance::new(0, 1, 2), Provenance::new(5, 6, 7)]).unwrap()
    }

    #[test]
    fn gsb_round_trip_exact_for_f32_values() {
        let g = set();
        let bytes = encode_gsb(&g).unwrap();
        assert_eq!(&bytes[..8], GSB_MAGIC);
        assert_eq!(bytes.len(), 16 + 2 * 4 * 14 + 2 * 12);
        assert_eq!(decode_gsb(&bytes).unwrap(), g);
    }

    #[test]
    fn gsb_rejects_truncation() {
        let bytes = encode_gsb(&set()).unwrap();
        assert!(matches!(decode_gsb(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_gsb(b"nope"), Err(Error::Format(_))));
    }

    #[test]
    fn dpm_keeps_sentinel() {
        let d = DepthMap::new(1, 3, vec![1.5, f64::INFINITY, 0.0], vec![0.5, 1.0, 2.0]).unwrap();
        let back = decode_dpm(&encode_dpm(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn occ_round_trip() {
        let geo = GridGeometry::new([2, 3, 1], Vector3::new(-1.0, 0.5, 2.0), 0.5).unwrap();
        let g = OccupancyGrid::new(geo, 4, vec![0, 1, 4, 3, 2, 4]).unwrap();
        let bytes = encode_occ(&g).unwrap();
        assert_eq!(bytes.len(), 4 + 12 + 16 + 4 + 6);
        assert_eq!(decode_occ(&bytes).unwrap(), g);
    }

    #[test]
    fn partial_suffix() {
        assert_eq!(partial_path(Path::new("a/b.occ")), PathBuf::from("a/b.occ.partial"));
    }
}
