//! Binary dataset container.
//!
//! ```text
//! magic "TRIPDSET" | version u32 | joints u32 | feat_dim u32 | count u64 | seed u64
//! | nuisance f64 | camera_spread f64 | test_fraction f64
//! | count × record | crc32 u32
//! record = frame_id u64 | split u8 | pose3d 3J f64 | pose2d 2J f64
//!        | bbox (cx, cy, size) f64 | image_feat F f64 | camera 15 f64
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::camera::{BBox, Camera};
use crate::synth::dataset::{flatten3, unflatten3, Dataset, GenConfig, PoseSample, Split};
use crate::util::{write_atomic, ByteReader, ByteWriter};

pub const DATASET_MAGIC: &[u8; 8] = b"TRIPDSET";
pub const DATASET_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 8 + 3 * 8;

fn record_len(joints: usize, feat_dim: usize) -> usize {
    8 + 1 + 8 * (5 * joints + 3 + feat_dim + 15)
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let c = ds.config();
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(c.joints as u32);
    w.u32(c.feat_dim as u32);
    w.u64(ds.len() as u64);
    w.u64(c.seed);
    w.f64(c.nuisance);
    w.f64(c.camera_spread);
    w.f64(c.test_fraction);
    for s in ds.samples() {
        w.u64(s.frame_id);
        w.u8(match s.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        w.f64s(&flatten3(&s.pose3d));
        for p in &s.pose2d {
            w.f64s(p);
        }
        w.f64s(&[s.bbox.center[0], s.bbox.center[1], s.bbox.size]);
        w.f64s(&s.image_feat);
        w.f64s(&s.camera.to_flat());
    }
    w.finish_with_crc()
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::open(buf, DATASET_MAGIC, DATASET_VERSION, "dataset")?;
    let joints = r.u32()? as usize;
    let feat_dim = r.u32()? as usize;
    let count = r.u64()?;
    let seed = r.u64()?;
    let nuisance = r.f64()?;
    let camera_spread = r.f64()?;
    let test_fraction = r.f64()?;
    debug_assert_eq!(r.position(), HEADER_LEN);
    let payload = usize::try_from(count)
        .ok()
        .and_then(|n| n.checked_mul(record_len(joints, feat_dim)))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Truncated(format!("dataset declares {count} records")))?;
    r.verify_crc(payload)?;
    let config = GenConfig {
        size: count as usize,
        joints,
        feat_dim,
        seed,
        nuisance,
        camera_spread,
        test_fraction,
    };
    config.validate()?;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let frame_id = r.u64()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            b => return Err(Error::invalid(format!("unknown split tag {b}"))),
        };
        let pose3d = unflatten3(&r.f64s(3 * joints)?);
        let pose2d = r.f64s(2 * joints)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let b = r.f64s(3)?;
        let image_feat = r.f64s(feat_dim)?;
        let camera = Camera::from_flat(&r.f64s(15)?)?;
        samples.push(PoseSample {
            frame_id,
            split,
            pose3d,
            pose2d,
            bbox: BBox {
                center: [b[0], b[1]],
                size: b[2],
            },
            image_feat,
            camera,
        });
    }
    Dataset::from_parts(config, samples)
}

/// Writes atomically: readers never observe a partial file.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

/// CRC32 of the whole encoded dataset (a stable content fingerprint).
pub fn dataset_checksum(ds: &Dataset) -> u32 {
    crc32fast::hash(&dataset_to_bytes(ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(size: usize) -> Dataset {
        Dataset::generate(GenConfig {
            size,
            joints: 6,
            feat_dim: 5,
            seed: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = ds(20);
        let bytes = dataset_to_bytes(&d);
        assert_eq!(bytes.len(), HEADER_LEN + 20 * record_len(6, 5) + 4);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(dataset_to_bytes(&back), bytes);
    }

    #[test]
    fn empty_dataset() {
        let d = ds(0);
        let back = dataset_from_bytes(&dataset_to_bytes(&d)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn distinct_failure_modes() {
        let bytes = dataset_to_bytes(&ds(3));
        let mut corrupt = bytes.clone();
        corrupt[HEADER_LEN + 20] ^= 0x40;
        assert!(matches!(dataset_from_bytes(&corrupt), Err(Error::Checksum { .. })));
        assert!(matches!(
            dataset_from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated(_))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            dataset_from_bytes(&v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(dataset_from_bytes(b"nope"), Err(Error::BadMagic { .. })));
    }
}
