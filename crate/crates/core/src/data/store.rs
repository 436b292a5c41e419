//! Dataset directory format.
//!
//! A dataset is a directory holding `meta.json` (UTF-8: schema, grid, times,
//! splits, optional stats) and `shard_NNNN.bin` files. Each shard is the
//! little-endian `f32` payload of `[T, C, H, W]` in row-major order followed
//! by an 8-byte checksum (the first 8 bytes of the payload's SHA-256).

use std::path::Path;

use ndarray::{Array4, Axis};

use super::{Dataset, DatasetMeta, ShardInfo};
use crate::util::{f32_from_le_bytes, f32_to_le_bytes, read_checksummed, write_checksummed};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Times per shard file.
const SHARD_LEN: usize = 256;

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_times = ds.meta.n_times;
    let mut shards = Vec::new();
    let mut t = 0;
    let mut idx = 0;
    while t < n_times {
        let len = SHARD_LEN.min(n_times - t);
        let file = format!("shard_{idx:04}.bin");
        let chunk = ds
            .data
            .slice_axis(Axis(0), ndarray::Slice::from(t as isize..(t + len) as isize));
        let chunk = chunk.as_standard_layout();
        let payload = f32_to_le_bytes(chunk.as_slice().unwrap());
        write_checksummed(&dir.join(&file), &payload)?;
        shards.push(ShardInfo {
            file,
            t_start: t,
            n_times: len,
        });
        t += len;
        idx += 1;
    }
    let meta = DatasetMeta {
        shards,
        ..ds.meta.clone()
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(dir.join("meta.json"), json).map_err(|e| Error::io(dir.join("meta.json"), e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound { path: meta_path.clone() }
        } else {
            Error::io(&meta_path, e)
        }
    })?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: meta_path,
            found: meta.version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let (n_lat, n_lon) = meta.grid.shape();
    let n_chan = meta.schema.len();
    let mut data = Array4::<f32>::zeros((meta.n_times, n_chan, n_lat, n_lon));
    for shard in &meta.shards {
        let path = dir.join(&shard.file);
        let payload = read_checksummed(&path)?;
        let values = f32_from_le_bytes(&payload, &path)?;
        let expected = shard.n_times * n_chan * n_lat * n_lon;
        if values.len() != expected {
            return Err(Error::Malformed {
                path,
                reason: format!("expected {expected} values, found {}", values.len()),
            });
        }
        let arr = Array4::from_shape_vec((shard.n_times, n_chan, n_lat, n_lon), values)
            .expect("shard shape");
        data.slice_axis_mut(
            Axis(0),
            ndarray::Slice::from(
                shard.t_start as isize..(shard.t_start + shard.n_times) as isize,
            ),
        )
        .assign(&arr);
    }
    Ok(Dataset { meta, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, Splits, ToyConfig};
    use crate::grid::make_grid;
    use chrono::{TimeZone, Utc};

    fn small_dataset() -> Dataset {
        let grid = make_grid(4, 8).unwrap();
        let cfg = ToyConfig::with_default_omegas(2, 9, 5);
        generate_toy_dataset(
            &cfg,
            &grid,
            Splits::contiguous(3, 1, 1),
            Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_bitwise() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.data, ds.data);
        assert_eq!(back.meta.schema, ds.meta.schema);
        assert_eq!(back.meta.splits, ds.meta.splits);
    }

    #[test]
    fn corrupted_shard_fails_checksum() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let shard = dir.path().join("shard_0000.bin");
        let mut bytes = std::fs::read(&shard).unwrap();
        bytes[10] ^= 0x01;
        std::fs::write(&shard, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn missing_meta_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn version_mismatch_detected() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&meta_path, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
