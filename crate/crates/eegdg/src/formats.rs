//! Binary dataset containers: EDG1 domain files and EDGR raw recordings.
//! Both are little-endian and round-trip bitwise.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{DomainDataset, RawRecording};
use crate::tensor::Tensor;

const DOMAIN_MAGIC: &[u8; 4] = b"EDG1";
const RECORDING_MAGIC: &[u8; 4] = b"EDGR";
const VERSION: u32 = 1;

/// Byte reader that reports the offset of whatever failed.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8-byte slice")))
    }

    fn f64_block(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format {
                offset: self.pos as u64,
                message: format!("{what} size overflows"),
            })?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn check_magic(c: &mut Cursor, want: &[u8; 4]) -> Result<()> {
    let got = c.take(4, "magic")?;
    if got != want {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            ),
        });
    }
    Ok(())
}

fn check_version(c: &mut Cursor) -> Result<()> {
    let at = c.pos as u64;
    let v = c.u32("version")?;
    if v != VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {v}, expected {VERSION}"),
        });
    }
    Ok(())
}

fn u32_fits(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::ingestion(format!("{what} {value} exceeds u32 range")))
}

/// Serializes a domain dataset to the EDG1 layout.
pub fn domain_to_bytes(ds: &DomainDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(28 + ds.y.len() * 4 + ds.x.numel() * 8);
    out.extend_from_slice(DOMAIN_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_fits(ds.domain_id, "domain_id")?.to_le_bytes());
    out.extend_from_slice(&u32_fits(ds.class_count, "class_count")?.to_le_bytes());
    out.extend_from_slice(&u32_fits(ds.n_samples(), "n_samples")?.to_le_bytes());
    out.extend_from_slice(&u32_fits(ds.n_channels(), "n_channels")?.to_le_bytes());
    out.extend_from_slice(&u32_fits(ds.n_timesteps(), "n_timesteps")?.to_le_bytes());
    for &label in &ds.y {
        out.extend_from_slice(&u32_fits(label, "label")?.to_le_bytes());
    }
    for &v in ds.x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses EDG1 bytes; failures report the byte offset.
pub fn domain_from_bytes(buf: &[u8]) -> Result<DomainDataset> {
    let mut c = Cursor::new(buf);
    check_magic(&mut c, DOMAIN_MAGIC)?;
    check_version(&mut c)?;
    let domain_id = c.u32("domain_id")? as usize;
    let class_count = c.u32("class_count")? as usize;
    let n_samples = c.u32("n_samples")? as usize;
    let n_channels = c.u32("n_channels")? as usize;
    let n_timesteps = c.u32("n_timesteps")? as usize;
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let at = c.pos as u64;
        let label = c.u32("label")? as usize;
        if label >= class_count {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "label {label} of sample {i} out of range for {class_count} classes"
                ),
            });
        }
        labels.push(label);
    }
    let count = n_samples
        .checked_mul(n_channels)
        .and_then(|v| v.checked_mul(n_timesteps))
        .ok_or_else(|| Error::Format {
            offset: c.pos as u64,
            message: "payload size overflows".to_string(),
        })?;
    let data = c.f64_block(count, "payload")?;
    c.finish()?;
    let x = Tensor::new(vec![n_samples, n_channels, n_timesteps], data)?;
    DomainDataset::new(x, labels, domain_id, class_count)
}

pub fn save_domain_file(ds: &DomainDataset, path: &Path) -> Result<()> {
    fs::write(path, domain_to_bytes(ds)?)
        .map_err(|e| Error::ingestion(format!("writing {}: {e}", path.display())))
}

pub fn load_domain_file(path: &Path) -> Result<DomainDataset> {
    let buf = fs::read(path)
        .map_err(|e| Error::ingestion(format!("reading {}: {e}", path.display())))?;
    domain_from_bytes(&buf).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Serializes a raw recording to the EDGR layout: magic, version, n_channels,
/// n_timesteps, fs_hz (f64), n_markers, (onset, label) pairs, then the [c,t]
/// payload. Channel names are not stored.
pub fn recording_to_bytes(rec: &RawRecording) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + rec.markers.len() * 8 + rec.data.numel() * 8);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_fits(rec.n_channels(), "n_channels")?.to_le_bytes());
    out.extend_from_slice(&u32_fits(rec.n_timesteps(), "n_timesteps")?.to_le_bytes());
    out.extend_from_slice(&rec.fs_hz.to_le_bytes());
    out.extend_from_slice(&u32_fits(rec.markers.len(), "n_markers")?.to_le_bytes());
    for &(onset, label) in &rec.markers {
        out.extend_from_slice(&u32_fits(onset, "marker onset")?.to_le_bytes());
        out.extend_from_slice(&u32_fits(label, "marker label")?.to_le_bytes());
    }
    for &v in rec.data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses EDGR bytes; failures report the byte offset.
pub fn recording_from_bytes(buf: &[u8]) -> Result<RawRecording> {
    let mut c = Cursor::new(buf);
    check_magic(&mut c, RECORDING_MAGIC)?;
    check_version(&mut c)?;
    let n_channels = c.u32("n_channels")? as usize;
    let n_timesteps = c.u32("n_timesteps")? as usize;
    let at_fs = c.pos as u64;
    let fs_hz = c.f64("fs_hz")?;
    if !(fs_hz.is_finite() && fs_hz > 0.0) {
        return Err(Error::Format {
            offset: at_fs,
            message: format!("sample rate {fs_hz} must be finite and positive"),
        });
    }
    let n_markers = c.u32("n_markers")? as usize;
    let mut markers = Vec::with_capacity(n_markers);
    for i in 0..n_markers {
        let at = c.pos as u64;
        let onset = c.u32("marker onset")? as usize;
        let label = c.u32("marker label")? as usize;
        if onset >= n_timesteps {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "marker {i} onset {onset} outside recording of {n_timesteps} samples"
                ),
            });
        }
        markers.push((onset, label));
    }
    let count = n_channels.checked_mul(n_timesteps).ok_or_else(|| Error::Format {
        offset: c.pos as u64,
        message: "payload size overflows".to_string(),
    })?;
    let data = c.f64_block(count, "payload")?;
    c.finish()?;
    RawRecording::new(Tensor::new(vec![n_channels, n_timesteps], data)?, fs_hz, markers, vec![])
}

pub fn save_recording_file(rec: &RawRecording, path: &Path) -> Result<()> {
    fs::write(path, recording_to_bytes(rec)?)
        .map_err(|e| Error::ingestion(format!("writing {}: {e}", path.display())))
}

pub fn load_recording_file(path: &Path) -> Result<RawRecording> {
    let buf = fs::read(path)
        .map_err(|e| Error::ingestion(format!("reading {}: {e}", path.display())))?;
    recording_from_bytes(&buf).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_domain() -> DomainDataset {
        let x = Tensor::new(
            vec![2, 3, 4],
            (0..24).map(|v| v as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        DomainDataset::new(x, vec![1, 0], 7, 2).unwrap()
    }

    #[test]
    fn domain_round_trip_is_bitwise_equal() {
        let ds = sample_domain();
        let bytes = domain_to_bytes(&ds).unwrap();
        let back = domain_from_bytes(&bytes).unwrap();
        assert_eq!(back.domain_id, ds.domain_id);
        assert_eq!(back.class_count, ds.class_count);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.x.shape(), ds.x.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.x), bits(&ds.x));
        // And the re-serialization is byte-identical.
        assert_eq!(domain_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn nan_payload_still_round_trips_bitwise() {
        let mut ds = sample_domain();
        ds.x.data_mut()[5] = f64::NAN;
        let bytes = domain_to_bytes(&ds).unwrap();
        let back = domain_from_bytes(&bytes).unwrap();
        assert_eq!(back.x.data()[5].to_bits(), f64::NAN.to_bits());
    }

    #[test]
    fn bad_magic_is_a_format_error_at_offset_zero() {
        let mut bytes = domain_to_bytes(&sample_domain()).unwrap();
        bytes[0] = b'X';
        match domain_from_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_reports_offset_four() {
        let mut bytes = domain_to_bytes(&sample_domain()).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        match domain_from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_the_cut_offset() {
        // Header says 2x3x4 = 24 values but only 23 are present.
        let bytes = domain_to_bytes(&sample_domain()).unwrap();
        let cut = &bytes[..bytes.len() - 8];
        match domain_from_bytes(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, 28 + 2 * 4);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_reports_its_offset() {
        let mut bytes = domain_to_bytes(&sample_domain()).unwrap();
        // First label starts right after the 28-byte header.
        bytes[28..32].copy_from_slice(&5u32.to_le_bytes());
        match domain_from_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 28);
                assert!(message.contains("label 5"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = domain_to_bytes(&sample_domain()).unwrap();
        bytes.push(0);
        assert!(matches!(domain_from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn domain_file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d0.edg1");
        let ds = sample_domain();
        save_domain_file(&ds, &path).unwrap();
        let back = load_domain_file(&path).unwrap();
        assert_eq!(back.y, ds.y);
        assert_eq!(back.x.data(), ds.x.data());
    }

    #[test]
    fn load_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.edg1");
        std::fs::write(&path, b"EDGX").unwrap();
        let err = load_domain_file(&path).unwrap_err().to_string();
        assert!(err.contains("broken.edg1"), "{err}");
    }

    #[test]
    fn recording_round_trip_preserves_everything_stored() {
        let rec = RawRecording::new(
            Tensor::new(vec![2, 5], (0..10).map(|v| v as f64 * 1.5).collect()).unwrap(),
            250.0,
            vec![(0, 1), (3, 0)],
            vec![],
        )
        .unwrap();
        let bytes = recording_to_bytes(&rec).unwrap();
        let back = recording_from_bytes(&bytes).unwrap();
        assert_eq!(back.fs_hz, rec.fs_hz);
        assert_eq!(back.markers, rec.markers);
        assert_eq!(back.data.shape(), rec.data.shape());
        assert_eq!(back.data.data(), rec.data.data());
        assert_eq!(recording_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn recording_rejects_marker_past_end() {
        let rec = RawRecording::new(
            Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap(),
            100.0,
            vec![(2, 0)],
            vec![],
        )
        .unwrap();
        let mut bytes = recording_to_bytes(&rec).unwrap();
        // Marker onset field sits after magic+version+dims+fs+n_markers = 28.
        bytes[28..32].copy_from_slice(&99u32.to_le_bytes());
        match recording_from_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 28);
                assert!(message.contains("onset 99"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
