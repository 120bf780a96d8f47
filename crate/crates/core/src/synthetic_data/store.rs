//! On-disk dataset layout: a `manifest` of `key=value` lines plus one
//! `seq_NNNNN.bin` file of tensor records per sequence.
//!
//! Records per sequence file, in order: identity `[10]`, frames
//! `[T, 3, H, W]`, mouth opening `[T]`, landmarks `[T, 4, 2]`, driver `[T]`,
//! features `[T, 20, 13]`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{AudioTrack, Dataset, DatasetConfig, IdentityParams, MouthScene, Sequence, FEATURE_COEFFS, FEATURE_STEPS};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::kv::{format_shape, parse_shape, KeyValues};
use crate::nn::hex_digest;
use crate::tensor::Tensor;
use crate::tensor_io::{decode_record, encode_record, read_file, sha256_hex, write_file, Record};

pub const FORMAT_TAG: &str = "coherence-lab-dataset";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest";
const RECORDS_PER_SEQUENCE: usize = 6;

/// Parsed manifest contents.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub image_shape: Vec<usize>,
    pub feature_shape: Vec<usize>,
    pub noise: f64,
    pub files: Vec<String>,
    /// Byte offset of each record within its sequence file.
    pub offsets: Vec<Vec<usize>>,
    pub file_checksums: Vec<String>,
    /// SHA-256 over the per-file checksums in order.
    pub checksum: String,
}

impl DatasetManifest {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("format", FORMAT_TAG);
        kv.set("version", self.version);
        kv.set("seed", self.seed);
        kv.set("num_sequences", self.num_sequences);
        kv.set("frames_per_sequence", self.frames_per_sequence);
        kv.set("image_shape", format_shape(&self.image_shape));
        kv.set("feature_shape", format_shape(&self.feature_shape));
        kv.set("noise", self.noise);
        for (i, ((file, offs), sum)) in self.files.iter().zip(&self.offsets).zip(&self.file_checksums).enumerate() {
            kv.set(format!("seq.{i}.file"), file);
            kv.set(format!("seq.{i}.offsets"), offs.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
            kv.set(format!("seq.{i}.sha256"), sum);
        }
        kv.set("checksum", &self.checksum);
        kv
    }

    fn from_kv(kv: &KeyValues, path: &Path) -> Result<Self> {
        let format_err = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let tag = kv.require("format").map_err(|e| format_err(e.to_string()))?;
        if tag != FORMAT_TAG {
            return Err(format_err(format!("unknown format tag {tag:?}")));
        }
        let version: u32 = kv.parse_value("version").map_err(|e| format_err(e.to_string()))?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        let inner = || -> Result<Self> {
            let num_sequences: usize = kv.parse_value("num_sequences")?;
            let mut files = Vec::with_capacity(num_sequences);
            let mut offsets = Vec::with_capacity(num_sequences);
            let mut file_checksums = Vec::with_capacity(num_sequences);
            for i in 0..num_sequences {
                files.push(kv.require(&format!("seq.{i}.file"))?.to_string());
                let offs = kv
                    .require(&format!("seq.{i}.offsets"))?
                    .split(',')
                    .map(|s| s.parse::<usize>().map_err(|e| Error::Validation(format!("offset {s:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                offsets.push(offs);
                file_checksums.push(kv.require(&format!("seq.{i}.sha256"))?.to_string());
            }
            Ok(Self {
                version,
                seed: kv.parse_value("seed")?,
                num_sequences,
                frames_per_sequence: kv.parse_value("frames_per_sequence")?,
                image_shape: parse_shape(kv.require("image_shape")?)?,
                feature_shape: parse_shape(kv.require("feature_shape")?)?,
                noise: kv.parse_value("noise")?,
                files,
                offsets,
                file_checksums,
                checksum: kv.require("checksum")?.to_string(),
            })
        };
        inner().map_err(|e| format_err(e.to_string()))
    }
}

fn combined_checksum(file_checksums: &[String]) -> String {
    let mut h = Sha256::new();
    for c in file_checksums {
        h.update(c.as_bytes());
        h.update(b"\n");
    }
    hex_digest(&h.finalize())
}

fn encode_sequence(seq: &Sequence) -> Result<(Vec<u8>, Vec<usize>)> {
    let t = seq.scene.len();
    let lm: Vec<f32> = seq.scene.landmarks.iter().flat_map(|ps| ps.iter().flat_map(|p| [p.x as f32, p.y as f32])).collect();
    let parts: [(&[usize], &[f32]); RECORDS_PER_SEQUENCE] = [
        (&[IdentityParams::LEN], &seq.scene.identity.to_vec()),
        (seq.scene.frames.shape(), seq.scene.frames.data()),
        (&[t], &seq.scene.mouth_open),
        (&[t, 4, 2], &lm),
        (&[t], &seq.audio.driver),
        (seq.audio.features.shape(), seq.audio.features.data()),
    ];
    let mut bytes = Vec::new();
    let mut offsets = Vec::with_capacity(RECORDS_PER_SEQUENCE);
    for (dims, data) in parts {
        offsets.push(bytes.len());
        encode_record(dims, data, &mut bytes)?;
    }
    Ok((bytes, offsets))
}

/// Writes `dataset` under `dir` (created if needed) and returns the manifest.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &dataset.config;
    let mut files = Vec::new();
    let mut offsets = Vec::new();
    let mut file_checksums = Vec::new();
    for (i, seq) in dataset.sequences.iter().enumerate() {
        if seq.scene.len() != cfg.frames_per_sequence || seq.audio.driver.len() != cfg.frames_per_sequence {
            return Err(Error::Shape(format!("sequence {i} length differs from frames_per_sequence")));
        }
        let (bytes, offs) = encode_sequence(seq)?;
        let name = format!("seq_{i:05}.bin");
        write_file(&dir.join(&name), &bytes)?;
        file_checksums.push(sha256_hex(&bytes));
        files.push(name);
        offsets.push(offs);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        seed: cfg.seed,
        num_sequences: dataset.sequences.len(),
        frames_per_sequence: cfg.frames_per_sequence,
        image_shape: cfg.frame_shape().to_vec(),
        feature_shape: vec![FEATURE_STEPS, FEATURE_COEFFS],
        noise: cfg.noise,
        checksum: combined_checksum(&file_checksums),
        files,
        offsets,
        file_checksums,
    };
    let path = dir.join(MANIFEST);
    write_file(&path, manifest.to_kv().render().as_bytes())?;
    Ok(manifest)
}

fn expect_dims(rec: &Record, dims: &[usize], path: &Path, what: &str) -> Result<()> {
    if rec.dims != dims {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!("{what} has shape {:?}, expected {dims:?}", rec.dims),
        });
    }
    Ok(())
}

fn decode_sequence(bytes: &[u8], manifest: &DatasetManifest, offsets: &[usize], path: &Path) -> Result<Sequence> {
    if offsets.len() != RECORDS_PER_SEQUENCE {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("{} record offsets listed", offsets.len()) });
    }
    let t = manifest.frames_per_sequence;
    let mut records = Vec::with_capacity(RECORDS_PER_SEQUENCE);
    let mut pos = 0;
    for &expected in offsets {
        if pos != expected {
            return Err(Error::Corruption { path: path.to_path_buf(), reason: format!("record at byte {pos}, manifest says {expected}") });
        }
        let (rec, next) = decode_record(bytes, pos, path)?;
        records.push(rec);
        pos = next;
    }
    if pos != bytes.len() {
        return Err(Error::Corruption { path: path.to_path_buf(), reason: format!("{} trailing bytes", bytes.len() - pos) });
    }
    let mut frame_dims = vec![t];
    frame_dims.extend_from_slice(&manifest.image_shape);
    let mut feature_dims = vec![t];
    feature_dims.extend_from_slice(&manifest.feature_shape);
    expect_dims(&records[0], &[IdentityParams::LEN], path, "identity")?;
    expect_dims(&records[1], &frame_dims, path, "frames")?;
    expect_dims(&records[2], &[t], path, "mouth_open")?;
    expect_dims(&records[3], &[t, 4, 2], path, "landmarks")?;
    expect_dims(&records[4], &[t], path, "driver")?;
    expect_dims(&records[5], &feature_dims, path, "features")?;
    let mut it = records.into_iter().map(|r| r.data);
    let mut next = || it.next().expect("six records");
    let identity = IdentityParams::from_slice(&next())?;
    let frames = Tensor::new(&frame_dims, next())?;
    let mouth_open = next();
    let landmarks = next()
        .chunks_exact(8)
        .map(|c| std::array::from_fn(|k| Point::new(c[2 * k] as f64, c[2 * k + 1] as f64)))
        .collect();
    let driver = next();
    let features = Tensor::new(&feature_dims, next())?;
    Ok(Sequence {
        scene: MouthScene { identity, frames, mouth_open, landmarks },
        audio: AudioTrack { driver, features },
    })
}

/// Loads and verifies a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = read_file(&manifest_path)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::Format { path: manifest_path.clone(), reason: "manifest is not UTF-8".into() })?;
    let kv = KeyValues::parse(&text).map_err(|e| Error::Format { path: manifest_path.clone(), reason: e.to_string() })?;
    let manifest = DatasetManifest::from_kv(&kv, &manifest_path)?;
    if combined_checksum(&manifest.file_checksums) != manifest.checksum {
        return Err(Error::Corruption { path: manifest_path, reason: "manifest checksum mismatch".into() });
    }
    let [channels, size, size2] = manifest.image_shape[..] else {
        return Err(Error::Format { path: manifest_path, reason: format!("image shape {:?}", manifest.image_shape) });
    };
    if channels != 3 || size != size2 || manifest.feature_shape != [FEATURE_STEPS, FEATURE_COEFFS] {
        return Err(Error::Format { path: manifest_path, reason: "unsupported image or feature shape".into() });
    }
    let mut sequences = Vec::with_capacity(manifest.num_sequences);
    for i in 0..manifest.num_sequences {
        let path: PathBuf = dir.join(&manifest.files[i]);
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != manifest.file_checksums[i] {
            return Err(Error::Corruption { path, reason: "sequence checksum mismatch".into() });
        }
        sequences.push(decode_sequence(&bytes, &manifest, &manifest.offsets[i], &path)?);
    }
    let config = DatasetConfig {
        num_identities: manifest.num_sequences,
        frames_per_sequence: manifest.frames_per_sequence,
        image_size: size,
        noise: manifest.noise,
        seed: manifest.seed,
    };
    Ok(Dataset { config, sequences })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synthetic_data::generate_sequence_dataset;

    fn dataset() -> Dataset {
        let cfg = DatasetConfig { num_identities: 3, frames_per_sequence: 6, image_size: 16, noise: 0.1, seed: 4 };
        generate_sequence_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn bits(ds: &Dataset) -> Vec<u32> {
        let mut out = Vec::new();
        for s in &ds.sequences {
            out.extend(s.scene.identity.to_vec().iter().map(|v| v.to_bits()));
            out.extend(s.scene.frames.data().iter().map(|v| v.to_bits()));
            out.extend(s.scene.mouth_open.iter().map(|v| v.to_bits()));
            out.extend(s.scene.landmarks.iter().flatten().flat_map(|p| [(p.x as f32).to_bits(), (p.y as f32).to_bits()]));
            out.extend(s.audio.driver.iter().map(|v| v.to_bits()));
            out.extend(s.audio.features.data().iter().map(|v| v.to_bits()));
        }
        out
    }

    #[test]
    fn save_then_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        let m = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(m.num_sequences, 3);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(bits(&back), bits(&ds));
    }

    #[test]
    fn manifest_counts_match_payload() {
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&dataset(), dir.path()).unwrap();
        for (file, offs) in m.files.iter().zip(&m.offsets) {
            let len = std::fs::metadata(dir.path().join(file)).unwrap().len() as usize;
            let frames = crate::tensor_io::encoded_len(&[6, 3, 16, 16]);
            assert_eq!(offs[2] - offs[1], frames);
            assert_eq!(len, offs[5] + crate::tensor_io::encoded_len(&[6, 20, 13]));
        }
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&dataset(), dir.path()).unwrap();
        let path = dir.path().join(&m.files[1]);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Corruption { .. })));
    }

    #[test]
    fn foreign_version_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap().replace("version=1", "version=7");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        assert!(matches!(save_dataset(&dataset(), &blocker.join("sub")), Err(Error::Io { .. })));
    }
}
