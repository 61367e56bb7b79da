//! On-disk formats.
//!
//! Embedding files (`.xmeb`), all integers little-endian:
//!
//! | offset | size | field                                   |
//! | ------ | ---- | --------------------------------------- |
//! | 0      | 4    | magic `XMEB`                            |
//! | 4      | 4    | version (`u32`, = 1)                    |
//! | 8      | 1    | dtype (`u8`, 0 = `f32`)                 |
//! | 9      | 1    | modality (`u8`)                         |
//! | 10     | 8    | dim (`u64`)                             |
//! | 18     | 8    | n_items (`u64`)                         |
//! | 26     | 8    | label_table_bytes (`u64`, = 4 n_items)  |
//! | 34     | ...  | labels, `u32` each                      |
//! | ...    | ...  | row-major `f32` values                  |
//!
//! Parameter blobs (`.xmap`) store adapter tensors as `f64` together with the
//! config hash of the run that produced them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::embedding::{EmbeddingSet, Matrix, Modality};
use crate::error::{Error, Result};
use crate::trainer::{AdapterMode, AdapterParams, EncoderLayers};

pub const MAGIC: [u8; 4] = *b"XMEB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 34;

const PARAMS_MAGIC: [u8; 4] = *b"XMAP";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub version: u32,
    pub dtype: u8,
    pub modality: Modality,
    pub dim: u64,
    pub n_items: u64,
    pub label_table_bytes: u64,
}

impl EmbeddingFileHeader {
    pub fn for_set(set: &EmbeddingSet) -> Self {
        Self {
            version: VERSION,
            dtype: DTYPE_F32,
            modality: set.modality(),
            dim: set.dim() as u64,
            n_items: set.len() as u64,
            label_table_bytes: 4 * set.len() as u64,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8] = self.dtype;
        b[9] = self.modality.code();
        b[10..18].copy_from_slice(&self.dim.to_le_bytes());
        b[18..26].copy_from_slice(&self.n_items.to_le_bytes());
        b[26..34].copy_from_slice(&self.label_table_bytes.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::PayloadTooShort {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = bytes[8];
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let header = Self {
            version,
            dtype,
            modality: Modality::from_code(bytes[9])?,
            dim: u64_at(10),
            n_items: u64_at(18),
            label_table_bytes: u64_at(26),
        };
        if Some(header.label_table_bytes) != header.n_items.checked_mul(4) {
            return Err(Error::InvalidConfig(format!(
                "label table is {} bytes for {} items",
                header.label_table_bytes, header.n_items
            )));
        }
        Ok(header)
    }

    /// Total file length implied by the header.
    pub fn expected_len(&self) -> Option<u64> {
        let values = self.n_items.checked_mul(self.dim)?.checked_mul(4)?;
        (HEADER_LEN as u64)
            .checked_add(self.label_table_bytes)?
            .checked_add(values)
    }
}

pub fn encode_embedding_set(set: &EmbeddingSet) -> Vec<u8> {
    let header = EmbeddingFileHeader::for_set(set);
    let mut out = Vec::with_capacity(header.expected_len().unwrap_or(0) as usize);
    out.extend_from_slice(&header.to_bytes());
    for l in set.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for v in set.matrix().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_embedding_set(bytes: &[u8]) -> Result<EmbeddingSet> {
    let header = EmbeddingFileHeader::parse(bytes)?;
    let expected = header.expected_len().ok_or_else(|| Error::InvalidConfig("header sizes overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::PayloadTooShort { expected, actual });
    }
    if actual > expected {
        return Err(Error::PayloadTooLong { expected, actual });
    }
    let n = header.n_items as usize;
    let dim = header.dim as usize;
    let labels_end = HEADER_LEN + 4 * n;
    let labels = bytes[HEADER_LEN..labels_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = bytes[labels_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingSet::new(Matrix::from_vec(n, dim, values)?, labels, header.modality)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

pub fn write_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_embedding_set(set))
}

pub fn read_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding_set(&bytes)
}

/// Path of the provenance sidecar for an embedding file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta");
    path.with_file_name(name)
}

/// Writes the embedding file and a `key=value` sidecar carrying the config hash.
pub fn write_embedding_set_with_provenance(set: &EmbeddingSet, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let path = path.as_ref();
    write_embedding_set(set, path)?;
    let meta = format!(
        "config_hash={config_hash}\nmodality={}\ndim={}\nn_items={}\nchecksum={}\n",
        set.modality().name(),
        set.dim(),
        set.len(),
        set.checksum()
    );
    write_atomic(&meta_path(path), meta.as_bytes())
}

/// Reads `config_hash` from a `key=value` text artifact.
pub fn read_config_hash(path: impl AsRef<Path>) -> Result<Option<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .find_map(|l| l.strip_prefix("config_hash="))
        .map(|h| h.trim().to_string()))
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&1u64.to_le_bytes());
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// `XMAP` magic, version, mode byte, hash length + UTF-8 hash, then each
/// tensor as `(rows u64, cols u64, f64 values)` in [`AdapterParams::tensors`] order.
pub fn encode_params(params: &AdapterParams, config_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.push(match params.mode {
        AdapterMode::LinearHeadOnly => 0,
        AdapterMode::MlpEncoderPlusHead => 1,
    });
    out.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(config_hash.as_bytes());
    push_matrix(&mut out, &params.head_weight);
    push_vec(&mut out, &params.head_bias);
    if let Some(e) = &params.encoder {
        push_matrix(&mut out, &e.hidden_weight);
        push_vec(&mut out, &e.hidden_bias);
        push_matrix(&mut out, &e.out_weight);
        push_vec(&mut out, &e.out_bias);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::PayloadTooShort {
            expected: (self.pos + n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::InvalidConfig("tensor size overflow".into()))?;
        let data = self
            .take(n.checked_mul(8).ok_or_else(|| Error::InvalidConfig("tensor size overflow".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Returns the params and the config hash stored with them.
pub fn decode_params(bytes: &[u8]) -> Result<(AdapterParams, String)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != PARAMS_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = c.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode = match c.take(1)?[0] {
        0 => AdapterMode::LinearHeadOnly,
        1 => AdapterMode::MlpEncoderPlusHead,
        other => return Err(Error::InvalidConfig(format!("unknown adapter mode {other}"))),
    };
    let hash_len = c.u32()? as usize;
    let hash = String::from_utf8(c.take(hash_len)?.to_vec())
        .map_err(|_| Error::InvalidConfig("config hash is not UTF-8".into()))?;
    let head_weight = c.matrix()?;
    let head_bias = c.matrix()?.into_vec();
    let encoder = match mode {
        AdapterMode::LinearHeadOnly => None,
        AdapterMode::MlpEncoderPlusHead => Some(EncoderLayers {
            hidden_weight: c.matrix()?,
            hidden_bias: c.matrix()?.into_vec(),
            out_weight: c.matrix()?,
            out_bias: c.matrix()?.into_vec(),
        }),
    };
    if c.pos != bytes.len() {
        return Err(Error::PayloadTooLong {
            expected: c.pos as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok((
        AdapterParams {
            head_weight,
            head_bias,
            encoder,
            mode,
        },
        hash,
    ))
}

pub fn write_params(params: &AdapterParams, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_params(params, config_hash))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<(AdapterParams, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{init_params, AdapterDims};
    use crate::world::{generate_world, WorldConfig};
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let set = EmbeddingSet::new(Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(), vec![7], Modality::Image).unwrap();
        let bytes = encode_embedding_set(&set);
        assert_eq!(bytes.len(), 34 + 4 + 12);
        assert_eq!(&bytes[0..4], b"XMEB");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..18], &3u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &4u64.to_le_bytes());
        assert_eq!(&bytes[34..38], &7u32.to_le_bytes());
        assert_eq!(&bytes[38..42], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[46..50], &3.0f32.to_le_bytes());
    }

    #[test]
    fn world_images_round_trip_within_f32_bound() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let back = decode_embedding_set(&encode_embedding_set(&w.images)).unwrap();
        assert_eq!(back.labels(), w.images.labels());
        assert_eq!(back.modality(), Modality::Image);
        assert!(back.matrix().max_abs_diff(w.images.matrix()) <= 2f64.powi(-20));
    }

    #[test]
    fn empty_set_round_trips() {
        let empty = EmbeddingSet::new(Matrix::zeros(0, 5), vec![], Modality::Audio).unwrap();
        let bytes = encode_embedding_set(&empty);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_embedding_set(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 5);
    }

    #[test]
    fn truncated_and_padded_files() {
        let set = EmbeddingSet::new(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(), vec![0, 1], Modality::Audio).unwrap();
        let bytes = encode_embedding_set(&set);
        match decode_embedding_set(&bytes[..bytes.len() - 3]) {
            Err(Error::PayloadTooShort { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 3);
            }
            other => panic!("expected PayloadTooShort, got {other:?}"),
        }
        assert!(matches!(decode_embedding_set(&bytes[..10]), Err(Error::PayloadTooShort { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_embedding_set(&long), Err(Error::PayloadTooLong { .. })));
    }

    #[test]
    fn header_validation() {
        let set = EmbeddingSet::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0], Modality::Audio).unwrap();
        let good = encode_embedding_set(&set);
        let mut b = good.clone();
        b[0] = b'Y';
        assert!(matches!(decode_embedding_set(&b), Err(Error::BadMagic { .. })));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode_embedding_set(&b), Err(Error::UnsupportedVersion(2))));
        let mut b = good.clone();
        b[8] = 1;
        assert!(matches!(decode_embedding_set(&b), Err(Error::UnsupportedDtype(1))));
        let mut b = good.clone();
        b[9] = 42;
        assert!(matches!(decode_embedding_set(&b), Err(Error::UnknownModality(42))));
        let mut b = good;
        b[26] = 8;
        assert!(decode_embedding_set(&b).is_err());
    }

    #[test]
    fn files_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&WorldConfig::default()).unwrap();
        let p = dir.path().join("teacher.xmeb");
        write_embedding_set_with_provenance(&w.teacher_text, &p, "abc123").unwrap();
        let back = read_embedding_set(&p).unwrap();
        assert_eq!(back.len(), w.teacher_text.len());
        assert_eq!(read_config_hash(meta_path(&p)).unwrap().as_deref(), Some("abc123"));
        // no temp files left behind
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
        assert!(matches!(read_embedding_set(dir.path().join("missing.xmeb")), Err(Error::Io { .. })));
    }

    #[test]
    fn params_round_trip_exactly() {
        for (mode, d_in) in [(AdapterMode::LinearHeadOnly, 4), (AdapterMode::MlpEncoderPlusHead, 6)] {
            let p = init_params(
                3,
                AdapterDims {
                    d_student_in: 4,
                    d_hidden: 3,
                    d_in,
                    d_teacher: 5,
                },
                mode,
            )
            .unwrap();
            let bytes = encode_params(&p, "deadbeef");
            let (back, hash) = decode_params(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(hash, "deadbeef");
            assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    fn any_set() -> impl Strategy<Value = EmbeddingSet> {
        (0usize..6, 1usize..5, 0usize..4).prop_flat_map(|(n, d, m)| {
            (
                prop::collection::vec(-1e3f64..1e3, n * d),
                prop::collection::vec(any::<u32>(), n),
            )
                .prop_map(move |(v, l)| {
                    EmbeddingSet::new(Matrix::from_vec(n, d, v).unwrap(), l, Modality::ALL[m]).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_f32_quantization(set in any_set()) {
            let bytes = encode_embedding_set(&set);
            let back = decode_embedding_set(&bytes).unwrap();
            prop_assert_eq!(back.labels(), set.labels());
            prop_assert_eq!(back.modality(), set.modality());
            for (a, b) in back.matrix().as_slice().iter().zip(set.matrix().as_slice()) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
            // re-encoding the decoded set is byte-identical
            prop_assert_eq!(encode_embedding_set(&back), bytes);
        }
    }
}
