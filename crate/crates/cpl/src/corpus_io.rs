//! On-disk corpus: `manifest.json` plus `features.bin`.
//!
//! The manifest holds the generating config, the prototypes and, per
//! utterance, its id, split, frame count, golden transcript and frame labels.
//!
//! `features.bin` layout (all integers and floats little-endian):
//!
//! ```text
//! magic     4 bytes  "CPLF"
//! version   u32      1
//! feat_dim  u32
//! count     u64      number of utterances
//! then per utterance, in manifest order:
//!   id      u64
//!   frames  u32
//!   values  frames * feat_dim f64, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use cpl_core::data::{Corpus, CorpusConfig, Split, Utterance};
use cpl_core::matrix::Matrix;
use cpl_core::metrics::Transcript;
use cpl_core::TokenId;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FEATURES: &str = "features.bin";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CPLF";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: CorpusConfig,
    prototypes: Vec<Vec<f64>>,
    utterances: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: u64,
    split: Split,
    frames: usize,
    golden: Transcript,
    frame_labels: Vec<TokenId>,
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: corpus.config.clone(),
        prototypes: corpus.prototypes.clone(),
        utterances: corpus
            .utterances
            .iter()
            .map(|u| ManifestEntry {
                id: u.id,
                split: u.split,
                frames: u.features.rows(),
                golden: u.golden.clone(),
                frame_labels: u.frame_labels.clone(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(CliError::io(&path))?;

    let path = dir.join(FEATURES);
    let io = CliError::io(&path);
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_u32(&mut w, corpus.config.feat_dim as u32)?;
        write_u64(&mut w, corpus.utterances.len() as u64)?;
        for u in &corpus.utterances {
            write_u64(&mut w, u.id)?;
            write_u32(&mut w, u.features.rows() as u32)?;
            write_f64s(&mut w, u.features.as_slice())?;
        }
        w.flush()
    };
    write().map_err(io)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(CliError::io(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&mpath, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
    }
    manifest.config.validate().map_err(|e| CliError::format(&mpath, e))?;

    let fpath = dir.join(FEATURES);
    let bad = |m: String| CliError::format(&fpath, m);
    let mut r = BufReader::new(File::open(&fpath).map_err(CliError::io(&fpath))?);
    expect_header(&mut r, MAGIC, FORMAT_VERSION).map_err(bad)?;
    let dim = read_u32(&mut r).map_err(|e| bad(e.to_string()))? as usize;
    let count = read_u64(&mut r).map_err(|e| bad(e.to_string()))? as usize;
    if dim != manifest.config.feat_dim || count != manifest.utterances.len() {
        return Err(bad(format!("header ({dim} dims, {count} utterances) disagrees with the manifest")));
    }
    let mut utterances = Vec::with_capacity(count);
    for e in manifest.utterances {
        let id = read_u64(&mut r).map_err(|e| bad(e.to_string()))?;
        let frames = read_u32(&mut r).map_err(|e| bad(e.to_string()))? as usize;
        if id != e.id || frames != e.frames || frames != e.frame_labels.len() {
            return Err(bad(format!("record for utterance {} disagrees with the manifest", e.id)));
        }
        let values = read_f64s(&mut r, frames * dim).map_err(|e| bad(e.to_string()))?;
        let features = Matrix::from_vec(frames, dim, values).map_err(|e| bad(e.to_string()))?;
        utterances.push(Utterance { id: e.id, split: e.split, features, golden: e.golden, frame_labels: e.frame_labels });
    }
    expect_eof(&mut r).map_err(bad)?;
    Ok(Corpus { config: manifest.config, prototypes: manifest.prototypes, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpl_core::data::generate_corpus;

    fn tiny() -> CorpusConfig {
        CorpusConfig { n_labeled: 3, n_unlabeled: 5, n_dev: 2, n_test: 2, ..CorpusConfig::default() }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny()).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn feature_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny()).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join(FEATURES)).unwrap();
        assert_eq!(&bytes[..4], b"CPLF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 12);
        let u = &corpus.utterances[0];
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize, u.features.rows());
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), u.features[(0, 0)]);
        let body: usize = corpus.utterances.iter().map(|u| 12 + 8 * u.features.as_slice().len()).sum();
        assert_eq!(bytes.len(), 20 + body);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&tiny()).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let f = dir.path().join(FEATURES);
        let mut bytes = std::fs::read(&f).unwrap();
        bytes.push(0);
        std::fs::write(&f, &bytes).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(CliError::Format { .. })));
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&f, &bytes).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(CliError::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&f, &bytes).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(CliError::Format { .. })));
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let e = read_corpus(Path::new("/nonexistent/corpus")).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::exit::IO);
    }
}
