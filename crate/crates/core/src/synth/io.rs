//! Binary corpus records and the JSON manifest.
//!
//! Record file layout (little-endian): magic `GMDS`, `u32` version, then per
//! record `u16` language, `u32` T, `u32` U, `u16[U]` labels and
//! `f32[T * feature_dim]` frames.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"GMDS";
pub const CORPUS_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = "synth-1";

const RECORDS_FILE: &str = "corpus.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator_version: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub num_languages: usize,
    pub counts: Vec<usize>,
    pub records_file: String,
    /// Byte offset of every record in `records_file`.
    pub offsets: Vec<u64>,
}

fn encode_records(corpus: &Corpus) -> Result<(Vec<u8>, Vec<u64>)> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    buf.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    let mut offsets = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        if u.frames.cols() != corpus.feature_dim {
            return Err(Error::input(format!("utterance {} has the wrong feature width", u.id)));
        }
        offsets.push(buf.len() as u64);
        buf.extend_from_slice(&(u.language as u16).to_le_bytes());
        buf.extend_from_slice(&(u.num_frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(u.labels.len() as u32).to_le_bytes());
        for &l in &u.labels {
            buf.extend_from_slice(&(l as u16).to_le_bytes());
        }
        for &x in u.frames.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok((buf, offsets))
}

/// Writes `corpus.bin` and `manifest.json` into `dir`.
pub fn write_corpus(corpus: &Corpus, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let (bytes, offsets) = encode_records(corpus)?;
    let manifest = CorpusManifest {
        generator_version: GENERATOR_VERSION.to_string(),
        seed,
        feature_dim: corpus.feature_dim,
        num_languages: corpus.num_languages,
        counts: corpus.counts(),
        records_file: RECORDS_FILE.to_string(),
        offsets,
    };
    let mut f = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
    f.write_all(&bytes)?;
    f.flush()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!("corpus truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads a corpus written by [`write_corpus`], checking the manifest counts
/// and the `T >= 4U` invariant of every record.
pub fn read_corpus(dir: &Path) -> Result<(Corpus, CorpusManifest)> {
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(&manifest.records_file))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CORPUS_MAGIC {
        return Err(Error::format("bad corpus magic"));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::format(format!("unsupported corpus version {version}")));
    }
    let d = manifest.feature_dim;
    let mut utterances = Vec::with_capacity(manifest.offsets.len());
    let mut per_lang = vec![0usize; manifest.num_languages];
    while r.pos < bytes.len() {
        let offset = r.pos as u64;
        let language = r.u16()? as usize;
        let t = r.u32()? as usize;
        let u = r.u32()? as usize;
        if language >= manifest.num_languages {
            return Err(Error::format(format!("record at {offset}: language {language} out of range")));
        }
        if t == 0 || t < 4 * u {
            return Err(Error::format(format!("record at {offset}: {t} frames for {u} labels violates T >= 4U")));
        }
        let labels = (0..u).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
        let frames = (0..t * d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(format!("record at {offset}: non-finite frame value")));
        }
        let idx = per_lang[language];
        per_lang[language] += 1;
        utterances.push(Utterance {
            id: format!("l{language}-{idx:06}"),
            language,
            labels,
            frames: Tensor::new(vec![t, d], frames)?,
        });
        if manifest.offsets.get(utterances.len() - 1) != Some(&offset) {
            return Err(Error::format(format!("record at {offset} does not match manifest offsets")));
        }
    }
    if per_lang != manifest.counts || utterances.len() != manifest.offsets.len() {
        return Err(Error::format(format!(
            "manifest counts {:?} do not match stored records {per_lang:?}",
            manifest.counts
        )));
    }
    Ok((Corpus { feature_dim: d, num_languages: manifest.num_languages, utterances }, manifest))
}
