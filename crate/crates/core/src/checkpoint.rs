//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `WLACCKPT`, a version byte, 7 reserved zero
//! bytes, the header length as a little-endian `u64`, the JSON header, then
//! the parameter arrays as little-endian `f32`. The header's manifest gives
//! each array's name, shape, byte offset (relative to the data section) and
//! byte length.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WlacError};
use crate::neural::{HeadKind, Model, ModelConfig};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"WLACCKPT";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Masked-LM pretrained backbone with a vocabulary head.
    Cmblm,
    Baseline,
    Energy,
}

impl ModelKind {
    pub fn head(self) -> HeadKind {
        match self {
            ModelKind::Cmblm | ModelKind::Baseline => HeadKind::Vocab,
            ModelKind::Energy => HeadKind::Score,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cmblm => "cmblm",
            ModelKind::Baseline => "baseline",
            ModelKind::Energy => "energy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabRecord {
    pub hash: String,
    pub words: Vec<String>,
}

impl VocabRecord {
    fn new(v: &Vocabulary) -> Self {
        VocabRecord {
            hash: v.hash(),
            words: v.words().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub src_vocab: VocabRecord,
    pub tgt_vocab: VocabRecord,
    /// Free-form training details (configs, steps, seeds).
    pub metadata: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: Model<f32>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    /// Fails unless both checkpoints were built over the same vocabularies.
    pub fn check_pairing(&self, other: &Checkpoint) -> Result<()> {
        if self.src_vocab.hash() != other.src_vocab.hash() || self.tgt_vocab.hash() != other.tgt_vocab.hash() {
            return Err(WlacError::VocabularyMismatch(format!(
                "{} and {} checkpoints use different vocabularies",
                self.kind.name(),
                other.kind.name()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    if model.head != ckpt.kind.head() {
        return Err(WlacError::InvalidArgument(format!(
            "{} checkpoint needs a {:?} head",
            ckpt.kind.name(),
            ckpt.kind.head()
        )));
    }
    let manifest = model
        .layout
        .entries
        .iter()
        .map(|e| ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset: e.offset * 4,
            byte_len: e.len * 4,
        })
        .collect();
    let header = Header {
        kind: ckpt.kind,
        config: model.config.clone(),
        src_vocab: VocabRecord::new(&ckpt.src_vocab),
        tgt_vocab: VocabRecord::new(&ckpt.tgt_vocab),
        metadata: ckpt.metadata.clone(),
        manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| WlacError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[VERSION, 0, 0, 0, 0, 0, 0, 0]).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in &model.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| WlacError::io(path, e))?;
    decode(&bytes)
}

fn corrupt(msg: impl Into<String>) -> WlacError {
    WlacError::Corrupt(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[8] != VERSION {
        return Err(WlacError::Version {
            found: bytes[8],
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header length past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| corrupt(format!("header: {e}")))?;
    let data = &bytes[data_start..];

    let src_vocab = restore_vocab(&header.src_vocab, "source")?;
    let tgt_vocab = restore_vocab(&header.tgt_vocab, "target")?;
    let mut model = Model::<f32>::zeros(&header.config, header.kind.head())?;
    if header.manifest.len() != model.layout.entries.len() {
        return Err(corrupt("manifest does not match the model layout"));
    }
    let mut covered = vec![false; data.len() / 4];
    if data.len() % 4 != 0 {
        return Err(corrupt("data section is not a whole number of floats"));
    }
    for m in &header.manifest {
        let entry = model
            .layout
            .find(&m.name)
            .ok_or_else(|| corrupt(format!("unknown array {}", m.name)))?
            .clone();
        if m.shape != entry.shape || m.byte_len != entry.len * 4 || m.offset % 4 != 0 {
            return Err(corrupt(format!("array {} has the wrong shape or size", m.name)));
        }
        let end = m
            .offset
            .checked_add(m.byte_len)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| corrupt(format!("array {} out of bounds", m.name)))?;
        for c in &mut covered[m.offset / 4..end / 4] {
            if *c {
                return Err(corrupt(format!("array {} overlaps another", m.name)));
            }
            *c = true;
        }
        let dst = &mut model.data[entry.offset..entry.offset + entry.len];
        for (d, chunk) in dst.iter_mut().zip(data[m.offset..end].chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if src_vocab.len() != header.config.src_vocab_size || tgt_vocab.len() != header.config.tgt_vocab_size {
        return Err(WlacError::VocabularyMismatch("vocabulary sizes differ from the model config".into()));
    }
    Ok(Checkpoint {
        kind: header.kind,
        model,
        src_vocab,
        tgt_vocab,
        metadata: header.metadata,
    })
}

fn restore_vocab(record: &VocabRecord, side: &str) -> Result<Vocabulary> {
    let vocab = Vocabulary::from_word_list(record.words.clone())?;
    if vocab.hash() != record.hash {
        return Err(WlacError::VocabularyMismatch(format!("{side} vocabulary hash does not verify")));
    }
    Ok(vocab)
}
