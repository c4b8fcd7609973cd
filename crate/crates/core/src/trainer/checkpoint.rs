//! Binary checkpoint archive: a string key/value block plus named `f32`
//! tensors, guarded by a CRC32 of everything after the magic bytes.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MDMTCK1"   u32 version
//! u32 entry count   { u32 len, key bytes, u32 len, value bytes }*
//! u32 tensor count  { u32 len, name bytes, u32 rank, u32 dims*, f32 data* }*
//! u32 crc32
//! ```
//!
//! Strings are UTF-8 and tensor data is row-major.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::{FeatureSpace, FieldSpec};
use crate::metrics::Predictor;
use crate::model::{Model, ModelDims, ModelError};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::variants::{MlpEnsemble, VariantKind};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MDMTCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("checkpoint is corrupt: stored checksum {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint has {0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("checkpoint string is not UTF-8")]
    Utf8,
    #[error("checkpoint lacks '{0}'")]
    Missing(String),
    #[error("checkpoint entry '{key}' is invalid: {message}")]
    Invalid { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Key/value block and named tensors, both kept in sorted order so that
/// encoding is canonical.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        body.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (k, v) in &self.entries {
            put_str(&mut body, k);
            put_str(&mut body, v);
        }
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut body, name);
            body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + body.len() + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let magic_len = CHECKPOINT_MAGIC.len();
        if bytes.len() < magic_len || &bytes[..magic_len] != CHECKPOINT_MAGIC {
            let found = &bytes[..bytes.len().min(magic_len)];
            return Err(CheckpointError::Version {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: format!("magic {:?}", String::from_utf8_lossy(found)),
            });
        }
        if bytes.len() < magic_len + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes[magic_len..].split_at(bytes.len() - magic_len - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 0 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                expected: format!("version {CHECKPOINT_VERSION}"),
                found: format!("version {version}"),
            });
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.entries.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Invalid {
                key: name.clone(),
                message: e.to_string(),
            })?;
            ck.tensors.insert(name, tensor);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Trailing(body.len() - r.pos));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    /// Parses entry `key`.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.get_str(key)?.parse().map_err(|e: V::Err| CheckpointError::Invalid {
            key: key.to_string(),
            message: e.to_string(),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Writes every parameter of `params` as `{prefix}{name}`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamStore<f32>) {
        for (_, p) in params.iter() {
            self.tensors.insert(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Overwrites every parameter of `params` from `{prefix}{name}`, checking shapes.
    pub fn read_params(&self, prefix: &str, params: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", params.name(id));
            let stored = self.tensor(&key)?;
            if stored.shape() != params.get(id).shape() {
                return Err(CheckpointError::Invalid {
                    message: format!("shape {:?}, model expects {:?}", stored.shape(), params.get(id).shape()),
                    key,
                });
            }
            *params.get_mut(id) = stored.clone();
        }
        Ok(())
    }
}

fn put_architecture(ck: &mut Checkpoint, kind: VariantKind, space: &FeatureSpace, dims: ModelDims) {
    ck.set("arch.variant", kind);
    ck.set("arch.domains", space.domains);
    ck.set("arch.tasks", space.tasks);
    ck.set("arch.fields", space.fields.len());
    for (i, f) in space.fields.iter().enumerate() {
        ck.set(format!("arch.field.{i}.name"), &f.name);
        ck.set(format!("arch.field.{i}.vocab"), f.vocab_size);
    }
    ck.set("arch.embedding_dim", dims.embedding_dim);
    ck.set("arch.hidden_dim", dims.hidden_dim);
    ck.set("arch.expert_dim", dims.expert_dim);
    ck.set("arch.tower_hidden", dims.tower_hidden);
    ck.set("arch.shared_experts", dims.shared_experts);
}

/// Reads the architecture entries of a checkpoint.
pub fn read_architecture(ck: &Checkpoint) -> Result<(VariantKind, FeatureSpace, ModelDims)> {
    let kind = ck.get::<VariantKind>("arch.variant")?;
    let fields = (0..ck.get::<usize>("arch.fields")?)
        .map(|i| {
            Ok(FieldSpec::new(
                ck.get_str(&format!("arch.field.{i}.name"))?,
                ck.get::<u32>(&format!("arch.field.{i}.vocab"))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let space = FeatureSpace::new(fields, ck.get("arch.domains")?, ck.get("arch.tasks")?).map_err(|e| CheckpointError::Invalid {
        key: "arch".into(),
        message: e.to_string(),
    })?;
    let dims = ModelDims {
        embedding_dim: ck.get("arch.embedding_dim")?,
        hidden_dim: ck.get("arch.hidden_dim")?,
        expert_dim: ck.get("arch.expert_dim")?,
        tower_hidden: ck.get("arch.tower_hidden")?,
        shared_experts: ck.get("arch.shared_experts")?,
    };
    Ok((kind, space, dims))
}

/// Architecture entries and `param.*` tensors of one model.
pub fn model_checkpoint(model: &Model) -> Checkpoint {
    let mut ck = Checkpoint::default();
    put_architecture(&mut ck, model.arch.kind(), model.arch.space(), model.arch.dims());
    if let Some((d, t)) = model.arch.pair() {
        ck.set("arch.pair", format!("{d},{t}"));
    }
    ck.put_params("param.", &model.params);
    ck
}

fn parse_pair(ck: &Checkpoint) -> Result<(usize, usize)> {
    let raw = ck.get_str("arch.pair")?;
    let invalid = || CheckpointError::Invalid {
        key: "arch.pair".into(),
        message: format!("expected 'domain,task', found '{raw}'"),
    };
    let (d, t) = raw.split_once(',').ok_or_else(invalid)?;
    Ok((d.parse().map_err(|_| invalid())?, t.parse().map_err(|_| invalid())?))
}

/// Rebuilds the model stored by [`model_checkpoint`].
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let (kind, space, dims) = read_architecture(ck)?;
    let mut model = if kind == VariantKind::MlpSingle {
        let (d, t) = parse_pair(ck)?;
        Model::mlp_single(&space, dims, d, t, 0)?
    } else {
        Model::build(kind, &space, dims, 0)?
    };
    ck.read_params("param.", &mut model.params)?;
    Ok(model)
}

pub fn ensemble_checkpoint(ens: &MlpEnsemble) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let first = &ens.members()[0];
    put_architecture(&mut ck, VariantKind::MlpSingle, ens.space(), first.arch.dims());
    ck.set("arch.members", ens.members().len());
    for (i, m) in ens.members().iter().enumerate() {
        ck.put_params(&format!("member.{i}.param."), &m.params);
    }
    ck
}

/// A loaded model ready for evaluation.
#[derive(Debug, Clone)]
pub enum LoadedPredictor {
    Single(Box<Model>),
    Ensemble(MlpEnsemble),
}

impl LoadedPredictor {
    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            LoadedPredictor::Single(m) => model_checkpoint(m),
            LoadedPredictor::Ensemble(e) => ensemble_checkpoint(e),
        }
    }

    pub fn kind(&self) -> VariantKind {
        match self {
            LoadedPredictor::Single(m) => m.arch.kind(),
            LoadedPredictor::Ensemble(_) => VariantKind::MlpSingle,
        }
    }

    pub fn as_model(&self) -> Option<&Model> {
        match self {
            LoadedPredictor::Single(m) => Some(m),
            LoadedPredictor::Ensemble(_) => None,
        }
    }
}

impl Predictor for LoadedPredictor {
    fn space(&self) -> &FeatureSpace {
        match self {
            LoadedPredictor::Single(m) => m.space(),
            LoadedPredictor::Ensemble(e) => e.space(),
        }
    }

    fn predict_batch(&self, batch: &crate::data::Batch) -> Result<Vec<Vec<f32>>, ModelError> {
        match self {
            LoadedPredictor::Single(m) => m.predict_batch(batch),
            LoadedPredictor::Ensemble(e) => e.predict_batch(batch),
        }
    }
}

/// Loads either a single model or an MLP ensemble.
pub fn load_predictor(ck: &Checkpoint) -> Result<LoadedPredictor> {
    if !ck.entries.contains_key("arch.members") {
        return Ok(LoadedPredictor::Single(Box::new(model_from_checkpoint(ck)?)));
    }
    let (_, space, dims) = read_architecture(ck)?;
    let mut ens = MlpEnsemble::build(&space, dims, 0)?;
    let expected = ens.members().len();
    let found: usize = ck.get("arch.members")?;
    if found != expected {
        return Err(CheckpointError::Invalid {
            key: "arch.members".into(),
            message: format!("expected {expected} members, found {found}"),
        });
    }
    for (i, m) in ens.members_mut().iter_mut().enumerate() {
        ck.read_params(&format!("member.{i}.param."), &mut m.params)?;
    }
    Ok(LoadedPredictor::Ensemble(ens))
}
