//! On-disk artifacts shared between pipeline stages.
//!
//! Every artifact carries a header `{format, version, config_hash}`. JSON
//! artifacts wrap their payload as `{"header": ..., "payload": ...}`; tensor
//! checkpoints use a small binary container:
//!
//! ```text
//! magic "IMVAETNS" | u32 LE header length | header JSON | f64 LE values
//! ```
//!
//! The header of a tensor container also lists every tensor's name and shape
//! (row-major order), plus free-form JSON metadata. Writes go to a temporary
//! sibling file that is renamed into place, so a crashed stage never leaves a
//! half-written artifact behind.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{ImVae, ModelConfig};
use crate::params::ParamStore;
use crate::psg::RecallEmbeddings;
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IMVAETNS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
}

impl Header {
    pub fn new(format: &str, config_hash: &str) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
        }
    }

    /// Check format, version and (when `expected_hash` is given) the config
    /// hash the artifact was built with.
    fn check(&self, path: &Path, format: &str, expected_hash: Option<&str>, stage: &'static str) -> Result<()> {
        if self.format != format {
            return Err(corrupt(
                path,
                format!("expected a `{format}` artifact, found `{}`", self.format),
            ));
        }
        if self.version != FORMAT_VERSION {
            return Err(corrupt(
                path,
                format!("format version {} (this build reads {FORMAT_VERSION})", self.version),
            ));
        }
        match expected_hash {
            Some(h) if h != self.config_hash => Err(Error::HashMismatch {
                artifact: path.to_path_buf(),
                stage,
                expected: h.to_string(),
                found: self.config_hash.clone(),
            }),
            _ => Ok(()),
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read an artifact, turning a missing file into [`Error::MissingArtifact`]
/// naming the stage that produces it.
fn read_artifact(path: &Path, stage: &'static str) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[derive(Serialize)]
struct JsonOut<'a, T> {
    header: &'a Header,
    payload: &'a T,
}

#[derive(Deserialize)]
struct JsonIn<T> {
    header: Header,
    payload: T,
}

pub fn save_json<T: Serialize>(path: &Path, format: &str, config_hash: &str, payload: &T) -> Result<()> {
    let header = Header::new(format, config_hash);
    let bytes = serde_json::to_vec(&JsonOut {
        header: &header,
        payload,
    })?;
    write_atomic(path, &bytes)
}

pub fn load_json<T: DeserializeOwned>(
    path: &Path,
    format: &str,
    expected_hash: Option<&str>,
    stage: &'static str,
) -> Result<T> {
    let bytes = read_artifact(path, stage)?;
    let doc: JsonIn<T> = serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    doc.header.check(path, format, expected_hash, stage)?;
    Ok(doc.payload)
}

/// Read only the header of a JSON or tensor artifact, `None` if absent.
pub fn peek_header(path: &Path) -> Result<Option<Header>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.starts_with(MAGIC) {
        let (header, _, _) = split_tensor_file(path, &bytes)?;
        return Ok(Some(header.header));
    }
    #[derive(Deserialize)]
    struct HeaderOnly {
        header: Header,
    }
    let doc: HeaderOnly = serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    Ok(Some(doc.header))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    header: Header,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// Named matrices plus metadata, as stored in a tensor container.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: Header,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

pub fn save_tensors(
    path: &Path,
    format: &str,
    config_hash: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &Mat)],
) -> Result<()> {
    let head = TensorHeader {
        header: Header::new(format, config_hash),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorInfo {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&head)?;
    let n: usize = tensors.iter().map(|(_, m)| m.len()).sum();
    let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + head.len() + 8 * n);
    bytes.extend_from_slice(MAGIC);
    let len = u32::try_from(head.len()).map_err(|_| Error::InvalidArgument("tensor header too large".into()))?;
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(&head);
    for (_, m) in tensors {
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

fn split_tensor_file<'a>(path: &Path, bytes: &'a [u8]) -> Result<(TensorHeader, &'a [u8], usize)> {
    if !bytes.starts_with(MAGIC) {
        return Err(corrupt(path, "not a tensor container (bad magic)"));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(corrupt(path, "truncated header length"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(corrupt(path, "truncated header"));
    }
    let head: TensorHeader = serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(path, e.to_string()))?;
    let n: usize = head.tensors.iter().map(|t| t.rows * t.cols).sum();
    Ok((head, &rest[len..], n))
}

pub fn load_tensors(path: &Path, format: &str, expected_hash: Option<&str>, stage: &'static str) -> Result<TensorFile> {
    let bytes = read_artifact(path, stage)?;
    let (head, data, n) = split_tensor_file(path, &bytes)?;
    head.header.check(path, format, expected_hash, stage)?;
    if data.len() != 8 * n {
        return Err(corrupt(
            path,
            format!("expected {} data bytes, found {}", 8 * n, data.len()),
        ));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = head
        .tensors
        .iter()
        .map(|t| {
            let v: Vec<f64> = values.by_ref().take(t.rows * t.cols).collect();
            let m = Mat::from_shape_vec((t.rows, t.cols), v).expect("length checked above");
            (t.name.clone(), m)
        })
        .collect();
    Ok(TensorFile {
        header: head.header,
        meta: head.meta,
        tensors,
    })
}

pub const MODEL_FORMAT: &str = "imvae-model";
pub const RECALL_FORMAT: &str = "psg-embeddings";

/// Save every parameter of a model; `meta` must hold the model configuration
/// under `"model"` (see [`load_model`]).
pub fn save_model(
    path: &Path,
    config_hash: &str,
    model: &ImVae,
    store: &ParamStore,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({ "model": model.config, "extra": extra });
    let tensors: Vec<(&str, &Mat)> = store.ids().map(|id| (store.name(id), store.value(id))).collect();
    save_tensors(path, MODEL_FORMAT, config_hash, meta, &tensors)
}

/// Rebuild the model skeleton from the stored configuration and overwrite
/// every parameter with the stored values. Returns the extra metadata too.
pub fn load_model(path: &Path, expected_hash: Option<&str>) -> Result<(ImVae, ParamStore, serde_json::Value)> {
    let file = load_tensors(path, MODEL_FORMAT, expected_hash, "train")?;
    let config: ModelConfig = serde_json::from_value(file.meta["model"].clone())
        .map_err(|e| corrupt(path, format!("model configuration: {e}")))?;
    let mut store = ParamStore::new();
    let model = ImVae::new(config, &mut store, &mut rng::stream(0, "load", 0))?;
    if store.len() != file.tensors.len() {
        return Err(corrupt(
            path,
            format!(
                "{} stored tensors, model has {} parameters",
                file.tensors.len(),
                store.len()
            ),
        ));
    }
    for (name, value) in file.tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| corrupt(path, format!("unknown parameter `{name}`")))?;
        if store.value(id).dim() != value.dim() {
            return Err(corrupt(path, format!("parameter `{name}` has shape {:?}", value.dim())));
        }
        *store.value_mut(id) = value;
    }
    Ok((model, store, file.meta["extra"].clone()))
}

pub fn save_recall(path: &Path, config_hash: &str, emb: &RecallEmbeddings, extra: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "layers": emb.layers, "extra": extra });
    save_tensors(
        path,
        RECALL_FORMAT,
        config_hash,
        meta,
        &[("users", &emb.users), ("items", &emb.items)],
    )
}

pub fn load_recall(path: &Path, expected_hash: Option<&str>) -> Result<RecallEmbeddings> {
    let file = load_tensors(path, RECALL_FORMAT, expected_hash, "train-psg")?;
    let layers = file.meta["layers"]
        .as_u64()
        .ok_or_else(|| corrupt(path, "missing layer count"))? as usize;
    let mut tensors = file.tensors.into_iter();
    match (tensors.next(), tensors.next(), tensors.next()) {
        (Some((u, users)), Some((i, items)), None) if u == "users" && i == "items" => {
            Ok(RecallEmbeddings { users, items, layers })
        }
        _ => Err(corrupt(path, "expected exactly the `users` and `items` tensors")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_header_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        save_json(&p, "thing", "h1", &vec![1u32, 2, 3]).unwrap();
        let v: Vec<u32> = load_json(&p, "thing", Some("h1"), "prepare").unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        assert!(matches!(
            load_json::<Vec<u32>>(&p, "thing", Some("h2"), "prepare"),
            Err(Error::HashMismatch { .. })
        ));
        assert!(matches!(
            load_json::<Vec<u32>>(&p, "other", None, "prepare"),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(
            load_json::<Vec<u32>>(&dir.path().join("none.json"), "thing", None, "prepare"),
            Err(Error::MissingArtifact { stage: "prepare", .. })
        ));
        assert_eq!(peek_header(&p).unwrap().unwrap().config_hash, "h1");
        assert!(!dir.path().join("a/b.json.tmp").exists());
    }

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let a = Mat::from_shape_fn((3, 4), |(i, j)| (i as f64 + 0.1).powf(j as f64 * 1.7) - 1e-300);
        let b = Mat::from_shape_vec((1, 2), vec![f64::MIN_POSITIVE, -0.0]).unwrap();
        save_tensors(&p, "t", "h", serde_json::json!({"k": 1}), &[("a", &a), ("b", &b)]).unwrap();
        let f = load_tensors(&p, "t", Some("h"), "x").unwrap();
        assert_eq!(f.meta["k"], 1);
        let bits = |m: &Mat| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&f.tensors[0].1), bits(&a));
        assert_eq!(bits(&f.tensors[1].1), bits(&b));
        assert_eq!(peek_header(&p).unwrap().unwrap().format, "t");
    }

    #[test]
    fn truncated_container_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        save_tensors(&p, "t", "h", serde_json::Value::Null, &[("a", &Mat::ones((2, 2)))]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_tensors(&p, "t", None, "x"), Err(Error::Corrupt { .. })));
    }
}
