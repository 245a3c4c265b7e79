//! Self-describing binary container for checkpoints and learngenes.
//!
//! Layout: 4-byte magic (`FINE` for model checkpoints, `LGNE` for
//! learngenes), u32 format version, u64 header length, a UTF-8 key-value
//! header carrying config plus a tensor index, the concatenated little-endian
//! f64 tensor payload, and a trailing CRC32 of the payload. Unknown header
//! keys are ignored on read; human-written run configs, by contrast, reject
//! unknown keys hard (see [`load_condense_config`]).

use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::{EmaModel, EMA_DECAY};
use crate::factorized::{Learngene, LearngeneMeta, FAMILY_KINDS};
use crate::model::{Backing, DiTConfig, DiTModel};
use crate::params::ParamStore;
use crate::rng::DeskRng;
use crate::tensor::Tensor;
use crate::train::CondenseConfig;
use crate::{Elem, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC_CHECKPOINT: [u8; 4] = *b"FINE";
pub const MAGIC_LEARNGENE: [u8; 4] = *b"LGNE";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: format version {found} is ahead of supported {supported}")]
    VersionAhead { path: String, found: u32, supported: u32 },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{path}: payload CRC mismatch, file is corrupt")]
    Crc { path: String },
    #[error("{path}: malformed header: {detail}")]
    Header { path: String, detail: String },
    #[error("{path}: required tensor {name} is missing")]
    MissingTensor { path: String, name: String },
    #[error("{path}: unexpected tensor {name}")]
    UnexpectedTensor { path: String, name: String },
    #[error("{path}: bad tensor index: {detail}")]
    Index { path: String, detail: String },
}

/// Write via a temp file plus rename so readers never see partial files.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// In-memory form of a container file.
#[derive(Debug)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    /// Non-tensor header entries in write order.
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<Elem>)>,
}

impl Container {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<Elem>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require_header<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        let raw = self.header_value(key).ok_or_else(|| FormatError::Header {
            path: path.display().to_string(),
            detail: format!("missing key {key}"),
        })?;
        raw.parse().map_err(|_| {
            FormatError::Header {
                path: path.display().to_string(),
                detail: format!("key {key} has unparsable value {raw:?}"),
            }
            .into()
        })
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut header = String::new();
    for (k, v) in &c.header {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!("tensor_count = {}\n", c.tensors.len()));
    let mut offset = 0u64;
    let mut payload: Vec<u8> = Vec::new();
    for (i, (name, t)) in c.tensors.iter().enumerate() {
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let len = (t.numel() * 8) as u64;
        header.push_str(&format!("tensor.{i} = {name} f64 {shape} {offset} {len}\n"));
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let crc = crc32fast::hash(&payload);

    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len() + 4);
    bytes.extend_from_slice(&c.magic);
    bytes.extend_from_slice(&c.version.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc.to_le_bytes());
    atomic_write(path, &bytes)
}

pub fn read_container(path: &Path, expected_magic: Option<[u8; 4]>) -> Result<Container> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    if bytes.len() < 20 {
        return Err(FormatError::Truncated { path: p, expected: 20, found: bytes.len() }.into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC_CHECKPOINT && magic != MAGIC_LEARNGENE {
        return Err(FormatError::BadMagic { path: p, expected: "FINE or LGNE" }.into());
    }
    if let Some(want) = expected_magic {
        if magic != want {
            return Err(FormatError::BadMagic {
                path: p,
                expected: if want == MAGIC_LEARNGENE { "LGNE" } else { "FINE" },
            }
            .into());
        }
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > FORMAT_VERSION {
        return Err(FormatError::VersionAhead { path: p, found: version, supported: FORMAT_VERSION }.into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(FormatError::Truncated { path: p, expected: payload_start + 4, found: bytes.len() }.into());
    }
    let header_text = std::str::from_utf8(&bytes[16..payload_start])
        .map_err(|e| FormatError::Header { path: p.clone(), detail: e.to_string() })?;
    let payload = &bytes[payload_start..bytes.len() - 4];
    let crc_stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != crc_stored {
        return Err(FormatError::Crc { path: p }.into());
    }

    let mut header = Vec::new();
    let mut index: Vec<(String, Vec<usize>, u64, u64)> = Vec::new();
    for line in header_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(FormatError::Header { path: p, detail: format!("line without '=': {line:?}") }.into());
        };
        let (key, value) = (key.trim(), value.trim());
        if key.starts_with("tensor.") {
            let parts: Vec<&str> = value.split_whitespace().collect();
            if parts.len() != 5 || parts[1] != "f64" {
                return Err(FormatError::Index { path: p, detail: format!("bad entry {value:?}") }.into());
            }
            let shape: Vec<usize> = parts[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| FormatError::Index { path: p.clone(), detail: format!("bad shape {:?}", parts[2]) })?;
            let offset: u64 = parts[3]
                .parse()
                .map_err(|_| FormatError::Index { path: p.clone(), detail: "bad offset".into() })?;
            let len: u64 = parts[4]
                .parse()
                .map_err(|_| FormatError::Index { path: p.clone(), detail: "bad length".into() })?;
            index.push((parts[0].to_string(), shape, offset, len));
        } else {
            // Unknown keys are kept but otherwise ignored (forward compatibility).
            header.push((key.to_string(), value.to_string()));
        }
    }

    // Offsets must be non-overlapping and in index order.
    let mut cursor = 0u64;
    let mut tensors = Vec::with_capacity(index.len());
    for (name, shape, offset, len) in index {
        if offset != cursor {
            return Err(FormatError::Index {
                path: p,
                detail: format!("tensor {name} at offset {offset}, expected {cursor}"),
            }
            .into());
        }
        let numel: usize = shape.iter().product();
        if numel * 8 != len as usize {
            return Err(FormatError::Index {
                path: p,
                detail: format!("tensor {name} length {len} does not match shape {shape:?}"),
            }
            .into());
        }
        let end = (offset + len) as usize;
        if end > payload.len() {
            return Err(FormatError::Truncated { path: p, expected: payload_start + end + 4, found: bytes.len() }.into());
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[offset as usize..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((name, Tensor::new(shape, data).expect("validated shape")));
        cursor += len;
    }
    if cursor != payload.len() as u64 {
        return Err(FormatError::Index {
            path: p,
            detail: format!("payload has {} bytes, index covers {cursor}", payload.len()),
        }
        .into());
    }
    Ok(Container { magic, version, header, tensors })
}

// ---- learngene files -------------------------------------------------------------

fn learngene_tensor_names() -> [String; 8] {
    let mut names: Vec<String> = Vec::with_capacity(8);
    for kind in FAMILY_KINDS {
        names.push(format!("u.{}", kind.tag()));
        names.push(format!("v.{}", kind.tag()));
    }
    names.try_into().unwrap()
}

pub fn save_learngene(path: &Path, lg: &Learngene<Elem>) -> Result<()> {
    let meta = &lg.meta;
    let header = vec![
        ("d".to_string(), meta.width.to_string()),
        ("d_prime".to_string(), meta.hidden.to_string()),
        ("r".to_string(), meta.rank.to_string()),
        ("s".to_string(), meta.group_size.to_string()),
        ("condensation_steps".to_string(), meta.condensation_steps.to_string()),
        ("seed".to_string(), meta.seed.to_string()),
    ];
    let mut tensors = Vec::with_capacity(8);
    for kind in FAMILY_KINDS {
        let (u, v) = lg.factor(kind);
        tensors.push((format!("u.{}", kind.tag()), u.clone()));
        tensors.push((format!("v.{}", kind.tag()), v.clone()));
    }
    write_container(path, &Container { magic: MAGIC_LEARNGENE, version: FORMAT_VERSION, header, tensors })
}

pub fn load_learngene(path: &Path) -> Result<Learngene<Elem>> {
    let c = read_container(path, Some(MAGIC_LEARNGENE))?;
    let p = path.display().to_string();
    let expected = learngene_tensor_names();
    for name in &expected {
        if c.tensor(name).is_none() {
            return Err(FormatError::MissingTensor { path: p, name: name.clone() }.into());
        }
    }
    for (name, _) in &c.tensors {
        if !expected.iter().any(|e| e == name) {
            return Err(FormatError::UnexpectedTensor { path: p, name: name.clone() }.into());
        }
    }
    let meta = LearngeneMeta {
        width: c.require_header(path, "d")?,
        hidden: c.require_header(path, "d_prime")?,
        rank: c.require_header(path, "r")?,
        group_size: c.require_header(path, "s")?,
        condensation_steps: c.require_header(path, "condensation_steps")?,
        seed: c.require_header(path, "seed")?,
        format_version: c.version,
    };
    let mut factors = Vec::with_capacity(4);
    for kind in FAMILY_KINDS {
        let u = c.tensor(&format!("u.{}", kind.tag())).unwrap().clone();
        let v = c.tensor(&format!("v.{}", kind.tag())).unwrap().clone();
        let (m1, m2) = kind.matrix_shape(meta.width, meta.hidden);
        if u.shape != [m1, meta.rank] || v.shape != [m2, meta.rank] {
            return Err(FormatError::Index {
                path: p,
                detail: format!("factor {} shapes {:?}/{:?} disagree with metadata", kind.tag(), u.shape, v.shape),
            }
            .into());
        }
        factors.push((kind, u, v));
    }
    Ok(Learngene { factors, meta })
}

// ---- model checkpoints --------------------------------------------------------------

/// Header metadata carried by every model checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub model: DiTConfig,
    pub t_diff: usize,
    pub dataset: String,
    pub seed: u64,
    pub step: u64,
}

fn config_header(meta: &CheckpointMeta) -> Vec<(String, String)> {
    let m = &meta.model;
    let mut kv = vec![
        ("model.image_size".into(), m.image_size.to_string()),
        ("model.channels".into(), m.channels.to_string()),
        ("model.patch_size".into(), m.patch_size.to_string()),
        ("model.width".into(), m.width.to_string()),
        ("model.hidden".into(), m.hidden.to_string()),
        ("model.heads".into(), m.heads.to_string()),
        ("model.depth".into(), m.depth.to_string()),
        ("model.num_classes".into(), m.num_classes.to_string()),
    ];
    match m.backing {
        Backing::Plain => kv.push(("model.backing".into(), "plain".into())),
        Backing::Factorized { rank, group_size } => {
            kv.push(("model.backing".into(), "factorized".into()));
            kv.push(("model.rank".into(), rank.to_string()));
            kv.push(("model.group_size".into(), group_size.to_string()));
        }
    }
    kv.push(("t_diff".into(), meta.t_diff.to_string()));
    kv.push(("dataset".into(), meta.dataset.clone()));
    kv.push(("seed".into(), meta.seed.to_string()));
    kv.push(("step".into(), meta.step.to_string()));
    kv
}

pub fn save_model_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<Elem>,
    ema: Option<&EmaModel<Elem>>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<Elem>)> = Vec::with_capacity(store.len() * 2);
    for (_, name, t) in store.iter() {
        let mut clean = t.clone();
        clean.grad = None;
        clean.requires_grad = false;
        tensors.push((name.to_string(), clean));
    }
    if let Some(e) = ema {
        for (name, data) in e.tensors() {
            let shape = store.get(store.id(name).expect("ema name in store")).shape.clone();
            tensors.push((format!("ema.{name}"), Tensor::new(shape, data.to_vec()).expect("ema shape")));
        }
    }
    write_container(
        path,
        &Container {
            magic: MAGIC_CHECKPOINT,
            version: FORMAT_VERSION,
            header: config_header(meta),
            tensors,
        },
    )
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub model: DiTModel<Elem>,
    pub store: ParamStore<Elem>,
    pub ema: Option<EmaModel<Elem>>,
}

pub fn load_model_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let c = read_container(path, Some(MAGIC_CHECKPOINT))?;
    let p = path.display().to_string();
    let backing = match c.header_value("model.backing") {
        Some("plain") => Backing::Plain,
        Some("factorized") => Backing::Factorized {
            rank: c.require_header(path, "model.rank")?,
            group_size: c.require_header(path, "model.group_size")?,
        },
        other => {
            return Err(FormatError::Header {
                path: p,
                detail: format!("model.backing is {other:?}, expected plain or factorized"),
            }
            .into())
        }
    };
    let model_cfg = DiTConfig {
        image_size: c.require_header(path, "model.image_size")?,
        channels: c.require_header(path, "model.channels")?,
        patch_size: c.require_header(path, "model.patch_size")?,
        width: c.require_header(path, "model.width")?,
        hidden: c.require_header(path, "model.hidden")?,
        heads: c.require_header(path, "model.heads")?,
        depth: c.require_header(path, "model.depth")?,
        num_classes: c.require_header(path, "model.num_classes")?,
        backing,
    };
    let meta = CheckpointMeta {
        model: model_cfg,
        t_diff: c.require_header(path, "t_diff")?,
        dataset: c.header_value("dataset").unwrap_or_default().to_string(),
        seed: c.require_header(path, "seed")?,
        step: c.require_header(path, "step")?,
    };

    // Rebuild the model skeleton, then overwrite every parameter from the file.
    let mut store = ParamStore::new();
    let model = DiTModel::new(meta.model, &mut store, &DeskRng::seed_from(0))?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let Some(t) = c.tensor(&name) else {
            return Err(FormatError::MissingTensor { path: p, name }.into());
        };
        if t.shape != store.get(id).shape {
            return Err(FormatError::Index {
                path: p,
                detail: format!("tensor {name} has shape {:?}, model expects {:?}", t.shape, store.get(id).shape),
            }
            .into());
        }
        store.get_mut(id).data = t.data.clone();
        store.get_mut(id).requires_grad = true;
    }

    let has_ema = c.tensors.iter().any(|(n, _)| n.starts_with("ema."));
    let ema = if has_ema {
        let mut shadow = Vec::with_capacity(store.len());
        for (_, name, _) in store.iter() {
            let ema_name = format!("ema.{name}");
            let Some(t) = c.tensor(&ema_name) else {
                return Err(FormatError::MissingTensor { path: p, name: ema_name }.into());
            };
            shadow.push((name.to_string(), t.data.clone()));
        }
        Some(EmaModel::from_tensors(EMA_DECAY, shadow))
    } else {
        None
    };
    Ok(LoadedCheckpoint { meta, model, store, ema })
}

// ---- run configs and sidecars ----------------------------------------------------------

/// Parse a TOML condensation config; unknown keys are hard errors.
pub fn load_condense_config(path: &Path) -> Result<CondenseConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write the replay sidecar next to an output artifact. Contents are fully
/// deterministic (no timestamps): command, code version, and the flat
/// key-value dump the caller supplies.
pub fn write_run_meta(artifact: &Path, command: &str, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("command = {command}\n"));
    text.push_str(&format!("code_version = {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let meta_path = sidecar_path(artifact);
    atomic_write(&meta_path, text.as_bytes())
}

pub fn sidecar_path(artifact: &Path) -> std::path::PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.meta");
    artifact.with_file_name(name)
}

/// Human-readable summary of any container file: header, tensor index, and
/// parameter counts.
pub fn inspect(path: &Path) -> Result<String> {
    let c = read_container(path, None)?;
    let kind = if c.magic == MAGIC_LEARNGENE { "learngene" } else { "checkpoint" };
    let mut out = String::new();
    out.push_str(&format!("{kind} v{} ({})\n", c.version, path.display()));
    for (k, v) in &c.header {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out.push_str(&format!("  tensors: {}\n", c.tensors.len()));
    let mut total = 0u64;
    for (name, t) in &c.tensors {
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        out.push_str(&format!("    {name} f64 {shape} ({} values)\n", t.numel()));
        if !name.starts_with("ema.") {
            total += t.numel() as u64;
        }
    }
    if c.magic == MAGIC_LEARNGENE {
        let lg = load_learngene(path)?;
        out.push_str(&format!("  params: total {total}, transferred {}\n", lg.transferred_params()));
    } else {
        // Recover transfer accounting when the checkpoint is factorized.
        let loaded = load_model_checkpoint(path)?;
        let counts = loaded.model.param_counts(&loaded.store);
        out.push_str(&format!(
            "  params: total {}, transferred {}, trainable_at_init {}\n",
            counts.total, counts.transferred, counts.trainable_at_init
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorized::init_shared_factors;
    use crate::factorized::Grouping;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("fine-io-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn sample_learngene() -> Learngene<Elem> {
        let rng = DeskRng::seed_from(3);
        let mut store = ParamStore::new();
        let fams = init_shared_factors(&mut store, 16, 64, Grouping { rank: 8, group_size: 2 }, 2, &rng).unwrap();
        crate::factorized::extract_learngene(&fams, &store, 42, 3, 16, 64).unwrap()
    }

    #[test]
    fn learngene_roundtrip_is_bit_exact() {
        let dir = tmpdir("lg");
        let path = dir.join("g.lgne");
        let lg = sample_learngene();
        save_learngene(&path, &lg).unwrap();
        let back = load_learngene(&path).unwrap();
        assert_eq!(back.meta, lg.meta);
        for ((ka, ua, va), (kb, ub, vb)) in lg.factors.iter().zip(&back.factors) {
            assert_eq!(ka, kb);
            assert_eq!(ua.data, ub.data);
            assert_eq!(va.data, vb.data);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn learngene_roundtrip_preserves_materialization() {
        // extract -> serialize -> load -> rebuild with the ORIGINAL sigmas
        // must reproduce the original weights bit-exactly.
        let dir = tmpdir("remat");
        let path = dir.join("g.lgne");
        let rng = DeskRng::seed_from(29);
        let mut store = ParamStore::new();
        let grouping = Grouping { rank: 8, group_size: 2 };
        let fams = init_shared_factors(&mut store, 16, 64, grouping, 3, &rng).unwrap();
        let originals: Vec<Tensor<Elem>> =
            fams.iter().map(|f| f.materialize_plain(&store, 1).unwrap()).collect();

        let lg = crate::factorized::extract_learngene(&fams, &store, 5, 29, 16, 64).unwrap();
        save_learngene(&path, &lg).unwrap();
        let loaded = load_learngene(&path).unwrap();

        let mut store2 = ParamStore::new();
        let rng2 = DeskRng::seed_from(999); // fresh sigmas, overwritten below
        for (fam, orig_w) in fams.iter().zip(&originals) {
            let (u, v) = loaded.factor(fam.kind);
            let rebuilt = crate::factorized::family_from_factors(
                &mut store2,
                fam.kind,
                u.clone(),
                v.clone(),
                grouping,
                3,
                &rng2,
            );
            for (dst, src) in rebuilt.sigmas.iter().zip(&fam.sigmas) {
                store2.get_mut(*dst).data = store.get(*src).data.clone();
            }
            let w = rebuilt.materialize_plain(&store2, 1).unwrap();
            let bits = |t: &Tensor<Elem>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&w), bits(orig_w), "{:?}", fam.kind);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let dir = tmpdir("crc");
        let path = dir.join("g.lgne");
        save_learngene(&path, &sample_learngene()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 100; // inside the payload
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match load_learngene(&path).unwrap_err() {
            Error::Format(FormatError::Crc { .. }) => {}
            other => panic!("expected CRC error, got {other}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_learngene_tensor_is_named() {
        let dir = tmpdir("schema");
        let path = dir.join("g.lgne");
        let lg = sample_learngene();
        // Write a container that drops v.out.
        let mut tensors = Vec::new();
        for kind in FAMILY_KINDS {
            let (u, v) = lg.factor(kind);
            tensors.push((format!("u.{}", kind.tag()), u.clone()));
            if kind != crate::factorized::FamilyKind::Out {
                tensors.push((format!("v.{}", kind.tag()), v.clone()));
            }
        }
        let header = vec![
            ("d".to_string(), "16".to_string()),
            ("d_prime".to_string(), "64".to_string()),
            ("r".to_string(), "8".to_string()),
            ("s".to_string(), "2".to_string()),
            ("condensation_steps".to_string(), "42".to_string()),
            ("seed".to_string(), "3".to_string()),
        ];
        write_container(&path, &Container { magic: MAGIC_LEARNGENE, version: FORMAT_VERSION, header, tensors })
            .unwrap();
        let err = load_learngene(&path).unwrap_err().to_string();
        assert!(err.contains("v.out"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn wrong_magic_and_future_version_are_rejected() {
        let dir = tmpdir("magic");
        let path = dir.join("x.bin");
        std::fs::write(&path, b"NOPE00000000000000000000").unwrap();
        assert!(matches!(
            read_container(&path, None).unwrap_err(),
            Error::Format(FormatError::BadMagic { .. })
        ));

        let lg_path = dir.join("g.lgne");
        save_learngene(&lg_path, &sample_learngene()).unwrap();
        let mut bytes = std::fs::read(&lg_path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&lg_path, &bytes).unwrap();
        assert!(matches!(
            read_container(&lg_path, None).unwrap_err(),
            Error::Format(FormatError::VersionAhead { found: 99, .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_header_keys_are_ignored() {
        let dir = tmpdir("fwd");
        let path = dir.join("g.lgne");
        let lg = sample_learngene();
        let mut header = vec![
            ("d".to_string(), "16".to_string()),
            ("d_prime".to_string(), "64".to_string()),
            ("r".to_string(), "8".to_string()),
            ("s".to_string(), "2".to_string()),
            ("condensation_steps".to_string(), "42".to_string()),
            ("seed".to_string(), "3".to_string()),
        ];
        header.push(("future.extension".to_string(), "whatever".to_string()));
        let mut tensors = Vec::new();
        for kind in FAMILY_KINDS {
            let (u, v) = lg.factor(kind);
            tensors.push((format!("u.{}", kind.tag()), u.clone()));
            tensors.push((format!("v.{}", kind.tag()), v.clone()));
        }
        write_container(&path, &Container { magic: MAGIC_LEARNGENE, version: FORMAT_VERSION, header, tensors })
            .unwrap();
        assert!(load_learngene(&path).is_ok());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_roundtrip_with_ema() {
        let dir = tmpdir("ckpt");
        let path = dir.join("m.fine");
        let cfg = DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            width: 16,
            hidden: 0,
            heads: 2,
            depth: 2,
            num_classes: 2,
            backing: Backing::Factorized { rank: 8, group_size: 2 },
        };
        let mut store = ParamStore::new();
        let model = DiTModel::new(cfg, &mut store, &DeskRng::seed_from(5)).unwrap();
        let ema = EmaModel::new(&store, EMA_DECAY);
        let meta = CheckpointMeta {
            model: model.cfg,
            t_diff: 50,
            dataset: "shapes-A".into(),
            seed: 5,
            step: 123,
        };
        save_model_checkpoint(&path, &meta, &store, Some(&ema)).unwrap();
        let loaded = load_model_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.step, 123);
        assert_eq!(loaded.meta.model, model.cfg);
        assert_eq!(loaded.store.byte_snapshot(), store.byte_snapshot());
        assert!(loaded.ema.is_some());

        let report = inspect(&path).unwrap();
        assert!(report.contains("checkpoint"));
        assert!(report.contains("transferred"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn plain_checkpoint_roundtrip() {
        let dir = tmpdir("plain");
        let path = dir.join("m.fine");
        let cfg = DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            width: 16,
            hidden: 0,
            heads: 2,
            depth: 2,
            num_classes: 0,
            backing: Backing::Plain,
        };
        let mut store = ParamStore::new();
        let model = DiTModel::new(cfg, &mut store, &DeskRng::seed_from(8)).unwrap();
        let meta = CheckpointMeta { model: model.cfg, t_diff: 20, dataset: String::new(), seed: 8, step: 0 };
        save_model_checkpoint(&path, &meta, &store, None).unwrap();
        let loaded = load_model_checkpoint(&path).unwrap();
        assert!(loaded.ema.is_none());
        assert!(loaded.model.families.is_empty());
        assert_eq!(loaded.store.byte_snapshot(), store.byte_snapshot());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tmpdir("cfg");
        let path = dir.join("c.toml");
        std::fs::write(
            &path,
            r#"
dataset = "shapes-A"
seed = 1
steps = 10
typo_key = 5

[model]
image_size = 8
channels = 1
patch_size = 2
width = 16
heads = 2
depth = 2

[model.backing]
kind = "factorized"
rank = 8
group_size = 2
"#,
        )
        .unwrap();
        let err = load_condense_config(&path).unwrap_err().to_string();
        assert!(err.contains("typo_key"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
