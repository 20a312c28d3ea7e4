//! Durable binary archives for agents, datasets and approximator models.
//!
//! Layout: magic, format version, kind tag, a TOML metadata echo, a tensor
//! table (names, shapes, little-endian f64 payloads), and a trailing
//! SHA-256 over everything before it. Load rejects unknown versions,
//! truncation and any checksum mismatch; round-trips are bit-exact. No
//! wall-clock metadata is stored, so identical content produces identical
//! bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AgentConfig, AgentError, TrainedAgent};
use crate::approximator::{build_model, ApproximatorError, Seq2SeqConfig, Seq2SeqModel};
use crate::envs::EnvKind;
use crate::tensor::Tensor;
use crate::trajectory::{Dataset, Episode, Role};

const MAGIC: &[u8; 8] = b"RLABARCH";
const VERSION: u32 = 1;
/// Recorded in the header as creation metadata; deliberately constant per
/// build so re-running a config reproduces archives byte for byte.
const TOOL: &str = concat!("rlab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to overwrite existing file {0} (use force)")]
    WouldOverwrite(String),
    #[error("not an archive ({0})")]
    BadMagic(String),
    #[error("unsupported archive version {0}")]
    UnknownVersion(u32),
    #[error("archive truncated")]
    Truncated,
    #[error("checksum mismatch: archive corrupted")]
    Checksum,
    #[error("archive holds a {found}, expected a {expected}")]
    WrongKind { expected: String, found: String },
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error(transparent)]
    Meta(#[from] toml::de::Error),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Approximator(#[from] ApproximatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Agent,
    Dataset,
    Seq2Seq,
}

impl ArchiveKind {
    fn id(&self) -> &'static str {
        match self {
            ArchiveKind::Agent => "agent",
            ArchiveKind::Dataset => "dataset",
            ArchiveKind::Seq2Seq => "seq2seq",
        }
    }

    fn parse(s: &str) -> Option<ArchiveKind> {
        match s {
            "agent" => Some(ArchiveKind::Agent),
            "dataset" => Some(ArchiveKind::Dataset),
            "seq2seq" => Some(ArchiveKind::Seq2Seq),
            _ => None,
        }
    }
}

/// In-memory archive: kind, metadata echo, named tensors.
pub struct Archive {
    pub kind: ArchiveKind,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        if self.pos + n > self.buf.len() {
            return Err(ArchiveError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], ArchiveError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, ArchiveError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| ArchiveError::Malformed("bad utf8".into()))
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.kind.id().as_bytes());
        put_bytes(&mut out, TOOL.as_bytes());
        put_bytes(&mut out, self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Archive, ArchiveError> {
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(ArchiveError::Truncated);
        }
        let (body, checksum) = buf.split_at(buf.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(ArchiveError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ArchiveError::BadMagic("wrong magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ArchiveError::UnknownVersion(version));
        }
        let kind_s = r.string()?;
        let kind = ArchiveKind::parse(&kind_s)
            .ok_or_else(|| ArchiveError::Malformed(format!("unknown kind {kind_s}")))?;
        let _tool = r.string()?;
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = r.u32()? as usize;
            if numel != shape.iter().product::<usize>() {
                return Err(ArchiveError::Malformed(format!("tensor {name} volume mismatch")));
            }
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            tensors.push((
                name,
                Tensor::new(shape, data).map_err(|e| ArchiveError::Malformed(e.to_string()))?,
            ));
        }
        if r.pos != body.len() {
            return Err(ArchiveError::Malformed("trailing bytes".into()));
        }
        Ok(Archive { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<(), ArchiveError> {
        if path.exists() && !force {
            return Err(ArchiveError::WouldOverwrite(path.display().to_string()));
        }
        let io = |source| ArchiveError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(io)?;
            }
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive, ArchiveError> {
        let buf = fs::read(path).map_err(|source| ArchiveError::Io { path: path.display().to_string(), source })?;
        Archive::from_bytes(&buf)
    }
}

// ── agents ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct AgentMeta {
    env: EnvKind,
    config: AgentConfig,
    curve_steps: Vec<u64>,
    curve_scores: Vec<f64>,
}

pub fn save_agent(path: &Path, agent: &TrainedAgent, force: bool) -> Result<(), ArchiveError> {
    let meta = AgentMeta {
        env: agent.env(),
        config: agent.config().clone(),
        curve_steps: agent.training_curve().iter().map(|&(s, _)| s).collect(),
        curve_scores: agent.training_curve().iter().map(|&(_, v)| v).collect(),
    };
    let archive = Archive {
        kind: ArchiveKind::Agent,
        meta: toml::to_string(&meta).expect("serializable meta"),
        tensors: agent.parameters(),
    };
    archive.save(path, force)
}

pub fn load_agent(path: &Path) -> Result<TrainedAgent, ArchiveError> {
    let archive = Archive::load(path)?;
    if archive.kind != ArchiveKind::Agent {
        return Err(ArchiveError::WrongKind { expected: "agent".into(), found: archive.kind.id().into() });
    }
    let meta: AgentMeta = toml::from_str(&archive.meta)?;
    let curve = meta.curve_steps.into_iter().zip(meta.curve_scores).collect();
    Ok(TrainedAgent::from_parts(meta.env, meta.config, archive.tensors, curve)?)
}

// ── seq2seq models ──────────────────────────────────────────────────

pub fn save_seq2seq(path: &Path, model: &Seq2SeqModel, force: bool) -> Result<(), ArchiveError> {
    let archive = Archive {
        kind: ArchiveKind::Seq2Seq,
        meta: toml::to_string(model.config()).expect("serializable config"),
        tensors: model.parameters(),
    };
    archive.save(path, force)
}

pub fn load_seq2seq(path: &Path) -> Result<Seq2SeqModel, ArchiveError> {
    let archive = Archive::load(path)?;
    if archive.kind != ArchiveKind::Seq2Seq {
        return Err(ArchiveError::WrongKind { expected: "seq2seq".into(), found: archive.kind.id().into() });
    }
    let config: Seq2SeqConfig = toml::from_str(&archive.meta)?;
    let mut model = build_model(&config, 0)?;
    model.set_parameters(archive.tensors)?;
    Ok(model)
}

// ── datasets ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    env: EnvKind,
    episodes: usize,
    /// One char per episode: 't' train, 'e' eval; empty when unsplit.
    split: String,
}

pub fn save_dataset(path: &Path, dataset: &Dataset, force: bool) -> Result<(), ArchiveError> {
    let split = match dataset.split() {
        None => String::new(),
        Some(roles) => roles.iter().map(|r| if *r == Role::Train { 't' } else { 'e' }).collect(),
    };
    let meta = DatasetMeta { env: dataset.env, episodes: dataset.episodes.len(), split };
    let mut tensors = Vec::with_capacity(dataset.episodes.len() * 3);
    for (i, ep) in dataset.episodes.iter().enumerate() {
        let len = ep.len();
        let mut obs_shape = vec![len];
        obs_shape.extend_from_slice(ep.observations[0].shape());
        let mut obs_data = Vec::with_capacity(len * ep.observations[0].numel());
        for o in &ep.observations {
            obs_data.extend_from_slice(o.data());
        }
        tensors.push((
            format!("ep{i}.obs"),
            Tensor::new(obs_shape, obs_data).map_err(|e| ArchiveError::Malformed(e.to_string()))?,
        ));
        tensors.push((format!("ep{i}.act"), Tensor::from_vec(ep.actions.iter().map(|&a| a as f64).collect())));
        tensors.push((format!("ep{i}.rew"), Tensor::from_vec(ep.rewards.clone())));
    }
    let archive = Archive {
        kind: ArchiveKind::Dataset,
        meta: toml::to_string(&meta).expect("serializable meta"),
        tensors,
    };
    archive.save(path, force)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, ArchiveError> {
    let archive = Archive::load(path)?;
    if archive.kind != ArchiveKind::Dataset {
        return Err(ArchiveError::WrongKind { expected: "dataset".into(), found: archive.kind.id().into() });
    }
    let meta: DatasetMeta = toml::from_str(&archive.meta)?;
    let mut episodes = Vec::with_capacity(meta.episodes);
    let mut it = archive.tensors.into_iter();
    for i in 0..meta.episodes {
        let (on, obs) = it.next().ok_or(ArchiveError::Truncated)?;
        let (an, act) = it.next().ok_or(ArchiveError::Truncated)?;
        let (rn, rew) = it.next().ok_or(ArchiveError::Truncated)?;
        if on != format!("ep{i}.obs") || an != format!("ep{i}.act") || rn != format!("ep{i}.rew") {
            return Err(ArchiveError::Malformed(format!("unexpected entries for episode {i}")));
        }
        let len = obs.shape()[0];
        let frame_shape: Vec<usize> = obs.shape()[1..].to_vec();
        let frame_len: usize = frame_shape.iter().product();
        let observations = (0..len)
            .map(|t| {
                Tensor::new(frame_shape.clone(), obs.data()[t * frame_len..(t + 1) * frame_len].to_vec())
                    .map_err(|e| ArchiveError::Malformed(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        episodes.push(Episode {
            observations,
            actions: act.data().iter().map(|&a| a as usize).collect(),
            rewards: rew.data().to_vec(),
        });
    }
    if meta.split.is_empty() {
        Ok(Dataset::new(meta.env, episodes))
    } else {
        let roles: Vec<Role> =
            meta.split.chars().map(|c| if c == 't' { Role::Train } else { Role::Eval }).collect();
        Ok(Dataset::with_split(meta.env, episodes, roles))
    }
}
