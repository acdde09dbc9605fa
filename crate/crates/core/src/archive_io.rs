//! On-disk archive layout.
//!
//! ```text
//! <dir>/manifest.toml       rounds, lambda, gamma, C, model dimension, checksums
//! <dir>/round-<t>.bin       model (dim x f64 LE), then per stored client:
//!                           client_id (u64 LE), weight (f64 LE), update (dim x f64 LE)
//! ```
//!
//! Every round file is checked against its SHA-256 digest on load. A load
//! either returns the complete archive or an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::selection::{Archive, ArchiveMeta, ArchivedRound, ClientUpdate};
use crate::vector::ParamVector;

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    lambda: f64,
    gamma: f64,
    num_clients: usize,
    model_dim: usize,
    #[serde(default)]
    rounds: Vec<ManifestRound>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRound {
    round: u64,
    file: String,
    clients: Vec<usize>,
    sha256: String,
}

fn round_file(round: u64) -> String {
    format!("round-{round:06}.bin")
}

pub(crate) fn encode_f64s(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_round(r: &ArchivedRound) -> Vec<u8> {
    let dim = r.model.len();
    let mut out = Vec::with_capacity(8 * (dim + r.updates.len() * (dim + 2)));
    encode_f64s(r.model.as_slice(), &mut out);
    for (client, u) in &r.updates {
        out.extend_from_slice(&(*client as u64).to_le_bytes());
        out.extend_from_slice(&u.weight.to_le_bytes());
        encode_f64s(u.update.as_slice(), &mut out);
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn word(&mut self) -> Result<[u8; 8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::format(self.path, self.pos as u64, "unexpected end of file"))?;
        self.pos += 8;
        Ok(chunk.try_into().expect("8-byte slice"))
    }

    fn f64s(&mut self, n: usize) -> Result<ParamVector> {
        let at = self.pos;
        let values = (0..n).map(|_| self.word().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        ParamVector::new(values).map_err(|e| Error::format(self.path, at as u64, e.to_string()))
    }
}

fn decode_round(path: &Path, bytes: &[u8], entry: &ManifestRound, dim: usize) -> Result<ArchivedRound> {
    let expected = 8 * (dim + entry.clients.len() * (dim + 2));
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("file holds {} bytes, manifest implies {expected}", bytes.len()),
        ));
    }
    let mut cur = Cursor { path, bytes, pos: 0 };
    let model = cur.f64s(dim)?;
    let mut updates = BTreeMap::new();
    for &listed in &entry.clients {
        let at = cur.pos as u64;
        let client = u64::from_le_bytes(cur.word()?) as usize;
        if client != listed {
            return Err(Error::format(path, at, format!("client {client} where manifest lists {listed}")));
        }
        let weight = f64::from_le_bytes(cur.word()?);
        let update = cur.f64s(dim)?;
        updates.insert(client, ClientUpdate { weight, update });
    }
    Ok(ArchivedRound { round: entry.round, model, updates })
}

/// Writes `archive` under `dir`, creating the directory if needed.
pub fn persist_archive(archive: &Archive, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        lambda: archive.meta.lambda,
        gamma: archive.meta.gamma,
        num_clients: archive.meta.num_clients,
        model_dim: archive.meta.model_dim,
        rounds: Vec::with_capacity(archive.len()),
    };
    for r in &archive.rounds {
        let bytes = encode_round(r);
        let file = round_file(r.round);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.rounds.push(ManifestRound {
            round: r.round,
            file,
            clients: r.updates.keys().copied().collect(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::State(format!("manifest encoding: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads an archive written by [`persist_archive`], verifying every checksum.
pub fn load_archive(dir: &Path) -> Result<Archive> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| {
        let offset = e.span().map_or(0, |s| s.start as u64);
        Error::format(&manifest_path, offset, e.message().to_string())
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            0,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }

    let mut rounds = Vec::with_capacity(manifest.rounds.len());
    for entry in &manifest.rounds {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::format(&manifest_path, 0, format!("suspicious round file name {:?}", entry.file)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != entry.sha256 {
            return Err(Error::format(&path, 0, format!("checksum mismatch: {digest} != {}", entry.sha256)));
        }
        let round = decode_round(&path, &bytes, entry, manifest.model_dim)?;
        if let Some(prev) = rounds.last().map(|r: &ArchivedRound| r.round) {
            if round.round <= prev {
                return Err(Error::format(&manifest_path, 0, format!("round {} listed after {prev}", round.round)));
            }
        }
        rounds.push(round);
    }
    Ok(Archive {
        meta: ArchiveMeta {
            lambda: manifest.lambda,
            gamma: manifest.gamma,
            num_clients: manifest.num_clients,
            model_dim: manifest.model_dim,
        },
        rounds,
    })
}

/// Raw little-endian f64 model file, the same encoding as archived models.
pub fn write_model(params: &ParamVector, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    encode_f64s(params.as_slice(), &mut bytes);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path, expected_len: usize) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::format(
            path,
            bytes.len().min(expected_len * 8) as u64,
            format!("model file holds {} bytes, expected {}", bytes.len(), expected_len * 8),
        ));
    }
    Cursor { path, bytes: &bytes, pos: 0 }.f64s(expected_len)
}
