//! Binary model checkpoints.
//!
//! A checkpoint file is one self-delimiting block:
//!
//! ```text
//! "SFAC"  magic
//! u32 LE  format version (currently 1)
//! u32 LE  layer count L
//! u32 LE  layer size, L times
//! u8      activation tag (0 = relu, 1 = tanh)
//! u32 LE  provenance byte length, then that many UTF-8 bytes
//! f32 LE  parameter, one per entry of the flat order
//! u64 LE  FNV-1a digest of every preceding byte
//! ```
//!
//! optionally followed by a cached Fisher diagonal in the same style:
//!
//! ```text
//! "SFAF"  magic
//! u32 LE  entry count (must equal the parameter count)
//! f32 LE  entry values
//! u64 LE  FNV-1a digest of the block's preceding bytes
//! ```
//!
//! Parameters train in f64 but are stored in f32 — checkpoints halve their
//! disk footprint and every exactness claim in this crate is about
//! in-memory values, never round-tripped ones.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::nnet::{Activation, FisherDiagonal, MlpSpec, ModelParams};
use crate::param::ParamVector;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

const BLOCK_MAGIC: &[u8; 4] = b"SFAC";
const FISHER_MAGIC: &[u8; 4] = b"SFAF";

/// Where a checkpoint's weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    /// Strategy tag, e.g. `sequential`, `sfa`, or `merge:ties`.
    pub strategy: String,
    /// Names of the tasks trained into these weights, in order.
    pub tasks: Vec<String>,
    pub seed: u64,
    /// Digests of the checkpoints this one was derived from (previous
    /// boundary for training runs, all inputs for merges). Empty for a
    /// run's first boundary.
    pub parents: Vec<u64>,
}

impl Provenance {
    fn validate(&self) -> Result<()> {
        let ok = |s: &str| !s.is_empty() && !s.contains(['\n', ',']);
        if !ok(&self.strategy) {
            return Err(Error::Domain(format!(
                "invalid strategy tag {:?}: must be non-empty without ',' or newline",
                self.strategy
            )));
        }
        if let Some(bad) = self.tasks.iter().find(|t| !ok(t)) {
            return Err(Error::Domain(format!(
                "invalid task name {bad:?}: must be non-empty without ',' or newline"
            )));
        }
        Ok(())
    }

    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy={}", self.strategy);
        let _ = writeln!(s, "tasks={}", self.tasks.join(","));
        let _ = writeln!(s, "seed={}", self.seed);
        let hex: Vec<String> = self.parents.iter().map(|d| format!("{d:016x}")).collect();
        let _ = writeln!(s, "parents={}", hex.join(","));
        s
    }

    fn parse(text: &str) -> std::result::Result<Provenance, String> {
        let mut strategy = None;
        let mut tasks = None;
        let mut seed = None;
        let mut parents = None;
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("provenance line without '=': {line:?}"))?;
            match key {
                "strategy" => strategy = Some(value.to_string()),
                "tasks" => {
                    tasks = Some(if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').map(str::to_string).collect()
                    })
                }
                "seed" => {
                    seed = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| format!("bad provenance seed {value:?}"))?,
                    )
                }
                "parents" => {
                    let mut list = Vec::new();
                    for part in value.split(',').filter(|p| !p.is_empty()) {
                        list.push(
                            u64::from_str_radix(part, 16)
                                .map_err(|_| format!("bad parent digest {part:?}"))?,
                        );
                    }
                    parents = Some(list);
                }
                other => return Err(format!("unknown provenance field {other:?}")),
            }
        }
        Ok(Provenance {
            strategy: strategy.ok_or("provenance missing strategy")?,
            tasks: tasks.ok_or("provenance missing tasks")?,
            seed: seed.ok_or("provenance missing seed")?,
            parents: parents.ok_or("provenance missing parents")?,
        })
    }
}

/// A model snapshot plus its provenance and an optional cached Fisher
/// diagonal.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    params: ModelParams,
    provenance: Provenance,
    fisher: Option<FisherDiagonal>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, provenance: Provenance) -> Result<Self> {
        provenance.validate()?;
        Ok(Checkpoint {
            params,
            provenance,
            fisher: None,
        })
    }

    /// Attach a cached Fisher diagonal (must match the parameter count).
    pub fn with_fisher(mut self, fisher: FisherDiagonal) -> Result<Self> {
        if fisher.len() != self.params.flat().len() {
            return Err(Error::Dimension {
                context: "checkpoint fisher length",
                left: fisher.len(),
                right: self.params.flat().len(),
            });
        }
        self.fisher = Some(fisher);
        Ok(self)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn spec(&self) -> &MlpSpec {
        self.params.spec()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn fisher(&self) -> Option<&FisherDiagonal> {
        self.fisher.as_ref()
    }

    /// The digest this checkpoint stores on disk: FNV-1a over the
    /// serialized main block (everything before the digest itself).
    pub fn digest(&self) -> u64 {
        fnv1a(&self.main_block_bytes())
    }

    fn main_block_bytes(&self) -> Vec<u8> {
        let spec = self.params.spec();
        let mut out = Vec::new();
        out.extend_from_slice(BLOCK_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.layer_sizes().len() as u32).to_le_bytes());
        for &size in spec.layer_sizes() {
            out.extend_from_slice(&(size as u32).to_le_bytes());
        }
        out.push(match spec.activation() {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        let prov = self.provenance.render();
        out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
        out.extend_from_slice(prov.as_bytes());
        for &v in self.params.flat().as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut bytes = ckpt.main_block_bytes();
    let digest = fnv1a(&bytes);
    bytes.extend_from_slice(&digest.to_le_bytes());
    if let Some(fisher) = &ckpt.fisher {
        let start = bytes.len();
        bytes.extend_from_slice(FISHER_MAGIC);
        bytes.extend_from_slice(&(fisher.len() as u32).to_le_bytes());
        for &v in fisher.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let fisher_digest = fnv1a(&bytes[start..]);
        bytes.extend_from_slice(&fisher_digest.to_le_bytes());
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Byte cursor that reports the offset of whatever it failed to read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated: expected {n} bytes of {what}, file has {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32_payload(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(4 * count, what)?;
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let v = f32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    self.path,
                    (start + 4 * i) as u64,
                    format!("non-finite {what} entry {i}"),
                ));
            }
            values.push(v as f64);
        }
        Ok(values)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.is_empty() {
        return Err(Error::format(path, 0, "empty file"));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = r.take(4, "magic")?;
    if magic != BLOCK_MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {magic:02x?}")));
    }
    let version_at = r.pos;
    let version = r.u32_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            version_at as u64,
            format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let layout_at = r.pos;
    let layer_count = r.u32_le("layer count")? as usize;
    let mut sizes = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        sizes.push(r.u32_le("layer size")? as usize);
    }
    let act_tag = r.take(1, "activation tag")?[0];
    let activation = match act_tag {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => {
            return Err(Error::format(
                path,
                (r.pos - 1) as u64,
                format!("unknown activation tag {other}"),
            ))
        }
    };
    let spec = MlpSpec::new(sizes, activation)
        .map_err(|e| Error::format(path, layout_at as u64, format!("bad layer layout: {e}")))?;

    let prov_at = r.pos;
    let prov_len = r.u32_le("provenance length")? as usize;
    let prov_bytes = r.take(prov_len, "provenance")?;
    let prov_text = std::str::from_utf8(prov_bytes)
        .map_err(|_| Error::format(path, prov_at as u64, "provenance is not UTF-8"))?;
    let provenance = Provenance::parse(prov_text)
        .map_err(|msg| Error::format(path, prov_at as u64, msg))?;

    let flat = r.f32_payload(spec.param_count(), "parameter")?;
    let digest_at = r.pos;
    let stored = r.u64_le("digest")?;
    let computed = fnv1a(&bytes[..digest_at]);
    if stored != computed {
        return Err(Error::format(
            path,
            digest_at as u64,
            format!("digest mismatch: stored {stored:016x}, computed {computed:016x}"),
        ));
    }

    let params = ModelParams::from_flat(spec, ParamVector::from_raw(flat))?;
    let mut ckpt = Checkpoint::new(params, provenance)?;

    if r.pos < bytes.len() {
        let block_at = r.pos;
        let magic = r.take(4, "fisher magic")?;
        if magic != FISHER_MAGIC {
            return Err(Error::format(
                path,
                block_at as u64,
                format!("unexpected trailing bytes (bad fisher magic {magic:02x?})"),
            ));
        }
        let count_at = r.pos;
        let count = r.u32_le("fisher count")? as usize;
        if count != ckpt.params.flat().len() {
            return Err(Error::format(
                path,
                count_at as u64,
                format!(
                    "fisher count {count} does not match parameter count {}",
                    ckpt.params.flat().len()
                ),
            ));
        }
        let values = r.f32_payload(count, "fisher")?;
        let fdigest_at = r.pos;
        let stored = r.u64_le("fisher digest")?;
        let computed = fnv1a(&bytes[block_at..fdigest_at]);
        if stored != computed {
            return Err(Error::format(
                path,
                fdigest_at as u64,
                format!("fisher digest mismatch: stored {stored:016x}, computed {computed:016x}"),
            ));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after fisher block"));
        }
        let fisher = FisherDiagonal::new(values)
            .map_err(|e| Error::format(path, block_at as u64, format!("bad fisher payload: {e}")))?;
        ckpt = ckpt.with_fisher(fisher)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::init_params;
    use crate::rng::Rng;
    use tempfile::tempdir;

    fn sample_spec(seed: u64) -> MlpSpec {
        let mut rng = Rng::new(seed);
        let depth = 2 + rng.below(3);
        let sizes: Vec<usize> = (0..depth).map(|_| 1 + rng.below(12)).collect();
        let act = if rng.below(2) == 0 {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        MlpSpec::new(sizes, act).unwrap()
    }

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let spec = sample_spec(seed);
        let params = init_params(&spec, seed ^ 0xABCD);
        let mut rng = Rng::new(seed.wrapping_mul(31));
        let provenance = Provenance {
            strategy: ["sequential", "sfa", "ewc", "merge:ties"][rng.below(4)].to_string(),
            tasks: (0..rng.below(4)).map(|i| format!("task-{i}")).collect(),
            seed: rng.next_u64(),
            parents: (0..rng.below(3)).map(|_| rng.next_u64()).collect(),
        };
        let mut ckpt = Checkpoint::new(params, provenance).unwrap();
        if rng.below(2) == 0 {
            let n = ckpt.params().flat().len();
            let fisher =
                FisherDiagonal::new((0..n).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap();
            ckpt = ckpt.with_fisher(fisher).unwrap();
        }
        ckpt
    }

    fn assert_f32_round_trip(before: &Checkpoint, after: &Checkpoint) {
        assert_eq!(before.spec(), after.spec());
        assert_eq!(before.provenance(), after.provenance());
        for (b, a) in before
            .params()
            .flat()
            .as_slice()
            .iter()
            .zip(after.params().flat().as_slice())
        {
            assert_eq!((*b as f32) as f64, *a);
        }
        match (before.fisher(), after.fisher()) {
            (None, None) => {}
            (Some(fb), Some(fa)) => {
                for (b, a) in fb.as_slice().iter().zip(fa.as_slice()) {
                    assert_eq!((*b as f32) as f64, *a);
                }
            }
            _ => panic!("fisher presence changed across round trip"),
        }
    }

    #[test]
    fn round_trip_preserves_metadata_and_f32_parameters() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        for seed in 0..100 {
            let ckpt = sample_checkpoint(seed);
            save_checkpoint(&ckpt, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_f32_round_trip(&ckpt, &loaded);
            // saving the loaded checkpoint is byte-identical (f32 rounding
            // is idempotent)
            let path2 = dir.path().join("model2.sfac");
            save_checkpoint(&loaded, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }

    #[test]
    fn digest_matches_file_contents() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        let ckpt = sample_checkpoint(7);
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // in-memory digest appears verbatim where the main block ends
        let d = ckpt.digest();
        let pos = bytes
            .windows(8)
            .position(|w| w == d.to_le_bytes())
            .expect("digest bytes present");
        // everything before it hashes to the digest
        assert_eq!(fnv1a(&bytes[..pos]), d);
    }

    #[test]
    fn corrupting_a_payload_byte_breaks_the_digest() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let ckpt = Checkpoint::new(
            init_params(&spec, 5),
            Provenance {
                strategy: "sequential".into(),
                tasks: vec!["task-0".into()],
                seed: 5,
                parents: vec![],
            },
        )
        .unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 12; // inside the f32 payload
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            err.to_string().contains("digest mismatch"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn empty_file_is_a_format_error_at_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.sfac");
        std::fs::write(&path, b"").unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_and_version_name_their_offsets() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        let ckpt = sample_checkpoint(3);
        save_checkpoint(&ckpt, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("expected format error, got {other}"),
        }

        let mut bad = good.clone();
        bad[4] = 0xFF;
        std::fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 4);
                assert!(message.contains("version"));
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        let ckpt = sample_checkpoint(11);
        save_checkpoint(&ckpt, &path).unwrap();
        let good = std::fs::read(&path).unwrap();
        for keep in [3, 7, good.len() / 2, good.len() - 1] {
            std::fs::write(&path, &good[..keep]).unwrap();
            match load_checkpoint(&path).unwrap_err() {
                Error::Format { message, .. } => {
                    assert!(
                        message.contains("truncated") || message.contains("digest"),
                        "unexpected message at keep={keep}: {message}"
                    );
                }
                other => panic!("expected format error, got {other}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let ckpt = Checkpoint::new(
            init_params(&spec, 1),
            Provenance {
                strategy: "sequential".into(),
                tasks: vec![],
                seed: 1,
                parents: vec![],
            },
        )
        .unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"JUNK");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err}");
    }

    #[test]
    fn fisher_block_round_trips_and_checks_its_own_digest() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sfac");
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        let params = init_params(&spec, 9);
        let n = params.flat().len();
        let fisher = FisherDiagonal::new((0..n).map(|i| i as f64 * 0.125).collect()).unwrap();
        let ckpt = Checkpoint::new(
            params,
            Provenance {
                strategy: "ewc".into(),
                tasks: vec!["task-0".into()],
                seed: 2,
                parents: vec![0xDEADBEEF],
            },
        )
        .unwrap()
        .with_fisher(fisher)
        .unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_f32_round_trip(&ckpt, &loaded);

        // flip a byte inside the fisher payload: the second digest trips
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 10;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("fisher"), "got {err}");
    }

    #[test]
    fn provenance_rejects_separator_characters() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let params = init_params(&spec, 1);
        let bad = Provenance {
            strategy: "a,b".into(),
            tasks: vec![],
            seed: 0,
            parents: vec![],
        };
        assert!(Checkpoint::new(params.clone(), bad).is_err());
        let bad = Provenance {
            strategy: "ok".into(),
            tasks: vec!["line\nbreak".into()],
            seed: 0,
            parents: vec![],
        };
        assert!(Checkpoint::new(params, bad).is_err());
    }

    #[test]
    fn fisher_length_mismatch_is_rejected() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let params = init_params(&spec, 1);
        let ckpt = Checkpoint::new(
            params,
            Provenance {
                strategy: "ewc".into(),
                tasks: vec![],
                seed: 0,
                parents: vec![],
            },
        )
        .unwrap();
        let short = FisherDiagonal::uniform(3, 1.0).unwrap();
        assert!(ckpt.with_fisher(short).is_err());
    }

    #[test]
    fn known_fnv1a_vectors() {
        // reference values for the 64-bit FNV-1a parameters
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }
}
