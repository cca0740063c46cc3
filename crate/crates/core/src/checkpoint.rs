//! `SGVL` checkpoint container.
//!
//! Layout: magic, version (u32 LE), header length (u32 LE), UTF-8 header of
//! `key=value` lines, tensor records, CRC32 (u32 LE) of every prior byte.
//! A tensor record is name length (u32), name, rank (u32), dims (u32 each)
//! and the values as little-endian f64.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::folding::FoldSpec;
use crate::params::{Group, GroupSet, ModelConfig, ModelParams};
use crate::quantizer::Codebook;
use crate::tensor::Tensor;
use crate::trainer::{OptimizerState, Stage, StagePlan, Trainer};

pub const MAGIC: &[u8; 4] = b"SGVL";
pub const VERSION: u32 = 1;

/// Training counters carried with the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainState {
    /// Stage that produced the file; `None` for a fresh initialisation.
    pub stage: Option<Stage>,
    /// Completed steps within `stage`.
    pub step: u64,
    pub seed: u64,
    /// Completed stages so far, as `stage:steps`, oldest first.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub codebook: Option<Codebook>,
    pub state: TrainState,
    pub opt: Option<OptimizerState>,
}

/// One parsed tensor record, as listed by `inspect`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Option<Group>,
    /// CRC32 of the record's raw value bytes.
    pub crc: u32,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            codebook: None,
            state: TrainState::default(),
            opt: None,
        }
    }

    /// Snapshot of a running stage. The provenance gains the current stage
    /// once all its steps are done.
    pub fn from_trainer(t: &Trainer, codebook: Option<Codebook>, seed: u64, prior: &[String]) -> Self {
        let mut provenance = prior.to_vec();
        if t.is_done() {
            provenance.push(format!("{}:{}", t.plan.stage.name(), t.step));
        }
        Self {
            params: t.params.clone(),
            codebook,
            state: TrainState {
                stage: Some(t.plan.stage),
                step: t.step,
                seed,
                provenance,
            },
            opt: Some(t.opt.clone()),
        }
    }

    /// Continues the stage recorded in the file under `plan`.
    pub fn resume(self, plan: StagePlan) -> Result<Trainer> {
        if self.state.stage != Some(plan.stage) {
            return Err(Error::config(format!(
                "cannot resume {} from a checkpoint of stage {}",
                plan.stage.name(),
                self.state.stage.map_or("init", Stage::name)
            )));
        }
        let opt = self.opt.ok_or_else(|| Error::checkpoint("checkpoint has no optimizer state"))?;
        if opt.trainable != plan.trainable {
            return Err(Error::config("trainable groups differ from the checkpoint's optimizer state"));
        }
        Ok(Trainer {
            params: self.params,
            opt,
            plan,
            step: self.state.step,
            metrics: Vec::new(),
        })
    }

    /// Refuses parameters whose architecture differs from `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if self.params.config != *config {
            return Err(Error::config(format!(
                "checkpoint config mismatch: file has {}, run expects {}",
                config_summary(&self.params.config),
                config_summary(config)
            )));
        }
        Ok(())
    }

    pub fn header(&self) -> String {
        let c = &self.params.config;
        let mut h = String::new();
        let mut kv = |k: &str, v: String| writeln!(h, "{k}={v}").unwrap();
        kv("dtype", "f64".into());
        kv("model.d", c.d.to_string());
        kv("model.n_layers", c.n_layers.to_string());
        kv("model.n_heads", c.n_heads.to_string());
        kv("model.ffn_hidden", c.ffn_hidden.to_string());
        kv("model.vocab", c.vocab.to_string());
        kv("model.e", c.e.to_string());
        kv("model.k", c.k.to_string());
        kv("model.fold_m", c.fold.m.to_string());
        kv("model.fold_n", c.fold.n.to_string());
        kv("model.head_layers", c.head_layers.to_string());
        kv("model.max_seq", c.max_seq.to_string());
        kv("model.max_grid", c.max_grid.to_string());
        kv("model.visual_experts", c.visual_experts.to_string());
        kv(
            "codebook",
            self.codebook.as_ref().map_or_else(|| "none".into(), |cb| hex::encode(cb.to_blob())),
        );
        kv("train.stage", self.state.stage.map_or("init", Stage::name).into());
        kv("train.step", self.state.step.to_string());
        kv("train.seed", self.state.seed.to_string());
        kv("train.provenance", self.state.provenance.join(","));
        match &self.opt {
            Some(o) => {
                kv("opt.step", o.step.to_string());
                kv("opt.trainable", group_list(o.trainable));
            }
            None => kv("opt.step", "none".into()),
        }
        for (name, g, _) in self.params.tensors() {
            kv(&format!("group.{name}"), g.name().into());
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (name, _, t) in self.params.tensors() {
            tensors.push((name, t));
        }
        if let Some(o) = &self.opt {
            for (name, _, _) in self.params.tensors() {
                if let (Some(m), Some(v)) = (o.m.get(&name), o.v.get(&name)) {
                    tensors.push((format!("opt.m.{name}"), m));
                    tensors.push((format!("opt.v.{name}"), v));
                }
            }
        }
        frame(&self.header(), tensors.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = Raw::parse(bytes)?;
        let h = &raw.header;
        let config = ModelConfig {
            d: h.num("model.d")?,
            n_layers: h.num("model.n_layers")?,
            n_heads: h.num("model.n_heads")?,
            ffn_hidden: h.num("model.ffn_hidden")?,
            vocab: h.num("model.vocab")?,
            e: h.num("model.e")?,
            k: h.num("model.k")?,
            fold: FoldSpec::new(h.num("model.fold_m")?, h.num("model.fold_n")?),
            head_layers: h.num("model.head_layers")?,
            max_seq: h.num("model.max_seq")?,
            max_grid: h.num("model.max_grid")?,
            visual_experts: h.parse("model.visual_experts")?,
        };
        config.validate().map_err(|e| Error::checkpoint(format!("invalid model config: {e}")))?;
        if h.get("dtype")? != "f64" {
            return Err(Error::checkpoint(format!("unsupported dtype {}", h.get("dtype")?)));
        }
        let codebook = match h.get("codebook")? {
            "none" => None,
            x => {
                let blob = hex::decode(x).map_err(|e| Error::checkpoint(format!("codebook blob: {e}")))?;
                Some(Codebook::from_blob(&blob)?)
            }
        };
        let stage = match h.get("train.stage")? {
            "init" => None,
            s => Some(Stage::from_name(s).ok_or_else(|| Error::checkpoint(format!("unknown stage {s}")))?),
        };
        let provenance = match h.get("train.provenance")? {
            "" => vec![],
            p => p.split(',').map(str::to_string).collect(),
        };
        let state = TrainState {
            stage,
            step: h.parse("train.step")?,
            seed: h.parse("train.seed")?,
            provenance,
        };

        let mut params = ModelParams::zeros(config);
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for rec in raw.records {
            if tensors.insert(rec.name.clone(), (rec.shape, rec.values)).is_some() {
                return Err(Error::checkpoint(format!("duplicate tensor {}", rec.name)));
            }
        }
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
        let tagged = h.keys.keys().filter(|k| k.starts_with("group.")).count();
        if tagged != names.len() {
            return Err(Error::checkpoint("group-tag table does not match the model"));
        }
        for (name, g, t) in params.tensors_mut() {
            let tag = h.get(&format!("group.{name}"))?;
            if tag != g.name() {
                return Err(Error::checkpoint(format!("group tag drift on {name}: {tag} vs {}", g.name())));
            }
            let (shape, values) =
                tensors.remove(&name).ok_or_else(|| Error::checkpoint(format!("missing tensor {name}")))?;
            if shape != t.shape() {
                return Err(Error::checkpoint(format!("shape drift on {name}: {shape:?} vs {:?}", t.shape())));
            }
            t.data_mut().copy_from_slice(&values);
        }
        let opt = match h.get("opt.step")? {
            "none" => None,
            s => {
                let step = s.parse().map_err(|_| Error::checkpoint("bad opt.step"))?;
                let trainable = parse_groups(h.get("opt.trainable")?)?;
                let mut o = OptimizerState::new(&params, trainable);
                o.step = step;
                for (prefix, map) in [("opt.m.", &mut o.m), ("opt.v.", &mut o.v)] {
                    for (name, t) in map.iter_mut() {
                        let (shape, values) = tensors
                            .remove(&format!("{prefix}{name}"))
                            .ok_or_else(|| Error::checkpoint(format!("missing optimizer tensor {prefix}{name}")))?;
                        if shape != t.shape() {
                            return Err(Error::checkpoint(format!("shape drift on {prefix}{name}")));
                        }
                        t.data_mut().copy_from_slice(&values);
                    }
                }
                Some(o)
            }
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::checkpoint(format!("unknown tensor {name}")));
        }
        Ok(Self {
            params,
            codebook,
            state,
            opt,
        })
    }

    /// Writes via a temporary file and rename, holding `<path>.lock`
    /// (created exclusively) for the duration.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let lock = sibling(path, "lock");
        let _guard = LockGuard::acquire(&lock)?;
        let tmp = sibling(path, "tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Parsed header plus tensor listing, without building a model.
pub fn inspect(bytes: &[u8]) -> Result<(Vec<(String, String)>, Vec<TensorInfo>)> {
    let raw = Raw::parse(bytes)?;
    let infos = raw
        .records
        .iter()
        .map(|r| TensorInfo {
            name: r.name.clone(),
            shape: r.shape.clone(),
            group: raw.header.keys.get(&format!("group.{}", r.name)).and_then(|g| Group::from_name(g)),
            crc: r.crc,
        })
        .collect();
    Ok((raw.header.lines, infos))
}

fn config_summary(c: &ModelConfig) -> String {
    format!(
        "d={} layers={} heads={} fold={}x{} k={} e={} head_layers={} max_seq={} max_grid={} experts={}",
        c.d, c.n_layers, c.n_heads, c.fold.m, c.fold.n, c.k, c.e, c.head_layers, c.max_seq, c.max_grid, c.visual_experts
    )
}

fn group_list(g: GroupSet) -> String {
    g.groups().iter().map(|g| g.name()).collect::<Vec<_>>().join(",")
}

fn parse_groups(s: &str) -> Result<GroupSet> {
    let mut set = GroupSet::NONE;
    for part in s.split(',').filter(|p| !p.is_empty()) {
        set = set.with(Group::from_name(part).ok_or_else(|| Error::checkpoint(format!("unknown group {part}")))?);
    }
    Ok(set)
}

fn frame<'a>(header: &str, tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in tensors {
        write_tensor(&mut out, name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Arbitrary named tensors in the checkpoint framing, readable with
/// [`inspect`].
pub fn encode_tensors(header: &str, tensors: &[(String, Tensor)]) -> Vec<u8> {
    frame(header, tensors.iter().map(|(n, t)| (n.as_str(), t)))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Header {
    lines: Vec<(String, String)>,
    keys: BTreeMap<String, String>,
}

impl Header {
    fn get(&self, k: &str) -> Result<&str> {
        self.keys
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::checkpoint(format!("header key {k} missing")))
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        self.get(k)?
            .parse()
            .map_err(|_| Error::checkpoint(format!("header key {k} malformed")))
    }

    fn num(&self, k: &str) -> Result<usize> {
        self.parse(k)
    }
}

struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    crc: u32,
}

struct Raw {
    header: Header,
    records: Vec<Record>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::checkpoint("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Raw {
    fn parse(bytes: &[u8]) -> Result<Raw> {
        if bytes.len() < 16 {
            return Err(Error::checkpoint("truncated file"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::checkpoint("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let want = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != want {
            return Err(Error::checkpoint("CRC mismatch"));
        }
        let mut c = Cursor { buf: body, pos: 4 };
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::checkpoint(format!("unsupported version {version}")));
        }
        let hlen = c.u32()? as usize;
        let text = std::str::from_utf8(c.take(hlen)?).map_err(|_| Error::checkpoint("header is not UTF-8"))?;
        let mut lines = Vec::new();
        let mut keys = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::checkpoint(format!("malformed header line {line:?}")))?;
            lines.push((k.to_string(), v.to_string()));
            keys.insert(k.to_string(), v.to_string());
        }
        let mut records = Vec::new();
        while c.pos < body.len() {
            let nlen = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(nlen)?)
                .map_err(|_| Error::checkpoint("tensor name is not UTF-8"))?
                .to_string();
            let rank = c.u32()? as usize;
            if rank > 8 {
                return Err(Error::checkpoint(format!("implausible rank {rank} for {name}")));
            }
            let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::checkpoint("tensor too large"))?)?;
            let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            records.push(Record {
                name,
                shape,
                values,
                crc: crc32fast::hash(raw),
            });
        }
        Ok(Raw {
            header: Header { lines, keys },
            records,
        })
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: &Path) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path.to_path_buf()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::checkpoint(format!(
                "{} is locked by another writer",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Schedule;

    fn ckpt() -> Checkpoint {
        let p = ModelParams::init(ModelConfig::small(16, 2), 3).unwrap();
        let mut c = Checkpoint::new(p);
        c.codebook = Some(Codebook::palette(8));
        c.state = TrainState {
            stage: Some(Stage::S1),
            step: 7,
            seed: 42,
            provenance: vec!["pretrain:10".into()],
        };
        let mut o = OptimizerState::new(&c.params, Stage::S1.trainable());
        o.step = 7;
        for t in o.m.values_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
        }
        c.opt = Some(o);
        c
    }

    #[test]
    fn roundtrip_is_identity() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_single_byte_flip_is_caught() {
        let bytes = ckpt().to_bytes();
        // sample positions across header, tensors and trailer
        let step = bytes.len() / 97;
        for i in (0..bytes.len()).step_by(step.max(1)).chain([bytes.len() - 1]) {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            assert!(Checkpoint::from_bytes(&b).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = ckpt().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..3]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn version_and_unknown_tensor_rejected() {
        let bytes = ckpt().to_bytes();
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[4] = 9;
        let err = Checkpoint::from_bytes(&reseal(body)).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let mut body = bytes[..bytes.len() - 4].to_vec();
        write_tensor(&mut body, "mystery", &Tensor::zeros(&[2]));
        let err = Checkpoint::from_bytes(&reseal(body)).unwrap_err();
        assert!(err.to_string().contains("unknown tensor mystery"), "{err}");
    }

    #[test]
    fn fold_guard() {
        let c = ckpt();
        let mut other = c.params.config;
        other.fold = FoldSpec::new(2, 8);
        assert!(matches!(c.check_config(&other), Err(Error::Config(_))));
        assert!(c.check_config(&c.params.config).is_ok());
    }

    #[test]
    fn inspect_lists_groups_and_crcs() {
        let c = ckpt();
        let (header, infos) = inspect(&c.to_bytes()).unwrap();
        assert!(header.iter().any(|(k, v)| k == "train.stage" && v == "s1"));
        let n = c.params.tensors().len();
        assert_eq!(infos.iter().filter(|i| i.group.is_some()).count(), n);
        assert!(infos.iter().any(|i| i.name.starts_with("opt.m.vis.")));
        assert!(!infos.iter().any(|i| i.name.starts_with("opt.m.text.")));
    }

    #[test]
    fn save_load_and_lock() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sgvl");
        let c = ckpt();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        fs::write(sibling(&path, "lock"), b"1").unwrap();
        assert!(c.save(&path).is_err());
    }

    #[test]
    fn trainer_snapshot_provenance() {
        let p = ModelParams::init(ModelConfig::small(16, 2), 3).unwrap();
        let t = Trainer::new(p, StagePlan::new(Stage::S2, 0, 1e-3, Schedule::Cosine, 0));
        let c = Checkpoint::from_trainer(&t, None, 1, &["s1:5".into()]);
        assert_eq!(c.state.provenance, vec!["s1:5".to_string(), "s2:0".to_string()]);
    }

    #[test]
    fn resume_continues_bitwise() {
        use crate::data::ShapesMix;
        use crate::sequencer::Sequencer;
        use crate::vocab::Vocab;
        let src = ShapesMix {
            seq: Sequencer::new(Vocab::standard(), FoldSpec::new(2, 4)),
            codebook: Codebook::palette(8),
            seed: 5,
            n_understand: 1,
            n_generate: 1,
            cfg_drop: 0.1,
            image_size: 64,
        };
        let p = ModelParams::init(ModelConfig::small(16, 2), 3).unwrap();
        let plan = StagePlan::new(Stage::S2, 4, 1e-3, Schedule::Cosine, 1);
        let mut straight = Trainer::new(p.clone(), plan);
        straight.run_until(&src, 4).unwrap();
        let mut first = Trainer::new(p, plan);
        first.run_until(&src, 2).unwrap();
        let bytes = Checkpoint::from_trainer(&first, None, 0, &[]).to_bytes();
        let mut second = Checkpoint::from_bytes(&bytes).unwrap().resume(plan).unwrap();
        second.run_until(&src, 4).unwrap();
        assert_eq!(second.params, straight.params);
        assert_eq!(first.metrics.iter().chain(&second.metrics).copied().collect::<Vec<_>>(), straight.metrics);
        let wrong = StagePlan::new(Stage::Sft, 4, 1e-3, Schedule::Cosine, 1);
        assert!(Checkpoint::from_bytes(&bytes).unwrap().resume(wrong).is_err());
    }
}
