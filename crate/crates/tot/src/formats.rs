//! Binary dataset (`TOTD`) and checkpoint (`TOTC`) files, plus CSV exports.
//!
//! Both binary formats are little-endian, start with a 4-byte magic and a
//! `u32` version, and end with a CRC32 of every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use tot_core::model::ModelConfig;
use tot_core::optim::AdamState;
use tot_core::rng::RngState;
use tot_core::synthgen::{sample_weights, Dataset, GenConfig};
use tot_core::train::{Checkpoint, OnlineTrace};
use tot_core::objective::LossBreakdown;
use tot_core::{ParamStore, Tensor};

use crate::error::{CliError, CliResult};

pub const DATASET_MAGIC: &[u8; 4] = b"TOTD";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TOTC";
pub const CHECKPOINT_VERSION: u32 = tot_core::train::CHECKPOINT_VERSION;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks length and CRC, then positions after magic and version.
    fn open(buf: &'a [u8], path: &'a Path, magic: &[u8; 4], version: u32) -> CliResult<Self> {
        if buf.len() < 12 {
            return Err(CliError::format(path, "file is too short"));
        }
        if &buf[..4] != magic {
            return Err(CliError::format(path, format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap_or("?"))));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(CliError::format(path, "CRC32 mismatch, file is corrupted"));
        }
        let found = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(CliError::Version {
                path: path.to_path_buf(),
                found,
                expected: version,
            });
        }
        Ok(Self { buf: body, pos: 8, path })
    }

    fn take(&mut self, k: usize) -> CliResult<&'a [u8]> {
        if self.pos + k > self.buf.len() {
            return Err(CliError::format(self.path, "unexpected end of payload"));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> CliResult<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64s(&mut self, k: usize) -> CliResult<Vec<f64>> {
        let raw = self.take(k.checked_mul(8).ok_or_else(|| CliError::format(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn blob(&mut self) -> CliResult<&'a [u8]> {
        let k = self.u32()? as usize;
        self.take(k)
    }
    fn done(&self) -> CliResult<()> {
        if self.pos != self.buf.len() {
            return Err(CliError::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_all(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

// ---- dataset ----

/// Header: magic, version, n (u32), T (u64), lag (u32), obs_edges (u8),
/// has_z (u8), seed (u64), generator config as JSON (length-prefixed).
/// Body: `T x n` floats of `x`, then of `z` when present.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let c = &ds.config;
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(c.n as u32);
    w.u64(ds.len() as u64);
    w.u32(c.lag as u32);
    w.u8(c.obs_edges as u8);
    w.u8(ds.z.is_some() as u8);
    w.u64(c.seed);
    w.blob(serde_json::to_string(c).expect("config serializes").as_bytes());
    w.f64s(ds.x.data());
    if let Some(z) = &ds.z {
        w.f64s(z.data());
    }
    w.finish()
}

/// Inverse of [`encode_dataset`]. Generator weights are re-derived from the
/// stored configuration.
pub fn decode_dataset(buf: &[u8], path: &Path) -> CliResult<Dataset> {
    let mut r = Reader::open(buf, path, DATASET_MAGIC, DATASET_VERSION)?;
    let n = r.u32()? as usize;
    let len = r.u64()? as usize;
    let lag = r.u32()? as usize;
    let obs_edges = r.u8()? != 0;
    let has_z = r.u8()? != 0;
    let seed = r.u64()?;
    let config: GenConfig =
        serde_json::from_slice(r.blob()?).map_err(|e| CliError::format(path, format!("config block: {e}")))?;
    if config.n != n || config.lag != lag || config.obs_edges != obs_edges || config.seed != seed || config.total_steps != len {
        return Err(CliError::format(path, "header disagrees with the stored configuration"));
    }
    let x = Tensor::matrix(len, n, r.f64s(len * n)?)?;
    let z = if has_z { Some(Tensor::matrix(len, n, r.f64s(len * n)?)?) } else { None };
    r.done()?;
    let (latent, mixing, drift_mixing) = sample_weights(&config);
    Ok(Dataset {
        config,
        latent,
        mixing,
        drift_mixing,
        x,
        z,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> CliResult<()> {
    write_file(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    decode_dataset(&read_all(path)?, path)
}

/// CSV with columns `t, x_1..x_n, z_1..z_n` (latent columns only when present).
pub fn dataset_csv(ds: &Dataset) -> CliResult<Vec<u8>> {
    let n = ds.n();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    if ds.z.is_some() {
        header.extend((1..=n).map(|i| format!("z_{i}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..ds.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(ds.x.row(t).iter().map(|v| v.to_string()));
        if let Some(z) = &ds.z {
            rec.extend(z.row(t).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Encode(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Encode(format!("csv: {e}"))
}

// ---- checkpoint ----

/// Magic, version, model config JSON, named-tensor table, Adam state, rng
/// state, training step, CRC32.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(ck.version);
    w.blob(serde_json::to_string(&ck.model_config).expect("config serializes").as_bytes());
    w.u32(ck.params.len() as u32);
    for (_, name, t) in ck.params.iter() {
        w.blob(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        w.f64s(t.data());
    }
    w.u64(ck.adam.step);
    for (m, v) in ck.adam.m.iter().zip(&ck.adam.v) {
        w.f64s(m);
        w.f64s(v);
    }
    w.bytes(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.bytes(&ck.rng.word_pos.to_le_bytes());
    w.u64(ck.step);
    w.finish()
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> CliResult<Checkpoint> {
    let mut r = Reader::open(buf, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let model_config: ModelConfig =
        serde_json::from_slice(r.blob()?).map_err(|e| CliError::format(path, format!("config block: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        let name = std::str::from_utf8(r.blob()?).map_err(|_| CliError::format(path, "tensor name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| CliError::format(path, "tensor shape overflows"))?;
        let data = r.f64s(len)?;
        params.insert(&name, Tensor::new(shape, data)?)?;
        sizes.push(len);
    }
    let step = r.u64()?;
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for len in sizes {
        m.push(r.f64s(len)?);
        v.push(r.f64s(len)?);
    }
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let train_step = r.u64()?;
    r.done()?;
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        model_config,
        params,
        adam: AdamState { m, v, step },
        rng: RngState { seed, stream, word_pos },
        step: train_step,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    decode_checkpoint(&read_all(path)?, path)
}

// ---- metric traces ----

const TERM_COLUMNS: [&str; 6] = ["l_y", "l_r", "l_kl_z", "l_kl_o", "l_s", "total"];

fn loss_fields(b: &LossBreakdown) -> [String; 6] {
    [b.l_y, b.l_r, b.l_kl_z, b.l_kl_o, b.l_s, b.total].map(|v| v.to_string())
}

/// Per-epoch loss CSV: `epoch` then one column per term.
pub fn loss_csv(history: &[LossBreakdown], first_epoch: usize) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch"];
    header.extend(TERM_COLUMNS);
    w.write_record(&header).map_err(csv_err)?;
    for (e, b) in history.iter().enumerate() {
        let mut rec = vec![(first_epoch + e).to_string()];
        rec.extend(loss_fields(b));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Encode(e.to_string()))
}

/// Rolling metrics CSV: `step, mse, mae, cum_mse, cum_mae` then the mean
/// adaptation loss per term.
pub fn online_csv(trace: &OnlineTrace) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step", "mse", "mae", "cum_mse", "cum_mae"];
    header.extend(TERM_COLUMNS);
    w.write_record(&header).map_err(csv_err)?;
    for r in &trace.records {
        let mut rec = vec![r.t.to_string(), r.mse.to_string(), r.mae.to_string(), r.cum_mse.to_string(), r.cum_mae.to_string()];
        rec.extend(loss_fields(&r.loss));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Encode(e.to_string()))
}

/// Writes `bytes` to stdout.
pub fn to_stdout(bytes: &[u8]) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CliError::io("<stdout>", e))
}
