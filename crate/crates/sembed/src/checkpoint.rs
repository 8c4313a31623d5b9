//! Binary checkpoint persistence.
//!
//! Layout: magic `DNSC`, u32 LE version, a u64-length-prefixed UTF-8 config
//! block of `key=value` lines, then repeated tensor records
//! `{u16 name length, UTF-8 name, u8 rank, u64 dims..., f32 LE values}`.
//! Optimizer moments use the same record format under `opt.m.*` / `opt.v.*`.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::train::OptimizerState;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DNSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub seed: u64,
    pub step: u64,
}

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], values: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);

    let mut config = String::new();
    for (k, v) in ckpt.config.to_kv() {
        config.push_str(&format!("{k}={v}\n"));
    }
    config.push_str(&format!("seed={}\n", ckpt.seed));
    config.push_str(&format!("step={}\n", ckpt.step));
    if let Some(opt) = &ckpt.optimizer {
        config.push_str("has_optimizer=1\n");
        config.push_str(&format!("opt_t={}\n", opt.t));
        config.push_str(&format!("opt_lr={}\n", opt.lr));
        config.push_str(&format!("opt_beta1={}\n", opt.beta1));
        config.push_str(&format!("opt_beta2={}\n", opt.beta2));
        config.push_str(&format!("opt_eps={}\n", opt.eps));
        config.push_str(&format!("opt_weight_decay={}\n", opt.weight_decay));
    } else {
        config.push_str("has_optimizer=0\n");
    }

    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(config.as_bytes())?;
        for (name, tensor) in ckpt.params.iter() {
            write_record(&mut w, name, tensor.dims(), tensor.values())?;
        }
        if let Some(opt) = &ckpt.optimizer {
            for (name, m, v) in opt.moments() {
                let dims = ckpt.params.get(name).map(|t| t.dims().to_vec()).unwrap_or_else(|_| vec![m.len()]);
                write_record(&mut w, &format!("opt.m.{name}"), &dims, m)?;
                write_record(&mut w, &format!("opt.v.{name}"), &dims, v)?;
            }
        }
        w.flush()
    })()
    .map_err(io_err)
}

struct RecordReader<R: Read> {
    inner: R,
}

impl<R: Read> RecordReader<R> {
    fn read_exact_or_fail(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::IncompatibleCheckpoint(format!("truncated while reading {what}")))
    }

    /// None on clean EOF at a record boundary.
    fn next_record(&mut self) -> Result<Option<(String, Vec<usize>, Vec<f32>)>> {
        let mut len2 = [0u8; 2];
        match self.inner.read(&mut len2) {
            Ok(0) => return Ok(None),
            Ok(1) => {
                self.read_exact_or_fail(&mut len2[1..], "record name length")?;
            }
            Ok(_) => {}
            Err(e) => return Err(Error::IncompatibleCheckpoint(format!("read failure: {e}"))),
        }
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name_buf = vec![0u8; name_len];
        self.read_exact_or_fail(&mut name_buf, "record name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::IncompatibleCheckpoint("record name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        self.read_exact_or_fail(&mut rank, "record rank")?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 8];
            self.read_exact_or_fail(&mut d, "record dims")?;
            dims.push(u64::from_le_bytes(d) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        self.read_exact_or_fail(&mut raw, &format!("values of {name}"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some((name, dims, values)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = RecordReader { inner: BufReader::new(file) };

    let mut magic = [0u8; 4];
    r.read_exact_or_fail(&mut magic, "magic bytes")?;
    if &magic != MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut version = [0u8; 4];
    r.read_exact_or_fail(&mut version, "version")?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut config_len = [0u8; 8];
    r.read_exact_or_fail(&mut config_len, "config length")?;
    let mut config_raw = vec![0u8; u64::from_le_bytes(config_len) as usize];
    r.read_exact_or_fail(&mut config_raw, "config block")?;
    let config_text = String::from_utf8(config_raw)
        .map_err(|_| Error::IncompatibleCheckpoint("config block is not UTF-8".into()))?;
    let mut kv = HashMap::new();
    for line in config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let config = ModelConfig::from_kv(&kv)?;
    let parse_u64 = |key: &str| -> Result<u64> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing or bad key {key}")))
    };
    let parse_f64 = |key: &str| -> Result<f64> {
        kv.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing or bad key {key}")))
    };
    let seed = parse_u64("seed")?;
    let step = parse_u64("step")?;
    let has_optimizer = kv.get("has_optimizer").map(String::as_str) == Some("1");

    let mut params = ParamStore::<f32>::new();
    let mut opt_m: Vec<(String, Vec<f32>)> = Vec::new();
    let mut opt_v: Vec<(String, Vec<f32>)> = Vec::new();
    while let Some((name, dims, values)) = r.next_record()? {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            opt_m.push((rest.to_string(), values));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt_v.push((rest.to_string(), values));
        } else {
            let tensor = Tensor::from_values(dims, values).map_err(|e| {
                Error::IncompatibleCheckpoint(format!("tensor {name} malformed: {e}"))
            })?;
            params.insert(name, tensor);
        }
    }
    if params.is_empty() {
        return Err(Error::IncompatibleCheckpoint("no parameter records".into()));
    }

    let optimizer = if has_optimizer {
        let mut opt = OptimizerState::new(parse_f64("opt_lr")?, parse_f64("opt_weight_decay")?);
        opt.beta1 = parse_f64("opt_beta1")?;
        opt.beta2 = parse_f64("opt_beta2")?;
        opt.eps = parse_f64("opt_eps")?;
        opt.t = parse_u64("opt_t")?;
        let vs: HashMap<String, Vec<f32>> = opt_v.into_iter().collect();
        for (name, m) in opt_m {
            let v = vs.get(&name).cloned().ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("moment v missing for {name}"))
            })?;
            opt.set_moments(&name, m, v);
        }
        Some(opt)
    } else {
        None
    };

    Ok(Checkpoint { config, params, optimizer, seed, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::RngStream;

    fn sample_checkpoint() -> Checkpoint {
        let config = ModelConfig {
            vocab_size: 40,
            ..ModelConfig::desk_default(40)
        };
        let params = init_params::<f32>(&config, &mut RngStream::new(11, 0)).unwrap();
        let mut opt = OptimizerState::new(5e-5, 0.01);
        opt.t = 17;
        for (name, t) in params.iter() {
            opt.set_moments(name, vec![0.25; t.len()], vec![0.5; t.len()]);
        }
        Checkpoint { config, params, optimizer: Some(opt), seed: 99, step: 17 }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.params.len(), ckpt.params.len());
        for ((n1, t1), (n2, t2)) in loaded.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(n1, n2, "parameter order must be preserved");
            assert_eq!(t1.dims(), t2.dims());
            for (a, b) in t1.values().iter().zip(t2.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.t, 17);
        assert_eq!(opt.lr, 5e-5);
        let (name, m, v) = opt.moments().next().unwrap();
        assert_eq!(name, ckpt.params.iter().next().unwrap().0);
        assert!(m.iter().all(|&x| x == 0.25));
        assert!(v.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 7, 20, bytes.len() / 2, bytes.len() - 2] {
            let broken = dir.path().join(format!("cut{cut}.ckpt"));
            std::fs::write(&broken, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&broken), Err(Error::IncompatibleCheckpoint(_))),
                "cut at {cut} did not fail cleanly"
            );
        }
    }

    #[test]
    fn magic_and_version_mismatches_are_rejected() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let p1 = dir.path().join("magic.ckpt");
        std::fs::write(&p1, &wrong_magic).unwrap();
        assert!(matches!(load_checkpoint(&p1), Err(Error::IncompatibleCheckpoint(_))));

        bytes[4] = 9; // version
        let p2 = dir.path().join("version.ckpt");
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p2), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn checkpoint_without_optimizer_loads_none() {
        let mut ckpt = sample_checkpoint();
        ckpt.optimizer = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.optimizer.is_none());
    }
}
