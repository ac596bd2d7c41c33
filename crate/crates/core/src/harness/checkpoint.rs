//! Versioned binary checkpoints: parameters, optimizer state, config and
//! architecture hashes, step counter. Reloading reproduces forward outputs
//! bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use crate::ad::{AdamW, AdamWConfig, ParamStore};

use super::config::RunConfig;
use super::HarnessError;

const MAGIC: &[u8; 8] = b"RWMCKPT\x01";

pub struct Checkpoint {
    pub config: RunConfig,
    pub arch_hash: u64,
    pub step: u64,
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    store: &ParamStore,
    optimizer: Option<&AdamW>,
    step: u64,
) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    out.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&cfg.arch_hash().to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for block in store.blocks() {
        let name = block.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(block.rows as u64).to_le_bytes());
        out.extend_from_slice(&(block.cols as u64).to_le_bytes());
        for v in &block.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match optimizer {
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&(opt.step as u64).to_le_bytes());
            for buf in opt.m.iter().chain(opt.v.iter()) {
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(HarnessError::Checkpoint("bad magic or version".into()));
    }
    let cfg_len = cur.u64()? as usize;
    let cfg_bytes = cur.take(cfg_len)?;
    let config: RunConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| HarnessError::Checkpoint(format!("config block: {e}")))?;
    let arch_hash = cur.u64()?;
    let step = cur.u64()?;
    let n_blocks = cur.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_blocks {
        let name_len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| HarnessError::Checkpoint("non-utf8 block name".into()))?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(cur.f64()?);
        }
        store.insert(&name, rows, cols, data);
    }
    let optimizer = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let opt_step = cur.u64()? as usize;
            let mut m = Vec::with_capacity(store.len());
            let mut v = Vec::with_capacity(store.len());
            for target in [&mut m, &mut v] {
                for block in store.blocks() {
                    let mut buf = Vec::with_capacity(block.data.len());
                    for _ in 0..block.data.len() {
                        buf.push(cur.f64()?);
                    }
                    target.push(buf);
                }
            }
            let mut opt = AdamW::new(
                AdamWConfig {
                    lr: config.optim.lr,
                    lr_min: config.optim.lr_min,
                    beta1: config.optim.beta1,
                    beta2: config.optim.beta2,
                    eps: 1e-8,
                    weight_decay: config.optim.weight_decay,
                    total_steps: config.optim.steps,
                },
                &store,
            );
            opt.step = opt_step;
            opt.m = m;
            opt.v = v;
            Some(opt)
        }
        other => {
            return Err(HarnessError::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if cur.pos != bytes.len() {
        return Err(HarnessError::Checkpoint("trailing bytes".into()));
    }
    // The stored arch hash must match the stored config.
    if config.arch_hash() != arch_hash {
        return Err(HarnessError::Checkpoint(
            "architecture hash does not match embedded config".into(),
        ));
    }
    Ok(Checkpoint {
        config,
        arch_hash,
        step,
        store,
        optimizer,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.pos + n > self.bytes.len() {
            return Err(HarnessError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, HarnessError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_params, CouplingMode};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = RunConfig::from_toml("[world]\nbev_h = 16\nbev_w = 16\n", &[], Some(3)).unwrap();
        let store = build_params(&cfg.world, &cfg.model, CouplingMode::Semi, cfg.seed);
        let opt = AdamW::new(AdamWConfig::default(), &store);
        let path = std::env::temp_dir().join(format!("rwm_ckpt_{}.bin", std::process::id()));
        save_checkpoint(&path, &cfg, &store, Some(&opt), 42).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.store.len(), store.len());
        for (a, b) in loaded.store.blocks().iter().zip(store.blocks()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data.len(), b.data.len());
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(loaded.optimizer.is_some());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let cfg = RunConfig::from_toml("[world]\nbev_h = 16\nbev_w = 16\n", &[], Some(3)).unwrap();
        let store = build_params(&cfg.world, &cfg.model, CouplingMode::Semi, cfg.seed);
        let path = std::env::temp_dir().join(format!("rwm_ckpt_bad_{}.bin", std::process::id()));
        save_checkpoint(&path, &cfg, &store, None, 1).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
