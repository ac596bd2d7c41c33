//! Dataset construction: deterministic per-episode seeds derived from the
//! run seed, optional on-disk materialization, and content hashing.

use std::path::Path;

use rayon::prelude::*;

use crate::gridworld::{generate_episode, load_episode, save_episode, SceneEpisode};
use crate::rng::fnv1a;

use super::config::RunConfig;
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Episode seed for a (run seed, split, index) triple.
pub fn episode_seed(run_seed: u64, split: Split, index: usize) -> u64 {
    let mut bytes = Vec::with_capacity(32);
    bytes.extend_from_slice(&run_seed.to_le_bytes());
    bytes.extend_from_slice(b"data.");
    bytes.extend_from_slice(split.name().as_bytes());
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    fnv1a(&bytes)
}

pub struct Dataset {
    pub episodes: Vec<SceneEpisode>,
    pub hash: u64,
}

/// Generates a split in memory (parallel across episodes, hash reduced in
/// index order).
pub fn build_split(cfg: &RunConfig, split: Split) -> Result<Dataset, HarnessError> {
    let count = match split {
        Split::Train => cfg.data.train_episodes,
        Split::Eval => cfg.data.eval_episodes,
    };
    let episodes: Result<Vec<SceneEpisode>, HarnessError> = (0..count)
        .into_par_iter()
        .map(|i| {
            generate_episode(episode_seed(cfg.seed, split, i), &cfg.world, &cfg.gen)
                .map_err(HarnessError::Episode)
        })
        .collect();
    let episodes = episodes?;
    Ok(Dataset {
        hash: hash_episodes(&episodes),
        episodes,
    })
}

/// Loads a split from `dir/<split>/ep_XXXXX` directories.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, HarnessError> {
    let split_dir = dir.join(split.name());
    let mut entries: Vec<_> = std::fs::read_dir(&split_dir)
        .map_err(|e| {
            HarnessError::Config(format!("cannot read dataset {}: {e}", split_dir.display()))
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let episodes: Result<Vec<SceneEpisode>, HarnessError> = entries
        .par_iter()
        .map(|p| load_episode(p).map_err(HarnessError::Episode))
        .collect();
    let episodes = episodes?;
    if episodes.is_empty() {
        return Err(HarnessError::Config(format!(
            "dataset split {} is empty",
            split_dir.display()
        )));
    }
    Ok(Dataset {
        hash: hash_episodes(&episodes),
        episodes,
    })
}

/// Materializes both splits under `dir` and writes a dataset manifest.
pub fn generate_to_disk(cfg: &RunConfig, dir: &Path) -> Result<(u64, u64), HarnessError> {
    let mut hashes = [0u64; 2];
    for (i, split) in [Split::Train, Split::Eval].into_iter().enumerate() {
        let ds = build_split(cfg, split)?;
        let split_dir = dir.join(split.name());
        std::fs::create_dir_all(&split_dir)?;
        ds.episodes
            .par_iter()
            .enumerate()
            .try_for_each(|(idx, ep)| {
                save_episode(ep, &split_dir.join(format!("ep_{idx:05}")))
            })
            .map_err(HarnessError::Episode)?;
        hashes[i] = ds.hash;
    }
    let manifest = format!(
        "config_hash={:016x}\ntrain_hash={:016x}\neval_hash={:016x}\ntrain_episodes={}\neval_episodes={}\n",
        cfg.config_hash(),
        hashes[0],
        hashes[1],
        cfg.data.train_episodes,
        cfg.data.eval_episodes,
    );
    std::fs::write(dir.join("dataset.txt"), manifest)?;
    Ok((hashes[0], hashes[1]))
}

/// Loads the split from `data.dir` when present, otherwise generates it in
/// memory. Both paths produce bit-identical episodes for the same config.
pub fn obtain_split(cfg: &RunConfig, split: Split) -> Result<Dataset, HarnessError> {
    if let Some(dir) = &cfg.data.dir {
        if dir.join(split.name()).is_dir() {
            return load_split(dir, split);
        }
    }
    build_split(cfg, split)
}

fn hash_episodes(episodes: &[SceneEpisode]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for ep in episodes {
        feed(&ep.seed.to_le_bytes());
        for g in &ep.occ {
            feed(&g.labels);
        }
        for p in &ep.ego.positions {
            feed(&p[0].to_le_bytes());
            feed(&p[1].to_le_bytes());
        }
        for c in &ep.commands {
            feed(&[c.as_u8()]);
        }
        for o in &ep.observations {
            for v in &o.values {
                feed(&v.to_le_bytes());
            }
        }
    }
    h
}
