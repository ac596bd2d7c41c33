//! Episode serialization: one directory per episode holding a UTF-8
//! key-value manifest plus little-endian flat binary arrays, row-major.
//! The round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Command, EgoTrajectory, Observation, SceneEpisode, SemanticOccGrid, WorldConfig};
use crate::error::EpisodeError;

const FORMAT_VERSION: u32 = 1;

pub fn save_episode(episode: &SceneEpisode, dir: &Path) -> Result<(), EpisodeError> {
    fs::create_dir_all(dir)?;
    let cfg = &episode.config;
    let frames = cfg.n_frames();
    let obs_channels = cfg.num_classes + 1;

    let mut occ_bytes = Vec::with_capacity(frames * cfg.cells() * cfg.z_bins);
    for g in &episode.occ {
        occ_bytes.extend_from_slice(&g.labels);
    }
    fs::write(dir.join("occ.bin"), &occ_bytes)?;

    let mut ego_bytes = Vec::with_capacity(frames * 16);
    for p in &episode.ego.positions {
        ego_bytes.extend_from_slice(&p[0].to_le_bytes());
        ego_bytes.extend_from_slice(&p[1].to_le_bytes());
    }
    fs::write(dir.join("ego.bin"), &ego_bytes)?;

    let cmd_bytes: Vec<u8> = episode.commands.iter().map(|c| c.as_u8()).collect();
    fs::write(dir.join("commands.bin"), &cmd_bytes)?;

    let mut obs_bytes = Vec::new();
    for o in &episode.observations {
        for v in &o.values {
            obs_bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("obs.bin"), &obs_bytes)?;

    let manifest = format!(
        "format_version={FORMAT_VERSION}\n\
         seed={}\n\
         bev_h={}\nbev_w={}\nz_bins={}\ncell_size={}\nnum_classes={}\n\
         h_past={}\nf_future={}\ndt={}\n\
         array.occ=occ.bin;dtype=u8;shape={frames},{},{},{}\n\
         array.ego=ego.bin;dtype=f64le;shape={frames},2\n\
         array.commands=commands.bin;dtype=u8;shape={}\n\
         array.obs=obs.bin;dtype=f64le;shape={},{},{},{obs_channels}\n",
        episode.seed,
        cfg.bev_h,
        cfg.bev_w,
        cfg.z_bins,
        cfg.cell_size,
        cfg.num_classes,
        cfg.h_past,
        cfg.f_future,
        cfg.dt,
        cfg.bev_h,
        cfg.bev_w,
        cfg.z_bins,
        cfg.f_future,
        cfg.h_past + 1,
        cfg.bev_h,
        cfg.bev_w,
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

struct ArraySpec {
    file: String,
    dtype: String,
    shape: Vec<usize>,
}

fn parse_manifest(text: &str) -> Result<(BTreeMap<String, String>, BTreeMap<String, ArraySpec>), EpisodeError> {
    let mut fields = BTreeMap::new();
    let mut arrays = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| EpisodeError::Manifest(format!("line {}: missing '='", lineno + 1)))?;
        if let Some(name) = key.strip_prefix("array.") {
            let mut file = None;
            let mut dtype = None;
            let mut shape = None;
            for part in value.split(';') {
                if let Some((k, v)) = part.split_once('=') {
                    match k {
                        "dtype" => dtype = Some(v.to_string()),
                        "shape" => {
                            let dims: Result<Vec<usize>, _> =
                                v.split(',').map(|d| d.parse::<usize>()).collect();
                            shape = Some(dims.map_err(|_| {
                                EpisodeError::Manifest(format!("bad shape for array {name}"))
                            })?);
                        }
                        _ => {
                            return Err(EpisodeError::Manifest(format!(
                                "unknown array attribute {k}"
                            )))
                        }
                    }
                } else {
                    file = Some(part.to_string());
                }
            }
            arrays.insert(
                name.to_string(),
                ArraySpec {
                    file: file
                        .ok_or_else(|| EpisodeError::Manifest(format!("array {name}: no file")))?,
                    dtype: dtype
                        .ok_or_else(|| EpisodeError::Manifest(format!("array {name}: no dtype")))?,
                    shape: shape
                        .ok_or_else(|| EpisodeError::Manifest(format!("array {name}: no shape")))?,
                },
            );
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    Ok((fields, arrays))
}

fn field<T: std::str::FromStr>(
    fields: &BTreeMap<String, String>,
    key: &str,
) -> Result<T, EpisodeError> {
    fields
        .get(key)
        .ok_or_else(|| EpisodeError::Manifest(format!("missing field {key}")))?
        .parse::<T>()
        .map_err(|_| EpisodeError::Manifest(format!("field {key} unparsable")))
}

fn read_array(dir: &Path, name: &str, spec: &ArraySpec, elem: usize) -> Result<Vec<u8>, EpisodeError> {
    let bytes = fs::read(dir.join(&spec.file))?;
    let expected: usize = spec.shape.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(EpisodeError::ShapeMismatch {
            name: name.to_string(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn load_episode(dir: &Path) -> Result<SceneEpisode, EpisodeError> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let (fields, arrays) = parse_manifest(&text)?;
    // Version gate before anything else is touched: no partial loads.
    let version: u32 = field(&fields, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(EpisodeError::UnsupportedVersion(version));
    }
    let cfg = WorldConfig {
        bev_h: field(&fields, "bev_h")?,
        bev_w: field(&fields, "bev_w")?,
        z_bins: field(&fields, "z_bins")?,
        cell_size: field(&fields, "cell_size")?,
        num_classes: field(&fields, "num_classes")?,
        h_past: field(&fields, "h_past")?,
        f_future: field(&fields, "f_future")?,
        dt: field(&fields, "dt")?,
    };
    cfg.validate()?;
    let seed: u64 = field(&fields, "seed")?;
    let frames = cfg.n_frames();
    let obs_channels = cfg.num_classes + 1;

    let need = |name: &str| -> Result<&ArraySpec, EpisodeError> {
        arrays
            .get(name)
            .ok_or_else(|| EpisodeError::Manifest(format!("missing array {name}")))
    };

    let occ_spec = need("occ")?;
    if occ_spec.dtype != "u8"
        || occ_spec.shape != vec![frames, cfg.bev_h, cfg.bev_w, cfg.z_bins]
    {
        return Err(EpisodeError::Manifest("occ array spec mismatch".into()));
    }
    let occ_bytes = read_array(dir, "occ", occ_spec, 1)?;
    let per_frame = cfg.cells() * cfg.z_bins;
    let mut occ = Vec::with_capacity(frames);
    for fi in 0..frames {
        let labels = occ_bytes[fi * per_frame..(fi + 1) * per_frame].to_vec();
        let grid = SemanticOccGrid {
            h: cfg.bev_h,
            w: cfg.bev_w,
            z: cfg.z_bins,
            timestamp: cfg.first_frame() + fi as i32,
            labels,
        };
        grid.validate_labels(cfg.num_classes)?;
        occ.push(grid);
    }

    let ego_spec = need("ego")?;
    if ego_spec.dtype != "f64le" || ego_spec.shape != vec![frames, 2] {
        return Err(EpisodeError::Manifest("ego array spec mismatch".into()));
    }
    let ego_bytes = read_array(dir, "ego", ego_spec, 8)?;
    let mut positions = Vec::with_capacity(frames);
    for chunk in ego_bytes.chunks_exact(16) {
        let x = f64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let y = f64::from_le_bytes(chunk[8..16].try_into().unwrap());
        if !x.is_finite() || !y.is_finite() {
            return Err(EpisodeError::Manifest("non-finite ego position".into()));
        }
        positions.push([x, y]);
    }

    let cmd_spec = need("commands")?;
    if cmd_spec.dtype != "u8" || cmd_spec.shape != vec![cfg.f_future] {
        return Err(EpisodeError::Manifest("commands array spec mismatch".into()));
    }
    let cmd_bytes = read_array(dir, "commands", cmd_spec, 1)?;
    let commands: Result<Vec<Command>, _> = cmd_bytes.iter().map(|&b| Command::from_u8(b)).collect();
    let commands = commands?;

    let obs_spec = need("obs")?;
    if obs_spec.dtype != "f64le"
        || obs_spec.shape != vec![cfg.h_past + 1, cfg.bev_h, cfg.bev_w, obs_channels]
    {
        return Err(EpisodeError::Manifest("obs array spec mismatch".into()));
    }
    let obs_bytes = read_array(dir, "obs", obs_spec, 8)?;
    let per_obs = cfg.cells() * obs_channels;
    let mut observations = Vec::with_capacity(cfg.h_past + 1);
    for oi in 0..cfg.h_past + 1 {
        let mut values = Vec::with_capacity(per_obs);
        for chunk in obs_bytes[oi * per_obs * 8..(oi + 1) * per_obs * 8].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        observations.push(Observation {
            h: cfg.bev_h,
            w: cfg.bev_w,
            channels: obs_channels,
            timestamp: cfg.first_frame() + oi as i32,
            values,
        });
    }

    Ok(SceneEpisode {
        config: cfg.clone(),
        seed,
        occ,
        ego: EgoTrajectory {
            start_frame: cfg.first_frame(),
            positions,
        },
        commands,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_episode, GeneratorParams};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("rwm_io_{name}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn episode() -> SceneEpisode {
        let cfg = WorldConfig {
            bev_h: 16,
            bev_w: 16,
            ..WorldConfig::default()
        };
        let gen = GeneratorParams {
            vehicles: [1, 2],
            pedestrians: [1, 2],
            road_half_width: 4,
            ..GeneratorParams::default()
        };
        generate_episode(9, &cfg, &gen).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let e = episode();
        let dir = tmp("roundtrip");
        save_episode(&e, &dir).unwrap();
        let loaded = load_episode(&dir).unwrap();
        assert_eq!(e, loaded);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_grid_fails_with_shape_mismatch() {
        let e = episode();
        let dir = tmp("truncated");
        save_episode(&e, &dir).unwrap();
        let occ = fs::read(dir.join("occ.bin")).unwrap();
        fs::write(dir.join("occ.bin"), &occ[..occ.len() - 7]).unwrap();
        match load_episode(&dir) {
            Err(EpisodeError::ShapeMismatch { name, .. }) => assert_eq!(name, "occ"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_version_fails_without_partial_load() {
        let e = episode();
        let dir = tmp("version");
        save_episode(&e, &dir).unwrap();
        let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        let bumped = manifest.replace("format_version=1", "format_version=99");
        fs::write(dir.join("manifest.txt"), bumped).unwrap();
        // Removing the arrays proves the loader bails before touching them.
        fs::remove_file(dir.join("occ.bin")).unwrap();
        match load_episode(&dir) {
            Err(EpisodeError::UnsupportedVersion(99)) => {}
            other => panic!("expected version error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
