//! Top-down observation rendering.

use super::{class, NoiseParams, Observation, SceneEpisode, SemanticOccGrid};
use crate::error::EpisodeError;
use crate::rng::{gaussian_ih, substream, uniform01};

/// Class of the top-most occupied bin of a column, free if the column is
/// empty.
pub fn top_surface_class(occ: &SemanticOccGrid, y: usize, x: usize) -> u8 {
    for z in (0..occ.z).rev() {
        let l = occ.at(y, x, z);
        if l != class::FREE {
            return l;
        }
    }
    class::FREE
}

/// Per-column top-surface class map, row-major `[h*w]`. This is both the
/// noiseless observation content and the supervision target for the
/// BEV-level semantic map.
pub fn bev_class_map(occ: &SemanticOccGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(occ.h * occ.w);
    for y in 0..occ.h {
        for x in 0..occ.w {
            out.push(top_surface_class(occ, y, x));
        }
    }
    out
}

/// Renders the observation for any frame in the episode span. The public
/// operation [`render_observation`] restricts to the observed window
/// t <= 0; this variant also serves future frames for temporal
/// self-supervision and teacher forcing.
pub fn render_observation_any(
    episode: &SceneEpisode,
    t: i32,
    noise: &NoiseParams,
) -> Result<Observation, EpisodeError> {
    render_frame(episode, t, noise)
}

/// Renders the observation for a past-or-current frame t in [-h_past, 0].
pub fn render_observation(
    episode: &SceneEpisode,
    t: i32,
    noise: &NoiseParams,
) -> Result<Observation, EpisodeError> {
    if t < episode.config.first_frame() || t > 0 {
        return Err(EpisodeError::FrameOutOfRange(
            t,
            episode.config.first_frame(),
            0,
        ));
    }
    render_frame(episode, t, noise)
}

pub(super) fn render_frame(
    episode: &SceneEpisode,
    t: i32,
    noise: &NoiseParams,
) -> Result<Observation, EpisodeError> {
    let cfg = &episode.config;
    let occ = episode.occ_at(t).ok_or(EpisodeError::FrameOutOfRange(
        t,
        cfg.first_frame(),
        cfg.f_future as i32,
    ))?;
    let channels = cfg.num_classes + 1;
    let unobserved = cfg.num_classes;
    let frame_key = (t - cfg.first_frame()) as u64;
    let mut mask_rng = substream(episode.seed, "obs.mask", frame_key);
    let mut noise_rng = substream(episode.seed, "obs.noise", frame_key);
    let mut values = vec![0.0f64; cfg.cells() * channels];
    for y in 0..cfg.bev_h {
        for x in 0..cfg.bev_w {
            let cell = y * cfg.bev_w + x;
            let out = &mut values[cell * channels..(cell + 1) * channels];
            let masked = uniform01(&mut mask_rng) < noise.mask_fraction;
            if masked {
                out[unobserved] = 1.0;
            } else {
                out[top_surface_class(occ, y, x) as usize] = 1.0;
            }
            if noise.scale != 0.0 {
                for v in out.iter_mut() {
                    *v += noise.scale * gaussian_ih(&mut noise_rng);
                }
            }
        }
    }
    Ok(Observation {
        h: cfg.bev_h,
        w: cfg.bev_w,
        channels,
        timestamp: t,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_episode, GeneratorParams, WorldConfig};

    fn episode() -> SceneEpisode {
        let cfg = WorldConfig {
            bev_h: 24,
            bev_w: 24,
            ..WorldConfig::default()
        };
        generate_episode(42, &cfg, &GeneratorParams::default()).unwrap()
    }

    #[test]
    fn noiseless_render_reproduces_class_map() {
        let e = episode();
        let clean = NoiseParams {
            scale: 0.0,
            mask_fraction: 0.0,
        };
        let obs = render_observation(&e, 0, &clean).unwrap();
        let map = bev_class_map(e.occ_at(0).unwrap());
        for cell in 0..e.config.cells() {
            let row = &obs.values[cell * obs.channels..(cell + 1) * obs.channels];
            let argmax = row
                .iter()
                .take(e.config.num_classes)
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax as u8, map[cell]);
            assert_eq!(row[e.config.num_classes], 0.0);
        }
    }

    #[test]
    fn full_mask_marks_every_column_unobserved() {
        let e = episode();
        let masked = NoiseParams {
            scale: 0.0,
            mask_fraction: 1.0,
        };
        let obs = render_observation(&e, -1, &masked).unwrap();
        for cell in 0..e.config.cells() {
            let row = &obs.values[cell * obs.channels..(cell + 1) * obs.channels];
            assert_eq!(row[e.config.num_classes], 1.0);
            assert!(row[..e.config.num_classes].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn noise_scale_shifts_mean_absolute_deviation() {
        let cfg = WorldConfig {
            bev_h: 48,
            bev_w: 48,
            ..WorldConfig::default()
        };
        let e = generate_episode(42, &cfg, &GeneratorParams::default()).unwrap();
        let clean = NoiseParams {
            scale: 0.0,
            mask_fraction: 0.0,
        };
        let noisy = NoiseParams {
            scale: 0.1,
            mask_fraction: 0.0,
        };
        let a = render_observation(&e, 0, &clean).unwrap();
        let b = render_observation(&e, 0, &noisy).unwrap();
        assert!(a.values.len() >= 10_000);
        let mad: f64 = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.values.len() as f64;
        assert!((0.05..=0.15).contains(&mad), "mad = {mad}");
    }

    #[test]
    fn out_of_range_frame_is_rejected() {
        let e = episode();
        let n = NoiseParams::default();
        assert!(render_observation(&e, 1, &n).is_err());
        assert!(render_observation(&e, -3, &n).is_err());
        assert!(render_observation_any(&e, 1, &n).is_ok());
    }

    #[test]
    fn render_is_deterministic() {
        let e = episode();
        let n = NoiseParams::default();
        let a = render_observation(&e, 0, &n).unwrap();
        let b = render_observation(&e, 0, &n).unwrap();
        assert_eq!(a, b);
        // Stored observations were rendered with the same params.
        assert_eq!(e.observation_at(0).unwrap(), &a);
    }
}
