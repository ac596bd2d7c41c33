//! Rigid BEV warping with bilinear resampling.

use crate::ad::{Tap4, Tape, Var};
use crate::error::ModelError;
use crate::gridworld::{EgoMotion, Pose, WorldConfig};

/// Transform between the BEV windows of two frames. Every grid in this
/// artifact is stored in the fixed t=0 window, so the window-to-window
/// transform is the identity; the function keeps warp call sites explicit
/// about which frames they bridge.
pub fn window_motion(_from: &Pose, _to: &Pose) -> EgoMotion {
    EgoMotion::zero()
}

/// Bilinear taps realizing the inverse rigid transform of `motion`:
/// output cell (r, c) samples the input at R(yaw) * p + t, with rotation
/// about the window center and the translation in cells.
pub fn warp_taps(world: &WorldConfig, motion: &EgoMotion) -> Vec<Tap4> {
    let (h, w) = (world.bev_h, world.bev_w);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let tx = motion.translation[0] / world.cell_size;
    let ty = motion.translation[1] / world.cell_size;
    let cos = motion.yaw.cos();
    let sin = motion.yaw.sin();
    let mut taps = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let px = c as f64 - cx;
            let py = r as f64 - cy;
            let sx = cos * px - sin * py + cx + tx;
            let sy = sin * px + cos * py + cy + ty;
            let raw = crate::ad::bilinear_taps_pub(h, w, sx, sy);
            let mut t4 = Tap4 {
                idx: [-1; 4],
                w: [0.0; 4],
            };
            for (j, t) in raw.iter().enumerate() {
                t4.idx[j] = t.0;
                t4.w[j] = t.1;
            }
            taps.push(t4);
        }
    }
    taps
}

/// Resamples `[h*w, c]` features by the inverse rigid transform of
/// `motion`; out-of-window cells are zero. Differentiable with respect to
/// the features.
pub fn warp_bev(
    tape: &mut Tape,
    features: Var,
    world: &WorldConfig,
    motion: &EgoMotion,
) -> Result<Var, ModelError> {
    if !motion.is_finite() {
        return Err(ModelError::NonFinite("warp_bev motion"));
    }
    let half_x = world.bev_w as f64 * world.cell_size / 2.0;
    let half_y = world.bev_h as f64 * world.cell_size / 2.0;
    if motion.translation[0].abs() > half_x || motion.translation[1].abs() > half_y {
        return Err(ModelError::InvalidArgument(format!(
            "warp translation ({}, {}) exceeds half the grid extent ({half_x}, {half_y})",
            motion.translation[0], motion.translation[1]
        )));
    }
    let (n, _) = tape.shape(features);
    if n != world.cells() {
        return Err(ModelError::ShapeMismatch {
            context: "warp_bev features",
            expected: format!("{} rows", world.cells()),
            got: format!("{n} rows"),
        });
    }
    let taps = warp_taps(world, motion);
    Ok(tape.warp_bilinear(features, taps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(hw: usize) -> WorldConfig {
        WorldConfig {
            bev_h: hw,
            bev_w: hw,
            cell_size: 1.0,
            ..WorldConfig::default()
        }
    }

    fn one_hot(world: &WorldConfig, row: usize, col: usize, ch: usize, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; world.cells() * c];
        v[(row * world.bev_w + col) * c + ch] = 1.0;
        v
    }

    #[test]
    fn identity_motion_is_exact() {
        let w = world(5);
        let mut tape = Tape::inference();
        let data: Vec<f64> = (0..w.cells() * 3).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(data.clone(), w.cells(), 3);
        let y = warp_bev(&mut tape, x, &w, &EgoMotion::zero()).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn unit_x_translation_shifts_content_against_motion() {
        let w = world(5);
        let mut tape = Tape::inference();
        let x = tape.constant(one_hot(&w, 2, 3, 0, 1), w.cells(), 1);
        let motion = EgoMotion {
            translation: [1.0, 0.0],
            yaw: 0.0,
        };
        let y = warp_bev(&mut tape, x, &w, &motion).unwrap();
        let expect = one_hot(&w, 2, 2, 0, 1);
        assert_eq!(tape.value(y), expect.as_slice());
    }

    #[test]
    fn integer_translations_match_brute_force_shift() {
        let w = world(5);
        for (dx, dy) in [(1i64, 0i64), (0, 1), (-1, 1), (2, -1)] {
            let mut tape = Tape::inference();
            let data: Vec<f64> = (0..w.cells()).map(|i| (i * i % 17) as f64).collect();
            let x = tape.constant(data.clone(), w.cells(), 1);
            let motion = EgoMotion {
                translation: [dx as f64, dy as f64],
                yaw: 0.0,
            };
            let y = warp_bev(&mut tape, x, &w, &motion).unwrap();
            // Brute force: out[r][c] = in[r+dy][c+dx], zero outside.
            let mut expect = vec![0.0; w.cells()];
            for r in 0..5i64 {
                for c in 0..5i64 {
                    let (sr, sc) = (r + dy, c + dx);
                    if (0..5).contains(&sr) && (0..5).contains(&sc) {
                        expect[(r * 5 + c) as usize] = data[(sr * 5 + sc) as usize];
                    }
                }
            }
            assert_eq!(tape.value(y), expect.as_slice(), "shift ({dx},{dy})");
        }
    }

    #[test]
    fn forward_then_backward_restores_interior() {
        let w = world(7);
        let mut tape = Tape::inference();
        let data: Vec<f64> = (0..w.cells()).map(|i| (i % 13) as f64 + 1.0).collect();
        let x = tape.constant(data.clone(), w.cells(), 1);
        let fwd = EgoMotion {
            translation: [2.0, 1.0],
            yaw: 0.0,
        };
        let bwd = EgoMotion {
            translation: [-2.0, -1.0],
            yaw: 0.0,
        };
        let y = warp_bev(&mut tape, x, &w, &fwd).unwrap();
        let z = warp_bev(&mut tape, y, &w, &bwd).unwrap();
        let out = tape.value(z);
        // Interior cells (away from the swept border) are restored exactly;
        // the swept border is zero.
        for r in 0..7usize {
            for c in 0..7usize {
                let inside =
                    (1..6).contains(&r) && (2..5).contains(&c);
                if inside {
                    assert_eq!(out[r * 7 + c], data[r * 7 + c], "cell ({r},{c})");
                }
            }
        }
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn composition_of_integer_translations() {
        let w = world(9);
        let d1 = EgoMotion {
            translation: [1.0, 2.0],
            yaw: 0.0,
        };
        let d2 = EgoMotion {
            translation: [2.0, -1.0],
            yaw: 0.0,
        };
        let sum = EgoMotion {
            translation: [3.0, 1.0],
            yaw: 0.0,
        };
        let mut tape = Tape::inference();
        let data: Vec<f64> = (0..w.cells()).map(|i| ((i * 7) % 23) as f64).collect();
        let x = tape.constant(data, w.cells(), 1);
        let a = warp_bev(&mut tape, x, &w, &d1).unwrap();
        let ab = warp_bev(&mut tape, a, &w, &d2).unwrap();
        let direct = warp_bev(&mut tape, x, &w, &sum).unwrap();
        // Interior cells agree (border differs by zero fill sweep).
        let (hi, wi) = (9usize, 9usize);
        for r in 3..hi - 3 {
            for c in 3..wi - 3 {
                assert_eq!(
                    tape.value(ab)[r * wi + c],
                    tape.value(direct)[r * wi + c],
                    "cell ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn quarter_turn_rotates_content() {
        let w = world(5);
        let mut tape = Tape::inference();
        let x = tape.constant(one_hot(&w, 2, 4, 0, 1), w.cells(), 1);
        // Ego yaws left by 90 degrees: content ahead (+x) ends up to the
        // right (-y in the new frame).
        let motion = EgoMotion {
            translation: [0.0, 0.0],
            yaw: std::f64::consts::FRAC_PI_2,
        };
        let y = warp_bev(&mut tape, x, &w, &motion).unwrap();
        let got = tape.value(y);
        let idx_max = got
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!((idx_max / 5, idx_max % 5), (0, 2));
        assert!((got[idx_max] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oversized_translation_rejected() {
        let w = world(5);
        let mut tape = Tape::inference();
        let x = tape.constant(vec![0.0; w.cells()], w.cells(), 1);
        let motion = EgoMotion {
            translation: [10.0, 0.0],
            yaw: 0.0,
        };
        assert!(warp_bev(&mut tape, x, &w, &motion).is_err());
        let nan = EgoMotion {
            translation: [f64::NAN, 0.0],
            yaw: 0.0,
        };
        assert!(warp_bev(&mut tape, x, &w, &nan).is_err());
    }
}
