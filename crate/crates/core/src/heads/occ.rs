//! Occupancy head: channel-to-height decoding of BEV features into a
//! vertical volume of per-voxel class logits.

use crate::ad::{ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::gridworld::{SemanticOccGrid, WorldConfig};
use crate::model::ModelConfig;

/// Decoded per-voxel class logits, `[h*w*z, C]` with voxel rows ordered
/// (y, x, z).
#[derive(Clone, Copy, Debug)]
pub struct OccLogits {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub classes: usize,
}

/// Per-cell MLP lifting `[n, dim]` features to `z_bins * classes` logits.
pub fn decode_occupancy(
    tape: &mut Tape,
    store: &ParamStore,
    world: &WorldConfig,
    model: &ModelConfig,
    features: Var,
) -> Result<OccLogits, ModelError> {
    let (n, d) = tape.shape(features);
    if n != world.cells() || d != model.dim {
        return Err(ModelError::ShapeMismatch {
            context: "decode_occupancy features",
            expected: format!("{}x{}", world.cells(), model.dim),
            got: format!("{n}x{d}"),
        });
    }
    let w1 = tape.param(store, "occ.l1.w");
    let b1 = tape.param(store, "occ.l1.b");
    let w2 = tape.param(store, "occ.l2.w");
    let b2 = tape.param(store, "occ.l2.b");
    let h = tape.linear(features, w1, Some(b1));
    let h = tape.silu(h);
    let logits = tape.linear(h, w2, Some(b2));
    let rows = world.cells() * world.z_bins;
    let var = tape.reshape(logits, rows, world.num_classes);
    Ok(OccLogits {
        var,
        h: world.bev_h,
        w: world.bev_w,
        z: world.z_bins,
        classes: world.num_classes,
    })
}

impl OccLogits {
    /// Hard labels by per-voxel argmax with lowest-index tie-breaking.
    pub fn to_grid(&self, tape: &Tape, timestamp: i32) -> SemanticOccGrid {
        let vals = tape.value(self.var);
        let mut labels = Vec::with_capacity(self.h * self.w * self.z);
        for row in vals.chunks_exact(self.classes) {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            labels.push(best as u8);
        }
        SemanticOccGrid {
            h: self.h,
            w: self.w,
            z: self.z,
            timestamp,
            labels,
        }
    }

    /// Per-voxel class probabilities on the tape.
    pub fn probs(&self, tape: &mut Tape) -> Var {
        tape.softmax_rows(self.var)
    }

    /// Per-column occupied probability `max_z (1 - p_free)`, computed on
    /// values (h*w entries, row-major).
    pub fn occupied_map(&self, tape: &mut Tape) -> Vec<f64> {
        let p = self.probs(tape);
        let vals = tape.value(p);
        let mut out = vec![0.0f64; self.h * self.w];
        for (voxel, row) in vals.chunks_exact(self.classes).enumerate() {
            let col = voxel / self.z;
            let occ = 1.0 - row[0];
            if occ > out[col] {
                out[col] = occ;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_params, CouplingMode};
    use crate::rng::{substream, uniform};

    fn setup() -> (WorldConfig, ModelConfig, ParamStore) {
        let world = WorldConfig {
            bev_h: 8,
            bev_w: 8,
            z_bins: 4,
            ..WorldConfig::default()
        };
        let model = ModelConfig {
            dim: 8,
            occ_hidden: 12,
            ..ModelConfig::default()
        };
        let store = build_params(&world, &model, CouplingMode::Semi, 11);
        (world, model, store)
    }

    #[test]
    fn shape_contract() {
        let (world, model, store) = setup();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![0.1; world.cells() * model.dim], world.cells(), model.dim);
        let occ = decode_occupancy(&mut tape, &store, &world, &model, x).unwrap();
        assert_eq!(
            tape.shape(occ.var),
            (world.cells() * world.z_bins, world.num_classes)
        );
        let grid = occ.to_grid(&tape, 0);
        assert_eq!((grid.h, grid.w, grid.z), (8, 8, 4));
    }

    #[test]
    fn zero_features_zero_bias_gives_class_zero_everywhere() {
        let (world, model, store) = setup();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![0.0; world.cells() * model.dim], world.cells(), model.dim);
        let occ = decode_occupancy(&mut tape, &store, &world, &model, x).unwrap();
        // Biases initialize to zero, so logits are uniform (all zero) and
        // first-index tie-breaking selects class 0.
        assert!(tape.value(occ.var).iter().all(|&v| v == 0.0));
        let grid = occ.to_grid(&tape, 0);
        assert!(grid.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn per_voxel_logits_match_scalar_mlp_oracle() {
        let (world, model, store) = setup();
        let mut rng = substream(13, "occ.test", 0);
        let data: Vec<f64> = (0..world.cells() * model.dim)
            .map(|_| uniform(&mut rng, -1.0, 1.0))
            .collect();
        let mut tape = Tape::inference();
        let x = tape.constant(data.clone(), world.cells(), model.dim);
        let occ = decode_occupancy(&mut tape, &store, &world, &model, x).unwrap();
        let got = tape.value(occ.var);
        let w1 = &store.get("occ.l1.w").data;
        let b1 = &store.get("occ.l1.b").data;
        let w2 = &store.get("occ.l2.w").data;
        let b2 = &store.get("occ.l2.b").data;
        let hid = model.occ_hidden;
        for &cell in &[3usize, 17, 42] {
            let xrow = &data[cell * model.dim..(cell + 1) * model.dim];
            let mut h = vec![0.0; hid];
            for j in 0..hid {
                let mut acc = b1[j];
                for (i, &xv) in xrow.iter().enumerate() {
                    acc += xv * w1[i * hid + j];
                }
                let s = 1.0 / (1.0 + (-acc).exp());
                h[j] = acc * s;
            }
            for zi in 0..world.z_bins {
                for c in 0..world.num_classes {
                    let out_col = zi * world.num_classes + c;
                    let mut acc = b2[out_col];
                    for (j, &hv) in h.iter().enumerate() {
                        acc += hv * w2[j * world.z_bins * world.num_classes + out_col];
                    }
                    let got_v = got[(cell * world.z_bins + zi) * world.num_classes + c];
                    assert!(
                        (got_v - acc).abs() < 1e-6,
                        "voxel ({cell},{zi},{c}): {got_v} vs {acc}"
                    );
                }
            }
        }
    }

    #[test]
    fn decoding_is_per_cell_local() {
        let (world, model, store) = setup();
        let mut rng = substream(14, "occ.test", 1);
        let data: Vec<f64> = (0..world.cells() * model.dim)
            .map(|_| uniform(&mut rng, -1.0, 1.0))
            .collect();
        let mut perturbed = data.clone();
        let target_cell = 20usize;
        for v in
            perturbed[target_cell * model.dim..(target_cell + 1) * model.dim].iter_mut()
        {
            *v += 0.5;
        }
        let mut t1 = Tape::inference();
        let x1 = t1.constant(data, world.cells(), model.dim);
        let a = decode_occupancy(&mut t1, &store, &world, &model, x1).unwrap();
        let mut t2 = Tape::inference();
        let x2 = t2.constant(perturbed, world.cells(), model.dim);
        let b = decode_occupancy(&mut t2, &store, &world, &model, x2).unwrap();
        let (va, vb) = (t1.value(a.var), t2.value(b.var));
        let zc = world.z_bins * world.num_classes;
        for cell in 0..world.cells() {
            let same = va[cell * zc..(cell + 1) * zc] == vb[cell * zc..(cell + 1) * zc];
            assert_eq!(same, cell != target_cell, "cell {cell}");
        }
    }
}
