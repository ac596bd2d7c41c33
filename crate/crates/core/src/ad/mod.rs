//! Reverse-mode automatic differentiation over flat `f64` buffers.
//!
//! A [`Tape`] records one forward computation as a list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Tensors are `(rows, cols)` matrices; spatial maps store `rows = h * w`
//! with channels contiguous per cell, which keeps every hot inner loop on a
//! contiguous slice. Tapes built with `Tape::inference()` skip backward
//! bookkeeping.

mod check;
pub(crate) mod kernels;
mod ops;
mod optim;
mod params;

pub use check::{central_diff, rel_err};
pub use operators::bilinear_taps as bilinear_taps_pub;
pub use optim::{AdamW, AdamWConfig};
pub use params::{xavier_uniform, ParamBlock, ParamStore};

use ops as operators;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Bilinear taps for one output cell of a fixed-coordinate resampling.
#[derive(Clone, Copy, Debug)]
pub struct Tap4 {
    pub idx: [i64; 4],
    pub w: [f64; 4],
}

/// Geometry of a deformable-attention aggregation.
#[derive(Clone, Copy, Debug)]
pub struct DeformGeom {
    /// Number of queries (cells of the query grid).
    pub n: usize,
    pub heads: usize,
    /// Number of source maps actually attended.
    pub maps: usize,
    /// Sampling points per (head, map).
    pub points: usize,
    pub map_h: usize,
    pub map_w: usize,
    /// Channels per head; total channels = heads * dh.
    pub dh: usize,
}

impl DeformGeom {
    pub fn samples(&self) -> usize {
        self.heads * self.maps * self.points
    }
    pub fn channels(&self) -> usize {
        self.heads * self.dh
    }
}

pub(crate) enum Back {
    Leaf,
    Add(usize, usize),
    AddBroadcastRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulBroadcastRow(usize, usize),
    Scale(usize, f64),
    AddN(Vec<usize>),
    Silu(usize),
    Square(usize),
    MeanAll(usize),
    SumAll(usize),
    MeanRows(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    MatMulNT {
        a: usize,
        b: usize,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        b: usize,
        h: usize,
        wd: usize,
    },
    LayerNorm {
        x: usize,
        /// Per-row (mean, rstd).
        stats: Vec<f64>,
    },
    SoftmaxRows(usize),
    WarpBilinear {
        x: usize,
        taps: Vec<Tap4>,
    },
    DeformAgg {
        maps: Vec<usize>,
        coords: usize,
        weights: usize,
        geom: DeformGeom,
    },
    CrossEntropyRows {
        logits: usize,
        target: Vec<u8>,
        probs: Vec<f64>,
    },
    BceWithLogit {
        logit: usize,
        mask: Vec<f64>,
    },
    LogSumExpSkip0(usize),
    LovaszSoftmax {
        probs: usize,
        grad: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub back: Back,
    pub active: bool,
}

/// One recorded forward computation.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
    /// (node id, block id) for parameter leaves.
    param_vars: Vec<(usize, usize)>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer for a variable, or `None` if it never received one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: true,
            param_vars: Vec::new(),
        }
    }

    /// Tape that records values only; `backward` on it is a logic error.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: false,
            param_vars: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub(crate) fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, back: Back) -> Var {
        debug_assert_eq!(data.len(), rows * cols, "node data does not match shape");
        let active = self.grad_enabled
            && match &back {
                Back::Leaf => false,
                b => self.any_parent_active(b),
            };
        let back = if self.grad_enabled && active {
            back
        } else {
            Back::Leaf
        };
        self.nodes.push(Node {
            data,
            rows,
            cols,
            back,
            active,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_parent_active(&self, back: &Back) -> bool {
        let mut any = false;
        self.for_parents(back, |p| any |= self.nodes[p].active);
        any
    }

    fn for_parents(&self, back: &Back, mut f: impl FnMut(usize)) {
        match back {
            Back::Leaf => {}
            Back::Add(a, b) | Back::Sub(a, b) | Back::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Back::AddBroadcastRow(a, b) | Back::MulBroadcastRow(a, b) => {
                f(*a);
                f(*b);
            }
            Back::Scale(a, _)
            | Back::Silu(a)
            | Back::Square(a)
            | Back::MeanAll(a)
            | Back::SumAll(a)
            | Back::MeanRows(a)
            | Back::Reshape(a)
            | Back::SoftmaxRows(a)
            | Back::LogSumExpSkip0(a) => f(*a),
            Back::AddN(parts) | Back::ConcatCols(parts) | Back::ConcatRows(parts) => {
                parts.iter().copied().for_each(f)
            }
            Back::SliceCols { x, .. } => f(*x),
            Back::Linear { x, w, b } => {
                f(*x);
                f(*w);
                if let Some(b) = b {
                    f(*b);
                }
            }
            Back::MatMul { a, b } | Back::MatMulNT { a, b } => {
                f(*a);
                f(*b);
            }
            Back::Conv3x3 { x, w, b, .. } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Back::LayerNorm { x, .. } => f(*x),
            Back::WarpBilinear { x, .. } => f(*x),
            Back::DeformAgg {
                maps,
                coords,
                weights,
                ..
            } => {
                maps.iter().copied().for_each(&mut f);
                f(*coords);
                f(*weights);
            }
            Back::CrossEntropyRows { logits, .. } => f(*logits),
            Back::BceWithLogit { logit, .. } => f(*logit),
            Back::LovaszSoftmax { probs, .. } => f(*probs),
        }
    }

    /// Constant leaf: values participate in the forward pass but receive no
    /// gradient.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(data, rows, cols, Back::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v], 1, 1)
    }

    /// Leaf that accumulates gradient (used for probes in tests and for
    /// parameters).
    pub fn leaf_grad(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        let active = self.grad_enabled;
        self.nodes.push(Node {
            data,
            rows,
            cols,
            back: Back::Leaf,
            active,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a named parameter block onto the tape as a gradient leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let (block_id, block) = store.lookup(name);
        let v = self.leaf_grad(block.data.clone(), block.rows, block.cols);
        self.param_vars.push((v.0, block_id));
        v
    }

    /// Accumulates parameter gradients from `grads` into `sink` (same block
    /// layout as the store). Fixed iteration order keeps reductions exact.
    pub fn accumulate_param_grads(&self, grads: &Grads, sink: &mut [Vec<f64>]) {
        for &(node, block) in &self.param_vars {
            if let Some(g) = grads.g[node].as_ref() {
                let dst = &mut sink[block];
                for (d, s) in dst.iter_mut().zip(g.iter()) {
                    *d += *s;
                }
            }
        }
    }

    /// Runs reverse accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward root must be scalar"
        );
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].active {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backstep(i, &gout, &mut g);
            // Re-store so callers can read gradients of intermediate vars.
            g[i] = Some(gout);
        }
        Grads { g }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
