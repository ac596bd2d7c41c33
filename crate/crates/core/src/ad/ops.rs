//! Forward constructors and the reverse-step dispatch.

use super::kernels::{axpy, dot, matmul_acc};
use super::{Back, DeformGeom, Tap4, Tape, Var};

#[inline]
fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!((ar, ac), (br, bc), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(data, r, c, Back::Add(a.0, b.0))
    }

    /// `a [n,d] + b [1,d]`, `b` broadcast over rows.
    pub fn add_broadcast_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!((br, bc), (1, c), "add_broadcast_row: bad broadcast shape");
        let bb = &self.nodes[b.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(bb) {
                *x += *y;
            }
        }
        self.push(data, r, c, Back::AddBroadcastRow(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(data, r, c, Back::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(data, r, c, Back::Mul(a.0, b.0))
    }

    /// `a [n,d] * b [1,d]` elementwise with `b` broadcast over rows.
    pub fn mul_broadcast_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!((br, bc), (1, c), "mul_broadcast_row: bad broadcast shape");
        let bb = &self.nodes[b.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(bb) {
                *x *= *y;
            }
        }
        self.push(data, r, c, Back::MulBroadcastRow(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|x| x * k).collect();
        self.push(data, r, c, Back::Scale(a.0, k))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of nothing");
        let (r, c) = self.shape(parts[0]);
        let mut data = self.nodes[parts[0].0].data.clone();
        for p in &parts[1..] {
            self.assert_same_shape(parts[0], *p, "add_n");
            for (x, y) in data.iter_mut().zip(&self.nodes[p.0].data) {
                *x += *y;
            }
        }
        self.push(data, r, c, Back::AddN(parts.iter().map(|v| v.0).collect()))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        self.push(data, r, c, Back::Silu(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|x| x * x).collect();
        self.push(data, r, c, Back::Square(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![s / n], 1, 1, Back::MeanAll(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![s], 1, 1, Back::SumAll(a.0))
    }

    /// Mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = zeros(c);
        for row in self.nodes[a.0].data.chunks_exact(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += *x;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(out, 1, c, Back::MeanRows(a.0))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(
            self.nodes[a.0].data.len(),
            rows * cols,
            "reshape: element count mismatch"
        );
        let data = self.nodes[a.0].data.clone();
        self.push(data, rows, cols, Back::Reshape(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|p| {
                assert_eq!(self.shape(*p).0, r, "concat_cols: row mismatch");
                self.shape(*p).1
            })
            .sum();
        let mut data = zeros(r * total);
        let mut off = 0;
        for p in parts {
            let c = self.shape(*p).1;
            for (row, src) in self.nodes[p.0].data.chunks_exact(c).enumerate() {
                data[row * total + off..row * total + off + c].copy_from_slice(src);
            }
            off += c;
        }
        self.push(
            data,
            r,
            total,
            Back::ConcatCols(parts.iter().map(|v| v.0).collect()),
        )
    }

    /// Stacks same-width parts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = self.shape(*p);
            assert_eq!(pc, c, "concat_rows: col mismatch");
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(
            data,
            rows,
            c,
            Back::ConcatRows(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = zeros(r * len);
        for (row, src) in self.nodes[a.0].data.chunks_exact(c).enumerate() {
            data[row * len..(row + 1) * len].copy_from_slice(&src[start..start + len]);
        }
        self.push(data, r, len, Back::SliceCols { x: a.0, start })
    }

    /// `x [n,i] * w [i,o] (+ b [1,o])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        assert_eq!(i, wi, "linear: inner dim mismatch");
        let mut out = match b {
            Some(b) => {
                let (br, bc) = self.shape(b);
                assert_eq!((br, bc), (1, o), "linear: bias shape");
                let bias = &self.nodes[b.0].data;
                let mut out = zeros(n * o);
                for row in out.chunks_exact_mut(o) {
                    row.copy_from_slice(bias);
                }
                out
            }
            None => zeros(n * o),
        };
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        matmul_acc(&mut out, xd, wd, n, i, o);
        self.push(
            out,
            n,
            o,
            Back::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
        )
    }

    /// `a [n,k] * b [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (kb, m) = self.shape(b);
        assert_eq!(k, kb, "matmul: inner dim mismatch");
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = zeros(n * m);
        matmul_acc(&mut out, ad, bd, n, k, m);
        self.push(out, n, m, Back::MatMul { a: a.0, b: b.0 })
    }

    /// `a [n,d] * b^T` with `b [m,d]`, giving `[n,m]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.shape(a);
        let (m, db) = self.shape(b);
        assert_eq!(d, db, "matmul_nt: inner dim mismatch");
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = zeros(n * m);
        for r in 0..n {
            let arow = &ad[r * d..(r + 1) * d];
            let orow = &mut out[r * m..(r + 1) * m];
            for (c, ov) in orow.iter_mut().enumerate() {
                *ov = dot(arow, &bd[c * d..(c + 1) * d]);
            }
        }
        self.push(out, n, m, Back::MatMulNT { a: a.0, b: b.0 })
    }

    /// 3x3 same-padding convolution over a `[h*w, ci]` map.
    /// Weights are `[9*ci, co]` (tap-major, then input channel), bias `[1, co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, h: usize, wd: usize) -> Var {
        let (n, ci) = self.shape(x);
        assert_eq!(n, h * wd, "conv3x3: map size mismatch");
        let (wr, co) = self.shape(w);
        assert_eq!(wr, 9 * ci, "conv3x3: weight shape mismatch");
        assert_eq!(self.shape(b), (1, co), "conv3x3: bias shape mismatch");
        let xd = &self.nodes[x.0].data;
        let wdat = &self.nodes[w.0].data;
        let bias = &self.nodes[b.0].data;
        let mut out = zeros(n * co);
        for row in out.chunks_exact_mut(co) {
            row.copy_from_slice(bias);
        }
        for y in 0..h {
            for xx in 0..wd {
                let orow = y * wd + xx;
                let out_row = &mut out[orow * co..(orow + 1) * co];
                for ky in 0..3usize {
                    let sy = y as i64 + ky as i64 - 1;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = xx as i64 + kx as i64 - 1;
                        if sx < 0 || sx >= wd as i64 {
                            continue;
                        }
                        let srow = sy as usize * wd + sx as usize;
                        let xrow = &xd[srow * ci..(srow + 1) * ci];
                        let kk = ky * 3 + kx;
                        let wblock = &wdat[kk * ci * co..(kk + 1) * ci * co];
                        matmul_acc(out_row, xrow, wblock, 1, ci, co);
                    }
                }
            }
        }
        self.push(
            out,
            n,
            co,
            Back::Conv3x3 {
                x: x.0,
                w: w.0,
                b: b.0,
                h,
                wd,
            },
        )
    }

    /// Per-row layer normalization without learned affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, d) = self.shape(x);
        let xd = &self.nodes[x.0].data;
        let mut out = zeros(n * d);
        let mut stats = Vec::with_capacity(2 * n);
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            stats.push(mean);
            stats.push(rstd);
        }
        self.push(out, n, d, Back::LayerNorm { x: x.0, stats })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.shape(x);
        let xd = &self.nodes[x.0].data;
        let mut out = zeros(n * d);
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let orow = &mut out[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            let inv = 1.0 / z;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(out, n, d, Back::SoftmaxRows(x.0))
    }

    /// Resamples a `[h*w, c]` map through precomputed bilinear taps
    /// (one `Tap4` per output cell; negative indices are out-of-window and
    /// contribute zero).
    pub fn warp_bilinear(&mut self, x: Var, taps: Vec<Tap4>) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(taps.len(), n, "warp: tap count mismatch");
        let xd = &self.nodes[x.0].data;
        let mut out = zeros(n * c);
        for (cell, tap) in taps.iter().enumerate() {
            let orow = &mut out[cell * c..(cell + 1) * c];
            for t in 0..4 {
                let idx = tap.idx[t];
                let wgt = tap.w[t];
                if idx < 0 || wgt == 0.0 {
                    continue;
                }
                let src = &xd[idx as usize * c..(idx as usize + 1) * c];
                for (o, &v) in orow.iter_mut().zip(src) {
                    *o += wgt * v;
                }
            }
        }
        self.push(out, n, c, Back::WarpBilinear { x: x.0, taps })
    }

    /// Deformable multi-head aggregation.
    ///
    /// `maps` are `[map_h*map_w, c]` value maps; `coords [n, samples*2]`
    /// holds absolute (x, y) sampling positions in cell units laid out
    /// `(head, map, point)`-major; `weights [n, samples]` are already
    /// normalized attention weights. Output is `[n, c]` where head `h`
    /// fills channel block `h*dh..(h+1)*dh`.
    pub fn deform_agg(&mut self, maps: &[Var], coords: Var, weights: Var, geom: DeformGeom) -> Var {
        assert_eq!(maps.len(), geom.maps, "deform_agg: map count mismatch");
        let s = geom.samples();
        assert_eq!(self.shape(coords), (geom.n, s * 2), "deform_agg: coords");
        assert_eq!(self.shape(weights), (geom.n, s), "deform_agg: weights");
        for m in maps {
            assert_eq!(
                self.shape(*m),
                (geom.map_h * geom.map_w, geom.channels()),
                "deform_agg: map shape"
            );
        }
        let c = geom.channels();
        let mut out = zeros(geom.n * c);
        {
            let cd = &self.nodes[coords.0].data;
            let wd = &self.nodes[weights.0].data;
            let map_data: Vec<&[f64]> = maps
                .iter()
                .map(|m| self.nodes[m.0].data.as_slice())
                .collect();
            for q in 0..geom.n {
                let crow = &cd[q * s * 2..(q + 1) * s * 2];
                let wrow = &wd[q * s..(q + 1) * s];
                let orow = &mut out[q * c..(q + 1) * c];
                for head in 0..geom.heads {
                    let oslice = &mut orow[head * geom.dh..(head + 1) * geom.dh];
                    for (mj, md) in map_data.iter().enumerate() {
                        for k in 0..geom.points {
                            let si = (head * geom.maps + mj) * geom.points + k;
                            let a = wrow[si];
                            if a == 0.0 {
                                continue;
                            }
                            let sx = crow[si * 2];
                            let sy = crow[si * 2 + 1];
                            bilinear_fwd(
                                md,
                                geom.map_h,
                                geom.map_w,
                                c,
                                head * geom.dh,
                                geom.dh,
                                sx,
                                sy,
                                a,
                                oslice,
                            );
                        }
                    }
                }
            }
        }
        self.push(
            out,
            geom.n,
            c,
            Back::DeformAgg {
                maps: maps.iter().map(|v| v.0).collect(),
                coords: coords.0,
                weights: weights.0,
                geom,
            },
        )
    }

    /// Mean negative log-likelihood over rows of `[n, C]` logits.
    pub fn cross_entropy_rows(&mut self, logits: Var, target: &[u8]) -> Var {
        let (n, c) = self.shape(logits);
        assert_eq!(target.len(), n, "cross_entropy: target length");
        let xd = &self.nodes[logits.0].data;
        let mut probs = zeros(n * c);
        let mut loss = 0.0;
        for r in 0..n {
            let row = &xd[r * c..(r + 1) * c];
            let prow = &mut probs[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            let inv = 1.0 / z;
            prow.iter_mut().for_each(|p| *p *= inv);
            let t = target[r] as usize;
            debug_assert!(t < c, "target label out of range");
            loss -= (row[t] - m) - z.ln();
        }
        loss /= n as f64;
        let keep_probs = self.grad_enabled;
        self.push(
            vec![loss],
            1,
            1,
            Back::CrossEntropyRows {
                logits: logits.0,
                target: target.to_vec(),
                probs: if keep_probs { probs } else { Vec::new() },
            },
        )
    }

    /// Mean binary cross-entropy of a logit column against a 0/1 mask.
    pub fn bce_with_logit(&mut self, logit: Var, mask: &[f64]) -> Var {
        let n = self.nodes[logit.0].data.len();
        assert_eq!(mask.len(), n, "bce: mask length");
        let mut loss = 0.0;
        for (&l, &m) in self.nodes[logit.0].data.iter().zip(mask) {
            loss += l.max(0.0) - l * m + (1.0 + (-l.abs()).exp()).ln();
        }
        loss /= n as f64;
        self.push(
            vec![loss],
            1,
            1,
            Back::BceWithLogit {
                logit: logit.0,
                mask: mask.to_vec(),
            },
        )
    }

    /// Per-row `ln(sum_{c>=1} exp(x_c))`: the logit mass of all non-free
    /// classes. `[n, C] -> [n, 1]`.
    pub fn logsumexp_skip0(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        assert!(c >= 2, "logsumexp_skip0 needs at least two classes");
        let xd = &self.nodes[x.0].data;
        let mut out = zeros(n);
        for r in 0..n {
            let row = &xd[r * c + 1..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out[r] = m + z.ln();
        }
        self.push(out, n, 1, Back::LogSumExpSkip0(x.0))
    }

    /// Lovász-softmax over `[n, C]` class probabilities, averaged over the
    /// classes present in `target`. The piecewise-linear gradient is fixed by
    /// the (stable) sort order and precomputed here.
    pub fn lovasz_softmax(&mut self, probs: Var, target: &[u8]) -> Var {
        let (n, c) = self.shape(probs);
        assert_eq!(target.len(), n, "lovasz: target length");
        let pd = &self.nodes[probs.0].data;
        let mut present: Vec<u8> = Vec::new();
        for &t in target {
            if !present.contains(&t) {
                present.push(t);
            }
        }
        present.sort_unstable();
        let mut grad = zeros(n * c);
        let mut total = 0.0;
        let mut errors: Vec<(f64, usize)> = Vec::with_capacity(n);
        for &class in &present {
            let cl = class as usize;
            errors.clear();
            for r in 0..n {
                let p = pd[r * c + cl];
                let e = if target[r] == class { 1.0 - p } else { p };
                errors.push((e, r));
            }
            // Stable descending sort keeps tie handling deterministic.
            errors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let gt_total = target.iter().filter(|&&t| t == class).count() as f64;
            let mut inter = gt_total;
            let mut union = gt_total;
            let mut prev_jacc = 0.0;
            // The loss is accumulated by summation by parts,
            // sum_j jacc_j * (e_j - e_{j+1}); at hard 0/1 predictions this
            // collapses to the boundary term 1 - I/U with no cancellation,
            // so it matches set counting exactly.
            for (j, &(e, r)) in errors.iter().enumerate() {
                let is_gt = target[r] == class;
                if is_gt {
                    inter -= 1.0;
                } else {
                    union += 1.0;
                }
                let jacc = 1.0 - inter / union;
                let g = jacc - prev_jacc;
                prev_jacc = jacc;
                let e_next = errors.get(j + 1).map(|&(en, _)| en).unwrap_or(0.0);
                total += jacc * (e - e_next);
                let sign = if is_gt { -1.0 } else { 1.0 };
                grad[r * c + cl] += sign * g;
            }
        }
        let inv = 1.0 / present.len().max(1) as f64;
        total *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        let keep = self.grad_enabled;
        self.push(
            vec![total],
            1,
            1,
            Back::LovaszSoftmax {
                probs: probs.0,
                grad: if keep { grad } else { Vec::new() },
            },
        )
    }

    pub(crate) fn backstep(&self, i: usize, gout: &[f64], g: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        let acc = |g: &mut Vec<Option<Vec<f64>>>, p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[p].active {
                return;
            }
            let buf = g[p].get_or_insert_with(|| zeros(self.nodes[p].data.len()));
            f(buf);
        };
        match &node.back {
            Back::Leaf => {}
            Back::Add(a, b) => {
                acc(g, *a, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s)
                });
                acc(g, *b, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s)
                });
            }
            Back::AddBroadcastRow(a, b) => {
                acc(g, *a, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s)
                });
                let c = self.nodes[*b].data.len();
                acc(g, *b, &mut |buf| {
                    for row in gout.chunks_exact(c) {
                        buf.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Back::Sub(a, b) => {
                acc(g, *a, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s)
                });
                acc(g, *b, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d -= s)
                });
            }
            Back::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc(g, a, &mut |buf| {
                    for ((d, s), v) in buf.iter_mut().zip(gout).zip(&self.nodes[b].data) {
                        *d += s * v;
                    }
                });
                acc(g, b, &mut |buf| {
                    for ((d, s), v) in buf.iter_mut().zip(gout).zip(&self.nodes[a].data) {
                        *d += s * v;
                    }
                });
            }
            Back::MulBroadcastRow(a, b) => {
                let (a, b) = (*a, *b);
                let c = self.nodes[b].data.len();
                acc(g, a, &mut |buf| {
                    let bd = &self.nodes[b].data;
                    for (row, grow) in buf.chunks_exact_mut(c).zip(gout.chunks_exact(c)) {
                        for ((d, s), v) in row.iter_mut().zip(grow).zip(bd) {
                            *d += s * v;
                        }
                    }
                });
                acc(g, b, &mut |buf| {
                    let ad = &self.nodes[a].data;
                    for (arow, grow) in ad.chunks_exact(c).zip(gout.chunks_exact(c)) {
                        for ((d, s), v) in buf.iter_mut().zip(grow).zip(arow) {
                            *d += s * v;
                        }
                    }
                });
            }
            Back::Scale(a, k) => {
                let k = *k;
                acc(g, *a, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s * k)
                });
            }
            Back::AddN(parts) => {
                for &p in parts {
                    acc(g, p, &mut |buf| {
                        buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s)
                    });
                }
            }
            Back::Silu(a) => {
                let a = *a;
                acc(g, a, &mut |buf| {
                    for ((d, s), &x) in buf.iter_mut().zip(gout).zip(&self.nodes[a].data) {
                        let sg = sigmoid(x);
                        *d += s * (sg + x * sg * (1.0 - sg));
                    }
                });
            }
            Back::Square(a) => {
                let a = *a;
                acc(g, a, &mut |buf| {
                    for ((d, s), &x) in buf.iter_mut().zip(gout).zip(&self.nodes[a].data) {
                        *d += s * 2.0 * x;
                    }
                });
            }
            Back::MeanAll(a) => {
                let a = *a;
                let k = gout[0] / self.nodes[a].data.len() as f64;
                acc(g, a, &mut |buf| buf.iter_mut().for_each(|d| *d += k));
            }
            Back::SumAll(a) => {
                let k = gout[0];
                acc(g, *a, &mut |buf| buf.iter_mut().for_each(|d| *d += k));
            }
            Back::MeanRows(a) => {
                let a = *a;
                let c = gout.len();
                let n = self.nodes[a].data.len() / c;
                let inv = 1.0 / n as f64;
                acc(g, a, &mut |buf| {
                    for row in buf.chunks_exact_mut(c) {
                        for (d, s) in row.iter_mut().zip(gout) {
                            *d += s * inv;
                        }
                    }
                });
            }
            Back::Reshape(a) => {
                acc(g, *a, &mut |buf| {
                    buf.iter_mut().zip(gout).for_each(|(d, s)| *d += s)
                });
            }
            Back::ConcatCols(parts) => {
                let total = node.cols;
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].data.len() / node.rows;
                    acc(g, p, &mut |buf| {
                        for (row, dst) in buf.chunks_exact_mut(c).enumerate() {
                            let src = &gout[row * total + off..row * total + off + c];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    off += c;
                }
            }
            Back::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    acc(g, p, &mut |buf| {
                        buf.iter_mut()
                            .zip(&gout[off..off + len])
                            .for_each(|(d, s)| *d += s);
                    });
                    off += len;
                }
            }
            Back::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let c = self.nodes[x].data.len() / node.rows;
                let len = node.cols;
                acc(g, x, &mut |buf| {
                    for (row, src) in gout.chunks_exact(len).enumerate() {
                        let dst = &mut buf[row * c + start..row * c + start + len];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Back::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let o = node.cols;
                let i = self.nodes[w].data.len() / o;
                let n = node.rows;
                acc(g, x, &mut |buf| {
                    let wd = &self.nodes[w].data;
                    for r in 0..n {
                        let grow = &gout[r * o..(r + 1) * o];
                        let xrow = &mut buf[r * i..(r + 1) * i];
                        for (k, xg) in xrow.iter_mut().enumerate() {
                            *xg += dot(grow, &wd[k * o..(k + 1) * o]);
                        }
                    }
                });
                acc(g, w, &mut |buf| {
                    let xd = &self.nodes[x].data;
                    for r in 0..n {
                        let grow = &gout[r * o..(r + 1) * o];
                        let xrow = &xd[r * i..(r + 1) * i];
                        for (k, &xv) in xrow.iter().enumerate() {
                            axpy(&mut buf[k * o..(k + 1) * o], xv, grow);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(g, *b, &mut |buf| {
                        for grow in gout.chunks_exact(o) {
                            buf.iter_mut().zip(grow).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Back::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let n = node.rows;
                let m = node.cols;
                let k = self.nodes[a].data.len() / n;
                acc(g, a, &mut |buf| {
                    let bd = &self.nodes[b].data;
                    for r in 0..n {
                        let grow = &gout[r * m..(r + 1) * m];
                        let arow = &mut buf[r * k..(r + 1) * k];
                        for (kk, ag) in arow.iter_mut().enumerate() {
                            *ag += dot(grow, &bd[kk * m..(kk + 1) * m]);
                        }
                    }
                });
                acc(g, b, &mut |buf| {
                    let ad = &self.nodes[a].data;
                    for r in 0..n {
                        let grow = &gout[r * m..(r + 1) * m];
                        let arow = &ad[r * k..(r + 1) * k];
                        for (kk, &av) in arow.iter().enumerate() {
                            axpy(&mut buf[kk * m..(kk + 1) * m], av, grow);
                        }
                    }
                });
            }
            Back::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let n = node.rows;
                let m = node.cols;
                let d = self.nodes[a].data.len() / n;
                acc(g, a, &mut |buf| {
                    let bd = &self.nodes[b].data;
                    for r in 0..n {
                        let grow = &gout[r * m..(r + 1) * m];
                        let arow = &mut buf[r * d..(r + 1) * d];
                        for (c, &gv) in grow.iter().enumerate() {
                            axpy(arow, gv, &bd[c * d..(c + 1) * d]);
                        }
                    }
                });
                acc(g, b, &mut |buf| {
                    let ad = &self.nodes[a].data;
                    for r in 0..n {
                        let grow = &gout[r * m..(r + 1) * m];
                        let arow = &ad[r * d..(r + 1) * d];
                        for (c, &gv) in grow.iter().enumerate() {
                            axpy(&mut buf[c * d..(c + 1) * d], gv, arow);
                        }
                    }
                });
            }
            Back::Conv3x3 { x, w, b, h, wd } => {
                let (x, w, b, h, wd) = (*x, *w, *b, *h, *wd);
                let co = node.cols;
                let ci = self.nodes[x].data.len() / (h * wd);
                acc(g, x, &mut |buf| {
                    let wdat = &self.nodes[w].data;
                    for y in 0..h {
                        for xx in 0..wd {
                            let orow = y * wd + xx;
                            let grow = &gout[orow * co..(orow + 1) * co];
                            for ky in 0..3usize {
                                let sy = y as i64 + ky as i64 - 1;
                                if sy < 0 || sy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let sx = xx as i64 + kx as i64 - 1;
                                    if sx < 0 || sx >= wd as i64 {
                                        continue;
                                    }
                                    let srow = sy as usize * wd + sx as usize;
                                    let kk = ky * 3 + kx;
                                    let xg = &mut buf[srow * ci..(srow + 1) * ci];
                                    for (i, xgv) in xg.iter_mut().enumerate() {
                                        *xgv += dot(
                                            grow,
                                            &wdat[(kk * ci + i) * co..(kk * ci + i + 1) * co],
                                        );
                                    }
                                }
                            }
                        }
                    }
                });
                acc(g, w, &mut |buf| {
                    let xd = &self.nodes[x].data;
                    for y in 0..h {
                        for xx in 0..wd {
                            let orow = y * wd + xx;
                            let grow = &gout[orow * co..(orow + 1) * co];
                            for ky in 0..3usize {
                                let sy = y as i64 + ky as i64 - 1;
                                if sy < 0 || sy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let sx = xx as i64 + kx as i64 - 1;
                                    if sx < 0 || sx >= wd as i64 {
                                        continue;
                                    }
                                    let srow = sy as usize * wd + sx as usize;
                                    let kk = ky * 3 + kx;
                                    let xrow = &xd[srow * ci..(srow + 1) * ci];
                                    for (i, &xv) in xrow.iter().enumerate() {
                                        axpy(
                                            &mut buf[(kk * ci + i) * co..(kk * ci + i + 1) * co],
                                            xv,
                                            grow,
                                        );
                                    }
                                }
                            }
                        }
                    }
                });
                acc(g, b, &mut |buf| {
                    for grow in gout.chunks_exact(co) {
                        buf.iter_mut().zip(grow).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Back::LayerNorm { x, stats } => {
                let x = *x;
                let d = node.cols;
                acc(g, x, &mut |buf| {
                    let y = &node.data;
                    for r in 0..node.rows {
                        let rstd = stats[2 * r + 1];
                        let grow = &gout[r * d..(r + 1) * d];
                        let yrow = &y[r * d..(r + 1) * d];
                        let gmean = grow.iter().sum::<f64>() / d as f64;
                        let gymean = grow
                            .iter()
                            .zip(yrow)
                            .map(|(gv, yv)| gv * yv)
                            .sum::<f64>()
                            / d as f64;
                        let dst = &mut buf[r * d..(r + 1) * d];
                        for ((dd, gv), yv) in dst.iter_mut().zip(grow).zip(yrow) {
                            *dd += rstd * (gv - gmean - yv * gymean);
                        }
                    }
                });
            }
            Back::SoftmaxRows(x) => {
                let x = *x;
                let d = node.cols;
                acc(g, x, &mut |buf| {
                    let p = &node.data;
                    for r in 0..node.rows {
                        let prow = &p[r * d..(r + 1) * d];
                        let grow = &gout[r * d..(r + 1) * d];
                        let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                        let dst = &mut buf[r * d..(r + 1) * d];
                        for ((dd, pv), gv) in dst.iter_mut().zip(prow).zip(grow) {
                            *dd += pv * (gv - dot);
                        }
                    }
                });
            }
            Back::WarpBilinear { x, taps } => {
                let x = *x;
                let c = node.cols;
                acc(g, x, &mut |buf| {
                    for (cell, tap) in taps.iter().enumerate() {
                        let grow = &gout[cell * c..(cell + 1) * c];
                        for t in 0..4 {
                            let idx = tap.idx[t];
                            let wgt = tap.w[t];
                            if idx < 0 || wgt == 0.0 {
                                continue;
                            }
                            let dst = &mut buf[idx as usize * c..(idx as usize + 1) * c];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += wgt * gv;
                            }
                        }
                    }
                });
            }
            Back::DeformAgg {
                maps,
                coords,
                weights,
                geom,
            } => {
                self.deform_backward(maps, *coords, *weights, *geom, gout, g);
            }
            Back::CrossEntropyRows {
                logits,
                target,
                probs,
            } => {
                let logits = *logits;
                let c = self.nodes[logits].data.len() / target.len();
                let n = target.len();
                let k = gout[0] / n as f64;
                acc(g, logits, &mut |buf| {
                    for r in 0..n {
                        let prow = &probs[r * c..(r + 1) * c];
                        let dst = &mut buf[r * c..(r + 1) * c];
                        for (d, &p) in dst.iter_mut().zip(prow) {
                            *d += k * p;
                        }
                        dst[target[r] as usize] -= k;
                    }
                });
            }
            Back::BceWithLogit { logit, mask } => {
                let logit = *logit;
                let n = mask.len();
                let k = gout[0] / n as f64;
                acc(g, logit, &mut |buf| {
                    for ((d, &l), &m) in buf.iter_mut().zip(&self.nodes[logit].data).zip(mask) {
                        *d += k * (sigmoid(l) - m);
                    }
                });
            }
            Back::LogSumExpSkip0(x) => {
                let x = *x;
                let n = node.rows;
                let c = self.nodes[x].data.len() / n;
                acc(g, x, &mut |buf| {
                    let xd = &self.nodes[x].data;
                    for r in 0..n {
                        let lse = node.data[r];
                        let gv = gout[r];
                        if gv == 0.0 {
                            continue;
                        }
                        let row = &xd[r * c..(r + 1) * c];
                        let dst = &mut buf[r * c..(r + 1) * c];
                        for ch in 1..c {
                            dst[ch] += gv * (row[ch] - lse).exp();
                        }
                    }
                });
            }
            Back::LovaszSoftmax { probs, grad } => {
                let k = gout[0];
                acc(g, *probs, &mut |buf| {
                    for (d, &s) in buf.iter_mut().zip(grad) {
                        *d += k * s;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        maps: &[usize],
        coords: usize,
        weights: usize,
        geom: DeformGeom,
        gout: &[f64],
        g: &mut Vec<Option<Vec<f64>>>,
    ) {
        let s = geom.samples();
        let c = geom.channels();
        let cd = &self.nodes[coords].data;
        let wd = &self.nodes[weights].data;
        // Pre-create needed gradient buffers so the loop can write directly.
        let maps_active: Vec<bool> = maps.iter().map(|&m| self.nodes[m].active).collect();
        let coords_active = self.nodes[coords].active;
        let weights_active = self.nodes[weights].active;
        for (&m, &act) in maps.iter().zip(&maps_active) {
            if act && g[m].is_none() {
                g[m] = Some(zeros(self.nodes[m].data.len()));
            }
        }
        if coords_active && g[coords].is_none() {
            g[coords] = Some(zeros(cd.len()));
        }
        if weights_active && g[weights].is_none() {
            g[weights] = Some(zeros(wd.len()));
        }
        for q in 0..geom.n {
            let crow = &cd[q * s * 2..(q + 1) * s * 2];
            let wrow = &wd[q * s..(q + 1) * s];
            let grow = &gout[q * c..(q + 1) * c];
            for head in 0..geom.heads {
                let gslice = &grow[head * geom.dh..(head + 1) * geom.dh];
                let ch_start = head * geom.dh;
                for mj in 0..geom.maps {
                    let map_node = maps[mj];
                    for k in 0..geom.points {
                        let si = (head * geom.maps + mj) * geom.points + k;
                        let a = wrow[si];
                        let sx = crow[si * 2];
                        let sy = crow[si * 2 + 1];
                        let taps = bilinear_taps(geom.map_h, geom.map_w, sx, sy);
                        // One fused pass: per-tap value dots feed both the
                        // weight and coordinate gradients; the map scatter
                        // reuses the same tap set.
                        let mut tap_dot = [0.0f64; 4];
                        if weights_active || coords_active {
                            let md = &self.nodes[map_node].data;
                            for (t, tap) in taps.iter().enumerate() {
                                if tap.0 >= 0 {
                                    let base = tap.0 as usize * c + ch_start;
                                    tap_dot[t] = dot(gslice, &md[base..base + geom.dh]);
                                }
                            }
                            if weights_active {
                                let total: f64 = taps
                                    .iter()
                                    .zip(&tap_dot)
                                    .map(|(tap, dv)| tap.1 * dv)
                                    .sum();
                                g[weights].as_mut().unwrap()[q * s + si] += total;
                            }
                            if coords_active && a != 0.0 {
                                let fx = sx - sx.floor();
                                let fy = sy - sy.floor();
                                // Taps are ordered (x0,y0),(x1,y0),(x0,y1),(x1,y1).
                                let ddx = (tap_dot[1] - tap_dot[0]) * (1.0 - fy)
                                    + (tap_dot[3] - tap_dot[2]) * fy;
                                let ddy = (tap_dot[2] - tap_dot[0]) * (1.0 - fx)
                                    + (tap_dot[3] - tap_dot[1]) * fx;
                                let buf = g[coords].as_mut().unwrap();
                                buf[q * s * 2 + si * 2] += a * ddx;
                                buf[q * s * 2 + si * 2 + 1] += a * ddy;
                            }
                        }
                        if maps_active[mj] && a != 0.0 {
                            let buf = g[map_node].as_mut().unwrap();
                            for tap in taps.iter() {
                                if tap.0 >= 0 {
                                    let base = tap.0 as usize * c + ch_start;
                                    axpy(&mut buf[base..base + geom.dh], a * tap.1, gslice);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Four (index, weight) taps of a bilinear sample at (x, y); index -1 marks
/// out-of-window taps.
#[inline]
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(i64, f64); 4] {
    // Non-finite or far-out-of-window positions sample nothing; the zero
    // fill keeps downstream math well-defined so divergence surfaces at
    // the loss check instead of here.
    if !x.is_finite() || !y.is_finite() || x.abs() > 1e9 || y.abs() > 1e9 {
        return [(-1i64, 0.0f64); 4];
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let mut taps = [(-1i64, 0.0f64); 4];
    let combos = [
        (x0i, y0i, (1.0 - fx) * (1.0 - fy)),
        (x0i + 1, y0i, fx * (1.0 - fy)),
        (x0i, y0i + 1, (1.0 - fx) * fy),
        (x0i + 1, y0i + 1, fx * fy),
    ];
    for (t, (cx, cy, wgt)) in taps.iter_mut().zip(combos) {
        if cx >= 0 && cx < w as i64 && cy >= 0 && cy < h as i64 {
            *t = (cy * w as i64 + cx, wgt);
        }
    }
    taps
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn bilinear_fwd(
    map: &[f64],
    h: usize,
    w: usize,
    stride: usize,
    ch_start: usize,
    dh: usize,
    x: f64,
    y: f64,
    a: f64,
    out: &mut [f64],
) {
    let taps = bilinear_taps(h, w, x, y);
    // Invalid taps redirect to base 0 with weight 0 so the gather stays
    // branch-free.
    let mut bases = [0usize; 4];
    let mut wts = [0.0f64; 4];
    for (t, tap) in taps.iter().enumerate() {
        if tap.0 >= 0 {
            bases[t] = tap.0 as usize * stride + ch_start;
            wts[t] = tap.1;
        } else {
            bases[t] = ch_start;
        }
    }
    super::kernels::gather4(out, a, map, bases, wts, dh);
}

