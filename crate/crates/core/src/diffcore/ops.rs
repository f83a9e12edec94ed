use std::cmp::Ordering;

use super::graph::{accumulate, Graph, RunningUpdate, Var};
use super::scalar::{gemm, Layout};
use super::{ParamId, Scalar, Tensor, NORM_EPS};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Per-channel layout of a normalised tensor: `outer x channels x inner`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl ChannelLayout {
    fn of(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c] => Some(Self {
                outer: n,
                channels: c,
                inner: 1,
            }),
            [b, c, h, w] => Some(Self {
                outer: b,
                channels: c,
                inner: h * w,
            }),
            _ => None,
        }
    }

    fn per_channel(&self) -> usize {
        self.outer * self.inner
    }

    /// Visits every `(channel, flat index)` in memory order. Per channel the
    /// indices come in increasing order, so reductions are deterministic.
    #[inline]
    fn each(&self, mut f: impl FnMut(usize, usize)) {
        if self.inner == 1 {
            for o in 0..self.outer {
                let base = o * self.channels;
                for c in 0..self.channels {
                    f(c, base + c);
                }
            }
            return;
        }
        let mut i = 0;
        for _ in 0..self.outer {
            for c in 0..self.channels {
                for _ in 0..self.inner {
                    f(c, i);
                    i += 1;
                }
            }
        }
    }
}

/// Statistics source for [`Graph::batch_norm`].
pub enum BnStats<'a, T> {
    /// Normalise with the batch statistics; optionally record a running
    /// update for the given `(mean, var)` buffers.
    Batch(Option<(ParamId, ParamId)>),
    /// Normalise with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

pub(crate) enum Op<T> {
    Leaf,
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        layout: ChannelLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    GlobalAvgPool(Var),
    Bilinear {
        map: Var,
        rows_per_image: usize,
        taps: Vec<[(usize, T); 4]>,
    },
    Tokens(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Option<Vec<T>>,
    },
}

/// Bilinear taps for a half-pixel-aligned lookup at normalised `(x, y)` in an
/// `h x w` grid, clamped to the border cells. Coordinates within 1e-9 of a
/// cell center snap onto it so centers are reproduced exactly.
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    fn axis(p: f64, n: usize) -> (usize, usize, f64) {
        let mut u = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        if (u - u.round()).abs() < 1e-9 {
            u = u.round();
        }
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    }
    let (j0, j1, fx) = axis(x, w);
    let (i0, i1, fy) = axis(y, h);
    [
        (i0 * w + j0, (1.0 - fx) * (1.0 - fy)),
        (i0 * w + j1, fx * (1.0 - fy)),
        (i1 * w + j0, (1.0 - fx) * fy),
        (i1 * w + j1, fx * fy),
    ]
}

fn lexicographic<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.as_f64().total_cmp(&y.as_f64());
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

fn conv_im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw_out = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn conv_col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            let p = &mut plane[ii as usize * g.w + jj as usize];
                            *p = *p + src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn val(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `y[i, j] = sum_k x[i, k] * w[j, k] + b[j]` for `x: [N, n]`, `w: [m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ensure!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            Contract,
            "linear: input {xs:?} incompatible with weight {ws:?}"
        );
        let (rows, n, m) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); rows * m];
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [m],
                Contract,
                "linear: bias {:?} does not match {m} outputs",
                self.shape(b)
            );
            let bv = self.val(b);
            for row in y.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            n,
            m,
            T::one(),
            self.val(x),
            Layout::N,
            self.val(w),
            Layout::T,
            T::one(),
            &mut y,
        );
        let t = Tensor::new(vec![rows, m], y)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `k: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        ensure!(
            xs.len() == 4 && ks.len() == 4 && xs[1] == ks[1],
            Contract,
            "conv2d: input {xs:?} incompatible with kernel {ks:?}"
        );
        ensure!(stride >= 1, Contract, "conv2d: stride must be >= 1");
        let (ph, pw) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        ensure!(
            ks[2] <= ph && ks[3] <= pw,
            Contract,
            "conv2d: kernel {}x{} larger than padded input {ph}x{pw}",
            ks[2],
            ks[3]
        );
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            out_h: (ph - ks[2]) / stride + 1,
            out_w: (pw - ks[3]) / stride + 1,
        };
        let g = &geom;
        let (ckk, hw_out) = (g.in_ch * g.kh * g.kw, g.out_h * g.out_w);
        let mut col = vec![T::zero(); ckk * hw_out];
        let mut out = vec![T::zero(); g.batch * g.out_ch * hw_out];
        let in_sz = g.in_ch * g.h * g.w;
        let (xv, kv) = (self.val(x), self.val(k));
        for b in 0..g.batch {
            conv_im2col(&xv[b * in_sz..(b + 1) * in_sz], g, &mut col);
            let dst = &mut out[b * g.out_ch * hw_out..(b + 1) * g.out_ch * hw_out];
            gemm(
                g.out_ch,
                ckk,
                hw_out,
                T::one(),
                kv,
                Layout::N,
                &col,
                Layout::N,
                T::zero(),
                dst,
            );
        }
        let t = Tensor::new(vec![g.batch, g.out_ch, g.out_h, g.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, geom }))
    }

    /// Per-channel normalisation of `[N, C]` (over `N`) or `[B, C, H, W]`
    /// (over `B, H, W`), followed by an optional affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        stats: BnStats<'_, T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let layout = ChannelLayout::of(&shape).ok_or_else(|| {
            crate::Error::Contract(format!("batch_norm: unsupported rank {shape:?}"))
        })?;
        let ch = layout.channels;
        for p in [gamma, beta].into_iter().flatten() {
            ensure!(
                self.shape(p) == [ch],
                Contract,
                "batch_norm: affine parameter {:?} does not match {ch} channels",
                self.shape(p)
            );
        }
        let m = layout.per_channel();
        let xv = self.val(x);
        let eps = T::of(NORM_EPS);
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        let batch_stats = matches!(stats, BnStats::Batch(_));
        match &stats {
            BnStats::Batch(_) => {
                ensure!(
                    m >= 2,
                    Contract,
                    "batch_norm: train mode needs at least 2 values per channel, got {m}"
                );
                let inv_m = T::one() / T::of(m as f64);
                layout.each(|c, i| mean[c] = mean[c] + xv[i]);
                for mu in &mut mean {
                    *mu = *mu * inv_m;
                }
                layout.each(|c, i| {
                    let d = xv[i] - mean[c];
                    var[c] = var[c] + d * d;
                });
                for v in &mut var {
                    *v = *v * inv_m;
                }
            }
            BnStats::Fixed { mean: rm, var: rv } => {
                ensure!(
                    rm.len() == ch && rv.len() == ch,
                    Contract,
                    "batch_norm: running stats do not match {ch} channels"
                );
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        layout.each(|c, i| xhat[i] = (xv[i] - mean[c]) * inv_std[c]);
        let mut y = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gv = gamma.map_or_else(|| vec![T::one(); ch], |g| self.val(g).to_vec());
            let bv = beta.map_or_else(|| vec![T::zero(); ch], |b| self.val(b).to_vec());
            layout.each(|c, i| y[i] = gv[c] * y[i] + bv[c]);
        }
        if let BnStats::Batch(Some((mean_id, var_id))) = stats {
            // The running variance tracks the same (biased) estimate used to
            // normalise. With few values per channel, e.g. a 2x2 feature map
            // of a single image, the unbiased estimate would make eval-mode
            // outputs drift from the train-mode ones.
            self.record_running(RunningUpdate {
                mean: mean_id,
                var: var_id,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let t = Tensor::new(shape, y)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Normalises every row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        ensure!(
            self.shape(gamma) == [k] && self.shape(beta) == [k],
            Contract,
            "layer_norm: affine parameters must have length {k}"
        );
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let eps = T::of(NORM_EPS);
        let inv_k = T::one() / T::of(k as f64);
        let rows = xv.len() / k;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let mu = row.iter().copied().sum::<T>() * inv_k;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_k;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..k {
                let h = (row[j] - mu) * is;
                xhat[r * k + j] = h;
                y[r * k + j] = gv[j] * h + bv[j];
            }
        }
        let t = Tensor::new(shape, y)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        self.push(t, Op::Relu(x))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Contract,
            "{what}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut t = self.value(a).clone();
        for (o, &v) in t.data_mut().iter_mut().zip(self.val(b)) {
            *o = *o + v;
        }
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut t = self.value(a).clone();
        for (o, &v) in t.data_mut().iter_mut().zip(self.val(b)) {
            *o = *o * v;
        }
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Concatenates two `[N, p]`, `[N, q]` matrices into `[N, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0],
            Contract,
            "concat_cols: shapes {sa:?} and {sb:?} are incompatible"
        );
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let t = Tensor::new(vec![n, p + q], out)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// `[B, C] -> [B * times, C]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x);
        ensure!(
            s.len() == 2 && times >= 1,
            Contract,
            "repeat_rows: need a matrix and times >= 1"
        );
        let (b, c) = (s[0], s[1]);
        let xv = self.val(x);
        let mut out = Vec::with_capacity(b * times * c);
        for r in 0..b {
            for _ in 0..times {
                out.extend_from_slice(&xv[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::new(vec![b * times, c], out)?;
        Ok(self.push(t, Op::RepeatRows { x, times }))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        ensure!(s.len() == 4, Contract, "global_avg_pool: need rank 4, got {s:?}");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .val(x)
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(vec![b, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// Bilinear lookup into `map: [B, C, h, w]` at normalised coordinates.
    /// `coords` holds `B * rows_per_image` points, grouped by image; the
    /// result is `[B * rows_per_image, C]`.
    pub fn bilinear_sample(&mut self, map: Var, coords: &[[f64; 2]], rows_per_image: usize) -> Result<Var> {
        let s = self.shape(map);
        ensure!(s.len() == 4, Contract, "bilinear_sample: need rank 4, got {s:?}");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        ensure!(
            rows_per_image >= 1 && coords.len() == b * rows_per_image,
            Contract,
            "bilinear_sample: {} coordinates for {b} images of {rows_per_image} points",
            coords.len()
        );
        let mut taps = Vec::with_capacity(coords.len());
        for p in coords {
            ensure!(
                (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]),
                Contract,
                "bilinear_sample: point {p:?} outside [0,1]^2"
            );
            let t = bilinear_taps(p[0], p[1], h, w);
            taps.push(t.map(|(i, wt)| (i, T::of(wt))));
        }
        let mv = self.val(map);
        let hw = h * w;
        let mut out = vec![T::zero(); coords.len() * c];
        for (r, tp) in taps.iter().enumerate() {
            let img = r / rows_per_image;
            for ch in 0..c {
                let plane = &mv[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                out[r * c + ch] = tp[0].1 * plane[tp[0].0]
                    + tp[1].1 * plane[tp[1].0]
                    + tp[2].1 * plane[tp[2].0]
                    + tp[3].1 * plane[tp[3].0];
            }
        }
        let t = Tensor::new(vec![coords.len(), c], out)?;
        Ok(self.push(
            t,
            Op::Bilinear {
                map,
                rows_per_image,
                taps,
            },
        ))
    }

    /// `[B, C, h, w] -> [B * h * w, C]`, spatial cells in row-major order.
    pub fn to_tokens(&mut self, map: Var) -> Result<Var> {
        let s = self.shape(map);
        ensure!(s.len() == 4, Contract, "to_tokens: need rank 4, got {s:?}");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mv = self.val(map);
        let mut out = vec![T::zero(); b * hw * c];
        for img in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    out[(img * hw + p) * c + ch] = mv[(img * c + ch) * hw + p];
                }
            }
        }
        let t = Tensor::new(vec![b * hw, c], out)?;
        Ok(self.push(t, Op::Tokens(map)))
    }

    /// Multi-head scaled dot-product attention on projected inputs.
    ///
    /// `q: [B * S, k]` attends over `k, v: [B * T, k]` within each of the
    /// `batch` groups. Softmax normalisers and value sums run over tokens in
    /// a canonical order, so permuting tokens leaves the output bit-identical.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        ensure!(
            qs.len() == 2 && ks.len() == 2 && ks == vs && qs[1] == ks[1],
            Contract,
            "attention: shapes {qs:?}, {ks:?}, {vs:?} are incompatible"
        );
        let dim = qs[1];
        ensure!(
            heads >= 1 && dim % heads == 0,
            Config,
            "attention: width {dim} not divisible by {heads} heads"
        );
        ensure!(
            batch >= 1 && qs[0] % batch == 0 && ks[0] % batch == 0,
            Contract,
            "attention: rows not divisible into {batch} groups"
        );
        let (s_len, t_len) = (qs[0] / batch, ks[0] / batch);
        ensure!(t_len >= 1, Contract, "attention: no tokens to attend to");
        let dh = dim / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let mut out = vec![T::zero(); qs[0] * dim];
        let mut probs = vec![T::zero(); batch * heads * s_len * t_len];
        let mut qh = vec![T::zero(); s_len * dh];
        let mut kh = vec![T::zero(); t_len * dh];
        let mut vh = vec![T::zero(); t_len * dh];
        let mut order: Vec<usize> = (0..t_len).collect();
        let mut acc = vec![T::zero(); dh];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(qv, b * s_len, s_len, dim, h * dh, dh, &mut qh);
                gather_head(kv, b * t_len, t_len, dim, h * dh, dh, &mut kh);
                gather_head(vv, b * t_len, t_len, dim, h * dh, dh, &mut vh);
                order.sort_by(|&a, &c| {
                    lexicographic(&kh[a * dh..(a + 1) * dh], &kh[c * dh..(c + 1) * dh]).then_with(
                        || lexicographic(&vh[a * dh..(a + 1) * dh], &vh[c * dh..(c + 1) * dh]),
                    )
                });
                let p = &mut probs[(b * heads + h) * s_len * t_len..][..s_len * t_len];
                gemm(s_len, dh, t_len, scale, &qh, Layout::N, &kh, Layout::T, T::zero(), p);
                for s in 0..s_len {
                    let row = &mut p[s * t_len..(s + 1) * t_len];
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                    }
                    let mut z = T::zero();
                    for &t in &order {
                        z = z + row[t];
                    }
                    let inv = T::one() / z;
                    for e in row.iter_mut() {
                        *e = *e * inv;
                    }
                    acc.fill(T::zero());
                    for &t in &order {
                        let pt = row[t];
                        for (a, &vx) in acc.iter_mut().zip(&vh[t * dh..(t + 1) * dh]) {
                            *a = *a + pt * vx;
                        }
                    }
                    let o = (b * s_len + s) * dim + h * dh;
                    out[o..o + dh].copy_from_slice(&acc);
                }
            }
        }
        let t = Tensor::new(vec![qs[0], dim], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        ensure!(
            s.len() == 2 && s[0] == labels.len(),
            Contract,
            "softmax_cross_entropy: logits {s:?} vs {} labels",
            labels.len()
        );
        let (n, k) = (s[0], s[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(crate::Error::Contract(format!(
                "softmax_cross_entropy: label {l} at row {i} outside [0, {k})"
            )));
        }
        let lv = self.val(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            loss = loss + (lz - row[labels[r]]);
            for j in 0..k {
                probs[r * k + j] = (row[j] - lz).exp();
            }
        }
        let loss = loss / T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: None })
    }

    /// `sum_i weights[i] * x[i]`, a convenient generic scalar loss.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        ensure!(
            weights.len() == self.value(x).numel(),
            Contract,
            "weighted_sum: {} weights for {} values",
            weights.len(),
            self.value(x).numel()
        );
        let s = self
            .val(x)
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: Some(weights),
            },
        ))
    }
}

fn gather_head<T: Scalar>(src: &[T], row0: usize, rows: usize, dim: usize, col0: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        let o = (row0 + r) * dim + col0;
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[o..o + dh]);
    }
}

fn scatter_head<T: Scalar>(src: &[T], row0: usize, rows: usize, dim: usize, col0: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        let o = (row0 + r) * dim + col0;
        dst[o..o + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

/// Propagates `dy`, the gradient of node `i`, into its inputs.
pub(crate) fn backward<T: Scalar>(g: &Graph<T>, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &g.nodes[i];
    let val = |v: Var| g.value(v).data();
    match &node.op {
        Op::Leaf => {}
        Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
        Op::Linear { x, w, b } => {
            let (rows, n) = (g.shape(*x)[0], g.shape(*x)[1]);
            let m = g.shape(*w)[0];
            let mut dx = vec![T::zero(); rows * n];
            gemm(rows, m, n, T::one(), dy, Layout::N, val(*w), Layout::N, T::zero(), &mut dx);
            let mut dw = vec![T::zero(); m * n];
            gemm(m, rows, n, T::one(), dy, Layout::T, val(*x), Layout::N, T::zero(), &mut dw);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
            if let Some(b) = b {
                let mut db = vec![T::zero(); m];
                for row in dy.chunks_exact(m) {
                    for (d, &r) in db.iter_mut().zip(row) {
                        *d = *d + r;
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Conv2d { x, k, geom } => {
            let g_ = geom;
            let (ckk, hw_out) = (g_.in_ch * g_.kh * g_.kw, g_.out_h * g_.out_w);
            let in_sz = g_.in_ch * g_.h * g_.w;
            let (xv, kv) = (val(*x), val(*k));
            let mut col = vec![T::zero(); ckk * hw_out];
            let mut dcol = vec![T::zero(); ckk * hw_out];
            let mut dx = vec![T::zero(); g_.batch * in_sz];
            let mut dk = vec![T::zero(); g_.out_ch * ckk];
            for b in 0..g_.batch {
                let dout = &dy[b * g_.out_ch * hw_out..(b + 1) * g_.out_ch * hw_out];
                conv_im2col(&xv[b * in_sz..(b + 1) * in_sz], g_, &mut col);
                gemm(g_.out_ch, hw_out, ckk, T::one(), dout, Layout::N, &col, Layout::T, T::one(), &mut dk);
                gemm(ckk, g_.out_ch, hw_out, T::one(), kv, Layout::T, dout, Layout::N, T::zero(), &mut dcol);
                conv_col2im(&dcol, g_, &mut dx[b * in_sz..(b + 1) * in_sz]);
            }
            accumulate(grads, *x, dx);
            accumulate(grads, *k, dk);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let ch = layout.channels;
            let m = T::of(layout.per_channel() as f64);
            let gv = gamma.map(|p| val(p));
            let mut dx = vec![T::zero(); dy.len()];
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            layout.each(|c, i| {
                dbeta[c] = dbeta[c] + dy[i];
                dgamma[c] = dgamma[c] + dy[i] * xhat[i];
            });
            let scale: Vec<T> = (0..ch)
                .map(|c| gv.map_or(T::one(), |g| g[c]) * inv_std[c])
                .collect();
            if *batch_stats {
                // dxhat = gc * dy, so its sums are gc * dbeta and gc * dgamma.
                layout.each(|c, i| {
                    dx[i] = scale[c] / m * (m * dy[i] - dbeta[c] - xhat[i] * dgamma[c]);
                });
            } else {
                layout.each(|c, i| dx[i] = scale[c] * dy[i]);
            }
            accumulate(grads, *x, dx);
            if let Some(p) = gamma {
                accumulate(grads, *p, dgamma);
            }
            if let Some(p) = beta {
                accumulate(grads, *p, dbeta);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma);
            let k = gv.len();
            let kt = T::of(k as f64);
            let mut dx = vec![T::zero(); dy.len()];
            let mut dgamma = vec![T::zero(); k];
            let mut dbeta = vec![T::zero(); k];
            let mut dxh = vec![T::zero(); k];
            for (r, &is) in inv_std.iter().enumerate() {
                let (dyr, xr) = (&dy[r * k..(r + 1) * k], &xhat[r * k..(r + 1) * k]);
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..k {
                    dgamma[j] = dgamma[j] + dyr[j] * xr[j];
                    dbeta[j] = dbeta[j] + dyr[j];
                    dxh[j] = dyr[j] * gv[j];
                    s1 = s1 + dxh[j];
                    s2 = s2 + dxh[j] * xr[j];
                }
                let c = is / kt;
                for j in 0..k {
                    dx[r * k + j] = c * (kt * dxh[j] - s1 - xr[j] * s2);
                }
            }
            accumulate(grads, *x, dx);
            accumulate(grads, *gamma, dgamma);
            accumulate(grads, *beta, dbeta);
        }
        Op::Relu(x) => {
            let out = node.value.data();
            let dx = dy
                .iter()
                .zip(out)
                .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                .collect();
            accumulate(grads, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, dy.to_vec());
            accumulate(grads, *b, dy.to_vec());
        }
        Op::Mul(a, b) => {
            let da = dy.iter().zip(val(*b)).map(|(&d, &v)| d * v).collect();
            let db = dy.iter().zip(val(*a)).map(|(&d, &v)| d * v).collect();
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::ConcatCols(a, b) => {
            let (p, q) = (g.shape(*a)[1], g.shape(*b)[1]);
            let mut da = Vec::with_capacity(dy.len() / (p + q) * p);
            let mut db = Vec::with_capacity(dy.len() / (p + q) * q);
            for row in dy.chunks_exact(p + q) {
                da.extend_from_slice(&row[..p]);
                db.extend_from_slice(&row[p..]);
            }
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::RepeatRows { x, times } => {
            let c = g.shape(*x)[1];
            let mut dx = vec![T::zero(); g.value(*x).numel()];
            for (r, row) in dy.chunks_exact(c).enumerate() {
                let dst = &mut dx[(r / times) * c..(r / times + 1) * c];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::GlobalAvgPool(x) => {
            let s = g.shape(*x);
            let hw = s[2] * s[3];
            let inv = T::one() / T::of(hw as f64);
            let mut dx = Vec::with_capacity(g.value(*x).numel());
            for &d in dy {
                dx.extend(std::iter::repeat_n(d * inv, hw));
            }
            accumulate(grads, *x, dx);
        }
        Op::Bilinear {
            map,
            rows_per_image,
            taps,
        } => {
            let s = g.shape(*map);
            let (c, hw) = (s[1], s[2] * s[3]);
            let mut dm = vec![T::zero(); g.value(*map).numel()];
            for (r, tp) in taps.iter().enumerate() {
                let img = r / rows_per_image;
                for ch in 0..c {
                    let d = dy[r * c + ch];
                    let base = (img * c + ch) * hw;
                    for &(idx, wt) in tp {
                        dm[base + idx] = dm[base + idx] + wt * d;
                    }
                }
            }
            accumulate(grads, *map, dm);
        }
        Op::Tokens(map) => {
            let s = g.shape(*map);
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut dm = vec![T::zero(); b * c * hw];
            for img in 0..b {
                for ch in 0..c {
                    for p in 0..hw {
                        dm[(img * c + ch) * hw + p] = dy[(img * hw + p) * c + ch];
                    }
                }
            }
            accumulate(grads, *map, dm);
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            heads,
            probs,
        } => {
            let dim = g.shape(*q)[1];
            let (s_len, t_len) = (g.shape(*q)[0] / batch, g.shape(*k)[0] / batch);
            let dh = dim / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            let mut qh = vec![T::zero(); s_len * dh];
            let mut kh = vec![T::zero(); t_len * dh];
            let mut vh = vec![T::zero(); t_len * dh];
            let mut doh = vec![T::zero(); s_len * dh];
            let mut dp = vec![T::zero(); s_len * t_len];
            let mut tmp_s = vec![T::zero(); s_len * dh];
            let mut tmp_t = vec![T::zero(); t_len * dh];
            for b in 0..*batch {
                for h in 0..*heads {
                    gather_head(qv, b * s_len, s_len, dim, h * dh, dh, &mut qh);
                    gather_head(kv, b * t_len, t_len, dim, h * dh, dh, &mut kh);
                    gather_head(vv, b * t_len, t_len, dim, h * dh, dh, &mut vh);
                    gather_head(dy, b * s_len, s_len, dim, h * dh, dh, &mut doh);
                    let p = &probs[(b * heads + h) * s_len * t_len..][..s_len * t_len];
                    // dV = P^T dO
                    gemm(t_len, s_len, dh, T::one(), p, Layout::T, &doh, Layout::N, T::zero(), &mut tmp_t);
                    scatter_head(&tmp_t, b * t_len, t_len, dim, h * dh, dh, &mut dv);
                    // dP = dO V^T, then through the softmax
                    gemm(s_len, dh, t_len, T::one(), &doh, Layout::N, &vh, Layout::T, T::zero(), &mut dp);
                    for s in 0..s_len {
                        let pr = &p[s * t_len..(s + 1) * t_len];
                        let dr = &mut dp[s * t_len..(s + 1) * t_len];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in dr.iter_mut().zip(pr) {
                            *d = pp * (*d - dot);
                        }
                    }
                    gemm(s_len, t_len, dh, scale, &dp, Layout::N, &kh, Layout::N, T::zero(), &mut tmp_s);
                    scatter_head(&tmp_s, b * s_len, s_len, dim, h * dh, dh, &mut dq);
                    gemm(t_len, s_len, dh, scale, &dp, Layout::T, &qh, Layout::N, T::zero(), &mut tmp_t);
                    scatter_head(&tmp_t, b * t_len, t_len, dim, h * dh, dh, &mut dk);
                }
            }
            accumulate(grads, *q, dq);
            accumulate(grads, *k, dk);
            accumulate(grads, *v, dv);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = g.shape(*logits)[1];
            let scale = dy[0] / T::of(labels.len() as f64);
            let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                dl[r * k + l] = dl[r * k + l] - scale;
            }
            accumulate(grads, *logits, dl);
        }
        Op::WeightedSum { x, weights } => {
            let dx = match weights {
                Some(w) => w.iter().map(|&wi| wi * dy[0]).collect(),
                None => vec![dy[0]; g.value(*x).numel()],
            };
            accumulate(grads, *x, dx);
        }
    }
}
