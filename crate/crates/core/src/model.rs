//! The model family `f(x) = h(φ(x))` plus an auxiliary unseen head `h'`.
//!
//! The extractor is a two-convolution dilated temporal block: a causal
//! dilated convolution into the hidden width, ReLU, a second causal dilated
//! convolution into the feature width, ReLU, then mean pooling over time.
//! Both heads share one shape: `d -> head_hidden -> ReLU -> r`, or a single
//! affine map `d -> r` when `head_hidden == 0`.
//!
//! All parameters live in one flat vector laid out as
//! `[extractor | seen head | unseen head]`; every derivative routine in the
//! crate works against contiguous ranges of that vector.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub dims: usize,
    pub length: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub kernel: usize,
    /// Dilation of the first and second convolution.
    pub dilations: [usize; 2],
    /// Hidden units of each head; 0 makes both heads affine.
    pub head_hidden: usize,
    pub channels: usize,
}

impl Arch {
    /// Default widths: 64 hidden units, 64 feature dims, 64-unit heads, 3 channels.
    pub fn new(dims: usize, length: usize) -> Self {
        Self {
            dims,
            length,
            hidden: 64,
            feature_dim: 64,
            kernel: 3,
            dilations: [1, 2],
            head_hidden: 64,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("dims", self.dims),
            ("length", self.length),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("kernel", self.kernel),
            ("dilation[0]", self.dilations[0]),
            ("dilation[1]", self.dilations[1]),
            ("channels", self.channels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(invalid(format!("architecture field `{name}` must be positive")));
            }
        }
        Ok(())
    }

    pub fn extractor_len(&self) -> usize {
        let (h, d, k, f) = (self.hidden, self.dims, self.kernel, self.feature_dim);
        h * d * k + h + f * h * k + f
    }

    pub fn head_len(&self) -> usize {
        let (f, j, r) = (self.feature_dim, self.head_hidden, self.channels);
        if j == 0 {
            r * f + r
        } else {
            j * f + j + r * j + r
        }
    }

    pub fn layout(&self) -> Layout {
        let e = self.extractor_len();
        let h = self.head_len();
        Layout {
            extractor: 0..e,
            seen: e..e + h,
            unseen: e + h..e + 2 * h,
        }
    }
}

/// Segment offsets of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub extractor: Range<usize>,
    pub seen: Range<usize>,
    pub unseen: Range<usize>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.unseen.end
    }

    /// Segments must tile `0..total` in order with no gaps.
    pub fn is_partition(&self) -> bool {
        self.extractor.start == 0
            && self.extractor.end == self.seen.start
            && self.seen.end == self.unseen.start
            && self.extractor.start <= self.extractor.end
            && self.seen.start <= self.seen.end
            && self.unseen.start <= self.unseen.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Seen,
    Unseen,
}

/// A contiguous block of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Every parameter, including the unseen head.
    All,
    /// Extractor plus seen head: the parameters of `f = h ∘ φ`.
    SeenPath,
    Extractor,
    SeenHead,
    UnseenHead,
}

impl Segment {
    pub fn head(head: Head) -> Self {
        match head {
            Head::Seen => Segment::SeenHead,
            Head::Unseen => Segment::UnseenHead,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub layout: Layout,
    pub seed: u64,
}

/// He-style uniform initialisation with zero biases. The unseen head's
/// output layer starts at zero so `h'` adds nothing to the scores until
/// retraining moves it.
pub fn init_model(arch: &Arch, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let layout = arch.layout();
    let mut params = vec![0.0; layout.total()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (h, d, k, f) = (arch.hidden, arch.dims, arch.kernel, arch.feature_dim);
    let mut off = 0;
    fill_uniform(&mut rng, &mut params[off..off + h * d * k], (6.0 / (d * k) as f64).sqrt());
    off += h * d * k + h;
    fill_uniform(&mut rng, &mut params[off..off + f * h * k], (6.0 / (h * k) as f64).sqrt());

    for range in [layout.seen.clone(), layout.unseen.clone()] {
        init_head(arch, &mut rng, &mut params[range]);
    }
    let out = output_layer(arch);
    let u = layout.unseen.start;
    params[u + out.start..u + out.end].fill(0.0);

    Ok(ModelState {
        arch: arch.clone(),
        params,
        layout,
        seed,
    })
}

fn init_head(arch: &Arch, rng: &mut ChaCha8Rng, hp: &mut [f64]) {
    let (f, j, r) = (arch.feature_dim, arch.head_hidden, arch.channels);
    if j == 0 {
        fill_uniform(rng, &mut hp[..r * f], (3.0 / f as f64).sqrt());
    } else {
        fill_uniform(rng, &mut hp[..j * f], (6.0 / f as f64).sqrt());
        let o = j * f + j;
        fill_uniform(rng, &mut hp[o..o + r * j], (3.0 / j as f64).sqrt());
    }
}

/// Offsets of the output weights and biases inside one head block.
fn output_layer(arch: &Arch) -> Range<usize> {
    let (f, j) = (arch.feature_dim, arch.head_hidden);
    if j == 0 {
        0..arch.head_len()
    } else {
        j * f + j..arch.head_len()
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], bound: f64) {
    for w in out {
        *w = rng.gen_range(-bound..bound);
    }
}

impl ModelState {
    pub fn range(&self, segment: Segment) -> Range<usize> {
        let l = &self.layout;
        match segment {
            Segment::All => 0..l.total(),
            Segment::SeenPath => 0..l.seen.end,
            Segment::Extractor => l.extractor.clone(),
            Segment::SeenHead => l.seen.clone(),
            Segment::UnseenHead => l.unseen.clone(),
        }
    }

    pub fn segment(&self, segment: Segment) -> &[f64] {
        &self.params[self.range(segment)]
    }

    pub fn segment_mut(&mut self, segment: Segment) -> &mut [f64] {
        let r = self.range(segment);
        &mut self.params[r]
    }

    pub fn set_segment(&mut self, segment: Segment, values: &[f64]) -> Result<()> {
        let r = self.range(segment);
        if values.len() != r.len() {
            return Err(Error::Shape(format!(
                "segment {segment:?} has {} parameters, got {}",
                r.len(),
                values.len()
            )));
        }
        self.params[r].copy_from_slice(values);
        Ok(())
    }

    pub fn head_params(&self, head: Head) -> &[f64] {
        self.segment(Segment::head(head))
    }

    pub fn check_window(&self, x: &SeriesWindow) -> Result<()> {
        if x.dims != self.arch.dims || x.length != self.arch.length {
            return Err(Error::Shape(format!(
                "window {} is {}x{}, model expects {}x{}",
                x.id, x.dims, x.length, self.arch.dims, self.arch.length
            )));
        }
        Ok(())
    }

    pub fn extract_features(&self, x: &SeriesWindow) -> Result<FeatureVector> {
        self.check_window(x)?;
        let (phi, _) = extractor_forward(&self.arch, self.segment(Segment::Extractor), &x.values);
        Ok(FeatureVector(phi))
    }

    pub fn head_scores(&self, phi: &FeatureVector, head: Head) -> Result<Vec<f64>> {
        if phi.len() != self.arch.feature_dim {
            return Err(Error::Shape(format!(
                "feature has length {}, model expects {}",
                phi.len(),
                self.arch.feature_dim
            )));
        }
        let (scores, _) = head_forward(&self.arch, self.head_params(head), &phi.0);
        Ok(scores)
    }

    /// `f(x, θ) = h(φ(x))` through the requested head.
    pub fn scores(&self, x: &SeriesWindow, head: Head) -> Result<Vec<f64>> {
        let phi = self.extract_features(x)?;
        self.head_scores(&phi, head)
    }
}

/// Intermediate activations kept by the extractor for its reverse pass.
pub(crate) struct ExtractorTape<S> {
    pre1: Vec<S>,
    act1: Vec<S>,
    pre2: Vec<S>,
}

struct ExtractorOffsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

fn extractor_offsets(a: &Arch) -> ExtractorOffsets {
    let w1 = 0;
    let b1 = w1 + a.hidden * a.dims * a.kernel;
    let w2 = b1 + a.hidden;
    let b2 = w2 + a.feature_dim * a.hidden * a.kernel;
    ExtractorOffsets { w1, b1, w2, b2 }
}

/// Forward pass of the extractor over a row-major `dims × length` window.
pub(crate) fn extractor_forward<S: Scalar>(
    a: &Arch,
    p: &[S],
    x: &[f64],
) -> (Vec<S>, ExtractorTape<S>) {
    let o = extractor_offsets(a);
    let (len, k) = (a.length, a.kernel);
    let [dil1, dil2] = a.dilations;

    let mut pre1 = vec![S::zero(); a.hidden * len];
    for c in 0..a.hidden {
        let row = &mut pre1[c * len..(c + 1) * len];
        let b = p[o.b1 + c];
        row.iter_mut().for_each(|v| *v = b);
        for i in 0..a.dims {
            let xi = &x[i * len..(i + 1) * len];
            for kk in 0..k {
                let w = p[o.w1 + (c * a.dims + i) * k + kk];
                let shift = kk * dil1;
                if shift >= len {
                    continue;
                }
                for (v, &xv) in row[shift..].iter_mut().zip(&xi[..len - shift]) {
                    *v += w.scale(xv);
                }
            }
        }
    }
    let act1: Vec<S> = pre1.iter().map(|v| v.relu()).collect();

    let mut pre2 = vec![S::zero(); a.feature_dim * len];
    for f in 0..a.feature_dim {
        let row = &mut pre2[f * len..(f + 1) * len];
        let b = p[o.b2 + f];
        row.iter_mut().for_each(|v| *v = b);
        for c in 0..a.hidden {
            let ac = &act1[c * len..(c + 1) * len];
            for kk in 0..k {
                let w = p[o.w2 + (f * a.hidden + c) * k + kk];
                let shift = kk * dil2;
                if shift >= len {
                    continue;
                }
                for (v, &av) in row[shift..].iter_mut().zip(&ac[..len - shift]) {
                    *v += w * av;
                }
            }
        }
    }

    let inv_len = 1.0 / len as f64;
    let phi = (0..a.feature_dim)
        .map(|f| {
            let mut s = S::zero();
            for v in &pre2[f * len..(f + 1) * len] {
                s += v.relu();
            }
            s.scale(inv_len)
        })
        .collect();

    (phi, ExtractorTape { pre1, act1, pre2 })
}

/// Reverse pass of the extractor; accumulates into `g` (extractor slice).
pub(crate) fn extractor_backward<S: Scalar>(
    a: &Arch,
    p: &[S],
    x: &[f64],
    tape: &ExtractorTape<S>,
    dphi: &[S],
    g: &mut [S],
) {
    let o = extractor_offsets(a);
    let (len, k) = (a.length, a.kernel);
    let [dil1, dil2] = a.dilations;
    let inv_len = 1.0 / len as f64;

    let mut dpre2 = vec![S::zero(); a.feature_dim * len];
    for f in 0..a.feature_dim {
        let d = dphi[f].scale(inv_len);
        let mut db = S::zero();
        for t in 0..len {
            if tape.pre2[f * len + t].re() > 0.0 {
                dpre2[f * len + t] = d;
                db += d;
            }
        }
        g[o.b2 + f] += db;
    }

    let mut dact1 = vec![S::zero(); a.hidden * len];
    for f in 0..a.feature_dim {
        let dr = &dpre2[f * len..(f + 1) * len];
        for c in 0..a.hidden {
            let ac = &tape.act1[c * len..(c + 1) * len];
            let dac = &mut dact1[c * len..(c + 1) * len];
            for kk in 0..k {
                let shift = kk * dil2;
                if shift >= len {
                    continue;
                }
                let widx = o.w2 + (f * a.hidden + c) * k + kk;
                let w = p[widx];
                let mut gw = S::zero();
                for ((&dv, &av), da) in dr[shift..]
                    .iter()
                    .zip(&ac[..len - shift])
                    .zip(dac[..len - shift].iter_mut())
                {
                    gw += dv * av;
                    *da += dv * w;
                }
                g[widx] += gw;
            }
        }
    }

    for c in 0..a.hidden {
        let pre = &tape.pre1[c * len..(c + 1) * len];
        let dac = &mut dact1[c * len..(c + 1) * len];
        let mut db = S::zero();
        for (d, v) in dac.iter_mut().zip(pre) {
            if v.re() <= 0.0 {
                *d = S::zero();
            }
            db += *d;
        }
        g[o.b1 + c] += db;
        for i in 0..a.dims {
            let xi = &x[i * len..(i + 1) * len];
            for kk in 0..k {
                let shift = kk * dil1;
                if shift >= len {
                    continue;
                }
                let mut gw = S::zero();
                for (&dv, &xv) in dac[shift..].iter().zip(&xi[..len - shift]) {
                    gw += dv.scale(xv);
                }
                g[o.w1 + (c * a.dims + i) * k + kk] += gw;
            }
        }
    }
}

/// Forward pass of one head. Returns the `r` scores and the hidden
/// pre-activations (empty for affine heads).
pub(crate) fn head_forward<S: Scalar>(a: &Arch, hp: &[S], phi: &[S]) -> (Vec<S>, Vec<S>) {
    let (f, j, r) = (a.feature_dim, a.head_hidden, a.channels);
    if j == 0 {
        let bias = r * f;
        let scores = (0..r)
            .map(|q| {
                let mut s = hp[bias + q];
                for (w, x) in hp[q * f..(q + 1) * f].iter().zip(phi) {
                    s += *w * *x;
                }
                s
            })
            .collect();
        return (scores, Vec::new());
    }
    let c1 = j * f;
    let u2 = c1 + j;
    let c2 = u2 + r * j;
    let pre: Vec<S> = (0..j)
        .map(|u| {
            let mut s = hp[c1 + u];
            for (w, x) in hp[u * f..(u + 1) * f].iter().zip(phi) {
                s += *w * *x;
            }
            s
        })
        .collect();
    let scores = (0..r)
        .map(|q| {
            let mut s = hp[c2 + q];
            for (w, h) in hp[u2 + q * j..u2 + (q + 1) * j].iter().zip(&pre) {
                s += *w * h.relu();
            }
            s
        })
        .collect();
    (scores, pre)
}

/// Reverse pass of one head; accumulates parameter gradients into `g`
/// (head slice) and returns the gradient with respect to `phi`.
pub(crate) fn head_backward<S: Scalar>(
    a: &Arch,
    hp: &[S],
    phi: &[S],
    pre: &[S],
    dscores: &[S],
    g: &mut [S],
) -> Vec<S> {
    let (f, j, r) = (a.feature_dim, a.head_hidden, a.channels);
    let mut dphi = vec![S::zero(); f];
    if j == 0 {
        let bias = r * f;
        for q in 0..r {
            let ds = dscores[q];
            g[bias + q] += ds;
            for i in 0..f {
                g[q * f + i] += ds * phi[i];
                dphi[i] += ds * hp[q * f + i];
            }
        }
        return dphi;
    }
    let c1 = j * f;
    let u2 = c1 + j;
    let c2 = u2 + r * j;
    let mut dpre = vec![S::zero(); j];
    for q in 0..r {
        let ds = dscores[q];
        g[c2 + q] += ds;
        for u in 0..j {
            if pre[u].re() > 0.0 {
                g[u2 + q * j + u] += ds * pre[u];
                dpre[u] += ds * hp[u2 + q * j + u];
            }
        }
    }
    for u in 0..j {
        if pre[u].re() <= 0.0 {
            continue;
        }
        let d = dpre[u];
        g[c1 + u] += d;
        let row = u * f;
        for i in 0..f {
            g[row + i] += d * phi[i];
            dphi[i] += d * hp[row + i];
        }
    }
    dphi
}
