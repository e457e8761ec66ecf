//! Multi-channel deviation loss and its derivatives.
//!
//! Per channel `j` the deviation is the z-score `dev_j = |s_j − μ_j| / σ_j`
//! against a Gaussian reference; the 2-norm of the per-channel vector is the
//! Mahalanobis distance under a diagonal covariance. The sample loss is
//!
//! ```text
//! L = (1/r) Σ_j [ (1−y)·dev_j + y·max(0, a − dev_j) ]
//! ```
//!
//! With `signed = true` the anomaly branch uses the signed z-score,
//! `max(0, a − z_j)`, so anomalies are pushed to the positive side only.
//!
//! Gradients are exact reverse-mode passes over the model; Hessian-vector
//! products run the same reverse pass over dual numbers (forward-over-reverse).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{invalid, Error, Result};
use crate::model::{
    extractor_backward, extractor_forward, head_backward, head_forward, Arch, Head, ModelState,
    Segment,
};
use crate::scalar::{lift, seed, Dual, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub count: usize,
    pub source_sigma: f64,
}

impl PriorStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Exact `N(0, 1)` reference, handy for closed-form fixtures.
    pub fn standard(r: usize) -> Self {
        Self {
            mu: vec![0.0; r],
            sigma: vec![1.0; r],
            count: 0,
            source_sigma: 1.0,
        }
    }
}

/// Draw `l` reference scores per channel from `N(0, σ²)` and record their
/// empirical mean and standard deviation.
pub fn prior_stats(r: usize, l: usize, sigma: f64, seed: u64) -> Result<PriorStats> {
    if r == 0 {
        return Err(invalid("prior needs at least one channel"));
    }
    if l < 100 {
        return Err(invalid(format!("prior needs at least 100 samples, got {l}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("prior sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).unwrap();
    let mut mu = Vec::with_capacity(r);
    let mut sd = Vec::with_capacity(r);
    for _ in 0..r {
        let draws: Vec<f64> = (0..l).map(|_| dist.sample(&mut rng)).collect();
        let m = draws.iter().sum::<f64>() / l as f64;
        let var = draws.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (l - 1) as f64;
        mu.push(m);
        sd.push(var.sqrt());
    }
    Ok(PriorStats {
        mu,
        sigma: sd,
        count: l,
        source_sigma: sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub prior: PriorStats,
    #[serde(default)]
    pub signed: bool,
}

impl LossConfig {
    pub fn new(margin: f64, prior: PriorStats) -> Self {
        Self {
            margin,
            prior,
            signed: false,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(invalid("margin must be positive"));
        }
        if self.prior.channels() != channels || self.prior.sigma.len() != channels {
            return Err(Error::Shape(format!(
                "prior has {} channels, model has {channels}",
                self.prior.channels()
            )));
        }
        if self.prior.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("prior sigma entries must be positive"));
        }
        Ok(())
    }
}

/// Per-channel absolute z-scores `|s_j − μ_j| / σ_j`.
pub fn deviation(scores: &[f64], prior: &PriorStats) -> Result<Vec<f64>> {
    if scores.len() != prior.channels() {
        return Err(Error::Shape(format!(
            "{} scores against a {}-channel prior",
            scores.len(),
            prior.channels()
        )));
    }
    Ok(scores
        .iter()
        .zip(prior.mu.iter().zip(&prior.sigma))
        .map(|(s, (m, sd))| (s - m).abs() / sd)
        .collect())
}

/// Loss as a function of the head scores, plus `∂L/∂s`.
///
/// The loss is piecewise linear in the scores, so `∂L/∂s` is piecewise
/// constant and carries no tangent. Kinks use subgradient 0: at `z = 0`
/// for the absolute value and at `dev = a` for the hinge.
pub(crate) fn score_loss<S: Scalar>(scores: &[S], y: u8, cfg: &LossConfig) -> (S, Vec<S>) {
    let r = scores.len();
    let inv_r = 1.0 / r as f64;
    let mut loss = S::zero();
    let mut d = Vec::with_capacity(r);
    for (j, &s) in scores.iter().enumerate() {
        let inv_sd = 1.0 / cfg.prior.sigma[j];
        let z = (s - S::cst(cfg.prior.mu[j])).scale(inv_sd);
        let zr = z.re();
        let sgn = if zr > 0.0 {
            1.0
        } else if zr < 0.0 {
            -1.0
        } else {
            0.0
        };
        let absz = z.scale(sgn);
        let dj = if y == 0 {
            loss += absz;
            sgn
        } else if cfg.signed {
            if cfg.margin - zr > 0.0 {
                loss += S::cst(cfg.margin) - z;
                -1.0
            } else {
                0.0
            }
        } else if cfg.margin - zr.abs() > 0.0 {
            loss += S::cst(cfg.margin) - absz;
            -sgn
        } else {
            0.0
        };
        d.push(S::cst(dj * inv_sd * inv_r));
    }
    (loss.scale(inv_r), d)
}

/// A per-sample loss over a parameter vector `θ`, with exact first and
/// second derivatives.
pub trait SampleLoss {
    type Sample;

    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64], z: &Self::Sample) -> f64;
    fn grad(&self, theta: &[f64], z: &Self::Sample) -> Vec<f64>;
    /// `∇²_θ L(z, θ) · v`.
    fn hvp(&self, theta: &[f64], z: &Self::Sample, v: &[f64]) -> Vec<f64>;
}

/// Deviation loss of a window through one head, differentiated over one
/// segment of the model with every other parameter held at its stored value.
pub struct WindowLoss<'a> {
    pub model: &'a ModelState,
    pub cfg: &'a LossConfig,
    pub head: Head,
    pub segment: Segment,
}

impl<'a> WindowLoss<'a> {
    pub fn new(model: &'a ModelState, cfg: &'a LossConfig, head: Head, segment: Segment) -> Self {
        Self {
            model,
            cfg,
            head,
            segment,
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        self.model.segment(self.segment).to_vec()
    }

    fn full(&self, theta: &[f64]) -> Vec<f64> {
        let mut p = self.model.params.clone();
        p[self.model.range(self.segment)].copy_from_slice(theta);
        p
    }

    fn needs_extractor(&self) -> bool {
        let r = self.model.range(self.segment);
        r.start < self.model.layout.extractor.end
    }
}

/// Loss and full-length gradient of one window through one head. The
/// extractor's reverse pass is skipped unless `extractor` is set.
pub(crate) fn window_grad<S: Scalar>(
    model: &ModelState,
    params: &[S],
    z: &SeriesWindow,
    cfg: &LossConfig,
    head: Head,
    extractor: bool,
) -> (S, Vec<S>) {
    let a = &model.arch;
    let l = &model.layout;
    let hr = model.range(Segment::head(head));
    let (phi, tape) = extractor_forward(a, &params[l.extractor.clone()], &z.values);
    let hp = &params[hr.clone()];
    let (scores, pre) = head_forward(a, hp, &phi);
    let (loss, ds) = score_loss(&scores, z.label, cfg);
    let mut g = vec![S::zero(); l.total()];
    let dphi = head_backward(a, hp, &phi, &pre, &ds, &mut g[hr]);
    if extractor {
        extractor_backward(
            a,
            &params[l.extractor.clone()],
            &z.values,
            &tape,
            &dphi,
            &mut g[l.extractor.clone()],
        );
    }
    (loss, g)
}

impl SampleLoss for WindowLoss<'_> {
    type Sample = SeriesWindow;

    fn dim(&self) -> usize {
        self.model.range(self.segment).len()
    }

    fn loss(&self, theta: &[f64], z: &SeriesWindow) -> f64 {
        let p = self.full(theta);
        let a = &self.model.arch;
        let (phi, _) = extractor_forward(a, &p[self.model.layout.extractor.clone()], &z.values);
        let (scores, _) = head_forward(a, &p[self.model.range(Segment::head(self.head))], &phi);
        score_loss(&scores, z.label, self.cfg).0
    }

    fn grad(&self, theta: &[f64], z: &SeriesWindow) -> Vec<f64> {
        let p = self.full(theta);
        let (_, g) = window_grad(self.model, &p, z, self.cfg, self.head, self.needs_extractor());
        g[self.model.range(self.segment)].to_vec()
    }

    fn hvp(&self, theta: &[f64], z: &SeriesWindow, v: &[f64]) -> Vec<f64> {
        let p = self.full(theta);
        let range = self.model.range(self.segment);
        if !self.needs_extractor() {
            // head-only: features are constants, lift only the head
            return head_hvp_window(self.model, &p, z, self.cfg, self.head, range, v);
        }
        let mut tangent = vec![0.0; p.len()];
        tangent[range.clone()].copy_from_slice(v);
        let pd = seed(&p, &tangent);
        let (_, g) = window_grad(self.model, &pd, z, self.cfg, self.head, true);
        g[range].iter().map(|d| d.du).collect()
    }
}

fn head_hvp_window(
    model: &ModelState,
    p: &[f64],
    z: &SeriesWindow,
    cfg: &LossConfig,
    head: Head,
    range: std::ops::Range<usize>,
    v: &[f64],
) -> Vec<f64> {
    let a = &model.arch;
    let (phi, _) = extractor_forward(a, &p[model.layout.extractor.clone()], &z.values);
    let hr = model.range(Segment::head(head));
    let mut tangent = vec![0.0; hr.len()];
    for (i, idx) in range.clone().enumerate() {
        if hr.contains(&idx) {
            tangent[idx - hr.start] = v[i];
        }
    }
    let hp = seed(&p[hr.clone()], &tangent);
    let phid = lift(&phi);
    let (scores, pre) = head_forward(a, &hp, &phid);
    let (_, ds) = score_loss(&scores, z.label, cfg);
    let mut g = vec![Dual::zero(); hr.len()];
    head_backward(a, &hp, &phid, &pre, &ds, &mut g);
    range
        .map(|idx| if hr.contains(&idx) { g[idx - hr.start].du } else { 0.0 })
        .collect()
}

/// Samples that carry an id and a binary label.
pub trait Labeled: Clone {
    fn id(&self) -> u64;
    fn label(&self) -> u8;
    fn relabeled(&self, label: u8) -> Self;
}

impl Labeled for SeriesWindow {
    fn id(&self) -> u64 {
        self.id
    }
    fn label(&self) -> u8 {
        self.label
    }
    fn relabeled(&self, label: u8) -> Self {
        self.with_label(label)
    }
}

impl Labeled for LabeledFeature {
    fn id(&self) -> u64 {
        self.id
    }
    fn label(&self) -> u8 {
        self.label
    }
    fn relabeled(&self, label: u8) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }
}

/// A feature vector with a label; the input of a head on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeature {
    pub id: u64,
    pub phi: Vec<f64>,
    pub label: u8,
}

/// Deviation loss of a labeled feature through a head; `θ` is the head's
/// parameter block.
pub struct FeatureLoss<'a> {
    pub arch: &'a Arch,
    pub cfg: &'a LossConfig,
}

impl<'a> FeatureLoss<'a> {
    pub fn new(arch: &'a Arch, cfg: &'a LossConfig) -> Self {
        Self { arch, cfg }
    }

    fn grads<S: Scalar>(&self, hp: &[S], phi: &[S], y: u8) -> (S, Vec<S>, Vec<S>) {
        let (scores, pre) = head_forward(self.arch, hp, phi);
        let (loss, ds) = score_loss(&scores, y, self.cfg);
        let mut g = vec![S::zero(); hp.len()];
        let dphi = head_backward(self.arch, hp, phi, &pre, &ds, &mut g);
        (loss, g, dphi)
    }

    /// `∇_φ L(w, θ_h)`.
    pub fn feature_grad(&self, hp: &[f64], w: &LabeledFeature) -> Vec<f64> {
        self.grads(hp, &w.phi, w.label).2
    }

    /// Mixed derivative `∇_φ ∇_θ L(w, θ_h)` as an `m × d` matrix: one dual
    /// pass per feature coordinate.
    pub fn cross(&self, hp: &[f64], w: &LabeledFeature) -> Matrix {
        let d = w.phi.len();
        let m = hp.len();
        let hpd = lift(hp);
        let mut data = vec![0.0; m * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let phid = seed(&w.phi, &e);
            let (_, g, _) = self.grads(&hpd, &phid, w.label);
            for (p, gp) in g.iter().enumerate() {
                data[p * d + j] = gp.du;
            }
            e[j] = 0.0;
        }
        Matrix { rows: m, cols: d, data }
    }

    /// `[∇_φ ∇_θ L(w, θ_h)]ᵀ s` without forming the matrix: the tangent of
    /// `∇_φ L` along parameter direction `s`.
    pub fn cross_t_mul(&self, hp: &[f64], w: &LabeledFeature, s: &[f64]) -> Vec<f64> {
        let hpd = seed(hp, s);
        let phid = lift(&w.phi);
        let (_, _, dphi) = self.grads(&hpd, &phid, w.label);
        dphi.iter().map(|d| d.du).collect()
    }
}

impl SampleLoss for FeatureLoss<'_> {
    type Sample = LabeledFeature;

    fn dim(&self) -> usize {
        self.arch.head_len()
    }

    fn loss(&self, theta: &[f64], w: &LabeledFeature) -> f64 {
        let (scores, _) = head_forward(self.arch, theta, &w.phi);
        score_loss(&scores, w.label, self.cfg).0
    }

    fn grad(&self, theta: &[f64], w: &LabeledFeature) -> Vec<f64> {
        self.grads(theta, &w.phi, w.label).1
    }

    fn hvp(&self, theta: &[f64], w: &LabeledFeature, v: &[f64]) -> Vec<f64> {
        let hp = seed(theta, v);
        let (_, g, _) = self.grads(&hp, &lift(&w.phi), w.label);
        g.iter().map(|d| d.du).collect()
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn t_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, x) in out.iter_mut().zip(row) {
                *o += x * v[r];
            }
        }
        out
    }
}

/// Mean loss over `samples`.
pub fn mean_loss<L: SampleLoss>(obj: &L, theta: &[f64], samples: &[L::Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("risk over an empty sample set"));
    }
    Ok(samples.iter().map(|z| obj.loss(theta, z)).sum::<f64>() / samples.len() as f64)
}

pub fn sum_grad<L: SampleLoss>(obj: &L, theta: &[f64], samples: &[L::Sample]) -> Vec<f64> {
    let mut g = vec![0.0; obj.dim()];
    for z in samples {
        for (a, b) in g.iter_mut().zip(obj.grad(theta, z)) {
            *a += b;
        }
    }
    g
}

/// `(H + λ_d I) v` with `H` the mean per-sample Hessian over `samples`.
pub fn mean_hvp<L: SampleLoss>(
    obj: &L,
    theta: &[f64],
    samples: &[L::Sample],
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid("Hessian over an empty sample set"));
    }
    if v.len() != obj.dim() {
        return Err(Error::Shape(format!("vector has length {}, segment has {}", v.len(), obj.dim())));
    }
    let mut out = vec![0.0; v.len()];
    for z in samples {
        for (o, h) in out.iter_mut().zip(obj.hvp(theta, z, v)) {
            *o += h;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for (o, vi) in out.iter_mut().zip(v) {
        *o = *o * inv + damping * vi;
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "Hessian-vector product is not finite; lower the learning rate or raise the damping".into(),
        ));
    }
    Ok(out)
}

pub fn sample_loss(model: &ModelState, z: &SeriesWindow, cfg: &LossConfig, head: Head) -> Result<f64> {
    model.check_window(z)?;
    let obj = WindowLoss::new(model, cfg, head, Segment::SeenPath);
    Ok(obj.loss(&obj.theta(), z))
}

/// `L(V, θ)`: mean sample loss over `samples`.
pub fn risk(model: &ModelState, samples: &[SeriesWindow], cfg: &LossConfig, head: Head) -> Result<f64> {
    for z in samples {
        model.check_window(z)?;
    }
    let obj = WindowLoss::new(model, cfg, head, Segment::SeenPath);
    mean_loss(&obj, &obj.theta(), samples)
}

/// Gradient of the sample loss with respect to one parameter segment.
pub fn grad_params(
    model: &ModelState,
    z: &SeriesWindow,
    cfg: &LossConfig,
    head: Head,
    segment: Segment,
) -> Result<Vec<f64>> {
    model.check_window(z)?;
    let obj = WindowLoss::new(model, cfg, head, segment);
    Ok(obj.grad(&obj.theta(), z))
}

/// Damped mean Hessian-vector product over `samples` for one segment.
pub fn hvp(
    model: &ModelState,
    samples: &[SeriesWindow],
    v: &[f64],
    cfg: &LossConfig,
    damping: f64,
    head: Head,
    segment: Segment,
) -> Result<Vec<f64>> {
    for z in samples {
        model.check_window(z)?;
    }
    let obj = WindowLoss::new(model, cfg, head, segment);
    mean_hvp(&obj, &obj.theta(), samples, v, damping)
}

/// Mixed derivative `∇_φ ∇_{θ_h} L(w, θ_h)` of the seen head.
pub fn grad_feat_cross(model: &ModelState, w: &LabeledFeature, cfg: &LossConfig) -> Result<Matrix> {
    if w.phi.len() != model.arch.feature_dim {
        return Err(Error::Shape(format!(
            "feature has length {}, model expects {}",
            w.phi.len(),
            model.arch.feature_dim
        )));
    }
    Ok(FeatureLoss::new(&model.arch, cfg).cross(model.head_params(Head::Seen), w))
}

/// Differential entropy (nats) of an isotropic Gaussian in `r` dimensions
/// with per-coordinate variance `var`: `(r/2)(1 + ln 2πσ²)`.
pub fn gaussian_entropy(r: usize, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(invalid(format!("variance must be positive, got {var}")));
    }
    Ok(0.5 * r as f64 * (1.0 + (2.0 * std::f64::consts::PI * var).ln()))
}
