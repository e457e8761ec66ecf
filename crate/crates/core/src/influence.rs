//! Influence of training samples on validation risk.
//!
//! `I_L(z) = −s_testᵀ ∇_θ L(z)` with `s_test = (H + λ_d I)⁻¹ Σ_{z_t∈V} ∇_θ L(z_t)`.
//! A positive value means discarding `z` would lower validation risk.
//! Everything is matrix-free: the damped Hessian only appears through
//! Hessian-vector products.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Provenance, SeriesWindow};
use crate::error::{invalid, Error, Result};
use crate::model::{Head, ModelState, Segment};
use crate::objective::{
    mean_hvp, sum_grad, FeatureLoss, LabeledFeature, Labeled, LossConfig, SampleLoss, WindowLoss,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Cg,
    /// CG met non-positive curvature (the Hessian of a ReLU net need not
    /// be PSD) and the solve was redone with MINRES.
    Minres,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solve {
    pub x: Vec<f64>,
    /// `‖A x − b‖ / ‖b‖`, recomputed with one extra operator call.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: SolveMethod,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn nan_check(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} produced a non-finite value")))
    }
}

/// Solve `A x = b` for a symmetric operator given as a closure.
///
/// Runs conjugate gradient; on non-positive curvature it restarts with
/// MINRES, which handles indefinite systems. Not converging within
/// `max_iter` is reported, not an error.
pub fn solve_symmetric<F>(mut op: F, b: &[f64], tol: f64, max_iter: usize) -> Result<Solve>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(tol > 0.0) {
        return Err(invalid("solver tolerance must be positive"));
    }
    nan_check(b, "right-hand side")?;
    let bn = norm(b);
    if bn == 0.0 {
        return Ok(Solve {
            x: vec![0.0; b.len()],
            residual: 0.0,
            iterations: 0,
            converged: true,
            method: SolveMethod::Cg,
        });
    }
    let (x, iterations, method) = match cg(&mut op, b, bn, tol, max_iter)? {
        Some((x, it)) => (x, it, SolveMethod::Cg),
        None => {
            let (x, it) = minres(&mut op, b, bn, tol, max_iter)?;
            (x, it, SolveMethod::Minres)
        }
    };
    let ax = op(&x)?;
    let r: Vec<f64> = ax.iter().zip(b).map(|(a, b)| a - b).collect();
    let residual = norm(&r) / bn;
    let converged = residual <= tol * 1.0001 || residual <= tol + 1e-12;
    if !converged {
        warn!("{method:?} stopped at residual {residual:.3e} after {iterations} iterations (tol {tol:.1e})");
    }
    Ok(Solve {
        x,
        residual,
        iterations,
        converged,
        method,
    })
}

/// `None` signals non-positive curvature.
fn cg<F>(op: &mut F, b: &[f64], bn: f64, tol: f64, max_iter: usize) -> Result<Option<(Vec<f64>, usize)>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 1..=max_iter {
        let ap = op(&p)?;
        nan_check(&ap, "conjugate gradient")?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Ok(None);
        }
        let step = rr / pap;
        axpy(&mut x, step, &p);
        axpy(&mut r, -step, &ap);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bn {
            return Ok(Some((x, it)));
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Ok(Some((x, max_iter)))
}

/// Unpreconditioned MINRES (Paige & Saunders recurrences).
fn minres<F>(op: &mut F, b: &[f64], bn: f64, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut r2 = b.to_vec();
    let mut y = b.to_vec();
    let (mut oldb, mut beta) = (0.0, bn);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, bn);
    let (mut cs, mut sn) = (-1.0, 0.0);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let v: Vec<f64> = y.iter().map(|yi| yi / beta).collect();
        y = op(&v)?;
        nan_check(&y, "MINRES")?;
        if it >= 2 {
            axpy(&mut y, -beta / oldb, &r1);
        }
        let alfa = dot(&v, &y);
        axpy(&mut y, -alfa / beta, &r2);
        r1 = std::mem::replace(&mut r2, y.clone());
        oldb = beta;
        beta = norm(&y);
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w.clone());
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) / gamma;
        }
        axpy(&mut x, phi, &w);
        if phibar <= tol * bn || beta == 0.0 {
            break;
        }
    }
    Ok((x, it))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// At most this many validation samples enter the Hessian estimate.
    pub hessian_cap: usize,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            damping: 0.01,
            cg_tol: 1e-4,
            cg_max_iter: 100,
            hessian_cap: 512,
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) {
            return Err(invalid("damping must be non-negative"));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 || self.hessian_cap == 0 {
            return Err(invalid("solver tolerance, iteration cap and Hessian cap must be positive"));
        }
        Ok(())
    }
}

/// Evenly spaced subsample of at most `cap` items, deterministic.
pub(crate) fn capped<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap].clone()).collect()
}

/// `(H + λ_d I)⁻¹ g` with `H` averaged over `hessian`.
pub fn inverse_hvp_with<L: SampleLoss>(
    obj: &L,
    theta: &[f64],
    hessian: &[L::Sample],
    b: &[f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Solve> {
    if b.len() != obj.dim() {
        return Err(Error::Shape(format!("vector has length {}, segment has {}", b.len(), obj.dim())));
    }
    solve_symmetric(|v| mean_hvp(obj, theta, hessian, v, damping), b, tol, max_iter)
}

/// Inverse damped HVP over one segment of a window model.
#[allow(clippy::too_many_arguments)]
pub fn inverse_hvp(
    model: &ModelState,
    hessian_samples: &[SeriesWindow],
    b: &[f64],
    cfg: &LossConfig,
    damping: f64,
    tol: f64,
    max_iter: usize,
    segment: Segment,
) -> Result<Solve> {
    for z in hessian_samples {
        model.check_window(z)?;
    }
    let obj = WindowLoss::new(model, cfg, Head::Seen, segment);
    inverse_hvp_with(&obj, &obj.theta(), hessian_samples, b, damping, tol, max_iter)
}

/// Cached `s_test` for one scoring pass.
#[derive(Clone, Debug, PartialEq)]
pub struct STest {
    pub vector: Vec<f64>,
    pub residual: f64,
    pub converged: bool,
    pub method: SolveMethod,
    pub damping: f64,
    pub validation_size: usize,
}

/// `s_test` for a generic objective: `(H + λ_d I)⁻¹ Σ_{grad} ∇L`, where
/// `H` averages over `hessian`.
pub fn stest_with<L: SampleLoss>(
    obj: &L,
    theta: &[f64],
    grad_set: &[L::Sample],
    hessian: &[L::Sample],
    icfg: &InfluenceConfig,
) -> Result<STest> {
    icfg.validate()?;
    if grad_set.is_empty() {
        return Err(invalid("influence needs a non-empty validation set"));
    }
    let g = sum_grad(obj, theta, grad_set);
    nan_check(&g, "validation gradient")?;
    let sol = inverse_hvp_with(obj, theta, hessian, &g, icfg.damping, icfg.cg_tol, icfg.cg_max_iter)?;
    Ok(STest {
        vector: sol.x,
        residual: sol.residual,
        converged: sol.converged,
        method: sol.method,
        damping: icfg.damping,
        validation_size: grad_set.len(),
    })
}

/// `s_test` over the seen path `(θ_φ, θ_h)`, Hessian on capped validation.
pub fn compute_stest(
    model: &ModelState,
    validation: &[SeriesWindow],
    cfg: &LossConfig,
    icfg: &InfluenceConfig,
) -> Result<STest> {
    for z in validation {
        model.check_window(z)?;
    }
    let obj = WindowLoss::new(model, cfg, Head::Seen, Segment::SeenPath);
    let hess = capped(validation, icfg.hessian_cap);
    stest_with(&obj, &obj.theta(), validation, &hess, icfg)
}

/// `−s_testᵀ ∇L(z)`.
pub fn influence_from<L: SampleLoss>(obj: &L, theta: &[f64], z: &L::Sample, stest: &STest) -> f64 {
    let g = obj.grad(theta, z);
    -dot(&stest.vector, &g)
}

/// Influence of one window; uses `cache` when given, else solves for
/// `s_test` against `validation`.
pub fn influence_score(
    model: &ModelState,
    z: &SeriesWindow,
    validation: Option<&[SeriesWindow]>,
    cfg: &LossConfig,
    icfg: &InfluenceConfig,
    cache: Option<&STest>,
) -> Result<f64> {
    model.check_window(z)?;
    let owned;
    let stest = match (cache, validation) {
        (Some(s), _) => s,
        (None, Some(v)) => {
            owned = compute_stest(model, v, cfg, icfg)?;
            &owned
        }
        (None, None) => return Err(invalid("influence needs either a cached s_test or a validation set")),
    };
    let obj = WindowLoss::new(model, cfg, Head::Seen, Segment::SeenPath);
    Ok(influence_from(&obj, &obj.theta(), z, stest))
}

/// Influence of flipping a label 0 → 1, given the discard influence.
pub fn flip_influence(i_l: f64) -> f64 {
    -2.0 * i_l
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Contaminated,
    Reference,
    Clean,
    PerturbCandidate,
    LabeledAnomaly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub id: u64,
    pub influence: f64,
    pub partition: Partition,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub entries: Vec<InfluenceEntry>,
    pub stest_residual: f64,
    pub stest_converged: bool,
    pub damping: f64,
    pub validation_size: usize,
    /// Fewer than `k` negative-influence normals were available for the
    /// reference set.
    pub short_reference: bool,
    pub short_candidates: bool,
}

impl InfluenceReport {
    pub fn ids(&self, part: Partition) -> Vec<u64> {
        self.entries.iter().filter(|e| e.partition == part).map(|e| e.id).collect()
    }

    pub fn influences(&self, part: Partition) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.partition == part)
            .map(|e| e.influence)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionOutcome {
    pub partitions: Vec<Partition>,
    pub short_reference: bool,
    pub short_candidates: bool,
}

/// Partition rule over `(id, influence)` pairs of the normal pool.
///
/// Positive → contaminated; the `k` most negative → reference; the `k`
/// largest of the remaining negatives → perturbation candidates; the rest
/// (including exact zeros) → clean. Ties go to the smaller id.
pub fn partition_scores(scores: &[(u64, f64)], k: usize) -> Result<PartitionOutcome> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut parts = vec![Partition::Clean; scores.len()];
    let mut neg: Vec<usize> = Vec::new();
    for (i, &(_, v)) in scores.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::Numerical(format!("influence of sample {} is NaN", scores[i].0)));
        }
        if v > 0.0 {
            parts[i] = Partition::Contaminated;
        } else if v < 0.0 {
            neg.push(i);
        }
    }
    neg.sort_by(|&a, &b| {
        scores[a]
            .1
            .partial_cmp(&scores[b].1)
            .unwrap()
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let n_ref = k.min(neg.len());
    for &i in &neg[..n_ref] {
        parts[i] = Partition::Reference;
    }
    let mut rest = neg[n_ref..].to_vec();
    rest.sort_by(|&a, &b| {
        scores[b]
            .1
            .partial_cmp(&scores[a].1)
            .unwrap()
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let n_per = k.min(rest.len());
    for &i in &rest[..n_per] {
        parts[i] = Partition::PerturbCandidate;
    }
    Ok(PartitionOutcome {
        partitions: parts,
        short_reference: n_ref < k,
        short_candidates: n_per < k,
    })
}

/// Score every normal-pool sample against one cached `s_test`, and tag
/// labeled anomalies.
pub fn report_from_stest(
    model: &ModelState,
    d_n: &[SeriesWindow],
    d_a: &[SeriesWindow],
    cfg: &LossConfig,
    stest: &STest,
    k: usize,
) -> Result<InfluenceReport> {
    let obj = WindowLoss::new(model, cfg, Head::Seen, Segment::SeenPath);
    let theta = obj.theta();
    let mut seen = BTreeSet::new();
    let mut scores = Vec::with_capacity(d_n.len());
    for z in d_n {
        model.check_window(z)?;
        if !seen.insert(z.id) {
            return Err(invalid(format!("sample id {} appears twice in the normal pool", z.id)));
        }
        scores.push((z.id, influence_from(&obj, &theta, z, stest)));
    }
    let outcome = partition_scores(&scores, k)?;
    if outcome.short_reference {
        warn!("only {} reference candidates with negative influence (k = {k})", scores.iter().filter(|s| s.1 < 0.0).count());
    }
    let mut entries: Vec<InfluenceEntry> = scores
        .iter()
        .zip(d_n)
        .zip(&outcome.partitions)
        .map(|((&(id, influence), z), &partition)| InfluenceEntry {
            id,
            influence,
            partition,
            provenance: z.provenance,
        })
        .collect();
    for z in d_a {
        model.check_window(z)?;
        entries.push(InfluenceEntry {
            id: z.id,
            influence: influence_from(&obj, &theta, z, stest),
            partition: Partition::LabeledAnomaly,
            provenance: z.provenance,
        });
    }
    Ok(InfluenceReport {
        entries,
        stest_residual: stest.residual,
        stest_converged: stest.converged,
        damping: stest.damping,
        validation_size: stest.validation_size,
        short_reference: outcome.short_reference,
        short_candidates: outcome.short_candidates,
    })
}

/// One `s_test` solve followed by per-sample scoring and partitioning.
#[allow(clippy::too_many_arguments)]
pub fn batch_influence(
    model: &ModelState,
    d_n: &[SeriesWindow],
    d_a: &[SeriesWindow],
    validation: &[SeriesWindow],
    cfg: &LossConfig,
    icfg: &InfluenceConfig,
    k: usize,
) -> Result<InfluenceReport> {
    let stest = compute_stest(model, validation, cfg, icfg)?;
    report_from_stest(model, d_n, d_a, cfg, &stest, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbDirection {
    pub id: u64,
    pub direction: Vec<f64>,
    pub norm_sq: f64,
}

impl PerturbDirection {
    pub fn is_degenerate(&self) -> bool {
        self.norm_sq < 1e-10
    }
}

/// Features of `windows` through the frozen extractor, with their labels.
pub fn labeled_features(model: &ModelState, windows: &[SeriesWindow]) -> Result<Vec<LabeledFeature>> {
    windows
        .iter()
        .map(|z| {
            Ok(LabeledFeature {
                id: z.id,
                phi: model.extract_features(z)?.0,
                label: z.label,
            })
        })
        .collect()
}

/// Head-segment `s_test` from validation features.
pub fn head_stest(
    model: &ModelState,
    validation: &[LabeledFeature],
    cfg: &LossConfig,
    icfg: &InfluenceConfig,
) -> Result<STest> {
    let obj = FeatureLoss::new(&model.arch, cfg);
    let hess = capped(validation, icfg.hessian_cap);
    stest_with(&obj, model.head_params(Head::Seen), validation, &hess, icfg)
}

/// `I_per(w)ᵀ = −[∇_φ ∇_{θ_h} L(w)]ᵀ s_h` with `s_h` a head-segment `s_test`.
pub fn perturb_direction_with(
    obj: &FeatureLoss,
    head_params: &[f64],
    w: &LabeledFeature,
    head_stest: &STest,
) -> Result<PerturbDirection> {
    if w.label != 0 {
        return Err(invalid(format!("perturbation source {} is not labeled normal", w.id)));
    }
    if w.phi.len() != obj.arch.feature_dim {
        return Err(Error::Shape(format!(
            "feature has length {}, model expects {}",
            w.phi.len(),
            obj.arch.feature_dim
        )));
    }
    let direction: Vec<f64> = obj
        .cross_t_mul(head_params, w, &head_stest.vector)
        .into_iter()
        .map(|v| -v)
        .collect();
    nan_check(&direction, "perturbation direction")?;
    let norm_sq = dot(&direction, &direction);
    Ok(PerturbDirection {
        id: w.id,
        direction,
        norm_sq,
    })
}

pub fn perturb_direction(
    model: &ModelState,
    w: &LabeledFeature,
    validation: &[LabeledFeature],
    cfg: &LossConfig,
    icfg: &InfluenceConfig,
) -> Result<PerturbDirection> {
    let s = head_stest(model, validation, cfg, icfg)?;
    let obj = FeatureLoss::new(&model.arch, cfg);
    perturb_direction_with(&obj, model.head_params(Head::Seen), w, &s)
}

/// Full-batch gradient descent on `(1/N) Σ c_i L(z_i, θ) + (λ/2)‖θ‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrainConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Step at iteration `t` is `step_size / (1 + decay·t)`.
    pub decay: f64,
    pub weight_decay: f64,
}

/// Retrain from `theta0`; `weights` default to 1 and `N` is always the
/// full sample count, so a zero weight is the `ε = −1/N` downweighting.
pub fn retrain<L: SampleLoss>(
    obj: &L,
    theta0: &[f64],
    samples: &[L::Sample],
    weights: Option<&[f64]>,
    rc: &RetrainConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid("retraining needs samples"));
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::Shape("one weight per sample".into()));
        }
    }
    let inv_n = 1.0 / samples.len() as f64;
    let mut theta = theta0.to_vec();
    for t in 0..rc.steps {
        let mut g: Vec<f64> = theta.iter().map(|v| rc.weight_decay * v).collect();
        for (i, z) in samples.iter().enumerate() {
            let c = weights.map_or(1.0, |w| w[i]);
            if c == 0.0 {
                continue;
            }
            axpy(&mut g, c * inv_n, &obj.grad(&theta, z));
        }
        let eta = rc.step_size / (1.0 + rc.decay * t as f64);
        axpy(&mut theta, -eta, &g);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("retraining diverged at step {t}")));
        }
    }
    Ok(theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LooMode {
    Discard,
    Flip,
}

/// Validation-risk delta from retraining with one sample discarded or
/// flipped, against a baseline retrain from the same initialisation.
pub fn loo_oracle<L>(
    obj: &L,
    theta0: &[f64],
    train: &[L::Sample],
    target_id: u64,
    validation: &[L::Sample],
    mode: LooMode,
    rc: &RetrainConfig,
) -> Result<f64>
where
    L: SampleLoss,
    L::Sample: Labeled,
{
    let pos = train
        .iter()
        .position(|z| z.id() == target_id)
        .ok_or_else(|| invalid(format!("sample {target_id} is not in the training set")))?;
    let base = retrain(obj, theta0, train, None, rc)?;
    let altered = match mode {
        LooMode::Discard => {
            let mut w = vec![1.0; train.len()];
            w[pos] = 0.0;
            retrain(obj, theta0, train, Some(&w), rc)?
        }
        LooMode::Flip => {
            let mut t = train.to_vec();
            t[pos] = t[pos].relabeled(1 - t[pos].label());
            retrain(obj, theta0, &t, None, rc)?
        }
    };
    let before = crate::objective::mean_loss(obj, &base, validation)?;
    let after = crate::objective::mean_loss(obj, &altered, validation)?;
    Ok(after - before)
}

/// `det(I + α u vᵀ/‖v‖²)` through its single nonzero eigenvalue
/// `λ = vᵀu/‖v‖²`. Returns `(det, λ)`.
pub fn rank1_det(u: &[f64], v: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if u.len() != v.len() {
        return Err(Error::Shape("rank-1 factors differ in length".into()));
    }
    let vv = dot(v, v);
    if vv == 0.0 {
        return Err(invalid("rank-1 factor v is zero"));
    }
    let lambda = dot(v, u) / vv;
    Ok((1.0 + alpha * lambda, lambda))
}

/// `αβ/‖φ‖²`, the lower bound on `|log det(I + αP)|` when the eigenvalue
/// term is at most `−β`.
pub fn kl_lower_bound(alpha: f64, beta: f64, phi_norm_sq: f64) -> f64 {
    alpha * beta / phi_norm_sq
}
