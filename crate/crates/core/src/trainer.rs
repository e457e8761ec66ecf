//! Initial deviation training, the influence-driven retraining epoch, and
//! inference scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{OpenSetSplit, Series, SeriesWindow};
use crate::error::{invalid, Error, Result};
use crate::influence::{
    capped, head_stest, influence_from, labeled_features, stest_with, InfluenceConfig,
    InfluenceEntry, Partition, PerturbDirection, STest,
};
use crate::model::{init_model, Arch, FeatureVector, Head, ModelState, Segment};
use crate::objective::{
    prior_stats, risk, window_grad, FeatureLoss, LossConfig, PriorStats, SampleLoss, WindowLoss,
};
use crate::radg::{predicted_flip_from, predicted_risk_delta_perturb, PerturbedFeature, Predicted};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop the detected contaminants from retraining.
    NoFlip,
    /// Keep the detected contaminants with their original normal label.
    KeepConUnflipped,
    NoUnseenHead,
    NoFeatureScore,
    RandomRef,
    /// Flip a random subset of the batch's normals, same size as the
    /// influence-selected one.
    RandomFlip,
    /// Gaussian directions rescaled to the influence direction's norm.
    RandomPerturb,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::NoFlip,
        Ablation::KeepConUnflipped,
        Ablation::NoUnseenHead,
        Ablation::NoFeatureScore,
        Ablation::RandomRef,
        Ablation::RandomFlip,
        Ablation::RandomPerturb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoFlip => "no_flip",
            Ablation::KeepConUnflipped => "keep_con_unflipped",
            Ablation::NoUnseenHead => "no_unseen_head",
            Ablation::NoFeatureScore => "no_feature_score",
            Ablation::RandomRef => "random_ref",
            Ablation::RandomFlip => "random_flip",
            Ablation::RandomPerturb => "random_perturb",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                invalid(format!("unknown ablation '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub epochs_initial: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub k: usize,
    pub alpha: f64,
    pub margin: f64,
    pub channels: usize,
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub hessian_cap: usize,
    pub prior_samples: usize,
    pub prior_sigma: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub kernel: usize,
    pub seed: u64,
    /// Pair every chunk of normals with an equal number of labeled
    /// anomalies drawn with replacement.
    pub balanced_batches: bool,
    pub ablations: BTreeSet<Ablation>,
    /// Recompute `s_test` before every retraining batch instead of once
    /// per epoch.
    pub refresh_per_batch: bool,
    /// Route the helpful normals of the unseen loss through both heads
    /// rather than the seen head only.
    pub both_heads: bool,
    pub zscore_combine: bool,
    pub signed_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 10,
            epochs_initial: 9,
            batch_size: 64,
            learning_rate: 3e-4,
            lambda: 1.0,
            k: 5,
            alpha: 0.02,
            margin: 5.0,
            channels: 3,
            damping: 0.01,
            cg_tol: 1e-4,
            cg_max_iter: 100,
            hessian_cap: 512,
            prior_samples: 5000,
            prior_sigma: 1.0,
            hidden: 64,
            feature_dim: 64,
            head_hidden: 64,
            kernel: 3,
            seed: 0,
            balanced_batches: true,
            ablations: BTreeSet::new(),
            refresh_per_batch: false,
            both_heads: false,
            zscore_combine: false,
            signed_dev: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_initial >= self.epochs_total {
            return Err(invalid(format!(
                "initial epochs ({}) must be fewer than total epochs ({})",
                self.epochs_initial, self.epochs_total
            )));
        }
        if self.batch_size == 0 || self.k == 0 || self.channels == 0 {
            return Err(invalid("batch size, k and channels must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.margin > 0.0) || !(self.prior_sigma > 0.0) {
            return Err(invalid("learning rate, margin and prior sigma must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return Err(invalid("lambda and alpha must be non-negative"));
        }
        if self.has(Ablation::NoFlip) && self.has(Ablation::KeepConUnflipped) {
            return Err(invalid("no_flip and keep_con_unflipped are mutually exclusive"));
        }
        self.influence().validate()
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn arch(&self, dims: usize, length: usize) -> Arch {
        Arch {
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            head_hidden: self.head_hidden,
            kernel: self.kernel,
            channels: self.channels,
            ..Arch::new(dims, length)
        }
    }

    pub fn influence(&self) -> InfluenceConfig {
        InfluenceConfig {
            damping: self.damping,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            hessian_cap: self.hessian_cap,
        }
    }

    pub fn prior(&self) -> Result<PriorStats> {
        prior_stats(self.channels, self.prior_samples, self.prior_sigma, self.seed ^ PRIOR_STREAM)
    }

    /// `impact` or `impact+<ablation>+…` in a fixed order.
    pub fn run_tag(&self) -> String {
        let mut tag = String::from("impact");
        for a in &self.ablations {
            tag.push('+');
            tag.push_str(a.name());
        }
        tag
    }
}

const PRIOR_STREAM: u64 = 0x5052_494f_5200;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const ABLATE_STREAM: u64 = 0x4142_4c54;

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} is not finite; lower the learning rate or check the input scale"
        )))
    }
}

/// Plain SGD on the summed batch gradient; `range` selects the updated slice.
fn sgd_step(params: &mut [f64], range: std::ops::Range<usize>, g: &[f64], lr: f64) -> Result<()> {
    check_finite(g, "gradient")?;
    for (p, gi) in params[range].iter_mut().zip(g) {
        *p -= lr * gi;
    }
    Ok(())
}

fn add_into(acc: &mut [f64], g: &[f64], c: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += c * b;
    }
}

/// Mini-batches over indices `0..n`, where `is_anomaly(i)` marks labeled
/// anomalies. Uniform plans shuffle everything once; balanced plans pair
/// each chunk of normals with as many anomalies drawn with replacement.
fn batches(
    n: usize,
    is_anomaly: impl Fn(usize) -> bool,
    size: usize,
    balanced: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if !balanced {
        return idx.chunks(size).map(|c| c.to_vec()).collect();
    }
    let (anom, normal): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| is_anomaly(i));
    if anom.is_empty() || normal.is_empty() {
        let all = if anom.is_empty() { normal } else { anom };
        return all.chunks(size).map(|c| c.to_vec()).collect();
    }
    let half = (size / 2).max(1);
    normal
        .chunks(half)
        .map(|c| {
            let mut b = c.to_vec();
            b.extend((0..c.len()).map(|_| *anom.choose(rng).unwrap()));
            b
        })
        .collect()
}

/// SGD on the deviation loss through the seen head for `cfg.epochs_initial`
/// epochs. The mini-batch gradient is the sum of per-sample gradients.
/// The unseen head is not touched.
pub fn train_initial(
    model: &mut ModelState,
    d: &[SeriesWindow],
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(invalid("training set is empty"));
    }
    for z in d {
        model.check_window(z)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let path = model.range(Segment::SeenPath);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs_initial);
    for epoch in 0..cfg.epochs_initial {
        let mut total = 0.0;
        for batch in batches(d.len(), |i| d[i].label == 1, cfg.batch_size, cfg.balanced_batches, &mut rng) {
            let mut g = vec![0.0; path.len()];
            for &i in &batch {
                let (l, gi) = window_grad(model, &model.params, &d[i], loss, Head::Seen, true);
                total += l;
                add_into(&mut g, &gi[path.clone()], 1.0);
            }
            if !total.is_finite() {
                return Err(Error::Numerical(format!("training loss became non-finite in epoch {epoch}")));
            }
            sgd_step(&mut model.params, path.clone(), &g, cfg.learning_rate)?;
        }
        let mean = total / d.len() as f64;
        debug!("epoch {epoch}: mean training loss {mean:.4}");
        epoch_loss.push(mean);
    }
    Ok(epoch_loss)
}

/// Per-sample outcome of the retraining epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainAudit {
    /// Every normal-pool sample with the influence and partition it was
    /// given in its batch, followed by the labeled anomalies.
    pub entries: Vec<InfluenceEntry>,
    pub flipped: Vec<u64>,
    pub reference: Vec<u64>,
    pub perturbed: Vec<u64>,
    /// Pseudo-anomaly features, in the order of `perturbed`.
    #[serde(default)]
    pub perturbed_features: Vec<Vec<f64>>,
    pub predicted_flip: Predicted,
    pub predicted_perturb: Predicted,
    pub stest_residuals: Vec<f64>,
    pub stest_unconverged: usize,
    pub degenerate_batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub m_mean: f64,
    pub m_sd: f64,
    pub f_mean: f64,
    pub f_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub validation_risk_before_retrain: f64,
    pub validation_risk_after_retrain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: ModelState,
    pub ref_feature_mean: Vec<f64>,
    pub prior: PriorStats,
    pub config: TrainConfig,
    pub audit: TrainAudit,
    pub ref_stats: ScoreStats,
    pub history: TrainHistory,
}

impl TrainedModel {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.config.margin,
            prior: self.prior.clone(),
            signed: self.config.signed_dev,
        }
    }
}

/// Run the full procedure: initial training, then the influence-driven
/// retraining epochs.
pub fn impact_train(split: &OpenSetSplit, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if split.validation.is_empty() {
        return Err(invalid("validation set is empty; influence scoring needs one"));
    }
    let training = split.training();
    let first = training
        .first()
        .ok_or_else(|| invalid("training set is empty"))?;
    let arch = cfg.arch(first.dims, first.length);
    let prior = cfg.prior()?;
    let loss = LossConfig {
        margin: cfg.margin,
        prior: prior.clone(),
        signed: cfg.signed_dev,
    };
    loss.validate(cfg.channels)?;
    let mut model = init_model(&arch, cfg.seed)?;
    let initial_loss = risk(&model, &training, &loss, Head::Seen)?;
    info!("initial training for {} epochs on {} windows", cfg.epochs_initial, training.len());
    let mut epoch_loss = train_initial(&mut model, &training, &loss, cfg)?;
    let before = risk(&model, &split.validation, &loss, Head::Seen)?;

    let mut state = RetrainState::new(split, cfg);
    for epoch in cfg.epochs_initial..cfg.epochs_total {
        info!("retraining epoch {epoch}");
        let l = retrain_epoch(&mut model, split, &loss, cfg, &mut state)?;
        epoch_loss.push(l);
    }
    let after = risk(&model, &split.validation, &loss, Head::Seen)?;

    let ref_windows: Vec<SeriesWindow> = split
        .d_n
        .iter()
        .filter(|z| state.ref_ids.contains(&z.id))
        .cloned()
        .collect();
    let basis = if ref_windows.is_empty() {
        warn!("reference set is empty; falling back to the whole normal pool for the feature centre");
        &split.d_n
    } else {
        &ref_windows
    };
    let ref_feature_mean = feature_mean(&model, basis)?;
    let mut tm = TrainedModel {
        model,
        ref_feature_mean,
        prior,
        config: cfg.clone(),
        audit: state.finish(split, training.len(), cfg),
        ref_stats: ScoreStats {
            m_mean: 0.0,
            m_sd: 1.0,
            f_mean: 0.0,
            f_sd: 1.0,
        },
        history: TrainHistory {
            initial_loss,
            epoch_loss,
            validation_risk_before_retrain: before,
            validation_risk_after_retrain: after,
        },
    };
    tm.ref_stats = score_stats(&tm, basis)?;
    Ok(tm)
}

fn feature_mean(model: &ModelState, windows: &[SeriesWindow]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.arch.feature_dim];
    for z in windows {
        add_into(&mut acc, &model.extract_features(z)?.0, 1.0);
    }
    let n = windows.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt().max(1e-12))
}

fn score_stats(tm: &TrainedModel, windows: &[SeriesWindow]) -> Result<ScoreStats> {
    let mut ms = Vec::with_capacity(windows.len());
    let mut fs = Vec::with_capacity(windows.len());
    for z in windows {
        let p = raw_parts(tm, z)?;
        ms.push(p.0);
        fs.push(p.1);
    }
    let (m_mean, m_sd) = mean_sd(&ms);
    let (f_mean, f_sd) = mean_sd(&fs);
    Ok(ScoreStats { m_mean, m_sd, f_mean, f_sd })
}

struct RetrainState {
    ref_ids: BTreeSet<u64>,
    entries: BTreeMap<u64, (f64, Partition)>,
    flipped: Vec<u64>,
    flipped_influence: Vec<f64>,
    perturbed: Vec<u64>,
    perturbed_features: Vec<Vec<f64>>,
    direction_norms: Vec<f64>,
    residuals: Vec<f64>,
    unconverged: usize,
    degenerate: usize,
    rng: ChaCha8Rng,
    shuffle: ChaCha8Rng,
}

impl RetrainState {
    fn new(_split: &OpenSetSplit, cfg: &TrainConfig) -> Self {
        Self {
            ref_ids: BTreeSet::new(),
            entries: BTreeMap::new(),
            flipped: Vec::new(),
            flipped_influence: Vec::new(),
            perturbed: Vec::new(),
            perturbed_features: Vec::new(),
            direction_norms: Vec::new(),
            residuals: Vec::new(),
            unconverged: 0,
            degenerate: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ ABLATE_STREAM),
            shuffle: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM ^ 0xff),
        }
    }

    fn note_stest(&mut self, s: &STest) {
        self.residuals.push(s.residual);
        if !s.converged {
            self.unconverged += 1;
        }
    }

    fn finish(self, split: &OpenSetSplit, n: usize, cfg: &TrainConfig) -> TrainAudit {
        let mut entries: Vec<InfluenceEntry> = split
            .d_n
            .iter()
            .map(|z| {
                let (influence, partition) = self.entries.get(&z.id).copied().unwrap_or((0.0, Partition::Clean));
                InfluenceEntry {
                    id: z.id,
                    influence,
                    partition,
                    provenance: z.provenance,
                }
            })
            .collect();
        entries.extend(split.d_a.iter().map(|z| InfluenceEntry {
            id: z.id,
            influence: 0.0,
            partition: Partition::LabeledAnomaly,
            provenance: z.provenance,
        }));
        TrainAudit {
            entries,
            predicted_flip: predicted_flip_from(&self.flipped_influence, n),
            predicted_perturb: predicted_risk_delta_perturb(&self.direction_norms, cfg.alpha, n),
            flipped: self.flipped,
            reference: self.ref_ids.into_iter().collect(),
            perturbed: self.perturbed,
            perturbed_features: self.perturbed_features,
            stest_residuals: self.residuals,
            stest_unconverged: self.unconverged,
            degenerate_batches: self.degenerate,
        }
    }
}

struct Caches {
    stest: STest,
    head: STest,
}

fn refresh(model: &ModelState, split: &OpenSetSplit, loss: &LossConfig, icfg: &InfluenceConfig) -> Result<Caches> {
    let obj = WindowLoss::new(model, loss, Head::Seen, Segment::SeenPath);
    let hess = capped(&split.validation, icfg.hessian_cap);
    let stest = stest_with(&obj, &obj.theta(), &split.validation, &hess, icfg)?;
    let feats = labeled_features(model, &split.validation)?;
    let head = head_stest(model, &feats, loss, icfg)?;
    Ok(Caches { stest, head })
}

/// Ids ordered by influence, ascending, ties by id.
fn order_ascending(items: &mut [(u64, f64, usize)]) {
    items.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
}

fn retrain_epoch(
    model: &mut ModelState,
    split: &OpenSetSplit,
    loss: &LossConfig,
    cfg: &TrainConfig,
    st: &mut RetrainState,
) -> Result<f64> {
    let icfg = cfg.influence();
    let n_normal = split.d_n.len();
    let pool: Vec<&SeriesWindow> = split.d_n.iter().chain(&split.d_a).collect();
    let mut caches = None;
    let mut total = 0.0;
    for batch in batches(pool.len(), |i| i >= n_normal, cfg.batch_size, cfg.balanced_batches, &mut st.shuffle) {
        if caches.is_none() || cfg.refresh_per_batch {
            let c = refresh(model, split, loss, &icfg)?;
            st.note_stest(&c.stest);
            st.note_stest(&c.head);
            caches = Some(c);
        }
        let c = caches.as_ref().unwrap();
        let obj = WindowLoss::new(model, loss, Head::Seen, Segment::SeenPath);
        let theta = obj.theta();

        // influence of every normal-pool member of the batch
        let mut normals: Vec<(u64, f64, usize)> = Vec::new();
        let mut anomalies: Vec<usize> = Vec::new();
        for &i in &batch {
            if i < n_normal {
                let z = pool[i];
                let v = influence_from(&obj, &theta, z, &c.stest);
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("influence of sample {} is not finite", z.id)));
                }
                normals.push((z.id, v, i));
            } else {
                anomalies.push(i);
            }
        }

        let n_pos = normals.iter().filter(|e| e.1 > 0.0).count();
        let (con, mut help): (Vec<_>, Vec<_>) = if cfg.has(Ablation::RandomFlip) {
            let mut shuffled = normals.clone();
            shuffled.shuffle(&mut st.rng);
            let picked: BTreeSet<u64> = shuffled[..n_pos].iter().map(|e| e.0).collect();
            normals.iter().partition(|e| picked.contains(&e.0))
        } else {
            normals.iter().partition(|e| e.1 > 0.0)
        };
        if help.is_empty() && !normals.is_empty() {
            st.degenerate += 1;
            warn!("every normal in a batch was flagged as contaminated");
        }

        // reference: k most negative (or k random) helpful normals
        order_ascending(&mut help);
        let negatives: Vec<(u64, f64, usize)> = help.iter().copied().filter(|e| e.1 < 0.0).collect();
        let refs: Vec<(u64, f64, usize)> = if cfg.has(Ablation::RandomRef) {
            let mut h = help.clone();
            h.shuffle(&mut st.rng);
            h.into_iter().take(cfg.k).collect()
        } else {
            negatives.iter().copied().take(cfg.k).collect()
        };
        let ref_ids: BTreeSet<u64> = refs.iter().map(|e| e.0).collect();
        // perturbation candidates: k largest of the remaining negatives
        let per: Vec<(u64, f64, usize)> = negatives
            .iter()
            .rev()
            .filter(|e| !ref_ids.contains(&e.0))
            .take(cfg.k)
            .copied()
            .collect();
        let per_ids: BTreeSet<u64> = per.iter().map(|e| e.0).collect();

        for e in &con {
            st.entries.insert(e.0, (e.1, Partition::Contaminated));
            st.flipped.push(e.0);
            st.flipped_influence.push(e.1);
        }
        for e in &help {
            let part = if ref_ids.contains(&e.0) {
                Partition::Reference
            } else if per_ids.contains(&e.0) {
                Partition::PerturbCandidate
            } else {
                Partition::Clean
            };
            st.entries.insert(e.0, (e.1, part));
        }
        st.ref_ids.extend(ref_ids.iter().copied());

        // pseudo anomalies in feature space
        let mut w_per: Vec<PerturbedFeature> = Vec::new();
        if !cfg.has(Ablation::NoUnseenHead) {
            let fobj = FeatureLoss::new(&model.arch, loss);
            let hp = model.head_params(Head::Seen).to_vec();
            for e in &per {
                let src = crate::objective::LabeledFeature {
                    id: e.0,
                    phi: model.extract_features(pool[e.2])?.0,
                    label: 0,
                };
                let mut dir = crate::influence::perturb_direction_with(&fobj, &hp, &src, &c.head)?;
                if dir.is_degenerate() {
                    continue;
                }
                if cfg.has(Ablation::RandomPerturb) {
                    dir = random_direction(&dir, &mut st.rng);
                }
                st.perturbed.push(e.0);
                st.direction_norms.push(dir.norm_sq);
                let pf = PerturbedFeature::build(&src, &dir, cfg.alpha);
                st.perturbed_features.push(pf.values.clone());
                w_per.push(pf);
            }
        }

        // one update on L_seen + λ L_unseen
        let mut g = vec![0.0; model.params.len()];
        let mut batch_loss = 0.0;
        let seen = |z: &SeriesWindow, head: Head, c: f64, g: &mut Vec<f64>| {
            let (l, gi) = window_grad(model, &model.params, z, loss, head, true);
            add_into(g, &gi, c);
            l * c
        };
        for e in &help {
            batch_loss += seen(pool[e.2], Head::Seen, 1.0, &mut g);
        }
        for &i in &anomalies {
            batch_loss += seen(pool[i], Head::Seen, 1.0, &mut g);
        }
        if !cfg.has(Ablation::NoFlip) {
            let label = if cfg.has(Ablation::KeepConUnflipped) { 0 } else { 1 };
            for e in &con {
                let z = pool[e.2].with_label(label);
                batch_loss += seen(&z, Head::Seen, 1.0, &mut g);
            }
        }
        if !cfg.has(Ablation::NoUnseenHead) && cfg.lambda > 0.0 {
            for e in help.iter().filter(|e| !per_ids.contains(&e.0)) {
                batch_loss += seen(pool[e.2], Head::Seen, cfg.lambda, &mut g);
                if cfg.both_heads {
                    batch_loss += seen(pool[e.2], Head::Unseen, cfg.lambda, &mut g);
                }
            }
            let fobj = FeatureLoss::new(&model.arch, loss);
            let ur = model.layout.unseen.clone();
            let hp = model.params[ur.clone()].to_vec();
            for w in &w_per {
                let lw = w.as_labeled();
                batch_loss += cfg.lambda * fobj.loss(&hp, &lw);
                add_into(&mut g[ur.clone()], &fobj.grad(&hp, &lw), cfg.lambda);
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Numerical("retraining loss became non-finite".into()));
        }
        total += batch_loss;
        let all = 0..model.params.len();
        sgd_step(&mut model.params, all, &g, cfg.learning_rate)?;
    }
    Ok(total / pool.len() as f64)
}

fn random_direction(dir: &PerturbDirection, rng: &mut ChaCha8Rng) -> PerturbDirection {
    let raw: Vec<f64> = (0..dir.direction.len()).map(|_| StandardNormal.sample(rng)).collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let scale = dir.norm_sq.sqrt() / n;
    let direction: Vec<f64> = raw.into_iter().map(|v| v * scale).collect();
    let norm_sq = direction.iter().map(|v| v * v).sum();
    PerturbDirection {
        id: dir.id,
        direction,
        norm_sq,
    }
}

/// Score components for one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub s_m: f64,
    pub s_f: f64,
    pub s: f64,
}

fn raw_parts(tm: &TrainedModel, x: &SeriesWindow) -> Result<(f64, f64)> {
    let phi = tm.model.extract_features(x)?;
    let seen = tm.model.head_scores(&phi, Head::Seen)?;
    let s_m = if tm.config.has(Ablation::NoUnseenHead) {
        seen.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        let unseen = tm.model.head_scores(&phi, Head::Unseen)?;
        seen.iter()
            .zip(&unseen)
            .map(|(a, b)| a + b)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    Ok((s_m, feature_deviation(&phi, &tm.ref_feature_mean)))
}

fn feature_deviation(phi: &FeatureVector, centre: &[f64]) -> f64 {
    phi.0.iter().zip(centre).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `s_m` = max over channels of the summed head scores, `s_f` = squared
/// distance of the feature to the reference centre, `s = s_m + s_f`.
pub fn score_sample(tm: &TrainedModel, x: &SeriesWindow) -> Result<ScoreParts> {
    let (s_m, s_f) = raw_parts(tm, x)?;
    let st = &tm.ref_stats;
    let s = match (tm.config.zscore_combine, tm.config.has(Ablation::NoFeatureScore)) {
        (false, false) => s_m + s_f,
        (false, true) => s_m,
        (true, false) => (s_m - st.m_mean) / st.m_sd + (s_f - st.f_mean) / st.f_sd,
        (true, true) => (s_m - st.m_mean) / st.m_sd,
    };
    Ok(ScoreParts { s_m, s_f, s })
}

pub fn score_windows(tm: &TrainedModel, xs: &[SeriesWindow]) -> Result<Vec<f64>> {
    xs.iter().map(|x| Ok(score_sample(tm, x)?.s)).collect()
}

/// Per-timestep scores: stride-1 windows, each score assigned to the
/// window's last timestep; the first `L − 1` steps take the first
/// window's score.
pub fn point_scores(tm: &TrainedModel, series: &Series) -> Result<Vec<f64>> {
    let l = tm.model.arch.length;
    if series.dims != tm.model.arch.dims {
        return Err(Error::Shape(format!(
            "series has {} dimensions, model expects {}",
            series.dims, tm.model.arch.dims
        )));
    }
    if series.len() < l {
        return Err(invalid(format!("series of length {} is shorter than the window {l}", series.len())));
    }
    let windows = series.windows(l, 1)?;
    let scores = score_windows(tm, &windows)?;
    let mut out = vec![scores[0]; l - 1];
    out.extend(scores);
    Ok(out)
}
