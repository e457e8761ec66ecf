//! Metrics: rank AUC, seen/unseen breakdown, diagonal-Gaussian KL between
//! feature sets, decontamination precision/recall, Spearman correlation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::OpenSetSplit;
use crate::error::{invalid, Error, Result};
use crate::trainer::{score_windows, TrainedModel};

/// Midranks (1-based) of `v`; tied values share the mean of their ranks.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: the probability that a random anomaly (label 1)
/// outscores a random normal, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUC needs both normal and anomalous samples"));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of normals against seen-class anomalies and against unseen-class
/// anomalies; a family absent from the test set yields `None`.
pub fn seen_unseen_auc(
    scores: &[f64],
    labels: &[u8],
    class_ids: &[Option<u32>],
    seen: &BTreeSet<u32>,
) -> Result<(Option<f64>, Option<f64>)> {
    if scores.len() != labels.len() || scores.len() != class_ids.len() {
        return Err(Error::Shape("scores, labels and classes differ in length".into()));
    }
    let family = |want_seen: bool| -> Result<Option<f64>> {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..scores.len() {
            let keep = if labels[i] == 0 {
                true
            } else {
                match class_ids[i] {
                    Some(c) => seen.contains(&c) == want_seen,
                    None => false,
                }
            };
            if keep {
                s.push(scores[i]);
                l.push(labels[i]);
            }
        }
        if l.iter().any(|&x| x == 1) && l.iter().any(|&x| x == 0) {
            auc(&s, &l).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok((family(true)?, family(false)?))
}

struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

const VAR_FLOOR: f64 = 1e-6;

fn fit(xs: &[Vec<f64>]) -> Result<DiagGaussian> {
    let d = xs.first().map_or(0, |x| x.len());
    if d == 0 {
        return Err(invalid("empty feature set"));
    }
    if xs.len() < d + 2 {
        return Err(invalid(format!("Gaussian fit in {d} dimensions needs at least {} vectors, got {}", d + 2, xs.len())));
    }
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for x in xs {
        for j in 0..d {
            var[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    for v in &mut var {
        *v = v.max(VAR_FLOOR);
    }
    Ok(DiagGaussian { mean, var })
}

/// `KL(a ‖ b)` between diagonal Gaussians fitted to each set.
pub fn gaussian_kld(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let ga = fit(a)?;
    let gb = fit(b)?;
    if ga.mean.len() != gb.mean.len() {
        return Err(Error::Shape("feature sets differ in dimension".into()));
    }
    let mut kl = 0.0;
    for j in 0..ga.mean.len() {
        let (va, vb) = (ga.var[j], gb.var[j]);
        let dm = ga.mean[j] - gb.mean[j];
        kl += 0.5 * ((vb / va).ln() + (va + dm * dm) / vb - 1.0);
    }
    Ok(kl.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeconMetrics {
    /// `None` when nothing was flipped.
    pub precision: Option<f64>,
    /// `None` when nothing was injected.
    pub recall: Option<f64>,
    pub flipped: usize,
    pub injected: usize,
    pub hits: usize,
}

pub fn decon_metrics(flipped: &BTreeSet<u64>, injected: &BTreeSet<u64>) -> DeconMetrics {
    let hits = flipped.intersection(injected).count();
    DeconMetrics {
        precision: (!flipped.is_empty()).then(|| hits as f64 / flipped.len() as f64),
        recall: (!injected.is_empty()).then(|| hits as f64 / injected.len() as f64),
        flipped: flipped.len(),
        injected: injected.len(),
        hits,
    }
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("Spearman correlation needs two equal-length series of length ≥ 2"));
    }
    let rx = midranks(x);
    let ry = midranks(y);
    Ok(pearson(&rx, &ry))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_tag: String,
    pub seed: u64,
    pub auc_overall: f64,
    pub auc_seen: Option<f64>,
    pub auc_unseen: Option<f64>,
    pub kld_perturbed_vs_unseen: Option<f64>,
    pub kld_seen_vs_unseen: Option<f64>,
    pub decon_precision: Option<f64>,
    pub decon_recall: Option<f64>,
    pub n_test: usize,
    pub n_test_anomalies: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "run_tag,seed,auc_overall,auc_seen,auc_unseen,kld_perturbed_vs_unseen,kld_seen_vs_unseen,decon_precision,decon_recall";

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{:.6},{},{},{},{},{},{}",
            self.run_tag,
            self.seed,
            self.auc_overall,
            o(self.auc_seen),
            o(self.auc_unseen),
            o(self.kld_perturbed_vs_unseen),
            o(self.kld_seen_vs_unseen),
            o(self.decon_precision),
            o(self.decon_recall)
        )
    }
}

/// Score the test set of `split` and assemble the full report. Feature
/// diagnostics that lack enough vectors for a fit are left empty.
pub fn evaluate_split(tm: &TrainedModel, split: &OpenSetSplit) -> Result<EvalReport> {
    let scores = score_windows(tm, &split.test)?;
    let labels: Vec<u8> = split.test.iter().map(|z| z.label).collect();
    let classes: Vec<Option<u32>> = split.test.iter().map(|z| z.class_id).collect();
    let auc_overall = auc(&scores, &labels)?;
    let (auc_seen, auc_unseen) = seen_unseen_auc(&scores, &labels, &classes, &split.seen_classes)?;

    let mut seen_feats = Vec::new();
    let mut unseen_feats = Vec::new();
    for z in split.test.iter().filter(|z| z.label == 1) {
        let phi = tm.model.extract_features(z)?.0;
        match z.class_id {
            Some(c) if split.seen_classes.contains(&c) => seen_feats.push(phi),
            Some(_) => unseen_feats.push(phi),
            None => {}
        }
    }
    let kld_perturbed_vs_unseen = gaussian_kld(&tm.audit.perturbed_features, &unseen_feats).ok();
    let kld_seen_vs_unseen = gaussian_kld(&seen_feats, &unseen_feats).ok();

    let flipped: BTreeSet<u64> = tm.audit.flipped.iter().copied().collect();
    let decon = decon_metrics(&flipped, &split.injected_ids());
    Ok(EvalReport {
        run_tag: tm.config.run_tag(),
        seed: tm.config.seed,
        auc_overall,
        auc_seen,
        auc_unseen,
        kld_perturbed_vs_unseen,
        kld_seen_vs_unseen,
        decon_precision: decon.precision,
        decon_recall: decon.recall,
        n_test: labels.len(),
        n_test_anomalies: labels.iter().filter(|&&l| l == 1).count(),
    })
}
