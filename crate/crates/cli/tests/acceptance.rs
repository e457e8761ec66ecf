//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=1,4,9` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use impact::data::{make_openset_split, synth_generate, OpenSetSplit, Provenance, SeriesWindow, Setting, SplitConfig, SynthSpec};
use impact::eval::{auc, evaluate_split, spearman};
use impact::influence::{
    inverse_hvp, loo_oracle, partition_scores, perturb_direction_with, influence_from, kl_lower_bound, rank1_det, retrain, stest_with,
    InfluenceConfig, LooMode, Partition, RetrainConfig, SolveMethod,
};
use impact::model::{init_model, Arch, Head, ModelState, Segment};
use impact::objective::{gaussian_entropy, grad_params, hvp, mean_loss, sample_loss, FeatureLoss, LabeledFeature, LossConfig, PriorStats};
use impact::radg::{predicted_flip_from, predicted_risk_delta_perturb, PerturbedFeature};
use impact::trainer::{impact_train, Ablation, TrainConfig, TrainedModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- small nets

fn tiny_arch() -> Arch {
    let mut a = Arch::new(2, 8);
    a.hidden = 3;
    a.feature_dim = 3;
    a.kernel = 2;
    a.head_hidden = 3;
    a.channels = 2;
    a
}

fn tiny_loss(signed: bool) -> LossConfig {
    LossConfig {
        margin: 5.0,
        prior: PriorStats { mu: vec![0.1, -0.2], sigma: vec![0.9, 1.3], count: 5000, source_sigma: 1.0 },
        signed,
    }
}

/// Initialised model with every parameter jittered so no ReLU sits exactly
/// on its kink.
fn tiny_model(seed: u64, rng: &mut ChaCha8Rng) -> ModelState {
    let mut m = init_model(&tiny_arch(), seed).unwrap();
    for p in &mut m.params {
        *p += rng.gen_range(-0.3..0.3);
    }
    m
}

fn random_window(id: u64, label: u8, arch: &Arch, rng: &mut ChaCha8Rng) -> SeriesWindow {
    let scale = if label == 1 { 3.0 } else { 1.0 };
    SeriesWindow {
        id,
        dims: arch.dims,
        length: arch.length,
        values: (0..arch.dims * arch.length).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        label,
        class_id: None,
        provenance: Provenance::Original,
    }
}

fn fd_grad(model: &ModelState, z: &SeriesWindow, cfg: &LossConfig, head: Head, eps: f64) -> Vec<f64> {
    let mut m = model.clone();
    (0..m.params.len())
        .map(|i| {
            let p = m.params[i];
            m.params[i] = p + eps;
            let up = sample_loss(&m, z, cfg, head).unwrap();
            m.params[i] = p - eps;
            let down = sample_loss(&m, z, cfg, head).unwrap();
            m.params[i] = p;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut skipped = 0;
    while accepted < 20 {
        let model = tiny_model(rng.gen(), &mut rng);
        let label = (accepted % 2) as u8;
        let head = if accepted % 4 < 2 { Head::Seen } else { Head::Unseen };
        let cfg = tiny_loss(accepted % 3 == 0);
        let z = random_window(accepted as u64, label, &model.arch, &mut rng);
        let analytic = grad_params(&model, &z, &cfg, head, Segment::All).unwrap();
        let f1 = fd_grad(&model, &z, &cfg, head, 1e-6);
        let f2 = fd_grad(&model, &z, &cfg, head, 5e-7);
        // two step sizes disagree only when a kink lies inside the stencil
        if rel_err(&f1, &f2) > 1e-6 || norm(&f1) == 0.0 {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err(&analytic, &f1));
        accepted += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} over 20 pairs ({skipped} kink fixtures resampled), {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_fd: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    let mut accepted = 0;
    let mut skipped = 0;
    let mut n_params = 0;
    while accepted < 10 {
        let model = tiny_model(rng.gen(), &mut rng);
        let cfg = tiny_loss(false);
        let samples: Vec<SeriesWindow> = (0..4).map(|i| random_window(i, (i % 2) as u8, &model.arch, &mut rng)).collect();
        let range = model.range(Segment::SeenPath);
        n_params = range.len();
        let v: Vec<f64> = (0..range.len()).map(|_| rng.sample(StandardNormal)).collect();
        let u: Vec<f64> = (0..range.len()).map(|_| rng.sample(StandardNormal)).collect();
        let hv = hvp(&model, &samples, &v, &cfg, 0.0, Head::Seen, Segment::SeenPath).unwrap();
        let hu = hvp(&model, &samples, &u, &cfg, 0.0, Head::Seen, Segment::SeenPath).unwrap();
        let mean_grad = |m: &ModelState| -> Vec<f64> {
            let mut g = vec![0.0; range.len()];
            for z in &samples {
                for (a, b) in g.iter_mut().zip(grad_params(m, z, &cfg, Head::Seen, Segment::SeenPath).unwrap()) {
                    *a += b / samples.len() as f64;
                }
            }
            g
        };
        let fd = |eps: f64| -> Vec<f64> {
            let mut up = model.clone();
            let mut down = model.clone();
            for (k, i) in range.clone().enumerate() {
                up.params[i] += eps * v[k];
                down.params[i] -= eps * v[k];
            }
            mean_grad(&up).iter().zip(mean_grad(&down)).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        };
        let f1 = fd(1e-5);
        let f2 = fd(5e-6);
        if rel_err(&f1, &f2) > 1e-5 || norm(&hv) < 1e-8 {
            skipped += 1;
            continue;
        }
        worst_fd = worst_fd.max(rel_err(&hv, &f1));
        let (a, b) = (dot(&u, &hv), dot(&v, &hu));
        worst_sym = worst_sym.max((a - b).abs() / a.abs().max(1.0));
        accepted += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_fd < 1e-3 && worst_sym < 1e-8 && n_params <= 200 && secs < 10.0,
        format!("{n_params} params: HVP vs FD {worst_fd:.2e}, symmetry {worst_sym:.2e} ({skipped} resampled), {secs:.2}s"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut all_cg = true;
    let mut n = 0;
    for _ in 0..5 {
        let model = tiny_model(rng.gen(), &mut rng);
        let cfg = tiny_loss(false);
        let samples: Vec<SeriesWindow> = (0..6).map(|i| random_window(i, (i % 2) as u8, &model.arch, &mut rng)).collect();
        n = model.range(Segment::SeenPath).len();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = hvp(&model, &samples, &e, &cfg, 0.0, Head::Seen, Segment::SeenPath).unwrap();
            for i in 0..n {
                dense[(i, j)] = col[i];
            }
        }
        let sym = (&dense + dense.transpose()) * 0.5;
        let min_eig = sym.clone().symmetric_eigen().eigenvalues.min();
        // damping that makes the damped Hessian positive definite
        let damping = (0.1 - min_eig).max(0.01);
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let a = &sym + DMatrix::<f64>::identity(n, n) * damping;
        let exact = a.cholesky().expect("damped Hessian is positive definite").solve(&DVector::from_vec(b.clone()));
        let sol = inverse_hvp(&model, &samples, &b, &cfg, damping, 1e-10, 10 * n, Segment::SeenPath).unwrap();
        all_cg &= sol.method == SolveMethod::Cg;
        worst = worst.max(rel_err(&sol.x, exact.as_slice()));
    }
    outcome(worst < 1e-3 && all_cg && n <= 200, format!("{n} params: max relative error {worst:.2e} vs dense solve, CG used: {all_cg}"))
}

// ------------------------------------------------------------ convex head

/// Affine head on fixed features under the signed deviation loss, with the
/// prior mean placed so every sample stays on the linear side of its kink.
struct Convex {
    arch: Arch,
    cfg: LossConfig,
    train: Vec<LabeledFeature>,
    validation: Vec<LabeledFeature>,
    theta0: Vec<f64>,
    rc: RetrainConfig,
    icfg: InfluenceConfig,
}

const RIDGE: f64 = 1.0;

impl Convex {
    fn new(seed: u64, n_normal: usize, n_contam: usize, n_anom: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut arch = Arch::new(1, 8);
        arch.feature_dim = d;
        arch.head_hidden = 0;
        arch.channels = 3;
        let cfg = LossConfig {
            margin: 5.0,
            prior: PriorStats { mu: vec![-3.0; 3], sigma: vec![1.0; 3], count: 5000, source_sigma: 1.0 },
            signed: true,
        };
        let noise = Normal::new(0.0, 0.5).unwrap();
        let feature = |anomalous: bool, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|j| noise.sample(rng) + if anomalous && j < 2 { 1.5 } else { 0.0 }).collect()
        };
        let mut train = Vec::new();
        let mut id = 0;
        for _ in 0..n_normal {
            train.push(LabeledFeature { id, phi: feature(false, &mut rng), label: 0 });
            id += 1;
        }
        for _ in 0..n_contam {
            train.push(LabeledFeature { id, phi: feature(true, &mut rng), label: 0 });
            id += 1;
        }
        for _ in 0..n_anom {
            train.push(LabeledFeature { id, phi: feature(true, &mut rng), label: 1 });
            id += 1;
        }
        let mut validation = Vec::new();
        for i in 0..40 {
            let anomalous = i % 4 == 0;
            validation.push(LabeledFeature { id: 1000 + i, phi: feature(anomalous, &mut rng), label: anomalous as u8 });
        }
        let theta0 = (0..arch.head_len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Self {
            arch,
            cfg,
            train,
            validation,
            theta0,
            rc: RetrainConfig { steps: 120, step_size: 0.5, decay: 0.0, weight_decay: RIDGE },
            icfg: InfluenceConfig { damping: RIDGE, cg_tol: 1e-12, cg_max_iter: 200, hessian_cap: 512 },
        }
    }

    fn obj(&self) -> FeatureLoss<'_> {
        FeatureLoss::new(&self.arch, &self.cfg)
    }

    fn fit(&self, samples: &[LabeledFeature]) -> Vec<f64> {
        retrain(&self.obj(), &self.theta0, samples, None, &self.rc).unwrap()
    }

    fn risk(&self, theta: &[f64]) -> f64 {
        mean_loss(&self.obj(), theta, &self.validation).unwrap()
    }

    /// Influence of every training sample at the fitted parameters.
    fn influences(&self, theta: &[f64]) -> (Vec<f64>, impact::influence::STest) {
        let obj = self.obj();
        let s = stest_with(&obj, theta, &self.validation, &self.train, &self.icfg).unwrap();
        (self.train.iter().map(|z| influence_from(&obj, theta, z, &s)).collect(), s)
    }
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let c = Convex::new(4, 40, 4, 6);
    let n = c.train.len();
    let theta = c.fit(&c.train);
    let (infl, _) = c.influences(&theta);
    let predicted: Vec<f64> = infl.iter().map(|i| -i / n as f64).collect();
    let actual: Vec<f64> = c
        .train
        .iter()
        .map(|z| loo_oracle(&c.obj(), &c.theta0, &c.train, z.id, &c.validation, LooMode::Discard, &c.rc).unwrap())
        .collect();
    let rho = spearman(&predicted, &actual).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(rho >= 0.8 && n == 50 && secs < 120.0, format!("Spearman {rho:.4} over {n} samples, {secs:.2}s"))
}

fn criterion_5() -> Outcome {
    let mut lowered = 0;
    let mut sign_match = 0;
    let mut empty = 0;
    for seed in 0..20 {
        let c = Convex::new(500 + seed, 40, 4, 6);
        let n = c.train.len();
        let theta = c.fit(&c.train);
        let (infl, _) = c.influences(&theta);
        let con: Vec<usize> = (0..n).filter(|&i| c.train[i].label == 0 && infl[i] > 0.0).collect();
        let predicted = predicted_flip_from(&con.iter().map(|&i| infl[i]).collect::<Vec<_>>(), n);
        if predicted.empty {
            empty += 1;
            continue;
        }
        let mut flipped = c.train.clone();
        for &i in &con {
            flipped[i].label = 1;
        }
        let delta = c.risk(&c.fit(&flipped)) - c.risk(&theta);
        lowered += (delta < 0.0) as usize;
        sign_match += (delta.signum() == predicted.delta.signum()) as usize;
    }
    outcome(
        lowered >= 18 && sign_match >= 18,
        format!("risk lowered in {lowered}/20 seeds, predicted sign matched in {sign_match}/20 ({empty} seeds with nothing to flip)"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut bound_cases = 0;
    let mut bound_ok = 0;
    for f in 0..100 {
        let d = rng.gen_range(1..=8);
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if f % 2 == 0 {
            // lean u against v so that 1 + αλ lands in (0, 1)
            for (ui, vi) in u.iter_mut().zip(&v) {
                *ui = 0.3 * *ui - vi;
            }
        }
        let alpha = rng.gen_range(0.01..0.9);
        let (det, lambda) = rank1_det(&u, &v, alpha).unwrap();
        let vv = dot(&v, &v);
        let p = DMatrix::from_fn(d, d, |i, j| u[i] * v[j] / vv);
        let brute = (DMatrix::<f64>::identity(d, d) + p * alpha).determinant();
        worst = worst.max((det - brute).abs());
        if det > 0.0 && det < 1.0 {
            bound_cases += 1;
            let beta = -dot(&v, &u);
            let bound = kl_lower_bound(alpha, beta, vv);
            bound_ok += (det.ln().abs() >= bound - 1e-15) as usize;
            assert!((lambda * vv + beta).abs() < 1e-12);
        }
    }
    outcome(
        worst <= 1e-10 && bound_cases > 0 && bound_ok == bound_cases,
        format!("max |det − brute| {worst:.2e}; KL bound held on {bound_ok}/{bound_cases} fixtures with det in (0,1)"),
    )
}

fn criterion_7() -> Outcome {
    let alpha = 0.02;
    let mut matched = 0;
    let mut all_nonpositive = true;
    for trial in 0..20 {
        let c = Convex::new(700 + trial, 44, 0, 6);
        let n = c.train.len();
        let obj = c.obj();
        let theta = c.fit(&c.train);
        let (infl, s) = c.influences(&theta);
        let scores: Vec<(u64, f64)> = c.train.iter().zip(&infl).filter(|(z, _)| z.label == 0).map(|(z, &i)| (z.id, i)).collect();
        let parts = partition_scores(&scores, 5).unwrap();
        let cand: Vec<u64> = scores
            .iter()
            .zip(&parts.partitions)
            .filter(|(_, &p)| p == Partition::PerturbCandidate)
            .map(|(s, _)| s.0)
            .collect();
        let mut at_source = c.train.clone();
        let mut moved = c.train.clone();
        let mut norms = Vec::new();
        for (i, z) in c.train.iter().enumerate() {
            if !cand.contains(&z.id) {
                continue;
            }
            let dir = perturb_direction_with(&obj, &theta, z, &s).unwrap();
            norms.push(dir.norm_sq);
            at_source[i].label = 1;
            moved[i] = PerturbedFeature::build(z, &dir, alpha).as_labeled();
        }
        let predicted = predicted_risk_delta_perturb(&norms, alpha, n);
        all_nonpositive &= predicted.delta <= 0.0;
        let actual = c.risk(&c.fit(&moved)) - c.risk(&c.fit(&at_source));
        matched += (actual.signum() == predicted.delta.signum() && !predicted.empty) as usize;
    }
    outcome(
        all_nonpositive && matched >= 16,
        format!("predicted delta ≤ 0 in every trial: {all_nonpositive}; sign matched retraining in {matched}/20"),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for r in [1usize, 2, 4] {
        for var in [0.5, 1.0, 2.0] {
            let sd = f64::sqrt(var);
            let norm_const = 0.5 * r as f64 * (2.0 * std::f64::consts::PI * var).ln();
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let sq: f64 = (0..r).map(|_| (sd * rng.sample::<f64, _>(StandardNormal)).powi(2)).sum();
                acc += norm_const + sq / (2.0 * var);
            }
            let mc = acc / n as f64;
            let closed = gaussian_entropy(r, var).unwrap();
            worst = worst.max(((mc - closed) / closed).abs());
        }
    }
    outcome(worst < 0.02, format!("max relative gap {worst:.2e} between closed form and 1e6-sample estimate"))
}

// ---------------------------------------------------------------- pipeline

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    seed: u64,
    hard: bool,
    contamination_pct: u32,
    ablation: Option<Ablation>,
}

struct RunResult {
    auc: f64,
    recall: Option<f64>,
    mean_infl_injected: f64,
    mean_infl_normal: f64,
}

/// Pipeline runs shared between criteria, at a reduced network width so the
/// 5-seed ablation grid fits a single core.
#[derive(Default)]
struct Runs(BTreeMap<RunKey, RunResult>);

impl Runs {
    fn get(&mut self, key: RunKey) -> &RunResult {
        self.0.entry(key).or_insert_with(|| {
            let data = synth_generate(&SynthSpec { seed: key.seed, ..SynthSpec::default() }).unwrap();
            let split = make_openset_split(
                &data,
                &SplitConfig {
                    setting: if key.hard { Setting::Hard } else { Setting::General },
                    contamination_rate: key.contamination_pct as f64 / 100.0,
                    seed: key.seed,
                    ..SplitConfig::default()
                },
            )
            .unwrap();
            let cfg = TrainConfig {
                seed: key.seed,
                hidden: 16,
                feature_dim: 16,
                head_hidden: 16,
                ablations: key.ablation.into_iter().collect(),
                ..TrainConfig::default()
            };
            let tm = impact_train(&split, &cfg).unwrap();
            summarize(&tm, &split)
        })
    }

    fn mean_auc(&mut self, hard: bool, pct: u32, ablation: Option<Ablation>) -> f64 {
        let v: Vec<f64> = SEEDS.iter().map(|&seed| self.get(RunKey { seed, hard, contamination_pct: pct, ablation }).auc).collect();
        mean(&v)
    }
}

fn summarize(tm: &TrainedModel, split: &OpenSetSplit) -> RunResult {
    let report = evaluate_split(tm, split).unwrap();
    let of = |p: Provenance| -> Vec<f64> {
        tm.audit
            .entries
            .iter()
            .filter(|e| e.provenance == p && e.partition != Partition::LabeledAnomaly)
            .map(|e| e.influence)
            .collect()
    };
    RunResult {
        auc: report.auc_overall,
        recall: report.decon_recall,
        mean_infl_injected: mean(&of(Provenance::InjectedContaminant)),
        mean_infl_normal: mean(&of(Provenance::Original)),
    }
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let mut recall = Vec::new();
    let mut inj = Vec::new();
    let mut nrm = Vec::new();
    for &seed in &SEEDS {
        let r = runs.get(RunKey { seed, hard: false, contamination_pct: 2, ablation: None });
        recall.push(r.recall.unwrap_or(0.0));
        inj.push(r.mean_infl_injected);
        nrm.push(r.mean_infl_normal);
    }
    let (rc, mi, mn) = (mean(&recall), mean(&inj), mean(&nrm));
    outcome(
        rc >= 0.6 && mi > mn,
        format!("5-seed mean flip recall {rc:.3}; mean influence injected {mi:.3e} vs normal {mn:.3e}"),
    )
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let full = runs.mean_auc(false, 2, None);
    let no_flip = runs.mean_auc(false, 2, Some(Ablation::NoFlip));
    let full_hard = runs.mean_auc(true, 2, None);
    let no_unseen = runs.mean_auc(true, 2, Some(Ablation::NoUnseenHead));
    let randoms: Vec<(Ablation, f64)> = [Ablation::RandomFlip, Ablation::RandomPerturb, Ablation::RandomRef]
        .into_iter()
        .map(|a| (a, runs.mean_auc(false, 2, Some(a))))
        .collect();
    let pass = full - no_flip >= 0.02 && full_hard - no_unseen >= 0.02 && randoms.iter().all(|(_, v)| *v < full);
    let rnd: Vec<String> = randoms.iter().map(|(a, v)| format!("{a} {v:.4}")).collect();
    outcome(
        pass,
        format!(
            "general: full {full:.4} vs no_flip {no_flip:.4}; hard: full {full_hard:.4} vs no_unseen_head {no_unseen:.4}; {}",
            rnd.join(", ")
        ),
    )
}

fn criterion_11(runs: &mut Runs) -> Outcome {
    let full_drop = runs.mean_auc(false, 2, None) - runs.mean_auc(false, 10, None);
    let keep = Some(Ablation::KeepConUnflipped);
    let keep_drop = runs.mean_auc(false, 2, keep) - runs.mean_auc(false, 10, keep);
    outcome(
        full_drop < keep_drop,
        format!("AUC drop 2%→10%: full {full_drop:.4}, keep_con_unflipped {keep_drop:.4}"),
    )
}

fn criterion_12() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut exact = 0;
    for _ in 0..50 {
        let n = rng.gen_range(4..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 * 0.5).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        exact += (auc(&scores, &labels).unwrap() == wins / pairs) as usize;
    }
    outcome(exact == 50, format!("{exact}/50 fixtures equal to pair counting exactly"))
}

fn criterion_13() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_impact");
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = |root: &Path| -> Result<f64, String> {
        let t = Instant::now();
        let data = root.join("data");
        let run = root.join("run");
        let eval = root.join("eval");
        let steps: [Vec<&std::ffi::OsStr>; 3] = [
            vec!["gen-data".as_ref(), "--seed".as_ref(), "0".as_ref(), "--out".as_ref(), data.as_os_str()],
            vec!["train".as_ref(), "--seed".as_ref(), "0".as_ref(), "--data".as_ref(), data.as_os_str(), "--out".as_ref(), run.as_os_str()],
            vec!["evaluate".as_ref(), "--checkpoint".as_ref(), run.as_os_str(), "--data".as_ref(), data.as_os_str(), "--out".as_ref(), eval.as_os_str()],
        ];
        for args in steps {
            let st = Command::new(bin).args(&args).env("SOURCE_DATE_EPOCH", "0").status().map_err(|e| e.to_string())?;
            if !st.success() {
                return Err(format!("{:?} exited with {st}", args[0]));
            }
        }
        Ok(t.elapsed().as_secs_f64())
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let secs = match pipeline(&a) {
        Ok(s) => s,
        Err(e) => return outcome(false, e),
    };
    if let Err(e) = pipeline(&b) {
        return outcome(false, e);
    }
    let same = |rel: &str| std::fs::read(a.join(rel)).ok() == std::fs::read(b.join(rel)).ok();
    let files = ["data/split.json", "run/checkpoint/params.bin", "run/checkpoint/checkpoint.json", "run/report.json", "eval/eval.json"];
    let identical = files.iter().all(|f| same(f));
    outcome(secs < 300.0 && identical, format!("gen-data → train → evaluate in {secs:.1}s; repeat run identical: {identical}"))
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |s| s.contains(&n));
    let mut runs = Runs::default();
    let names = [
        "gradient fidelity",
        "HVP fidelity and symmetry",
        "inverse HVP vs dense solve",
        "influence vs leave-one-out",
        "label flipping lowers risk",
        "rank-1 determinant and KL bound",
        "perturbation risk delta",
        "entropy closed form vs Monte Carlo",
        "decontamination audit",
        "ablation ordering",
        "contamination robustness",
        "AUC vs pair counting",
        "end-to-end budget and determinism",
    ];
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = i as u32 + 1;
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let o = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(&mut runs),
            10 => criterion_10(&mut runs),
            11 => criterion_11(&mut runs),
            12 => criterion_12(),
            _ => criterion_13(),
        };
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
