//! Windowed datasets: synthetic generation, CSV ingestion and open-set splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    InjectedContaminant,
}

/// One `dims × length` interval with its label. Values are row-major:
/// channel `i` occupies `values[i*length..(i+1)*length]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub id: u64,
    pub dims: usize,
    pub length: usize,
    pub values: Vec<f64>,
    pub label: u8,
    pub class_id: Option<u32>,
    pub provenance: Provenance,
}

impl SeriesWindow {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.dims * self.length {
            return Err(Error::Shape(format!(
                "window {} holds {} values, expected {}x{}",
                self.id,
                self.values.len(),
                self.dims,
                self.length
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("window {} has non-finite values", self.id)));
        }
        if self.label > 1 {
            return Err(invalid(format!("window {} has label {}", self.id, self.label)));
        }
        if self.label == 0 && self.provenance == Provenance::Original && self.class_id.is_some() {
            return Err(invalid(format!(
                "normal window {} carries an anomaly class",
                self.id
            )));
        }
        Ok(())
    }

    pub fn is_anomaly(&self) -> bool {
        self.label == 1
    }

    /// Same window with a different label; provenance and class are kept.
    pub fn with_label(&self, label: u8) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }

    /// Ground truth, ignoring the (possibly contaminated) training label.
    pub fn truly_anomalous(&self) -> bool {
        self.label == 1 || self.provenance == Provenance::InjectedContaminant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyClass {
    Spike,
    LevelShift,
    FreqShift,
    NoiseBurst,
    ShapeWarp,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; 5] = [
        AnomalyClass::Spike,
        AnomalyClass::LevelShift,
        AnomalyClass::FreqShift,
        AnomalyClass::NoiseBurst,
        AnomalyClass::ShapeWarp,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyClass::Spike => "spike",
            AnomalyClass::LevelShift => "level_shift",
            AnomalyClass::FreqShift => "freq_shift",
            AnomalyClass::NoiseBurst => "noise_burst",
            AnomalyClass::ShapeWarp => "shape_warp",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| invalid(format!("unknown anomaly class `{name}`")))
    }
}

/// Per-window sinusoid: channel `i` is
/// `amplitude · sin(2πt / (period·(1 + i/2)) + phase_i) + N(0, noise_sd²)`
/// with `phase_i ~ U(-π, π)·phase_jitter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSignal {
    pub amplitude: f64,
    pub period: f64,
    pub phase_jitter: f64,
    pub noise_sd: f64,
}

impl Default for BaseSignal {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            period: 16.0,
            phase_jitter: 1.0,
            noise_sd: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_normal: usize,
    pub n_per_class: usize,
    pub dims: usize,
    pub length: usize,
    pub anomaly_classes: Vec<AnomalyClass>,
    pub base: BaseSignal,
    /// Multiplier on every anomaly magnitude below; 1.0 is the reference.
    pub severity: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_normal: 1000,
            n_per_class: 80,
            dims: 2,
            length: 64,
            anomaly_classes: vec![
                AnomalyClass::Spike,
                AnomalyClass::LevelShift,
                AnomalyClass::FreqShift,
            ],
            base: BaseSignal::default(),
            severity: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_normal", self.n_normal),
            ("n_per_class", self.n_per_class),
            ("dims", self.dims),
            ("length", self.length),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("synth spec: `{name}` must be positive")));
            }
        }
        if self.length < 10 {
            return Err(invalid("synth spec: length must be at least 10"));
        }
        if self.anomaly_classes.is_empty() {
            return Err(invalid("synth spec: at least one anomaly class is required"));
        }
        let distinct: BTreeSet<_> = self.anomaly_classes.iter().collect();
        if distinct.len() != self.anomaly_classes.len() {
            return Err(invalid("synth spec: anomaly classes must be distinct"));
        }
        let b = &self.base;
        if !(b.amplitude > 0.0 && b.period > 0.0 && b.noise_sd >= 0.0 && b.phase_jitter >= 0.0) {
            return Err(invalid("synth spec: base signal parameters out of range"));
        }
        if !(self.severity > 0.0) {
            return Err(invalid("synth spec: severity must be positive"));
        }
        Ok(())
    }
}

/// Generate `n_normal` noisy sinusoids followed by `n_per_class` windows of
/// every requested anomaly class. Ids are assigned in generation order.
///
/// Each anomaly transforms one contiguous segment covering 10–30% of the
/// window on every channel:
/// - spike: triangular pulse of peak `±U(3,5)·A` across the segment
/// - level_shift: constant offset `±U(1,2)·A`
/// - freq_shift: sinusoid at `U(2.5,4)×` the base frequency replaces the segment
/// - noise_burst: additive Gaussian noise with sd `U(0.5,1)·A`
/// - shape_warp: the segment is squared off into `A·sign(x)`
///
/// (all magnitudes scaled by `severity`; `A` is the base amplitude).
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SeriesWindow>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.n_normal + spec.n_per_class * spec.anomaly_classes.len();
    let mut out = Vec::with_capacity(total);
    let mut id = 0u64;

    for _ in 0..spec.n_normal {
        out.push(SeriesWindow {
            id,
            dims: spec.dims,
            length: spec.length,
            values: base_window(spec, &mut rng),
            label: 0,
            class_id: None,
            provenance: Provenance::Original,
        });
        id += 1;
    }
    for &class in &spec.anomaly_classes {
        for _ in 0..spec.n_per_class {
            let mut values = base_window(spec, &mut rng);
            inject(spec, class, &mut values, &mut rng);
            out.push(SeriesWindow {
                id,
                dims: spec.dims,
                length: spec.length,
                values,
                label: 1,
                class_id: Some(class.id()),
                provenance: Provenance::Original,
            });
            id += 1;
        }
    }
    Ok(out)
}

fn channel_period(base: &BaseSignal, channel: usize) -> f64 {
    base.period * (1.0 + 0.5 * channel as f64)
}

fn base_window(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b = &spec.base;
    let noise = Normal::new(0.0, b.noise_sd.max(1e-300)).unwrap();
    let mut v = Vec::with_capacity(spec.dims * spec.length);
    for i in 0..spec.dims {
        let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI) * b.phase_jitter;
        let w = 2.0 * std::f64::consts::PI / channel_period(b, i);
        for t in 0..spec.length {
            let eps = if b.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
            v.push(b.amplitude * (w * t as f64 + phase).sin() + eps);
        }
    }
    v
}

fn inject(spec: &SynthSpec, class: AnomalyClass, values: &mut [f64], rng: &mut ChaCha8Rng) {
    let len = spec.length;
    let min_w = ((len as f64) * 0.1).ceil() as usize;
    let max_w = ((len as f64) * 0.3).ceil().max(min_w as f64) as usize;
    let width = rng.gen_range(min_w..=max_w).max(2);
    let start = rng.gen_range(0..=len - width);
    let amp = spec.base.amplitude * spec.severity;
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

    match class {
        AnomalyClass::Spike => {
            let peak = sign * rng.gen_range(3.0..5.0) * amp;
            let half = (width - 1) as f64 / 2.0;
            for i in 0..spec.dims {
                for t in 0..width {
                    let tri = 1.0 - ((t as f64 - half).abs() / (half + 1.0));
                    values[i * len + start + t] += peak * tri;
                }
            }
        }
        AnomalyClass::LevelShift => {
            let shift = sign * rng.gen_range(1.0..2.0) * amp;
            for i in 0..spec.dims {
                for t in start..start + width {
                    values[i * len + t] += shift;
                }
            }
        }
        AnomalyClass::FreqShift => {
            let factor = rng.gen_range(2.5..4.0);
            let noise = Normal::new(0.0, spec.base.noise_sd.max(1e-300)).unwrap();
            for i in 0..spec.dims {
                let w = 2.0 * std::f64::consts::PI * factor / channel_period(&spec.base, i);
                let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                for t in start..start + width {
                    let eps = if spec.base.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
                    values[i * len + t] =
                        spec.base.amplitude * (w * t as f64 + phase).sin() + eps;
                }
            }
        }
        AnomalyClass::NoiseBurst => {
            let sd = rng.gen_range(0.5..1.0) * amp;
            let noise = Normal::new(0.0, sd).unwrap();
            for i in 0..spec.dims {
                for t in start..start + width {
                    values[i * len + t] += noise.sample(rng);
                }
            }
        }
        AnomalyClass::ShapeWarp => {
            for i in 0..spec.dims {
                for t in start..start + width {
                    let v = &mut values[i * len + t];
                    *v = amp * v.signum();
                }
            }
        }
    }
}

/// A full multivariate series with per-timestep labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub dims: usize,
    /// Row-major `dims × len`.
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Windows of `length` steps starting every `stride` steps.
    pub fn windows(&self, length: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
        if length == 0 || stride == 0 {
            return Err(invalid("window length and stride must be positive"));
        }
        let n = self.len();
        if n < length {
            return Err(invalid(format!(
                "series has {n} steps, shorter than window length {length}"
            )));
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start + length <= n {
            let mut values = Vec::with_capacity(self.dims * length);
            for i in 0..self.dims {
                values.extend_from_slice(&self.values[i * n + start..i * n + start + length]);
            }
            let label = self.labels[start..start + length].iter().any(|&l| l == 1) as u8;
            out.push(SeriesWindow {
                id: out.len() as u64,
                dims: self.dims,
                length,
                values,
                label,
                class_id: (label == 1).then_some(0),
                provenance: Provenance::Original,
            });
            start += stride;
        }
        Ok(out)
    }
}

/// Read a series with header `t,dim_0,...,dim_{D-1},label`. Row numbers in
/// diagnostics count the header as row 1.
pub fn read_series_csv(path: impl AsRef<Path>, dims: usize) -> Result<Series> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    parse_series_csv(&text, dims)
}

pub fn parse_series_csv(text: &str, dims: usize) -> Result<Series> {
    if dims == 0 {
        return Err(invalid("dims must be positive"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut expected = vec!["t".to_string()];
    expected.extend((0..dims).map(|i| format!("dim_{i}")));
    expected.push("label".to_string());

    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Csv { row: 1, msg: e.to_string() })?,
        None => return Err(Error::Csv { row: 1, msg: "empty file".into() }),
    };
    let got: Vec<&str> = header.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Csv {
            row: 1,
            msg: format!("malformed header `{}`, expected `{}`", got.join(","), expected.join(",")),
        });
    }

    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); dims];
    let mut labels = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
        if rec.len() != dims + 2 {
            return Err(Error::Csv {
                row,
                msg: format!("ragged row: {} fields, expected {}", rec.len(), dims + 2),
            });
        }
        let num = |j: usize| -> Result<f64> {
            let cell = &rec[j];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Csv { row, msg: format!("non-numeric cell `{cell}` in column {}", j + 1) })
        };
        num(0)?;
        for (d, col) in cols.iter_mut().enumerate() {
            col.push(num(d + 1)?);
        }
        let l = num(dims + 1)?;
        if l != 0.0 && l != 1.0 {
            return Err(Error::Csv { row, msg: format!("label must be 0 or 1, got {l}") });
        }
        labels.push(l as u8);
    }
    Ok(Series {
        dims,
        values: cols.concat(),
        labels,
    })
}

/// Consecutive windows of length `length` every `stride` rows; a window is
/// anomalous iff any timestep inside it is.
pub fn load_csv(
    path: impl AsRef<Path>,
    dims: usize,
    length: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow>> {
    read_series_csv(path, dims)?.windows(length, stride)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    General,
    Hard,
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Setting::General),
            "hard" => Ok(Setting::Hard),
            other => Err(invalid(format!("unknown setting `{other}` (general|hard)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub setting: Setting,
    pub n_labeled: usize,
    pub contamination_rate: f64,
    pub val_fraction: f64,
    /// Fraction of normal windows held out for test.
    pub test_fraction: f64,
    /// Keep injected contaminants out of the validation set.
    pub clean_validation: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            setting: Setting::General,
            n_labeled: 10,
            contamination_rate: 0.02,
            val_fraction: 0.2,
            test_fraction: 0.3,
            clean_validation: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub setting: Setting,
    pub seen_classes: BTreeSet<u32>,
    pub d_n: Vec<SeriesWindow>,
    pub d_a: Vec<SeriesWindow>,
    pub validation: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
}

impl OpenSetSplit {
    /// `D = D_n ∪ D_a`.
    pub fn training(&self) -> Vec<SeriesWindow> {
        self.d_n.iter().chain(&self.d_a).cloned().collect()
    }

    pub fn injected_ids(&self) -> BTreeSet<u64> {
        self.d_n
            .iter()
            .filter(|w| w.provenance == Provenance::InjectedContaminant)
            .map(|w| w.id)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen_ids = BTreeSet::new();
        for w in self.d_n.iter().chain(&self.d_a).chain(&self.validation).chain(&self.test) {
            w.validate()?;
            if !seen_ids.insert(w.id) {
                return Err(invalid(format!("window id {} appears in more than one pool", w.id)));
            }
        }
        if self.d_n.iter().any(|w| w.label != 0) {
            return Err(invalid("d_n must be labeled normal"));
        }
        for w in &self.d_a {
            if w.label != 1 || !w.class_id.is_some_and(|c| self.seen_classes.contains(&c)) {
                return Err(invalid(format!("labeled anomaly {} is not from a seen class", w.id)));
            }
        }
        if self.d_a.len() * 10 > self.d_n.len() {
            return Err(invalid(format!(
                "|d_a| = {} exceeds a tenth of |d_n| = {}",
                self.d_a.len(),
                self.d_n.len()
            )));
        }
        if self.setting == Setting::Hard {
            if self.seen_classes.len() != 1 {
                return Err(invalid("hard setting needs exactly one seen class"));
            }
            let unseen_in_test = self.test.iter().any(|w| {
                w.label == 1 && w.class_id.is_some_and(|c| !self.seen_classes.contains(&c))
            });
            if !unseen_in_test {
                return Err(invalid("hard setting test set has no unseen-class anomaly"));
            }
        }
        Ok(())
    }
}

/// Build the open-set split.
///
/// Normals are shuffled and divided into test (`test_fraction`), validation
/// and `D_n`. `D_n` receives `⌈rate·M⌉` anomalies relabeled 0 (`M` original
/// normals in `D_n`); the validation set is carved from the same contaminated
/// pool at `val_fraction` and is contaminated at the same rate unless
/// `clean_validation` is set. Every seen class contributes `n_labeled`
/// windows to `D_a` plus its share of labeled validation anomalies. In the
/// hard setting one class (chosen by the seed) is seen and every other class
/// only appears in test; contaminants are then drawn from the seen class.
pub fn make_openset_split(dataset: &[SeriesWindow], cfg: &SplitConfig) -> Result<OpenSetSplit> {
    if cfg.n_labeled < 1 {
        return Err(invalid("n_labeled must be at least 1"));
    }
    if !(0.0..=0.1).contains(&cfg.contamination_rate) {
        return Err(invalid(format!(
            "contamination rate {} outside [0, 0.1]",
            cfg.contamination_rate
        )));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 0.5) {
        return Err(invalid(format!("val_fraction {} outside (0, 0.5)", cfg.val_fraction)));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(invalid(format!("test_fraction {} outside (0, 1)", cfg.test_fraction)));
    }
    for w in dataset {
        w.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normals: Vec<&SeriesWindow> = dataset.iter().filter(|w| w.label == 0).collect();
    let mut by_class: BTreeMap<u32, Vec<&SeriesWindow>> = BTreeMap::new();
    for w in dataset.iter().filter(|w| w.label == 1) {
        by_class.entry(w.class_id.unwrap_or(0)).or_default().push(w);
    }
    if by_class.is_empty() {
        return Err(Error::Insufficient("dataset has no anomalies".into()));
    }
    let classes: Vec<u32> = by_class.keys().copied().collect();
    let seen_classes: BTreeSet<u32> = match cfg.setting {
        Setting::General => classes.iter().copied().collect(),
        Setting::Hard => {
            if classes.len() < 2 {
                return Err(invalid("hard setting needs at least two anomaly classes"));
            }
            [classes[rng.gen_range(0..classes.len())]].into_iter().collect()
        }
    };

    normals.shuffle(&mut rng);
    for list in by_class.values_mut() {
        list.shuffle(&mut rng);
    }

    let n_test_norm = ((normals.len() as f64) * cfg.test_fraction).round() as usize;
    let pool = normals.len() - n_test_norm;
    let n_val_norm = ((pool as f64) * cfg.val_fraction).round() as usize;
    let m = pool - n_val_norm;
    let n_con = ceil_count(cfg.contamination_rate * m as f64);
    let n_con_val = if cfg.clean_validation {
        0
    } else {
        ceil_count(cfg.contamination_rate * n_val_norm as f64)
    };
    let n_val_lab = ((cfg.n_labeled as f64) * cfg.val_fraction / (1.0 - cfg.val_fraction))
        .round()
        .max(1.0) as usize;

    let a = cfg.n_labeled * seen_classes.len();
    if a * 10 > m {
        return Err(Error::Insufficient(format!(
            "{a} labeled anomalies need at least {} normals in d_n, have {m}",
            a * 10
        )));
    }

    // labeled anomalies come off the front of each seen class
    let mut cursor: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in &seen_classes {
        let need = cfg.n_labeled + n_val_lab;
        let have = by_class[&c].len();
        if have < need {
            return Err(Error::Insufficient(format!(
                "class {c} has {have} anomalies; {need} required ({} labeled + {n_val_lab} validation)",
                cfg.n_labeled
            )));
        }
        cursor.insert(c, need);
    }

    // contaminants are drawn round-robin from eligible classes, leaving at
    // least one test anomaly per class in the general setting
    let eligible: Vec<u32> = seen_classes.iter().copied().collect();
    let min_test = match cfg.setting {
        Setting::General => 1,
        Setting::Hard => 0,
    };
    let available: usize = eligible
        .iter()
        .map(|c| by_class[c].len() - cursor[c] - min_test.min(by_class[c].len() - cursor[c]))
        .sum();
    if available < n_con + n_con_val {
        return Err(Error::Insufficient(format!(
            "{} contaminants required ({n_con} in d_n + {n_con_val} in validation), only {available} anomalies remain after {} labeled + {n_val_lab} validation per seen class",
            n_con + n_con_val,
            cfg.n_labeled
        )));
    }
    let draw_contaminants = |count: usize, cursor: &mut BTreeMap<u32, usize>| {
        let mut out = Vec::with_capacity(count);
        let mut ci = 0;
        while out.len() < count {
            let c = eligible[ci % eligible.len()];
            ci += 1;
            let pos = cursor[&c];
            if pos + min_test < by_class[&c].len() {
                out.push(by_class[&c][pos]);
                cursor.insert(c, pos + 1);
            }
        }
        out
    };
    let con_train = draw_contaminants(n_con, &mut cursor);
    let con_val = draw_contaminants(n_con_val, &mut cursor);

    let as_contaminant = |w: &SeriesWindow| SeriesWindow {
        label: 0,
        provenance: Provenance::InjectedContaminant,
        ..w.clone()
    };

    let mut d_n: Vec<SeriesWindow> = normals[n_test_norm + n_val_norm..]
        .iter()
        .map(|w| (*w).clone())
        .collect();
    d_n.extend(con_train.iter().map(|w| as_contaminant(w)));
    d_n.shuffle(&mut rng);

    let mut d_a = Vec::with_capacity(a);
    let mut validation: Vec<SeriesWindow> = normals[n_test_norm..n_test_norm + n_val_norm]
        .iter()
        .map(|w| (*w).clone())
        .collect();
    validation.extend(con_val.iter().map(|w| as_contaminant(w)));
    for &c in &seen_classes {
        let list = &by_class[&c];
        d_a.extend(list[..cfg.n_labeled].iter().map(|w| (*w).clone()));
        validation.extend(list[cfg.n_labeled..cfg.n_labeled + n_val_lab].iter().map(|w| (*w).clone()));
    }
    validation.shuffle(&mut rng);

    let mut test: Vec<SeriesWindow> = normals[..n_test_norm].iter().map(|w| (*w).clone()).collect();
    for (&c, list) in &by_class {
        let from = if seen_classes.contains(&c) { cursor[&c] } else { 0 };
        test.extend(list[from..].iter().map(|w| (*w).clone()));
    }
    if !test.iter().any(|w| w.label == 1) {
        return Err(Error::Insufficient("no anomalies left for the test set".into()));
    }

    let split = OpenSetSplit {
        setting: cfg.setting,
        seen_classes,
        d_n,
        d_a,
        validation,
        test,
    };
    split.validate()?;
    Ok(split)
}

fn ceil_count(x: f64) -> usize {
    // guards against 0.02*1000 = 20.000000000000004
    (x - 1e-9).ceil().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_normal: 200,
            n_per_class: 40,
            length: 40,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = serde_json::to_string(&synth_generate(&spec(7)).unwrap()).unwrap();
        let b = serde_json::to_string(&synth_generate(&spec(7)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_counts_per_class() {
        let s = SynthSpec {
            n_per_class: 50,
            anomaly_classes: vec![AnomalyClass::Spike],
            ..spec(1)
        };
        let data = synth_generate(&s).unwrap();
        let spikes: Vec<_> = data
            .iter()
            .filter(|w| w.class_id == Some(AnomalyClass::Spike.id()))
            .collect();
        assert_eq!(spikes.len(), 50);
        assert!(spikes.iter().all(|w| w.label == 1));
        assert!(data.iter().all(|w| w.validate().is_ok()));
    }

    #[test]
    fn synth_rejects_bad_spec() {
        assert!(synth_generate(&SynthSpec { n_normal: 0, ..spec(0) }).is_err());
        assert!(synth_generate(&SynthSpec { anomaly_classes: vec![], ..spec(0) }).is_err());
    }

    #[test]
    fn spike_windows_exceed_normal_tail() {
        let s = SynthSpec {
            n_normal: 500,
            n_per_class: 500,
            anomaly_classes: vec![AnomalyClass::Spike],
            ..spec(3)
        };
        let data = synth_generate(&s).unwrap();
        let maxabs = |w: &SeriesWindow| w.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut normal_max: Vec<f64> = data.iter().filter(|w| w.label == 0).map(maxabs).collect();
        normal_max.sort_by(f64::total_cmp);
        let p99 = normal_max[(0.99 * (normal_max.len() - 1) as f64).round() as usize];
        let spikes: Vec<f64> = data.iter().filter(|w| w.label == 1).map(maxabs).collect();
        let frac = spikes.iter().filter(|&&m| m > p99).count() as f64 / spikes.len() as f64;
        assert!(frac >= 0.95, "fraction above p99: {frac}");
    }

    fn csv_text(rows: usize, labeled: &[usize]) -> String {
        let mut s = String::from("t,dim_0,dim_1,label\n");
        for t in 0..rows {
            let l = labeled.contains(&t) as u8;
            s.push_str(&format!("{t},{},{},{l}\n", t as f64 * 0.1, -(t as f64)));
        }
        s
    }

    #[test]
    fn csv_window_counts() {
        let s = parse_series_csv(&csv_text(300, &[]), 2).unwrap();
        assert_eq!(s.windows(100, 100).unwrap().len(), 3);
        assert_eq!(s.windows(100, 1).unwrap().len(), 201);
    }

    #[test]
    fn csv_any_rule_labels() {
        let s = parse_series_csv(&csv_text(300, &[150]), 2).unwrap();
        let w = s.windows(100, 100).unwrap();
        assert_eq!(w.iter().map(|w| w.label).collect::<Vec<_>>(), vec![0, 1, 0]);
        // channel layout is row-major
        assert_eq!(w[1].values[0], 10.0);
        assert_eq!(w[1].values[100], -100.0);
    }

    #[test]
    fn csv_errors_name_rows() {
        let bad_header = "time,dim_0,label\n0,1,0\n";
        assert!(matches!(parse_series_csv(bad_header, 1), Err(Error::Csv { row: 1, .. })));
        let ragged = "t,dim_0,label\n0,1,0\n1,2\n";
        assert!(matches!(parse_series_csv(ragged, 1), Err(Error::Csv { row: 3, .. })));
        let nonnum = "t,dim_0,label\n0,1,0\n1,2,0\n2,abc,0\n";
        let err = parse_series_csv(nonnum, 1).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 4, .. }));
        assert!(err.to_string().contains("abc"));
    }

    fn dataset(seed: u64) -> Vec<SeriesWindow> {
        synth_generate(&SynthSpec {
            n_normal: 1000,
            n_per_class: 60,
            length: 20,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn general_split_protocol() {
        let data = dataset(1);
        let split = make_openset_split(&data, &SplitConfig { seed: 4, ..SplitConfig::default() }).unwrap();
        assert_eq!(split.d_a.len(), 30);
        assert_eq!(split.seen_classes.len(), 3);
        let m = split.d_n.iter().filter(|w| w.provenance == Provenance::Original).count();
        let injected = split.injected_ids().len();
        assert_eq!(injected, ((0.02 * m as f64) - 1e-9).ceil() as usize);
        assert!(split.d_n.iter().all(|w| w.label == 0));
    }

    #[test]
    fn contamination_count_for_thousand_normals() {
        // 1000 normals left in d_n after test and validation carve-outs
        let data = synth_generate(&SynthSpec {
            n_normal: 1786,
            n_per_class: 60,
            length: 20,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = SplitConfig { test_fraction: 0.3, val_fraction: 0.2, ..SplitConfig::default() };
        let split = make_openset_split(&data, &cfg).unwrap();
        let m = split.d_n.len() - split.injected_ids().len();
        assert_eq!(m, 1000);
        assert_eq!(split.injected_ids().len(), 20);
    }

    #[test]
    fn zero_contamination() {
        let split = make_openset_split(
            &dataset(2),
            &SplitConfig { contamination_rate: 0.0, ..SplitConfig::default() },
        )
        .unwrap();
        assert!(split.injected_ids().is_empty());
        assert!(split
            .validation
            .iter()
            .all(|w| w.provenance == Provenance::Original));
    }

    #[test]
    fn hard_split_reserves_unseen_classes() {
        let split = make_openset_split(
            &dataset(3),
            &SplitConfig { setting: Setting::Hard, seed: 11, ..SplitConfig::default() },
        )
        .unwrap();
        assert_eq!(split.seen_classes.len(), 1);
        assert_eq!(split.d_a.len(), 10);
        let seen = *split.seen_classes.iter().next().unwrap();
        for w in split.d_n.iter().chain(&split.d_a).chain(&split.validation) {
            if let Some(c) = w.class_id {
                assert_eq!(c, seen, "unseen class leaked into training pools");
            }
        }
    }

    #[test]
    fn clean_validation_excludes_contaminants() {
        let split = make_openset_split(
            &dataset(5),
            &SplitConfig { clean_validation: true, contamination_rate: 0.1, ..SplitConfig::default() },
        )
        .unwrap();
        assert!(split.validation.iter().all(|w| w.provenance == Provenance::Original));
        assert!(!split.injected_ids().is_empty());
    }

    #[test]
    fn insufficient_anomalies_diagnostic() {
        let data = synth_generate(&SynthSpec {
            n_normal: 1000,
            n_per_class: 8,
            length: 20,
            ..SynthSpec::default()
        })
        .unwrap();
        let err = make_openset_split(&data, &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Insufficient(_)));
        assert!(err.to_string().contains("required"));
    }

    #[test]
    fn split_rejects_bad_parameters() {
        let data = dataset(1);
        for cfg in [
            SplitConfig { n_labeled: 0, ..SplitConfig::default() },
            SplitConfig { contamination_rate: 0.2, ..SplitConfig::default() },
            SplitConfig { val_fraction: 0.5, ..SplitConfig::default() },
        ] {
            assert!(make_openset_split(&data, &cfg).is_err());
        }
    }
}
