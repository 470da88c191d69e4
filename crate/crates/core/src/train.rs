//! Training loop, loss logging and the per-class evaluation metrics.

use std::fmt;
use std::io::{BufRead, Write};

use log::{debug, info};

use crate::embeddings::EmbeddingTable;
use crate::error::{Result, SbdError};
use crate::models::{SbdModel, DEFAULT_KEEP_PROB};
use crate::tensor::{AdamConfig, AdamState, Mode};
use crate::window::{batches, embed_samples, Label, WindowSample};

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub keep_prob: f64,
    pub seed: u64,
    /// Optimizer steps between two loss-curve points.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 10,
            lr: 1e-3,
            keep_prob: DEFAULT_KEEP_PROB,
            seed: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SbdError::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep probability must lie in (0, 1]");
        }
        if self.log_interval == 0 {
            return bad("log interval must be at least 1");
        }
        Ok(())
    }
}

/// Mean training cross-entropy, one point per logging interval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// `step<TAB>loss` per line.
    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<()> {
        let err = |e| SbdError::io("writing loss curve", e);
        for (step, loss) in &self.points {
            writeln!(sink, "{step}\t{loss}").map_err(err)?;
        }
        sink.flush().map_err(err)
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut curve = LossCurve::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| SbdError::io("reading loss curve", e))?;
            let parsed = line
                .split_once('\t')
                .and_then(|(s, l)| Some((s.parse::<u64>().ok()?, l.parse::<f64>().ok()?)));
            let Some((step, loss)) = parsed else {
                return Err(SbdError::format(i + 1, "expected step<TAB>loss"));
            };
            if curve.points.last().is_some_and(|&(prev, _)| prev >= step) {
                return Err(SbdError::format(i + 1, "steps must increase"));
            }
            curve.points.push((step, loss));
        }
        Ok(curve)
    }
}

/// Summary of one pass over the training samples, measured on the
/// dropout-active minibatches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

fn check_inputs(model: &SbdModel, samples: &[WindowSample<'_>], table: &EmbeddingTable) -> Result<()> {
    let spec = model.spec();
    if table.dim() != spec.n {
        return Err(SbdError::Shape(format!(
            "vectors have dimension {}, model expects {}",
            table.dim(),
            spec.n
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.words.len() != spec.m) {
        return Err(SbdError::Shape(format!(
            "window of {} words, model expects {}",
            s.words.len(),
            spec.m
        )));
    }
    Ok(())
}

/// Minibatch Adam training with dropout active, resumable epoch by epoch.
pub struct Trainer<'m> {
    model: &'m mut SbdModel,
    cfg: TrainConfig,
    adam: AdamState<f32>,
    step: u64,
    epoch: usize,
    curve: LossCurve,
    pending: (f64, u64),
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut SbdModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if (model.spec().keep_prob() - cfg.keep_prob).abs() > 1e-9 {
            model.set_keep_prob(cfg.keep_prob)?;
        }
        Ok(Trainer {
            model,
            cfg,
            adam: AdamState::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            step: 0,
            epoch: 0,
            curve: LossCurve::default(),
            pending: (0.0, 0),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn curve(&self) -> &LossCurve {
        &self.curve
    }

    pub fn into_curve(self) -> LossCurve {
        self.curve
    }

    pub fn model(&self) -> &SbdModel {
        self.model
    }

    fn flush_log(&mut self) {
        let (sum, count) = self.pending;
        if count > 0 {
            let mean = sum / count as f64;
            self.curve.points.push((self.step, mean));
            debug!("step {} loss {mean:.5}", self.step);
            self.pending = (0.0, 0);
        }
    }

    pub fn run_epoch(&mut self, samples: &[WindowSample<'_>], table: &EmbeddingTable) -> Result<EpochStats> {
        if samples.is_empty() {
            return Err(SbdError::Config("no training samples".into()));
        }
        check_inputs(self.model, samples, table)?;
        let epoch_seed = mix(self.cfg.seed, self.epoch as u64);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in batches(samples, self.cfg.batch_size, epoch_seed, table)? {
            let labels: Vec<usize> = batch.labels.iter().map(|l| l.index()).collect();
            let mode = Mode::Train {
                seed: mix(self.cfg.seed ^ 0xD1B5_4A32_D192_ED03, self.step),
            };
            let diagnose = |step: u64, detail: &str| {
                let shown: Vec<usize> = batch.indices.iter().take(8).copied().collect();
                SbdError::Numeric(format!(
                    "{detail} at step {step}, batch samples {shown:?}{}",
                    if batch.indices.len() > 8 { " ..." } else { "" }
                ))
            };
            let net = self.model.network_mut();
            let out = match net.loss_and_backward(batch.input, &labels, mode) {
                Ok(out) => out,
                Err(SbdError::Numeric(msg)) => return Err(diagnose(self.step + 1, &msg)),
                Err(e) => return Err(e),
            };
            let loss = out.loss as f64;
            if !loss.is_finite() {
                return Err(diagnose(self.step + 1, "non-finite loss"));
            }
            net.adam_step(&mut self.adam)?;
            self.step += 1;

            loss_sum += loss * labels.len() as f64;
            correct += out
                .probs
                .data()
                .chunks_exact(2)
                .zip(&labels)
                .filter(|(p, &l)| usize::from(p[1] >= p[0]) == l)
                .count();
            self.pending.0 += loss;
            self.pending.1 += 1;
            if self.step.is_multiple_of(self.cfg.log_interval) {
                self.flush_log();
            }
        }
        self.flush_log();
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        info!(
            "epoch {} mean loss {:.5} accuracy {:.4}",
            stats.epoch, stats.mean_loss, stats.accuracy
        );
        Ok(stats)
    }
}

/// Trains for `cfg.epochs` epochs. Zero epochs leaves the model untouched and
/// returns an empty curve.
pub fn train(
    model: &mut SbdModel,
    samples: &[WindowSample<'_>],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(LossCurve::default());
    }
    let mut trainer = Trainer::new(model, *cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(samples, table)?;
    }
    Ok(trainer.into_curve())
}

/// Splits off the trailing `fraction` of `samples` for validation. Both
/// parts are non-empty when there are at least two samples.
pub fn carve_validation<T>(samples: &[T], fraction: f64) -> Result<(&[T], &[T])> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SbdError::Config(format!(
            "validation fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut held = (samples.len() as f64 * fraction).round() as usize;
    if fraction > 0.0 && samples.len() >= 2 {
        held = held.clamp(1, samples.len() - 1);
    }
    Ok(samples.split_at(samples.len() - held))
}

/// Mean cross-entropy and accuracy (plain argmax) in evaluation mode.
pub fn eval_loss(model: &SbdModel, samples: &[WindowSample<'_>], table: &EmbeddingTable) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(SbdError::Config("no samples to evaluate".into()));
    }
    check_inputs(model, samples, table)?;
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for chunk in samples.chunks(DEFAULT_BATCH_SIZE) {
        let members: Vec<&WindowSample<'_>> = chunk.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label.index()).collect();
        let logits = model.network().infer(embed_samples(&members, table))?;
        let (loss, probs) = crate::tensor::softmax_xent(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += probs
            .data()
            .chunks_exact(2)
            .zip(&labels)
            .filter(|(p, &l)| usize::from(p[1] >= p[0]) == l)
            .count();
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Confusion counts with `SEG` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Seg, Label::Seg) => self.tp += 1,
            (Label::NoSeg, Label::Seg) => self.fp += 1,
            (Label::NoSeg, Label::NoSeg) => self.tn += 1,
            (Label::Seg, Label::NoSeg) => self.fn_ += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (Label, Label)>>(pairs: I) -> Self {
        let mut c = Confusion::default();
        for (t, p) in pairs {
            c.add(t, p);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    // (correct, predicted, true) counts for one class
    fn class_counts(&self, class: Label) -> (u64, u64, u64) {
        match class {
            Label::Seg => (self.tp, self.tp + self.fp, self.tp + self.fn_),
            Label::NoSeg => (self.tn, self.tn + self.fn_, self.tn + self.fp),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Correct predictions over all predictions; 0 for an empty matrix.
pub fn accuracy(c: &Confusion) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

/// 0 when nothing was predicted as `class`.
pub fn precision(c: &Confusion, class: Label) -> f64 {
    let (correct, predicted, _) = c.class_counts(class);
    ratio(correct, predicted)
}

/// 0 when no sample truly belongs to `class`.
pub fn recall(c: &Confusion, class: Label) -> f64 {
    let (correct, _, truth) = c.class_counts(class);
    ratio(correct, truth)
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1(c: &Confusion, class: Label) -> f64 {
    f1_score(precision(c, class), recall(c, class))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    fn of(c: &Confusion, class: Label) -> Self {
        ClassMetrics {
            precision: precision(c, class),
            recall: recall(c, class),
            f1: f1(c, class),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub alpha: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub seg: ClassMetrics,
    pub no_seg: ClassMetrics,
}

const REPORT_KEYS: [&str; 13] = [
    "samples",
    "alpha",
    "tp",
    "fp",
    "tn",
    "fn",
    "accuracy",
    "seg_precision",
    "seg_recall",
    "seg_f1",
    "no_seg_precision",
    "no_seg_recall",
    "no_seg_f1",
];

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion, alpha: f64) -> Self {
        MetricsReport {
            alpha,
            confusion,
            accuracy: accuracy(&confusion),
            seg: ClassMetrics::of(&confusion, Label::Seg),
            no_seg: ClassMetrics::of(&confusion, Label::NoSeg),
        }
    }

    pub fn samples(&self) -> u64 {
        self.confusion.total()
    }

    pub fn class(&self, class: Label) -> ClassMetrics {
        match class {
            Label::Seg => self.seg,
            Label::NoSeg => self.no_seg,
        }
    }

    /// Parses the `key=value` form written by `Display`. Metrics are
    /// recomputed from the counts and must agree with the stored values to
    /// three decimals.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = Vec::with_capacity(REPORT_KEYS.len());
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for key in REPORT_KEYS {
            let (i, line) = lines
                .next()
                .ok_or_else(|| SbdError::format(0, format!("missing key {key}")))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SbdError::format(i + 1, "expected key=value"))?;
            if k != key {
                return Err(SbdError::format(i + 1, format!("expected key {key}, found {k}")));
            }
            let v: f64 = v
                .parse()
                .map_err(|_| SbdError::format(i + 1, format!("bad value {v:?}")))?;
            values.push((i + 1, v));
        }
        if let Some((i, _)) = lines.next() {
            return Err(SbdError::format(i + 1, "unexpected trailing line"));
        }
        let count = |j: usize| values[j].1 as u64;
        let confusion = Confusion {
            tp: count(2),
            fp: count(3),
            tn: count(4),
            fn_: count(5),
        };
        if confusion.total() != count(0) {
            return Err(SbdError::format(values[0].0, "sample count disagrees with the confusion counts"));
        }
        let report = MetricsReport::from_confusion(confusion, values[1].1);
        let derived = [
            report.accuracy,
            report.seg.precision,
            report.seg.recall,
            report.seg.f1,
            report.no_seg.precision,
            report.no_seg.recall,
            report.no_seg.f1,
        ];
        for (j, d) in derived.into_iter().enumerate() {
            let (line, stored) = values[6 + j];
            let shown: f64 = format!("{d:.3}").parse().unwrap();
            if (shown - stored).abs() > 5e-4 {
                return Err(SbdError::format(
                    line,
                    format!("{} = {stored} disagrees with the counts ({d:.3})", REPORT_KEYS[6 + j]),
                ));
            }
        }
        Ok(report)
    }
}

pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.confusion;
        writeln!(f, "samples={}", c.total())?;
        writeln!(f, "alpha={}", self.alpha)?;
        writeln!(f, "tp={}", c.tp)?;
        writeln!(f, "fp={}", c.fp)?;
        writeln!(f, "tn={}", c.tn)?;
        writeln!(f, "fn={}", c.fn_)?;
        writeln!(f, "accuracy={:.3}", self.accuracy)?;
        for (name, m) in [("seg", self.seg), ("no_seg", self.no_seg)] {
            writeln!(f, "{name}_precision={:.3}", m.precision)?;
            writeln!(f, "{name}_recall={:.3}", m.recall)?;
            writeln!(f, "{name}_f1={:.3}", m.f1)?;
        }
        Ok(())
    }
}

/// Predicts every sample in evaluation mode and tallies the confusion
/// matrix.
pub fn evaluate(
    model: &SbdModel,
    samples: &[WindowSample<'_>],
    table: &EmbeddingTable,
    alpha: f64,
) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(
        Confusion::from_pairs(
            samples
                .iter()
                .map(|s| s.label)
                .zip(predict_samples(model, samples, table, alpha)?),
        ),
        alpha,
    ))
}

pub fn predict_samples(
    model: &SbdModel,
    samples: &[WindowSample<'_>],
    table: &EmbeddingTable,
    alpha: f64,
) -> Result<Vec<Label>> {
    check_inputs(model, samples, table)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(DEFAULT_BATCH_SIZE) {
        let members: Vec<&WindowSample<'_>> = chunk.iter().collect();
        let preds = model.predict_batch(embed_samples(&members, table), alpha)?;
        out.extend(preds.iter().map(|p| p.label));
    }
    Ok(out)
}

/// Scores the constant `NO_SEG` predictor.
pub fn majority_baseline<I: IntoIterator<Item = Label>>(labels: I) -> MetricsReport {
    MetricsReport::from_confusion(
        Confusion::from_pairs(labels.into_iter().map(|l| (l, Label::NoSeg))),
        1.0,
    )
}
