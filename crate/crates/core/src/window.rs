//! Labeled word sequences, context windows and minibatches.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{EmbeddingTable, PAD_TOKEN};
use crate::error::{Result, SbdError};
use crate::normalize::{NormalizedCorpus, Token};
use crate::tensor::Tensor;

/// Binary class of a word. The discriminant is the class index used by the
/// classifiers' two-way softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    NoSeg = 0,
    Seg = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::NoSeg),
            1 => Some(Label::Seg),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NoSeg => "NO_SEG",
            Label::Seg => "SEG",
        })
    }
}

/// Words with markers removed; a word is `Seg` when a marker followed it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledSequence {
    pub words: Vec<String>,
    pub labels: Vec<Label>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn seg_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Seg).count()
    }
}

pub fn label_tokens(corpus: &NormalizedCorpus) -> LabeledSequence {
    let mut seq = LabeledSequence::default();
    for tok in &corpus.tokens {
        match tok {
            Token::Word(w) => {
                seq.words.push(w.clone());
                seq.labels.push(Label::NoSeg);
            }
            Token::Seg => {
                // a marker with no preceding word carries no label
                if let Some(last) = seq.labels.last_mut() {
                    *last = Label::Seg;
                }
            }
        }
    }
    seq
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowConfig {
    pub width: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { width: 5 }
    }
}

impl WindowConfig {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 || width.is_multiple_of(2) {
            return Err(SbdError::Config(format!(
                "window width must be a positive odd number, got {width}"
            )));
        }
        Ok(WindowConfig { width })
    }

    pub fn half(&self) -> usize {
        self.width / 2
    }
}

/// A window of `m` words centred on `seq.words[center_index]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSample<'a> {
    pub words: Vec<&'a str>,
    pub label: Label,
    pub center_index: usize,
}

impl WindowSample<'_> {
    pub fn center_word(&self) -> &str {
        self.words[self.words.len() / 2]
    }
}

pub fn build_windows<'a>(seq: &'a LabeledSequence, cfg: &WindowConfig) -> Vec<WindowSample<'a>> {
    (0..seq.len()).map(|i| window_at(seq, cfg, i)).collect()
}

pub fn window_at<'a>(seq: &'a LabeledSequence, cfg: &WindowConfig, center: usize) -> WindowSample<'a> {
    let half = cfg.half() as isize;
    let words = (-half..=half)
        .map(|offset| {
            let pos = center as isize + offset;
            if pos < 0 || pos as usize >= seq.len() {
                PAD_TOKEN
            } else {
                seq.words[pos as usize].as_str()
            }
        })
        .collect();
    WindowSample {
        words,
        label: seq.labels[center],
        center_index: center,
    }
}

/// Embedded input tensor of shape `B x 1 x m x dim`.
pub fn embed_samples(samples: &[&WindowSample<'_>], table: &EmbeddingTable) -> Tensor<f32> {
    let m = samples.first().map_or(0, |s| s.words.len());
    let dim = table.dim();
    let mut data = vec![0.0f32; samples.len() * m * dim];
    for (sample, chunk) in samples.iter().zip(data.chunks_exact_mut(m * dim)) {
        debug_assert_eq!(sample.words.len(), m);
        for (word, row) in sample.words.iter().zip(chunk.chunks_exact_mut(dim)) {
            table.embed_word_into(word, row);
        }
    }
    Tensor::from_vec(vec![samples.len(), 1, m, dim], data).expect("shape matches data")
}

/// One minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub labels: Vec<Label>,
    /// Positions of the batch members in the sample list.
    pub indices: Vec<usize>,
}

/// Shuffled minibatches over a sample list. Matrices are filled lazily.
pub struct Batches<'s, 'a> {
    samples: &'s [WindowSample<'a>],
    table: &'s EmbeddingTable,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_, '_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let members: Vec<&WindowSample<'_>> = indices.iter().map(|&i| &self.samples[i]).collect();
        Some(Batch {
            input: embed_samples(&members, self.table),
            labels: members.iter().map(|s| s.label).collect(),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_, '_> {}

/// Fisher-Yates shuffle of `0..len` driven by a ChaCha8 stream seeded with
/// `seed`.
pub fn shuffled_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

pub fn batches<'s, 'a>(
    samples: &'s [WindowSample<'a>],
    batch_size: usize,
    seed: u64,
    table: &'s EmbeddingTable,
) -> Result<Batches<'s, 'a>> {
    if batch_size == 0 {
        return Err(SbdError::Config("batch size must be at least 1".into()));
    }
    Ok(Batches {
        samples,
        table,
        order: shuffled_order(samples.len(), seed),
        batch_size,
        pos: 0,
    })
}

/// Writes the optional dataset manifest: `center_index<TAB>label` per line,
/// label 1 for SEG.
pub fn write_manifest<W: Write>(samples: &[WindowSample<'_>], mut sink: W) -> Result<()> {
    let err = |e| SbdError::io("writing manifest", e);
    for s in samples {
        writeln!(sink, "{}\t{}", s.center_index, s.label.index()).map_err(err)?;
    }
    sink.flush().map_err(err)
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<(usize, Label)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| SbdError::io("reading manifest", e))?;
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| SbdError::format(line_no, "expected center_index<TAB>label"))?;
        let idx = idx
            .parse()
            .map_err(|_| SbdError::format(line_no, format!("bad index {idx:?}")))?;
        let label = match label {
            "0" => Label::NoSeg,
            "1" => Label::Seg,
            other => return Err(SbdError::format(line_no, format!("bad label {other:?}"))),
        };
        out.push((idx, label));
    }
    Ok(out)
}
