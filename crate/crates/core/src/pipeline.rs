//! End-to-end segmentation of raw text.

use crate::embeddings::EmbeddingTable;
use crate::error::{Result, SbdError};
use crate::models::SbdModel;
use crate::normalize::{normalize, Token};
use crate::train::predict_samples;
use crate::window::{build_windows, Label, LabeledSequence, WindowConfig, WindowSample};

/// Anything that labels context windows.
pub trait BoundaryClassifier {
    /// Number of words per window.
    fn window_width(&self) -> usize;

    fn classify(&self, windows: &[WindowSample<'_>]) -> Result<Vec<Label>>;
}

/// A trained model with its vectors and decision rescaling.
pub struct ModelClassifier<'a> {
    pub model: &'a SbdModel,
    pub table: &'a EmbeddingTable,
    pub alpha: f64,
}

impl BoundaryClassifier for ModelClassifier<'_> {
    fn window_width(&self) -> usize {
        self.model.spec().m
    }

    fn classify(&self, windows: &[WindowSample<'_>]) -> Result<Vec<Label>> {
        predict_samples(self.model, windows, self.table, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputStyle {
    /// Words separated by spaces with `<SEG>` after each predicted boundary.
    #[default]
    Markers,
    /// One predicted sentence per line, no markers.
    SentencePerLine,
}

/// Normalizes `text`, discards any boundary markers it already had, and
/// labels every remaining word.
pub fn predict_boundaries<C: BoundaryClassifier + ?Sized>(text: &str, classifier: &C) -> Result<LabeledSequence> {
    let words: Vec<String> = normalize(text)
        .tokens
        .into_iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w),
            Token::Seg => None,
        })
        .collect();
    let mut seq = LabeledSequence {
        labels: vec![Label::NoSeg; words.len()],
        words,
    };
    if seq.is_empty() {
        return Ok(seq);
    }
    let cfg = WindowConfig::new(classifier.window_width())?;
    let labels = classifier.classify(&build_windows(&seq, &cfg))?;
    if labels.len() != seq.len() {
        return Err(SbdError::State(format!(
            "classifier returned {} labels for {} words",
            labels.len(),
            seq.len()
        )));
    }
    seq.labels = labels;
    Ok(seq)
}

/// Renders a labeled sequence. Non-empty output ends with a newline.
pub fn render(seq: &LabeledSequence, style: OutputStyle) -> String {
    let mut out = String::new();
    let mut line_start = true;
    for (word, label) in seq.words.iter().zip(&seq.labels) {
        if !line_start {
            out.push(' ');
        }
        out.push_str(word);
        line_start = false;
        if *label == Label::Seg {
            match style {
                OutputStyle::Markers => out.push_str(" <SEG>"),
                OutputStyle::SentencePerLine => {
                    out.push('\n');
                    line_start = true;
                }
            }
        }
    }
    if !line_start {
        out.push('\n');
    }
    out
}

pub fn segment<C: BoundaryClassifier + ?Sized>(text: &str, classifier: &C, style: OutputStyle) -> Result<String> {
    Ok(render(&predict_boundaries(text, classifier)?, style))
}
