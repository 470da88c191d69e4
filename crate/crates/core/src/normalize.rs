//! Raw text to `<SEG>`-labeled token stream.
//!
//! The cleaning rules run in a fixed order:
//!
//! 1. XML tags are stripped (the five basic entities are decoded afterwards)
//!    and hyphens become spaces;
//! 2. text is lowercased;
//! 3. runs of an identical punctuation mark collapse to one occurrence;
//! 4. apostrophes stay attached to the preceding clitic and split the word
//!    (`l'homme` becomes `l'` `homme`);
//! 5. each of `? ! ; : .` becomes a standalone [`Token::Seg`];
//! 6. any other punctuation is deleted;
//! 7. the result is split on whitespace;
//! 8. consecutive markers collapse to one and a leading marker is dropped.
//!
//! A literal `<SEG>` in the input is read back as a marker, which makes the
//! normalizer idempotent over its own rendered output.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Result, SbdError};

/// Rendered form of the boundary marker.
pub const SEG_MARKER: &str = "<SEG>";

const BOUNDARY_CHARS: [char; 5] = ['?', '!', ';', ':', '.'];

// Longest tag name we need to remember to recognise `<SEG>`.
const TAG_BUF_CAP: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Word(String),
    Seg,
}

impl Token {
    pub fn as_str(&self) -> &str {
        match self {
            Token::Word(w) => w,
            Token::Seg => SEG_MARKER,
        }
    }

    pub fn is_seg(&self) -> bool {
        matches!(self, Token::Seg)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered stream of normalized tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizedCorpus {
    pub tokens: Vec<Token>,
}

impl NormalizedCorpus {
    pub fn new(tokens: Vec<Token>) -> Self {
        NormalizedCorpus { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn marker_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_seg()).count()
    }

    /// Tokens joined by single spaces, without a trailing newline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok.as_str());
        }
        out
    }

    /// Writes the document in the interchange format: single spaces between
    /// tokens and a final LF. An empty corpus writes nothing.
    pub fn write_to<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        if self.tokens.is_empty() {
            return Ok(());
        }
        sink.write_all(self.render().as_bytes())?;
        sink.write_all(b"\n")
    }
}

/// Train/test portions of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: NormalizedCorpus,
    pub test: NormalizedCorpus,
    pub ratio: f64,
}

/// Token and marker counts for a normalized stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub tokens: usize,
    pub markers: usize,
}

impl CorpusStats {
    pub fn marker_ratio(&self) -> Option<f64> {
        (self.tokens > 0).then(|| self.markers as f64 / self.tokens as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Last {
    Nothing,
    Word,
    Seg,
}

/// Incremental normalizer. Feed it lines of one document; state that spans
/// lines (open tags, marker collapsing) is carried between calls.
#[derive(Debug, Clone)]
pub struct Normalizer {
    tag: Option<String>,
    last: Last,
    // scratch buffers reused between lines
    stripped: String,
    decoded: String,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Normalizer {
    pub fn new() -> Self {
        Normalizer {
            tag: None,
            last: Last::Nothing,
            stripped: String::new(),
            decoded: String::new(),
        }
    }

    /// Normalizes one line (or any chunk ending on a whitespace boundary) and
    /// hands each produced token to `emit`.
    pub fn push_line<F: FnMut(Token)>(&mut self, line: &str, mut emit: F) {
        let mut stripped = std::mem::take(&mut self.stripped);
        let mut decoded = std::mem::take(&mut self.decoded);
        stripped.clear();
        decoded.clear();

        self.strip_tags(line, &mut stripped);
        decode_entities(&stripped, &mut decoded);

        let mut word = String::new();
        let mut prev_punct: Option<char> = None;

        for raw in decoded.chars() {
            let raw = if is_hyphen(raw) { ' ' } else { raw };
            for c in raw.to_lowercase() {
                let c = if c == '\u{2019}' { '\'' } else { c };
                let punct = !c.is_whitespace() && !is_word_char(c);
                if punct && prev_punct == Some(c) {
                    continue;
                }
                prev_punct = punct.then_some(c);

                if c.is_whitespace() {
                    self.flush_word(&mut word, &mut emit);
                } else if BOUNDARY_CHARS.contains(&c) {
                    self.flush_word(&mut word, &mut emit);
                    self.emit_seg(&mut emit);
                } else if c == '\'' {
                    if !word.is_empty() {
                        word.push('\'');
                        self.flush_word(&mut word, &mut emit);
                    }
                } else if is_combining_mark(c) {
                    if !word.is_empty() {
                        word.push(c);
                    }
                } else if c.is_alphanumeric() {
                    word.push(c);
                }
                // anything else is punctuation or a symbol and is dropped
            }
        }
        self.flush_word(&mut word, &mut emit);

        self.stripped = stripped;
        self.decoded = decoded;
    }

    fn flush_word<F: FnMut(Token)>(&mut self, word: &mut String, emit: &mut F) {
        if !word.is_empty() {
            emit(Token::Word(std::mem::take(word)));
            self.last = Last::Word;
        }
    }

    fn emit_seg<F: FnMut(Token)>(&mut self, emit: &mut F) {
        if self.last == Last::Word {
            emit(Token::Seg);
            self.last = Last::Seg;
        }
    }

    fn strip_tags(&mut self, line: &str, out: &mut String) {
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            if let Some(buf) = self.tag.as_mut() {
                if c == '>' {
                    // a literal marker survives tag stripping as a boundary
                    if buf == "SEG" {
                        out.push_str(" . ");
                    } else {
                        out.push(' ');
                    }
                    self.tag = None;
                } else if buf.len() < TAG_BUF_CAP {
                    buf.push(c);
                }
                continue;
            }
            if c == '<' {
                if let Some(&next) = chars.peek() {
                    if next.is_alphabetic() || matches!(next, '/' | '!' | '?') {
                        self.tag = Some(String::new());
                        continue;
                    }
                }
            }
            out.push(c);
        }
    }
}

fn decode_entities(input: &str, out: &mut String) {
    const ENTITIES: [(&str, char); 5] = [
        ("&amp;", '&'),
        ("&lt;", '<'),
        ("&gt;", '>'),
        ("&quot;", '"'),
        ("&apos;", '\''),
    ];
    let mut rest = input;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        match ENTITIES.iter().find(|(ent, _)| rest.starts_with(ent)) {
            Some((ent, ch)) => {
                out.push(*ch);
                rest = &rest[ent.len()..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
}

fn is_hyphen(c: char) -> bool {
    matches!(
        c,
        '-' | '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' | '\u{2212}'
    )
}

fn is_combining_mark(c: char) -> bool {
    matches!(c,
        '\u{0300}'..='\u{036F}'
        | '\u{1AB0}'..='\u{1AFF}'
        | '\u{1DC0}'..='\u{1DFF}'
        | '\u{20D0}'..='\u{20FF}'
        | '\u{FE20}'..='\u{FE2F}')
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || is_combining_mark(c)
}

/// Normalizes a complete in-memory document.
pub fn normalize(raw: &str) -> NormalizedCorpus {
    let mut normalizer = Normalizer::new();
    let mut tokens = Vec::new();
    for line in raw.split('\n') {
        normalizer.push_line(line, |t| tokens.push(t));
    }
    NormalizedCorpus { tokens }
}

/// Like [`normalize`] but validates UTF-8 first.
pub fn normalize_bytes(raw: &[u8]) -> Result<NormalizedCorpus> {
    let text = std::str::from_utf8(raw).map_err(|e| SbdError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    Ok(normalize(text))
}

/// Reads one document line by line and collects its tokens.
pub fn normalize_reader<R: BufRead>(reader: R) -> Result<NormalizedCorpus> {
    let mut tokens = Vec::new();
    for_each_line(reader, |normalizer, line| {
        normalizer.push_line(line, |t| tokens.push(t));
        Ok(())
    })?;
    Ok(NormalizedCorpus { tokens })
}

/// Streams one document from `reader` to `sink` in the interchange format,
/// holding at most one line in memory.
pub fn normalize_stream<R: BufRead, W: Write>(reader: R, mut sink: W) -> Result<CorpusStats> {
    let mut stats = CorpusStats::default();
    let write_err = |e| SbdError::io("writing normalized output", e);
    for_each_line(reader, |normalizer, line| {
        let mut result = Ok(());
        normalizer.push_line(line, |tok| {
            if result.is_err() {
                return;
            }
            let sep: &[u8] = if stats.tokens > 0 { b" " } else { b"" };
            result = sink
                .write_all(sep)
                .and_then(|_| sink.write_all(tok.as_str().as_bytes()));
            stats.tokens += 1;
            if tok.is_seg() {
                stats.markers += 1;
            }
        });
        result.map_err(write_err)
    })?;
    if stats.tokens > 0 {
        sink.write_all(b"\n").map_err(write_err)?;
    }
    sink.flush().map_err(write_err)?;
    Ok(stats)
}

fn for_each_line<R, F>(mut reader: R, mut f: F) -> Result<()>
where
    R: BufRead,
    F: FnMut(&mut Normalizer, &str) -> Result<()>,
{
    let mut normalizer = Normalizer::new();
    let mut buf = Vec::new();
    let mut offset = 0usize;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| SbdError::io("reading input", e))?;
        if n == 0 {
            return Ok(());
        }
        let line = std::str::from_utf8(&buf).map_err(|e| SbdError::InvalidUtf8 {
            offset: offset + e.valid_up_to(),
        })?;
        f(&mut normalizer, line)?;
        offset += n;
    }
}

/// Splits off a contiguous prefix of `round(ratio * len)` tokens (halves
/// round up) as the training portion. Both portions are kept non-empty.
pub fn split_corpus(corpus: &NormalizedCorpus, ratio: f64) -> Result<SplitCorpus> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SbdError::Config(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let len = corpus.len();
    if len < 2 {
        return Err(SbdError::Config(format!(
            "cannot split a corpus of {len} token(s)"
        )));
    }
    let cut = ((ratio * len as f64) + 0.5).floor() as usize;
    let cut = cut.clamp(1, len - 1);
    Ok(SplitCorpus {
        train: NormalizedCorpus::new(corpus.tokens[..cut].to_vec()),
        test: NormalizedCorpus::new(corpus.tokens[cut..].to_vec()),
        ratio,
    })
}

/// Fraction of tokens that are boundary markers.
pub fn punctuation_ratio(corpus: &NormalizedCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(SbdError::Config(
            "punctuation ratio of an empty corpus".into(),
        ));
    }
    Ok(corpus.marker_count() as f64 / corpus.len() as f64)
}
