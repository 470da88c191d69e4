//! Pretrained word vectors with character n-gram composition for unknown
//! words.
//!
//! Vectors are read from the common textual interchange format (a `V D`
//! header followed by one `word c1 .. cD` line per word). An optional bucket
//! table of n-gram vectors lets [`EmbeddingTable::embed_word`] build a vector
//! for a word missing from the vocabulary as the sum of the rows its n-grams
//! hash to. Without a bucket table unknown words map to the zero vector.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SbdError};

pub const DEFAULT_MIN_N: usize = 3;
pub const DEFAULT_MAX_N: usize = 6;
pub const DEFAULT_BUCKETS: u64 = 2_000_000;

/// Reserved window padding token; always embeds to zeros.
pub const PAD_TOKEN: &str = "<PAD>";

const FNV_OFFSET_BASIS: u32 = 2_166_136_261;
const FNV_PRIME: u32 = 16_777_619;

const NGRAM_MAGIC: [u8; 4] = *b"NGRB";
const NGRAM_VERSION: u32 = 1;

/// Hashed n-gram vectors, `buckets` rows of `dim` components.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramTable {
    buckets: u64,
    dim: usize,
    data: Vec<f32>,
}

impl NgramTable {
    pub fn new(buckets: u64, dim: usize, data: Vec<f32>) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(SbdError::Config(
                "n-gram table needs at least one bucket and one dimension".into(),
            ));
        }
        let expected = buckets as usize * dim;
        if data.len() != expected {
            return Err(SbdError::Shape(format!(
                "n-gram table of {buckets}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SbdError::Numeric(format!(
                "non-finite n-gram component at index {pos}"
            )));
        }
        Ok(NgramTable { buckets, dim, data })
    }

    pub fn zeros(buckets: u64, dim: usize) -> Result<Self> {
        Self::new(buckets, dim, vec![0.0; buckets as usize * dim])
    }

    pub fn buckets(&self) -> u64 {
        self.buckets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, bucket: u64) -> &[f32] {
        let start = bucket as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, bucket: u64) -> &mut [f32] {
        let start = bucket as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Reads the `NGRB` binary layout: magic, version u32, buckets u64,
    /// dim u32, then `buckets * dim` little-endian f32 values.
    pub fn read_from<R: Read>(mut source: R) -> Result<Self> {
        let mut header = [0u8; 20];
        read_exact_or_truncated(&mut source, &mut header, 0)?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != NGRAM_MAGIC {
            return Err(SbdError::BadMagic {
                expected: NGRAM_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != NGRAM_VERSION {
            return Err(SbdError::UnsupportedVersion {
                expected: NGRAM_VERSION,
                found: version,
            });
        }
        let buckets = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let count = (buckets as usize)
            .checked_mul(dim)
            .ok_or_else(|| SbdError::Shape("n-gram table size overflows".into()))?;

        let mut payload = Vec::new();
        source
            .read_to_end(&mut payload)
            .map_err(|e| SbdError::io("reading n-gram table", e))?;
        let expected = count * 4;
        if payload.len() != expected {
            return Err(SbdError::Truncated {
                expected: header.len() + expected,
                actual: header.len() + payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        NgramTable::new(buckets, dim, data)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<()> {
        let err = |e| SbdError::io("writing n-gram table", e);
        sink.write_all(&NGRAM_MAGIC).map_err(err)?;
        sink.write_all(&NGRAM_VERSION.to_le_bytes()).map_err(err)?;
        sink.write_all(&self.buckets.to_le_bytes()).map_err(err)?;
        sink.write_all(&(self.dim as u32).to_le_bytes()).map_err(err)?;
        for v in &self.data {
            sink.write_all(&v.to_le_bytes()).map_err(err)?;
        }
        sink.flush().map_err(err)
    }
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8], consumed: usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(SbdError::Truncated {
                    expected: consumed + buf.len(),
                    actual: consumed + filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(SbdError::io("reading binary header", e)),
        }
    }
    Ok(())
}

/// Word vectors plus the optional n-gram bucket table.
#[derive(Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    word_matrix: Vec<f32>,
    ngrams: Option<NgramTable>,
    min_n: usize,
    max_n: usize,
    oov_zero: AtomicU64,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        EmbeddingTable {
            dim: self.dim,
            vocab: self.vocab.clone(),
            words: self.words.clone(),
            word_matrix: self.word_matrix.clone(),
            ngrams: self.ngrams.clone(),
            min_n: self.min_n,
            max_n: self.max_n,
            oov_zero: AtomicU64::new(self.oov_zero.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.vocab == other.vocab
            && self.words == other.words
            && self.word_matrix == other.word_matrix
            && self.ngrams == other.ngrams
            && self.min_n == other.min_n
            && self.max_n == other.max_n
    }
}

/// Outcome of parsing a vector file.
#[derive(Debug)]
pub struct ParsedVectors {
    pub table: EmbeddingTable,
    /// Number of lines whose word had already been seen; the later line wins.
    pub duplicates: usize,
}

impl EmbeddingTable {
    /// Builds a table from `(word, vector)` pairs. Later duplicates overwrite
    /// earlier ones.
    pub fn from_words<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut table = Self::empty(dim)?;
        for (word, vector) in entries {
            let word = word.into();
            if vector.len() != dim {
                return Err(SbdError::Shape(format!(
                    "vector for {word:?} has {} components, expected {dim}",
                    vector.len()
                )));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(SbdError::Numeric(format!(
                    "non-finite component in vector for {word:?}"
                )));
            }
            table.insert(word, &vector);
        }
        Ok(table)
    }

    fn empty(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(SbdError::Config("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingTable {
            dim,
            vocab: HashMap::new(),
            words: Vec::new(),
            word_matrix: Vec::new(),
            ngrams: None,
            min_n: DEFAULT_MIN_N,
            max_n: DEFAULT_MAX_N,
            oov_zero: AtomicU64::new(0),
        })
    }

    // returns true when `word` was already present
    fn insert(&mut self, word: String, vector: &[f32]) -> bool {
        match self.vocab.get(&word) {
            Some(&row) => {
                self.word_matrix[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector);
                true
            }
            None => {
                self.vocab.insert(word.clone(), self.words.len());
                self.words.push(word);
                self.word_matrix.extend_from_slice(vector);
                false
            }
        }
    }

    /// Attaches a bucket table used to compose vectors for unknown words.
    pub fn with_ngrams(mut self, ngrams: NgramTable, min_n: usize, max_n: usize) -> Result<Self> {
        if ngrams.dim() != self.dim {
            return Err(SbdError::Shape(format!(
                "n-gram table dimension {} differs from word vectors {}",
                ngrams.dim(),
                self.dim
            )));
        }
        if min_n == 0 || min_n > max_n {
            return Err(SbdError::Config(format!(
                "invalid n-gram bounds {min_n}..={max_n}"
            )));
        }
        self.ngrams = Some(ngrams);
        self.min_n = min_n;
        self.max_n = max_n;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn ngrams(&self) -> Option<&NgramTable> {
        self.ngrams.as_ref()
    }

    pub fn ngram_bounds(&self) -> (usize, usize) {
        (self.min_n, self.max_n)
    }

    pub fn row_index(&self, word: &str) -> Option<usize> {
        self.vocab.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_vector(&self, row: usize) -> &[f32] {
        &self.word_matrix[row * self.dim..(row + 1) * self.dim]
    }

    /// Number of lookups that fell back to the zero vector.
    pub fn oov_zero_count(&self) -> u64 {
        self.oov_zero.load(Ordering::Relaxed)
    }

    /// Writes `embed_word(word)` into `out`, which must hold `dim` values.
    pub fn embed_word_into(&self, word: &str, out: &mut [f32]) {
        assert_eq!(out.len(), self.dim, "output slice has the wrong length");
        debug_assert!(word != crate::normalize::SEG_MARKER, "marker passed to embed_word");
        if word == PAD_TOKEN {
            out.fill(0.0);
            return;
        }
        if let Some(row) = self.row_index(word) {
            out.copy_from_slice(self.word_vector(row));
            return;
        }
        out.fill(0.0);
        match &self.ngrams {
            Some(table) if !word.is_empty() => {
                for gram in extract_ngrams(word, self.min_n, self.max_n).unwrap_or_default() {
                    let row = table.row(hash_ngram(&gram, table.buckets()));
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            _ => {
                self.oov_zero.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn embed_word(&self, word: &str) -> Vec<f32> {
        let mut out = vec![0.0; self.dim];
        self.embed_word_into(word, &mut out);
        out
    }

    /// Stacks the vectors of `words` into a row-major `words.len() x dim`
    /// matrix.
    pub fn embed_window<S: AsRef<str>>(&self, words: &[S]) -> Vec<f32> {
        let mut out = vec![0.0; words.len() * self.dim];
        for (word, row) in words.iter().zip(out.chunks_exact_mut(self.dim)) {
            self.embed_word_into(word.as_ref(), row);
        }
        out
    }

    /// Writes the vocabulary in the textual `V D` format using shortest
    /// round-trip float formatting.
    pub fn write_text<W: Write>(&self, mut sink: W) -> Result<()> {
        let err = |e| SbdError::io("writing vector file", e);
        writeln!(sink, "{} {}", self.len(), self.dim).map_err(err)?;
        for (row, word) in self.words.iter().enumerate() {
            sink.write_all(word.as_bytes()).map_err(err)?;
            for v in self.word_vector(row) {
                write!(sink, " {v}").map_err(err)?;
            }
            sink.write_all(b"\n").map_err(err)?;
        }
        sink.flush().map_err(err)
    }
}

/// Parses the textual vector format. Lines are counted from 1 (the header).
pub fn parse_vector_file<R: BufRead>(mut reader: R) -> Result<ParsedVectors> {
    let mut line = String::new();
    let mut line_no = 1;
    read_line(&mut reader, &mut line, line_no)?;
    let mut header = line.split_ascii_whitespace();
    let parse_dim = |field: Option<&str>, what: &str| -> Result<usize> {
        field
            .ok_or_else(|| SbdError::format(1, format!("missing {what} in header")))?
            .parse::<usize>()
            .map_err(|_| SbdError::format(1, format!("malformed {what} in header")))
    };
    let vocab_len = parse_dim(header.next(), "vocabulary size")?;
    let dim = parse_dim(header.next(), "dimension")?;
    if header.next().is_some() {
        return Err(SbdError::format(1, "trailing fields in header"));
    }
    if dim == 0 {
        return Err(SbdError::format(1, "dimension must be positive"));
    }

    let mut table = EmbeddingTable::empty(dim)?;
    let mut duplicates = 0;
    let mut vector = Vec::with_capacity(dim);
    for _ in 0..vocab_len {
        line_no += 1;
        if read_line(&mut reader, &mut line, line_no)? == 0 {
            return Err(SbdError::format(
                line_no,
                format!("expected {vocab_len} vectors, file ends after {}", line_no - 2),
            ));
        }
        let mut fields = line.split_ascii_whitespace();
        let word = fields
            .next()
            .ok_or_else(|| SbdError::format(line_no, "empty line"))?;
        vector.clear();
        for field in fields {
            let v: f32 = field
                .parse()
                .map_err(|_| SbdError::format(line_no, format!("malformed component {field:?}")))?;
            if !v.is_finite() {
                return Err(SbdError::format(line_no, format!("non-finite component {field:?}")));
            }
            vector.push(v);
        }
        if vector.len() != dim {
            return Err(SbdError::format(
                line_no,
                format!("expected {dim} components, found {}", vector.len()),
            ));
        }
        if table.insert(word.to_owned(), &vector) {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate word(s) in vector file; later lines win");
    }
    Ok(ParsedVectors { table, duplicates })
}

fn read_line<R: BufRead>(reader: &mut R, line: &mut String, line_no: usize) -> Result<usize> {
    line.clear();
    reader.read_line(line).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => SbdError::format(line_no, "invalid UTF-8"),
        _ => SbdError::io(format!("reading vector file line {line_no}"), e),
    })
}

/// Character n-grams of `<word>` for lengths `min_n..=max_n`, shorter
/// lengths first and left to right within a length. Each distinct n-gram is
/// listed once, at its first position.
pub fn extract_ngrams(word: &str, min_n: usize, max_n: usize) -> Result<Vec<String>> {
    if word.is_empty() {
        return Err(SbdError::Config("cannot extract n-grams of an empty word".into()));
    }
    if min_n == 0 {
        return Err(SbdError::Config("minimum n-gram length must be positive".into()));
    }
    let wrapped: Vec<char> = std::iter::once('<')
        .chain(word.chars())
        .chain(std::iter::once('>'))
        .collect();
    let longest = max_n.min(wrapped.len());
    let mut grams: Vec<String> = Vec::new();
    for len in min_n..=longest {
        for window in wrapped.windows(len) {
            let gram: String = window.iter().collect();
            if !grams.contains(&gram) {
                grams.push(gram);
            }
        }
    }
    Ok(grams)
}

/// 32-bit FNV-1a of the UTF-8 bytes of `ngram`, reduced modulo `buckets`.
pub fn hash_ngram(ngram: &str, buckets: u64) -> u64 {
    assert!(buckets >= 1, "bucket count must be positive");
    u64::from(fnv1a_32(ngram.as_bytes())) % buckets
}

pub fn fnv1a_32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u32::from(b)).wrapping_mul(FNV_PRIME)
    })
}
