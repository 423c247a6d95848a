//! Corpus ingestion, vocabularies and truncated-BPTT batch windows.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Word,
    Character,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Word => "word",
            Level::Character => "char",
        })
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "word" => Ok(Level::Word),
            "char" | "character" => Ok(Level::Character),
            other => Err(format!("unknown corpus level `{other}` (expected word|char)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Bijection between token byte strings and ids `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, usize>,
    unk_id: Option<usize>,
    eos_id: Option<usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Ingestion(format!(
                    "duplicate token `{}`",
                    String::from_utf8_lossy(t)
                )));
            }
        }
        if tokens.len() < 2 {
            return Err(Error::Ingestion(format!(
                "vocabulary needs at least 2 tokens, found {}",
                tokens.len()
            )));
        }
        let unk_id = ids.get(UNK.as_bytes()).copied();
        let eos_id = ids.get(EOS.as_bytes()).copied();
        Ok(Vocabulary {
            tokens,
            ids,
            unk_id,
            eos_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &[u8]) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&[u8]> {
        self.tokens.get(id).map(|t| t.as_slice())
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.unk_id
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.eos_id
    }

    /// Map text to ids. Unknown tokens become `<unk>` when the vocabulary has
    /// one, and are an error otherwise.
    pub fn encode(&self, text: &[u8], level: Level) -> Result<Vec<usize>> {
        tokenize(text, level)
            .map(|tok| {
                self.id(tok).or(self.unk_id).ok_or_else(|| {
                    Error::Ingestion(format!(
                        "token `{}` is not in the vocabulary",
                        String::from_utf8_lossy(tok)
                    ))
                })
            })
            .collect()
    }

    /// One hex-encoded token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            for b in t {
                out.push_str(&format!("{b:02x}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.len() % 2 != 0 || line.is_empty() {
                return Err(Error::Ingestion(format!("vocabulary line {}: bad hex", n + 1)));
            }
            let bytes = (0..line.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&line[i..i + 2], 16))
                .collect::<std::result::Result<Vec<u8>, _>>()
                .map_err(|e| Error::Ingestion(format!("vocabulary line {}: {e}", n + 1)))?;
            tokens.push(bytes);
        }
        Self::from_tokens(tokens)
    }
}

/// Iterate tokens: whitespace-separated words with `<eos>` closing each line,
/// or single bytes.
fn tokenize(text: &[u8], level: Level) -> Box<dyn Iterator<Item = &[u8]> + '_> {
    match level {
        Level::Character => Box::new(text.chunks(1)),
        Level::Word => {
            let body = text.strip_suffix(b"\n").unwrap_or(text);
            Box::new(body.split(|&b| b == b'\n').flat_map(|line| {
                line.split(|b| b.is_ascii_whitespace())
                    .filter(|w| !w.is_empty())
                    .chain(std::iter::once(EOS.as_bytes()))
            }))
        }
    }
}

/// Build a vocabulary with ids assigned in order of first appearance.
pub fn build_vocab(text: &[u8], level: Level) -> Result<Vocabulary> {
    if text.is_empty() {
        return Err(Error::Ingestion("empty input".into()));
    }
    let mut seen = HashMap::new();
    let mut tokens = Vec::new();
    for tok in tokenize(text, level) {
        if !seen.contains_key(tok) {
            seen.insert(tok.to_vec(), tokens.len());
            tokens.push(tok.to_vec());
        }
    }
    Vocabulary::from_tokens(tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub level: Level,
    pub split: Split,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>, level: Level, split: Split) -> Self {
        TokenStream { ids, level, split }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_id(&self) -> Option<usize> {
        self.ids.iter().copied().max()
    }
}

/// 90% / 5% / 5% split with floored boundaries.
pub fn split_char_corpus(
    stream: &TokenStream,
) -> Result<(TokenStream, TokenStream, TokenStream)> {
    let n = stream.len();
    if n < 10 {
        return Err(Error::Ingestion(format!(
            "stream of {n} tokens is too short to split (need 10)"
        )));
    }
    let train_end = n * 9 / 10;
    let valid_end = n * 19 / 20;
    if valid_end == train_end || valid_end == n {
        return Err(Error::Ingestion(format!(
            "stream of {n} tokens leaves an empty validation or test split"
        )));
    }
    let part = |r: std::ops::Range<usize>, split| {
        TokenStream::new(stream.ids[r].to_vec(), stream.level, split)
    };
    Ok((
        part(0..train_end, Split::Train),
        part(train_end..valid_end, Split::Valid),
        part(valid_end..n, Split::Test),
    ))
}

/// One `B x steps` slice of the batched stream. Row-major: `inputs[b * steps + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub index: usize,
    pub batch: usize,
    pub steps: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// The stream cut into `batch_size` equal contiguous segments, each read in
/// consecutive windows of `unroll` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub batch_size: usize,
    pub unroll: usize,
    pub segment_len: usize,
    pub stream_offsets: Vec<usize>,
}

impl BatchLayout {
    pub fn new(stream_len: usize, batch_size: usize, unroll: usize) -> Result<Self> {
        if batch_size == 0 || unroll == 0 {
            return Err(Error::Layout("batch size and unroll must be positive".into()));
        }
        let segment_len = stream_len / batch_size;
        if segment_len < 2 {
            return Err(Error::Layout(format!(
                "{stream_len} tokens cannot fill {batch_size} rows of at least 2 tokens"
            )));
        }
        Ok(BatchLayout {
            batch_size,
            unroll,
            segment_len,
            stream_offsets: (0..batch_size).map(|b| b * segment_len).collect(),
        })
    }

    /// Full windows only.
    pub fn full_windows(&self) -> usize {
        (self.segment_len - 1) / self.unroll
    }

    /// Full windows plus a trailing partial window when targets remain.
    pub fn covering_windows(&self) -> usize {
        (self.segment_len - 1).div_ceil(self.unroll)
    }

    pub fn window(&self, ids: &[usize], index: usize) -> Window {
        let start = index * self.unroll;
        let steps = self.unroll.min(self.segment_len - 1 - start);
        let mut inputs = Vec::with_capacity(self.batch_size * steps);
        let mut targets = Vec::with_capacity(self.batch_size * steps);
        for &off in &self.stream_offsets {
            let base = off + start;
            inputs.extend_from_slice(&ids[base..base + steps]);
            targets.extend_from_slice(&ids[base + 1..base + 1 + steps]);
        }
        Window {
            index,
            batch: self.batch_size,
            steps,
            inputs,
            targets,
        }
    }
}

/// Training windows: targets shifted one position, trailing partial window dropped.
pub fn make_windows(stream: &TokenStream, batch_size: usize, unroll: usize) -> Result<Vec<Window>> {
    let layout = training_layout(stream.len(), batch_size, unroll)?;
    Ok((0..layout.full_windows())
        .map(|w| layout.window(&stream.ids, w))
        .collect())
}

pub fn training_layout(stream_len: usize, batch_size: usize, unroll: usize) -> Result<BatchLayout> {
    let layout = BatchLayout::new(stream_len, batch_size, unroll)?;
    if layout.segment_len < unroll + 1 {
        return Err(Error::Layout(format!(
            "segment length {} is shorter than unroll + 1 = {} ({stream_len} tokens, batch {batch_size})",
            layout.segment_len,
            unroll + 1
        )));
    }
    Ok(layout)
}

/// Evaluation windows, covering every target of each segment exactly once.
pub fn eval_windows(stream: &TokenStream, batch_size: usize, unroll: usize) -> Result<Vec<Window>> {
    let layout = BatchLayout::new(stream.len(), batch_size, unroll)?;
    Ok((0..layout.covering_windows())
        .map(|w| layout.window(&stream.ids, w))
        .collect())
}

/// A vocabulary and its three encoded splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub level: Level,
    pub vocab: Vocabulary,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: TokenStream,
}

impl Corpus {
    /// Build from one text, split 90/5/5 after encoding.
    pub fn from_text(text: &[u8], level: Level) -> Result<Self> {
        let vocab = build_vocab(text, level)?;
        let all = TokenStream::new(vocab.encode(text, level)?, level, Split::Train);
        let (train, valid, test) = split_char_corpus(&all)?;
        Ok(Corpus {
            level,
            vocab,
            train,
            valid,
            test,
        })
    }

    /// Build from pre-split texts; the vocabulary covers all three.
    pub fn from_splits(train: &[u8], valid: &[u8], test: &[u8], level: Level) -> Result<Self> {
        let mut joined = Vec::with_capacity(train.len() + valid.len() + test.len() + 2);
        for part in [train, valid, test] {
            joined.extend_from_slice(part);
            if level == Level::Word && !part.ends_with(b"\n") {
                joined.push(b'\n');
            }
        }
        let vocab = build_vocab(&joined, level)?;
        let encode = |text: &[u8], split| -> Result<TokenStream> {
            let ids = vocab.encode(text, level)?;
            if ids.len() < 2 {
                return Err(Error::Ingestion(format!("{split:?} split has fewer than 2 tokens")));
            }
            Ok(TokenStream::new(ids, level, split))
        };
        Ok(Corpus {
            level,
            train: encode(train, Split::Train)?,
            valid: encode(valid, Split::Valid)?,
            test: encode(test, Split::Test)?,
            vocab,
        })
    }

    /// A directory holds `train.txt`/`valid.txt`/`test.txt` (or the
    /// `ptb.*.txt` names); a file is split 90/5/5.
    pub fn load(path: &Path, level: Level) -> Result<Self> {
        if path.is_dir() {
            let find = |name: &str| -> Result<Vec<u8>> {
                for candidate in [format!("{name}.txt"), format!("ptb.{name}.txt")] {
                    let p = path.join(candidate);
                    if p.is_file() {
                        return Ok(fs::read(p)?);
                    }
                }
                Err(Error::Ingestion(format!(
                    "{} has no {name}.txt",
                    path.display()
                )))
            };
            Self::from_splits(&find("train")?, &find("valid")?, &find("test")?, level)
        } else {
            let text = fs::read(path)
                .map_err(|e| Error::Ingestion(format!("reading {}: {e}", path.display())))?;
            Self::from_text(&text, level)
        }
    }
}
