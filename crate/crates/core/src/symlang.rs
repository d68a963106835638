//! Symbolic token language shared by prompts and policy outputs.
//!
//! Vocabulary order is fixed: the twelve structural and sign tokens come
//! first, followed by one `DIM_j` token per preference dimension. Checkpoints
//! store embeddings by token id, so this order must never change.
//!
//! A policy output has the shape
//!
//! ```text
//! reasoning* THINK_CLOSE ANS_OPEN (DIM_j POS|NEG)+ ANS_CLOSE EOS
//! ```
//!
//! where reasoning tokens are any non-structural tokens. The opening
//! `THINK_OPEN` belongs to the prompt and is never generated.

use std::fmt;

use crate::error::{Error, Result};
use crate::prefworld::{Attrs, Episode, Signal};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u16);

impl Token {
    pub const BOS: Token = Token(0);
    pub const EOS: Token = Token(1);
    pub const THINK_OPEN: Token = Token(2);
    pub const THINK_CLOSE: Token = Token(3);
    pub const ANS_OPEN: Token = Token(4);
    pub const ANS_CLOSE: Token = Token(5);
    pub const SIG_SEP: Token = Token(6);
    pub const CHOSEN: Token = Token(7);
    pub const REJECTED: Token = Token(8);
    pub const UGC: Token = Token(9);
    pub const POS: Token = Token(10);
    pub const NEG: Token = Token(11);

    /// Number of tokens before the first dimension token.
    pub const FIXED: usize = 12;

    pub fn dim(j: usize) -> Token {
        Token((Self::FIXED + j) as u16)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    /// Dimension index for `DIM_j` tokens.
    pub fn dim_index(self) -> Option<usize> {
        self.id().checked_sub(Self::FIXED)
    }

    /// Sign carried by `POS` / `NEG`.
    pub fn sign(self) -> Option<i8> {
        match self {
            Token::POS => Some(1),
            Token::NEG => Some(-1),
            _ => None,
        }
    }

    pub fn from_sign(s: i8) -> Token {
        if s > 0 {
            Token::POS
        } else {
            Token::NEG
        }
    }

    /// Structural tokens may not appear in the reasoning span.
    pub fn is_structural(self) -> bool {
        self.id() < Token::POS.id()
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = [
            "BOS",
            "EOS",
            "THINK_OPEN",
            "THINK_CLOSE",
            "ANS_OPEN",
            "ANS_CLOSE",
            "SIG_SEP",
            "CHOSEN",
            "REJECTED",
            "UGC",
            "POS",
            "NEG",
        ];
        match self.dim_index() {
            Some(j) => write!(f, "DIM_{j}"),
            None => f.write_str(NAMES[self.id()]),
        }
    }
}

/// Vocabulary for a world with `dims` preference dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub dims: usize,
}

impl Vocab {
    pub fn new(dims: usize) -> Self {
        Vocab { dims }
    }

    pub fn size(&self) -> usize {
        Token::FIXED + self.dims
    }

    pub fn contains(&self, t: Token) -> bool {
        t.id() < self.size()
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..self.size() as u16).map(Token)
    }

    pub fn from_ids(&self, ids: &[i64]) -> Result<Vec<Token>> {
        ids.iter()
            .map(|&id| {
                if id >= 0 && (id as usize) < self.size() {
                    Ok(Token(id as u16))
                } else {
                    Err(Error::invalid(format!(
                        "token id {id} outside vocabulary of size {}",
                        self.size()
                    )))
                }
            })
            .collect()
    }
}

/// Machine-readable description: one signed entry per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParsedDescription {
    pub q: Vec<i8>,
}

impl ParsedDescription {
    pub fn zeros(dims: usize) -> Self {
        ParsedDescription { q: vec![0; dims] }
    }

    pub fn negated(&self) -> Self {
        ParsedDescription {
            q: self.q.iter().map(|v| -v).collect(),
        }
    }

    pub fn dot(&self, a: &[i8]) -> i32 {
        self.q.iter().zip(a).map(|(&x, &y)| x as i32 * y as i32).sum()
    }

    /// Canonical token form: `(DIM_j, sign)` for each nonzero entry in
    /// ascending `j`.
    pub fn to_tokens(&self) -> Vec<Token> {
        attr_tokens(&self.q)
    }

    /// Full answer wrapper `THINK_CLOSE ANS_OPEN ... ANS_CLOSE EOS` appended
    /// to `reasoning`.
    pub fn wrap(&self, reasoning: &[Token]) -> Vec<Token> {
        let mut out = reasoning.to_vec();
        out.push(Token::THINK_CLOSE);
        out.push(Token::ANS_OPEN);
        out.extend(self.to_tokens());
        out.push(Token::ANS_CLOSE);
        out.push(Token::EOS);
        out
    }

    /// Human-readable rendering such as `+dim0 -dim3`.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self
            .q
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(j, &v)| format!("{}dim{j}", if v > 0 { '+' } else { '-' }))
            .collect();
        parts.join(" ")
    }
}

/// A format-valid output split into its reasoning and description spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyOutput {
    pub tokens: Vec<Token>,
    pub reasoning: std::ops::Range<usize>,
    pub description: std::ops::Range<usize>,
}

impl PolicyOutput {
    pub fn reasoning_tokens(&self) -> &[Token] {
        &self.tokens[self.reasoning.clone()]
    }

    pub fn description_tokens(&self) -> &[Token] {
        &self.tokens[self.description.clone()]
    }

    /// `|r| + |d|`, the per-sequence normaliser used by both training losses.
    pub fn content_len(&self) -> usize {
        self.reasoning.len() + self.description.len()
    }
}

/// Outcome of [`parse_output`]; a format failure is a value, not an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Valid {
        output: PolicyOutput,
        description: ParsedDescription,
    },
    FormatFailure,
}

impl Parsed {
    pub fn description(&self) -> Option<&ParsedDescription> {
        match self {
            Parsed::Valid { description, .. } => Some(description),
            Parsed::FormatFailure => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, Parsed::Valid { .. })
    }
}

fn attr_tokens(a: &[i8]) -> Vec<Token> {
    let mut out = Vec::new();
    for (j, &v) in a.iter().enumerate() {
        if v != 0 {
            out.push(Token::dim(j));
            out.push(Token::from_sign(v));
        }
    }
    out
}

fn check_attrs(vocab: Vocab, a: &Attrs) -> Result<()> {
    if a.len() != vocab.dims {
        return Err(Error::invalid(format!(
            "attribute vector has {} entries but the world has {} dimensions",
            a.len(),
            vocab.dims
        )));
    }
    if let Some(v) = a.iter().find(|v| !(-1..=1).contains(*v)) {
        return Err(Error::invalid(format!("attribute value {v} not in {{-1,0,1}}")));
    }
    Ok(())
}

/// Serialise an episode's signals into a prompt ending with `THINK_OPEN`.
/// The held-out test pair is never part of the prompt.
pub fn encode_episode(vocab: Vocab, episode: &Episode) -> Result<Vec<Token>> {
    if episode.signals.is_empty() {
        return Err(Error::invalid("episode has no signals"));
    }
    let mut out = vec![Token::BOS];
    for signal in &episode.signals {
        out.push(Token::SIG_SEP);
        match signal {
            Signal::Pair(pair) => {
                check_attrs(vocab, &pair.chosen)?;
                check_attrs(vocab, &pair.rejected)?;
                out.push(Token::CHOSEN);
                out.extend(attr_tokens(&pair.chosen));
                out.push(Token::REJECTED);
                out.extend(attr_tokens(&pair.rejected));
            }
            Signal::Ugc(attrs) => {
                check_attrs(vocab, attrs)?;
                out.push(Token::UGC);
                out.extend(attr_tokens(attrs));
            }
        }
    }
    out.push(Token::THINK_OPEN);
    Ok(out)
}

/// Inverse of [`encode_episode`] on the signal list. Returns `None` for
/// token sequences that no episode encodes to.
pub fn decode_signals(vocab: Vocab, prompt: &[Token]) -> Option<Vec<Signal>> {
    let body = prompt.strip_prefix(&[Token::BOS])?.strip_suffix(&[Token::THINK_OPEN])?;
    let read_attrs = |toks: &[Token]| -> Option<Attrs> {
        if toks.len() % 2 != 0 {
            return None;
        }
        let mut a = vec![0i8; vocab.dims];
        let mut last: Option<usize> = None;
        for pair in toks.chunks(2) {
            let j = pair[0].dim_index().filter(|&j| j < vocab.dims)?;
            if last.is_some_and(|l| l >= j) {
                return None;
            }
            a[j] = pair[1].sign()?;
            last = Some(j);
        }
        Some(a)
    };
    let mut signals = Vec::new();
    for chunk in body.split(|&t| t == Token::SIG_SEP).skip(1) {
        match chunk.first()? {
            &Token::CHOSEN => {
                let split = chunk.iter().position(|&t| t == Token::REJECTED)?;
                signals.push(Signal::Pair(crate::prefworld::PreferencePair {
                    post_id: signals.len() as u64,
                    chosen: read_attrs(&chunk[1..split])?,
                    rejected: read_attrs(&chunk[split + 1..])?,
                }));
            }
            &Token::UGC => signals.push(Signal::Ugc(read_attrs(&chunk[1..])?)),
            _ => return None,
        }
    }
    if body.first() != Some(&Token::SIG_SEP) || signals.is_empty() {
        return None;
    }
    Some(signals)
}

/// Output-grammar check implementing the format gate of the offline reward.
///
/// A hand-written recogniser, kept separate from [`parse_output`] so the two
/// can be cross-checked.
pub fn check_format(vocab: Vocab, tokens: &[Token]) -> bool {
    #[derive(PartialEq)]
    enum State {
        Reasoning,
        AfterThinkClose,
        ExpectDim,
        ExpectSign,
        AfterSign,
        AfterAnsClose,
        Done,
    }
    let mut state = State::Reasoning;
    let mut seen = vec![false; vocab.dims];
    for &t in tokens {
        if !vocab.contains(t) {
            return false;
        }
        state = match state {
            State::Reasoning if t == Token::THINK_CLOSE => State::AfterThinkClose,
            State::Reasoning if !t.is_structural() => State::Reasoning,
            State::AfterThinkClose if t == Token::ANS_OPEN => State::ExpectDim,
            State::ExpectDim | State::AfterSign if t.dim_index().is_some() => {
                let j = t.dim_index().unwrap();
                if std::mem::replace(&mut seen[j], true) {
                    return false;
                }
                State::ExpectSign
            }
            State::ExpectSign if t.sign().is_some() => State::AfterSign,
            State::AfterSign if t == Token::ANS_CLOSE => State::AfterAnsClose,
            State::AfterAnsClose if t == Token::EOS => State::Done,
            _ => return false,
        };
    }
    state == State::Done
}

/// Split an output into reasoning and description, or report a format
/// failure.
pub fn parse_output(vocab: Vocab, tokens: &[Token]) -> Parsed {
    let fail = Parsed::FormatFailure;
    if tokens.iter().any(|&t| !vocab.contains(t)) {
        return fail;
    }
    let Some(think_close) = tokens.iter().position(|&t| t == Token::THINK_CLOSE) else {
        return fail;
    };
    if tokens[..think_close].iter().any(|t| t.is_structural()) {
        return fail;
    }
    let open = think_close + 1;
    if tokens.get(open) != Some(&Token::ANS_OPEN) {
        return fail;
    }
    // First ANS_CLOSE after the opening tag closes the answer span.
    let Some(close) = tokens[open..].iter().position(|&t| t == Token::ANS_CLOSE).map(|i| i + open)
    else {
        return fail;
    };
    if tokens.len() != close + 2 || tokens[close + 1] != Token::EOS {
        return fail;
    }
    let span = &tokens[open + 1..close];
    if span.is_empty() || span.len() % 2 != 0 {
        return fail;
    }
    let mut q = vec![0i8; vocab.dims];
    for pair in span.chunks(2) {
        let (Some(j), Some(s)) = (pair[0].dim_index(), pair[1].sign()) else {
            return fail;
        };
        if q[j] != 0 {
            return fail;
        }
        q[j] = s;
    }
    Parsed::Valid {
        output: PolicyOutput {
            tokens: tokens.to_vec(),
            reasoning: 0..think_close,
            description: open + 1..close,
        },
        description: ParsedDescription { q },
    }
}
