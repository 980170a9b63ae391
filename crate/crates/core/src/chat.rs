//! Conversation schema with `<start_of_turn>` / `<end_of_turn>` control
//! tokens, and a plain-text transcript format for dialogue corpora.
//!
//! Rendered stream for `[user: "Knock knock.", model: "Who's there?"]`:
//!
//! ```text
//! <bos><start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\nWho's there?<end_of_turn><eos>
//! ```
//!
//! Every turn is `<start_of_turn>{role}\n{text}<end_of_turn>`, followed by
//! `\n` unless it is the final model turn of a completed dialogue, which is
//! followed by `<eos>`. A prompt rendered for generation instead ends with
//! `<start_of_turn>model\n`.
//!
//! # Transcript format
//!
//! ```text
//! transcript = dialogue *( blank-line dialogue )
//! dialogue   = 1*turn
//! turn       = role ": " escaped-text LF
//! role       = "user" / "model"
//! ```
//!
//! In `escaped-text` a backslash is written `\\`, a line feed `\n`, a
//! carriage return `\r` and a tab `\t`; all other bytes are literal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{self, BOS, END_OF_TURN, EOS, SPECIALS, START_OF_TURN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Model,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Model => "model",
        }
    }

    fn parse(word: &[u8]) -> Option<Self> {
        match word {
            b"user" => Some(Role::User),
            b"model" => Some(Role::Model),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn model(text: impl Into<String>) -> Self {
        Self { role: Role::Model, text: text.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new(turns: Vec<Turn>) -> Self {
        Self { turns }
    }

    /// Rejects turn texts that contain a control-token name.
    pub fn validate(&self) -> Result<(), ChatError> {
        for (turn, t) in self.turns.iter().enumerate() {
            if let Some((_, name)) = SPECIALS.iter().find(|(_, n)| t.text.contains(n)) {
                return Err(ChatError::ControlTokenInText { turn, token: name });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChatError {
    #[error("turn {turn} contains the control token {token} in its text")]
    ControlTokenInText { turn: usize, token: &'static str },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at token {position}: {kind}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Expected(&'static str),
    UnknownRole(String),
    NestedTurn,
    MissingEndOfTurn,
    UnexpectedToken(u32),
    EosAfterUserTurn,
    TrailingTokens,
    InvalidUtf8,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Expected(what) => write!(f, "expected {what}"),
            Self::UnknownRole(r) => write!(f, "unknown role {r:?}"),
            Self::NestedTurn => f.write_str("<start_of_turn> inside an open turn"),
            Self::MissingEndOfTurn => f.write_str("turn is missing <end_of_turn>"),
            Self::UnexpectedToken(id) => write!(f, "unexpected token {id}"),
            Self::EosAfterUserTurn => f.write_str("<eos> may only follow a model turn"),
            Self::TrailingTokens => f.write_str("tokens after <eos>"),
            Self::InvalidUtf8 => f.write_str("turn text is not valid UTF-8"),
        }
    }
}

/// Renders a dialogue to token ids with a single leading `<bos>`.
pub fn render_dialogue(d: &Dialogue, for_generation: bool) -> Result<Vec<u32>, ChatError> {
    d.validate()?;
    let mut out = vec![BOS];
    let n = d.turns.len();
    for (i, turn) in d.turns.iter().enumerate() {
        out.push(START_OF_TURN);
        out.extend(tokenizer::encode_str(turn.role.as_str()));
        out.push(b'\n' as u32);
        out.extend(tokenizer::encode_str(&turn.text));
        out.push(END_OF_TURN);
        if i + 1 == n && turn.role == Role::Model && !for_generation {
            out.push(EOS);
        } else {
            out.push(b'\n' as u32);
        }
    }
    if for_generation {
        out.push(START_OF_TURN);
        out.extend(tokenizer::encode_str("model\n"));
    }
    Ok(out)
}

/// Strict inverse of [`render_dialogue`] for completed dialogues.
pub fn parse_dialogue(ids: &[u32]) -> Result<Dialogue, ParseError> {
    let err = |position, kind| Err(ParseError { position, kind });
    if ids.is_empty() {
        return Ok(Dialogue::default());
    }
    if ids[0] != BOS {
        return err(0, ParseErrorKind::Expected("<bos>"));
    }
    let mut turns = Vec::new();
    let mut pos = 1;
    while pos < ids.len() {
        if ids[pos] != START_OF_TURN {
            return err(pos, ParseErrorKind::Expected("<start_of_turn>"));
        }
        pos += 1;
        let role_start = pos;
        while pos < ids.len() && ids[pos] != b'\n' as u32 {
            if ids[pos] >= 256 {
                return err(pos, ParseErrorKind::UnexpectedToken(ids[pos]));
            }
            pos += 1;
        }
        if pos == ids.len() {
            return err(pos, ParseErrorKind::Expected("role word followed by newline"));
        }
        let word: Vec<u8> = ids[role_start..pos].iter().map(|&b| b as u8).collect();
        let Some(role) = Role::parse(&word) else {
            return err(role_start, ParseErrorKind::UnknownRole(String::from_utf8_lossy(&word).into_owned()));
        };
        pos += 1;
        let text_start = pos;
        let mut text = Vec::new();
        loop {
            match ids.get(pos) {
                None => return err(pos, ParseErrorKind::MissingEndOfTurn),
                Some(&END_OF_TURN) => break,
                Some(&START_OF_TURN) => return err(pos, ParseErrorKind::NestedTurn),
                Some(&b) if b < 256 => text.push(b as u8),
                Some(&other) => return err(pos, ParseErrorKind::UnexpectedToken(other)),
            }
            pos += 1;
        }
        let text = String::from_utf8(text).map_err(|_| ParseError { position: text_start, kind: ParseErrorKind::InvalidUtf8 })?;
        turns.push(Turn { role, text });
        pos += 1;
        match ids.get(pos) {
            Some(&b) if b == b'\n' as u32 => pos += 1,
            Some(&EOS) => {
                if role != Role::Model {
                    return err(pos, ParseErrorKind::EosAfterUserTurn);
                }
                if pos + 1 != ids.len() {
                    return err(pos + 1, ParseErrorKind::TrailingTokens);
                }
                pos += 1;
            }
            Some(&other) => return err(pos, ParseErrorKind::UnexpectedToken(other)),
            None => return err(pos, ParseErrorKind::Expected("newline or <eos> after <end_of_turn>")),
        }
    }
    Ok(Dialogue { turns })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {line}: expected `user: ` or `model: ` prefix")]
    BadTurnLine { line: usize },
    #[error("line {line}: bad escape sequence")]
    BadEscape { line: usize },
}

fn escape_text(text: &str, out: &mut String) {
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
}

fn unescape_text(s: &str, line: usize) -> Result<String, TranscriptError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            _ => return Err(TranscriptError::BadEscape { line }),
        }
    }
    Ok(out)
}

/// Writes dialogues in the transcript format.
pub fn write_transcript(dialogues: &[Dialogue]) -> String {
    let mut out = String::new();
    for (i, d) in dialogues.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for t in &d.turns {
            out.push_str(t.role.as_str());
            out.push_str(": ");
            escape_text(&t.text, &mut out);
            out.push('\n');
        }
    }
    out
}

/// Reads the transcript format. Runs of blank lines separate dialogues.
pub fn read_transcript(text: &str) -> Result<Vec<Dialogue>, TranscriptError> {
    let mut dialogues = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            if !current.is_empty() {
                dialogues.push(Dialogue::new(std::mem::take(&mut current)));
            }
            continue;
        }
        let (role, rest) = if let Some(r) = line.strip_prefix("user: ") {
            (Role::User, r)
        } else if let Some(r) = line.strip_prefix("model: ") {
            (Role::Model, r)
        } else {
            return Err(TranscriptError::BadTurnLine { line: line_no });
        };
        current.push(Turn { role, text: unescape_text(rest, line_no)? });
    }
    if !current.is_empty() {
        dialogues.push(Dialogue::new(current));
    }
    Ok(dialogues)
}

/// Splits a token stream holding several rendered dialogues at each `<bos>`.
pub fn split_rendered(ids: &[u32]) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &id) in ids.iter().enumerate() {
        if id == BOS {
            if let Some(s) = start {
                out.push(&ids[s..i]);
            }
            start = Some(i);
        }
    }
    match start {
        Some(s) => out.push(&ids[s..]),
        None if !ids.is_empty() => out.push(ids),
        None => {}
    }
    out
}

/// The two dialogues of the reference knock-knock example.
pub fn knock_knock_examples() -> (Dialogue, Dialogue) {
    let first = Dialogue::new(vec![Turn::user("Knock knock."), Turn::model("Who's there?")]);
    let second = Dialogue::new(vec![
        Turn::user("Knock knock."),
        Turn::model("Who's there?"),
        Turn::user("Gemma."),
        Turn::model("Gemma who?"),
    ]);
    (first, second)
}
