//! Byte-level tokenizer with the chat control tokens appended after the
//! 256 byte ids.

use thiserror::Error;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const START_OF_TURN: u32 = 258;
pub const END_OF_TURN: u32 = 259;
pub const PAD: u32 = 260;
pub const VOCAB_SIZE: usize = 261;

/// Control tokens and their textual names.
pub const SPECIALS: [(u32, &str); 5] = [
    (BOS, "<bos>"),
    (EOS, "<eos>"),
    (START_OF_TURN, "<start_of_turn>"),
    (END_OF_TURN, "<end_of_turn>"),
    (PAD, "<pad>"),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {id} at position {position} is not in the vocabulary")]
    UnknownId { id: u32, position: usize },
    #[error("special token {name} at position {position} (enable special rendering to decode it)")]
    SpecialNotAllowed { name: &'static str, position: usize },
    #[error("dangling escape at byte {0}")]
    DanglingEscape(usize),
}

pub fn is_special(id: u32) -> bool {
    (BOS..VOCAB_SIZE as u32).contains(&id)
}

pub fn special_name(id: u32) -> Option<&'static str> {
    SPECIALS.iter().find(|(i, _)| *i == id).map(|(_, n)| *n)
}

pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn encode_str(text: &str) -> Vec<u32> {
    encode(text.as_bytes())
}

/// Inverse of [`encode`]. Control tokens are rejected unless
/// `render_specials`, in which case they are written as their names.
pub fn decode(ids: &[u32], render_specials: bool) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len());
    for (position, &id) in ids.iter().enumerate() {
        if id < 256 {
            out.push(id as u8);
        } else if let Some(name) = special_name(id) {
            if !render_specials {
                return Err(TokenizerError::SpecialNotAllowed { name, position });
            }
            out.extend_from_slice(name.as_bytes());
        } else {
            return Err(TokenizerError::UnknownId { id, position });
        }
    }
    Ok(out)
}

/// Lossless text form of an arbitrary token stream: control tokens appear as
/// their names, a literal `<` is written `\<` and a literal `\` is `\\`.
pub fn to_stream_text(ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len());
    for (position, &id) in ids.iter().enumerate() {
        match id {
            0x5c => out.extend_from_slice(b"\\\\"),
            0x3c => out.extend_from_slice(b"\\<"),
            0..=255 => out.push(id as u8),
            _ => match special_name(id) {
                Some(name) => out.extend_from_slice(name.as_bytes()),
                None => return Err(TokenizerError::UnknownId { id, position }),
            },
        }
    }
    Ok(out)
}

/// Parses the output of [`to_stream_text`]. An unescaped `<` that does not
/// start a control-token name is taken literally.
pub fn from_stream_text(text: &[u8]) -> Result<Vec<u32>, TokenizerError> {
    let mut out = Vec::with_capacity(text.len());
    let mut i = 0;
    'outer: while i < text.len() {
        match text[i] {
            b'\\' => {
                let next = *text.get(i + 1).ok_or(TokenizerError::DanglingEscape(i))?;
                out.push(next as u32);
                i += 2;
            }
            b'<' => {
                for (id, name) in SPECIALS {
                    if text[i..].starts_with(name.as_bytes()) {
                        out.push(id);
                        i += name.len();
                        continue 'outer;
                    }
                }
                out.push(b'<' as u32);
                i += 1;
            }
            b => {
                out.push(b as u32);
                i += 1;
            }
        }
    }
    Ok(out)
}
