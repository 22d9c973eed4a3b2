//! Unified instruction-phoneme input: a line-oriented text format carrying a
//! video caption, one or two per-speaker audio captions and a tagged
//! transcript, plus the toy grapheme-to-phoneme table and the token
//! serialization fed to the conditioning stack.
//!
//! ```text
//! video: a woman in a park
//! audio: [S0] young female calm [S1] older male
//! text: [S0] hi there [S1] hello
//! ```
//!
//! Untagged audio or text is attributed to `[S0]`. Music lyrics and speech
//! share the same phoneme path.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of the toy phoneme alphabet: `a..z` plus the word boundary.
pub const G2P_ALPHABET: usize = 27;
/// Phoneme id of the word boundary (space).
pub const SPACE_PHONEME: u8 = 26;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstructionError {
    #[error("missing `{0}:` section")]
    MissingSection(&'static str),
    #[error("duplicate `{0}:` section")]
    DuplicateSection(&'static str),
    #[error("line {line}: expected `video:`, `audio:` or `text:`")]
    MalformedLine { line: usize },
    #[error("unknown speaker tag `{0}`")]
    UnknownTag(String),
    #[error("speaker tags do not match: {0}")]
    TagMismatch(String),
    #[error("character {0:?} has no phoneme")]
    UnmappableCharacter(char),
    #[error("caption word `{0}` is not in the vocabulary")]
    VocabMiss(String),
    #[error("malformed token sequence: {0}")]
    MalformedTokens(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeakerTag {
    S0,
    S1,
}

impl SpeakerTag {
    pub fn index(self) -> usize {
        match self {
            SpeakerTag::S0 => 0,
            SpeakerTag::S1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(SpeakerTag::S0),
            1 => Some(SpeakerTag::S1),
            _ => None,
        }
    }

    fn parse(tag: &str) -> Result<Self, InstructionError> {
        match tag {
            "[S0]" => Ok(SpeakerTag::S0),
            "[S1]" => Ok(SpeakerTag::S1),
            other => Err(InstructionError::UnknownTag(other.to_string())),
        }
    }
}

impl fmt::Display for SpeakerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[S{}]", self.index())
    }
}

/// Phoneme ids, each below the alphabet size of whatever produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhonemeSequence(pub Vec<u8>);

impl PhonemeSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u8] {
        &self.0
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.0.iter().map(|&p| usize::from(p)).collect()
    }

    /// Inverse of [`g2p`] for ids produced by it.
    pub fn to_text(&self) -> String {
        self.0
            .iter()
            .map(|&p| match p {
                SPACE_PHONEME => ' ',
                p if p < 26 => char::from(b'a' + p),
                _ => '?',
            })
            .collect()
    }
}

impl From<Vec<u8>> for PhonemeSequence {
    fn from(v: Vec<u8>) -> Self {
        Self(v)
    }
}

/// Lowercases, drops everything except `a..z` and whitespace, and collapses
/// whitespace runs to a single space.
pub fn normalize_transcript(text: &str) -> String {
    let lowered: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_ascii_lowercase() || c.is_whitespace())
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Character-table G2P over normalized text: `a..z → 0..25`, space `→ 26`.
pub fn g2p(transcript: &str) -> Result<PhonemeSequence, InstructionError> {
    transcript
        .chars()
        .map(|c| match c {
            'a'..='z' => Ok(c as u8 - b'a'),
            ' ' => Ok(SPACE_PHONEME),
            other => Err(InstructionError::UnmappableCharacter(other)),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(PhonemeSequence)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tag: SpeakerTag,
    pub phonemes: PhonemeSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionBundle {
    pub video_caption: Vec<String>,
    /// Indexed by speaker tag.
    pub audio_captions: Vec<Vec<String>>,
    pub segments: Vec<Segment>,
    pub n_speakers: usize,
}

impl InstructionBundle {
    /// All phonemes in segment order.
    pub fn phonemes(&self) -> PhonemeSequence {
        PhonemeSequence(
            self.segments
                .iter()
                .flat_map(|s| s.phonemes.0.iter().copied())
                .collect(),
        )
    }

    /// Checks the structural invariants; used by the parser and the token decoder.
    pub fn validate(&self) -> Result<(), InstructionError> {
        let mut seen = [false; 2];
        for s in &self.segments {
            seen[s.tag.index()] = true;
        }
        if seen[1] && !seen[0] {
            return Err(InstructionError::TagMismatch("[S1] used without [S0]".into()));
        }
        let distinct = seen.iter().filter(|&&b| b).count().max(1);
        if distinct != self.n_speakers {
            return Err(InstructionError::TagMismatch(format!(
                "{} speakers declared, {distinct} used",
                self.n_speakers
            )));
        }
        if self.audio_captions.len() != self.n_speakers {
            return Err(InstructionError::TagMismatch(format!(
                "{} audio captions for {} speakers",
                self.audio_captions.len(),
                self.n_speakers
            )));
        }
        Ok(())
    }
}

fn caption_words(text: &str) -> Vec<String> {
    normalize_transcript(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Splits `value` into `(tag, text)` chunks. Text before the first tag is
/// attributed to `[S0]`, and only kept when non-blank.
fn split_tagged(value: &str) -> Result<Vec<(SpeakerTag, String)>, InstructionError> {
    let mut out = Vec::new();
    let mut current = SpeakerTag::S0;
    let mut explicit = false;
    let mut rest = value;
    loop {
        match rest.find('[') {
            Some(open) => {
                let before = &rest[..open];
                if explicit || !before.trim().is_empty() {
                    out.push((current, before.to_string()));
                }
                let close = rest[open..]
                    .find(']')
                    .map(|c| open + c)
                    .ok_or_else(|| InstructionError::UnknownTag(rest[open..].to_string()))?;
                current = SpeakerTag::parse(&rest[open..=close])?;
                explicit = true;
                rest = &rest[close + 1..];
            }
            None => {
                if explicit || !rest.trim().is_empty() {
                    out.push((current, rest.to_string()));
                }
                return Ok(out);
            }
        }
    }
}

/// Parses the three-line instruction format.
pub fn parse_instruction(text: &str) -> Result<InstructionBundle, InstructionError> {
    let mut video = None;
    let mut audio = None;
    let mut transcript = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, slot) = if let Some(v) = line.strip_prefix("video:") {
            ("video", (&mut video, v))
        } else if let Some(v) = line.strip_prefix("audio:") {
            ("audio", (&mut audio, v))
        } else if let Some(v) = line.strip_prefix("text:") {
            ("text", (&mut transcript, v))
        } else {
            return Err(InstructionError::MalformedLine { line: n + 1 });
        };
        if slot.0.is_some() {
            return Err(InstructionError::DuplicateSection(key));
        }
        *slot.0 = Some(slot.1.trim());
    }
    let video = video.ok_or(InstructionError::MissingSection("video"))?;
    let audio = audio.ok_or(InstructionError::MissingSection("audio"))?;
    let transcript = transcript.ok_or(InstructionError::MissingSection("text"))?;

    let mut audio_captions: Vec<Option<Vec<String>>> = vec![None, None];
    let audio_chunks = split_tagged(audio)?;
    if audio_chunks.is_empty() {
        audio_captions[0] = Some(Vec::new());
    }
    for (tag, chunk) in audio_chunks {
        let slot = &mut audio_captions[tag.index()];
        if slot.is_some() {
            return Err(InstructionError::TagMismatch(format!("{tag} described twice in audio")));
        }
        *slot = Some(caption_words(&chunk));
    }
    let audio_captions: Vec<Vec<String>> = match audio_captions.as_slice() {
        [Some(a), None] => vec![a.clone()],
        [Some(a), Some(b)] => vec![a.clone(), b.clone()],
        _ => return Err(InstructionError::TagMismatch("audio describes [S1] without [S0]".into())),
    };

    let segments = split_tagged(transcript)?
        .into_iter()
        .map(|(tag, chunk)| {
            let phonemes = g2p(&normalize_transcript(&chunk))?;
            Ok(Segment { tag, phonemes })
        })
        .collect::<Result<Vec<_>, InstructionError>>()?;
    for s in &segments {
        if s.tag.index() >= audio_captions.len() {
            return Err(InstructionError::TagMismatch(format!("{} has no audio description", s.tag)));
        }
    }
    let bundle = InstructionBundle {
        video_caption: caption_words(video),
        n_speakers: audio_captions.len(),
        audio_captions,
        segments,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Caption vocabulary. Special tokens occupy the ids after the words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

const DEFAULT_WORDS: &[&str] = &[
    "a", "an", "the", "and", "in", "on", "of", "with", "at", "by", "is", "are", "two", "one",
    "people", "person", "speaker", "speakers", "talking", "speaking", "singing", "voice",
    "voices", "female", "male", "woman", "man", "girl", "boy", "young", "old", "older",
    "calm", "happy", "sad", "angry", "excited", "soft", "loud", "low", "high", "pitch",
    "park", "room", "street", "office", "studio", "window", "rain", "heavy", "wind", "sound",
    "music", "song", "dialogue", "conversation", "close", "up", "face", "camera", "indoors",
    "outdoors", "background", "noise", "quiet", "there", "hello", "hi", "speech",
];

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(DEFAULT_WORDS.iter().map(|w| w.to_string()))
    }
}

/// One element of the serialized conditioning sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Sep,
    Tag(SpeakerTag),
    Word(u32),
    Phoneme(u8),
}

impl Vocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut out = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if !out.index.contains_key(&w) {
                out.index.insert(w.clone(), out.words.len() as u32);
                out.words.push(w);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Rows needed in an embedding table covering words and the three specials.
    pub fn table_rows(&self) -> usize {
        self.words.len() + 3
    }

    pub fn id(&self, word: &str) -> Result<u32, InstructionError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| InstructionError::VocabMiss(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Embedding-table row for a caption-side token. Phonemes live in their own table.
    pub fn table_index(&self, token: Token) -> Option<usize> {
        let n = self.words.len();
        match token {
            Token::Word(w) => Some(w as usize),
            Token::Sep => Some(n),
            Token::Tag(t) => Some(n + 1 + t.index()),
            Token::Phoneme(_) => None,
        }
    }
}

/// `[video] SEP [audio] SEP [tag-prefixed phonemes]`. Audio captions carry a
/// tag prefix only in the two-speaker case.
pub fn encode_bundle(bundle: &InstructionBundle, vocab: &Vocab) -> Result<Vec<Token>, InstructionError> {
    let mut out = Vec::new();
    for w in &bundle.video_caption {
        out.push(Token::Word(vocab.id(w)?));
    }
    out.push(Token::Sep);
    let tagged = bundle.audio_captions.len() > 1;
    for (i, caption) in bundle.audio_captions.iter().enumerate() {
        if tagged {
            let tag = SpeakerTag::from_index(i)
                .ok_or_else(|| InstructionError::TagMismatch("more than two speakers".into()))?;
            out.push(Token::Tag(tag));
        }
        for w in caption {
            out.push(Token::Word(vocab.id(w)?));
        }
    }
    out.push(Token::Sep);
    for s in &bundle.segments {
        out.push(Token::Tag(s.tag));
        out.extend(s.phonemes.0.iter().map(|&p| Token::Phoneme(p)));
    }
    Ok(out)
}

/// Only the caption part of [`encode_bundle`] (everything up to the second separator).
pub fn encode_captions(bundle: &InstructionBundle, vocab: &Vocab) -> Result<Vec<Token>, InstructionError> {
    let mut tokens = encode_bundle(bundle, vocab)?;
    let second_sep = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Token::Sep)
        .nth(1)
        .map(|(i, _)| i)
        .expect("encode_bundle emits two separators");
    tokens.truncate(second_sep);
    Ok(tokens)
}

/// Inverse of [`encode_bundle`].
pub fn decode_bundle(tokens: &[Token], vocab: &Vocab) -> Result<InstructionBundle, InstructionError> {
    let malformed = |m: &str| InstructionError::MalformedTokens(m.to_string());
    let word = |id: u32| {
        vocab
            .word(id)
            .map(str::to_string)
            .ok_or_else(|| InstructionError::MalformedTokens(format!("word id {id} out of range")))
    };
    let mut sections = tokens.split(|t| *t == Token::Sep);
    let video_part = sections.next().ok_or_else(|| malformed("missing video section"))?;
    let audio_part = sections.next().ok_or_else(|| malformed("missing audio section"))?;
    let text_part = sections.next().ok_or_else(|| malformed("missing text section"))?;
    if sections.next().is_some() {
        return Err(malformed("too many separators"));
    }

    let video_caption = video_part
        .iter()
        .map(|t| match t {
            Token::Word(id) => word(*id),
            _ => Err(malformed("non-word in video caption")),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut audio_captions: Vec<Vec<String>> = Vec::new();
    match audio_part.first() {
        Some(Token::Tag(_)) => {
            for t in audio_part {
                match t {
                    Token::Tag(tag) => {
                        if tag.index() != audio_captions.len() {
                            return Err(malformed("audio tags out of order"));
                        }
                        audio_captions.push(Vec::new());
                    }
                    Token::Word(id) => audio_captions
                        .last_mut()
                        .expect("first token is a tag")
                        .push(word(*id)?),
                    _ => return Err(malformed("unexpected token in audio caption")),
                }
            }
        }
        _ => {
            let words = audio_part
                .iter()
                .map(|t| match t {
                    Token::Word(id) => word(*id),
                    _ => Err(malformed("unexpected token in audio caption")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            audio_captions.push(words);
        }
    }

    let mut segments: Vec<Segment> = Vec::new();
    for t in text_part {
        match t {
            Token::Tag(tag) => segments.push(Segment {
                tag: *tag,
                phonemes: PhonemeSequence::default(),
            }),
            Token::Phoneme(p) => segments
                .last_mut()
                .ok_or_else(|| malformed("phoneme before tag"))?
                .phonemes
                .0
                .push(*p),
            _ => return Err(malformed("unexpected token in text section")),
        }
    }
    let bundle = InstructionBundle {
        video_caption,
        n_speakers: audio_captions.len(),
        audio_captions,
        segments,
    };
    bundle.validate()?;
    Ok(bundle)
}
