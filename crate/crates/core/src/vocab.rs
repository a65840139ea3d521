//! Expanded vocabulary: a word-level base lexicon followed by the special
//! tokens and one atomic token per tool.
//!
//! Layout of token ids:
//!
//! ```text
//! [0, n_base)               base words
//! n_base                    end of sequence
//! n_base + 1                unknown word
//! [n_base + 2, + M)         tool tokens, in tool-id order
//! ```

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{ToolGraph, ToolId};

pub type TokenId = usize;

pub const EOS_SURFACE: &str = "<|eos|>";
pub const UNK_SURFACE: &str = "<|unk|>";

/// Atomic surface form of a tool: every non-alphanumeric character becomes `_`.
pub fn tool_surface(name: &str) -> String {
    let body: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("<{body}>")
}

/// One piece produced by the word-level splitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    /// A `<...>` run that may name a tool token.
    Angle(String),
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits text on whitespace and punctuation. Words are runs of
/// alphanumerics and `_`, lowercased; every other visible character is its
/// own piece. `<Name>` runs are kept whole so tool tokens stay atomic.
pub fn split_words(text: &str) -> Vec<Piece> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            let mut j = i + 1;
            while j < chars.len() && is_word_char(chars[j]) {
                j += 1;
            }
            if j < chars.len() && chars[j] == '>' && j > i + 1 {
                out.push(Piece::Angle(chars[i..=j].iter().collect()));
                i = j + 1;
            } else {
                out.push(Piece::Word("<".into()));
                i += 1;
            }
        } else if is_word_char(c) {
            let mut j = i;
            while j < chars.len() && is_word_char(chars[j]) {
                j += 1;
            }
            let w: String = chars[i..j].iter().collect();
            out.push(Piece::Word(w.to_lowercase()));
            i = j;
        } else {
            out.push(Piece::Word(c.to_string()));
            i += 1;
        }
    }
    out
}

/// Word strings of `text` as they would enter the base lexicon.
pub fn lexicon_words(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .flat_map(|p| match p {
            Piece::Word(w) => vec![w],
            Piece::Angle(a) => split_angle(&a),
        })
        .collect()
}

fn split_angle(angle: &str) -> Vec<String> {
    let inner = &angle[1..angle.len() - 1];
    vec!["<".into(), inner.to_lowercase(), ">".into()]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolVocabulary {
    base_tokens: Vec<String>,
    tool_surfaces: Vec<String>,
    word_index: HashMap<String, TokenId>,
    surface_index: HashMap<String, ToolId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Base,
    Eos,
    Unk,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub role: TokenRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabDump {
    pub tokens: Vec<VocabEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTrajectory {
    pub token_ids: Vec<TokenId>,
}

/// Result of mapping generated token ids back to tools.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedTrajectory {
    pub tools: Vec<ToolId>,
    /// Non-tool tokens seen before eos.
    pub hallucinated: usize,
    /// Tokens consumed before eos (eos itself excluded).
    pub generated: usize,
}

impl ToolVocabulary {
    pub fn build(base_lexicon: &[String], graph: &ToolGraph) -> Result<Self> {
        let surfaces: Vec<String> = graph.tools().iter().map(|t| tool_surface(&t.name)).collect();
        Self::from_parts(base_lexicon.to_vec(), surfaces)
    }

    fn from_parts(base_tokens: Vec<String>, tool_surfaces: Vec<String>) -> Result<Self> {
        if base_tokens.is_empty() {
            return Err(Error::Argument("base lexicon is empty".into()));
        }
        let mut word_index = HashMap::with_capacity(base_tokens.len());
        for (i, w) in base_tokens.iter().enumerate() {
            if w == EOS_SURFACE || w == UNK_SURFACE {
                return Err(Error::Argument(format!("reserved token {w:?} in base lexicon")));
            }
            if word_index.insert(w.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate lexicon entry {w:?}")));
            }
        }
        let mut surface_index = HashMap::with_capacity(tool_surfaces.len());
        for (id, s) in tool_surfaces.iter().enumerate() {
            if let Some(prev) = surface_index.insert(s.clone(), id) {
                return Err(Error::Collision(format!(
                    "tools {prev} and {id} both normalize to {s}"
                )));
            }
        }
        Ok(Self {
            base_tokens,
            tool_surfaces,
            word_index,
            surface_index,
        })
    }

    pub fn num_base(&self) -> usize {
        self.base_tokens.len()
    }

    pub fn num_tools(&self) -> usize {
        self.tool_surfaces.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.base_tokens.len()
    }

    pub fn unk_id(&self) -> TokenId {
        self.base_tokens.len() + 1
    }

    fn tool_offset(&self) -> usize {
        self.base_tokens.len() + 2
    }

    /// Size of the expanded vocabulary, specials included.
    pub fn total_size(&self) -> usize {
        self.tool_offset() + self.tool_surfaces.len()
    }

    pub fn tool_token(&self, tool: ToolId) -> Result<TokenId> {
        if tool < self.tool_surfaces.len() {
            Ok(self.tool_offset() + tool)
        } else {
            Err(Error::Range {
                id: tool,
                size: self.tool_surfaces.len(),
            })
        }
    }

    pub fn tool_of(&self, token: TokenId) -> Option<ToolId> {
        token
            .checked_sub(self.tool_offset())
            .filter(|&t| t < self.tool_surfaces.len())
    }

    pub fn is_tool_token(&self, token: TokenId) -> bool {
        self.tool_of(token).is_some()
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.word_index.get(word).copied()
    }

    pub fn tool_by_surface(&self, surface: &str) -> Option<ToolId> {
        self.surface_index.get(surface).copied()
    }

    pub fn surface(&self, token: TokenId) -> Option<&str> {
        if token < self.base_tokens.len() {
            Some(&self.base_tokens[token])
        } else if token == self.eos_id() {
            Some(EOS_SURFACE)
        } else if token == self.unk_id() {
            Some(UNK_SURFACE)
        } else {
            self.tool_of(token).map(|t| self.tool_surfaces[t].as_str())
        }
    }

    pub fn tool_surface_of(&self, tool: ToolId) -> Option<&str> {
        self.tool_surfaces.get(tool).map(String::as_str)
    }

    /// Tokenizes free text. Known tool surfaces become tool tokens, unknown
    /// words map to the unknown token.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in split_words(text) {
            match piece {
                Piece::Word(w) => out.push(self.word_id(&w).unwrap_or(self.unk_id())),
                Piece::Angle(a) => match self.tool_by_surface(&a) {
                    Some(t) => out.push(self.tool_offset() + t),
                    None => out.extend(
                        split_angle(&a)
                            .iter()
                            .map(|w| self.word_id(w).unwrap_or(self.unk_id())),
                    ),
                },
            }
        }
        out
    }

    pub fn encode_trajectory(&self, tools: &[ToolId]) -> Result<EncodedTrajectory> {
        let token_ids = tools
            .iter()
            .map(|&t| self.tool_token(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedTrajectory { token_ids })
    }

    /// Concatenated surface forms, e.g. `<A><B>`.
    pub fn render_tools(&self, tools: &[ToolId]) -> Result<String> {
        tools
            .iter()
            .map(|&t| {
                self.tool_surface_of(t)
                    .map(str::to_owned)
                    .ok_or(Error::Range {
                        id: t,
                        size: self.num_tools(),
                    })
            })
            .collect()
    }

    /// Maps token ids back to tools, stopping at eos. Non-tool tokens are
    /// consumed and counted as hallucinated positions.
    pub fn decode_tokens(&self, ids: &[TokenId]) -> DecodedTrajectory {
        let mut out = DecodedTrajectory::default();
        for &id in ids {
            if id == self.eos_id() {
                break;
            }
            out.generated += 1;
            match self.tool_of(id) {
                Some(t) => out.tools.push(t),
                None => out.hallucinated += 1,
            }
        }
        out
    }

    /// Tool tokens ascending, then eos.
    pub fn restricted_output_ids(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.num_tools()).map(|t| self.tool_offset() + t).collect();
        ids.push(self.eos_id());
        ids
    }

    pub fn dump(&self) -> VocabDump {
        let mut tokens: Vec<VocabEntry> = self
            .base_tokens
            .iter()
            .map(|t| VocabEntry {
                token: t.clone(),
                role: TokenRole::Base,
            })
            .collect();
        tokens.push(VocabEntry {
            token: EOS_SURFACE.into(),
            role: TokenRole::Eos,
        });
        tokens.push(VocabEntry {
            token: UNK_SURFACE.into(),
            role: TokenRole::Unk,
        });
        tokens.extend(self.tool_surfaces.iter().map(|t| VocabEntry {
            token: t.clone(),
            role: TokenRole::Tool,
        }));
        VocabDump { tokens }
    }

    pub fn from_dump(dump: &VocabDump) -> Result<Self> {
        // Expected order: base*, eos, unk, tool*.
        let mut base = Vec::new();
        let mut tools = Vec::new();
        let mut stage = 0;
        for (i, e) in dump.tokens.iter().enumerate() {
            stage = match (stage, e.role) {
                (0, TokenRole::Base) => {
                    base.push(e.token.clone());
                    0
                }
                (0, TokenRole::Eos) => 1,
                (1, TokenRole::Unk) => 2,
                (2 | 3, TokenRole::Tool) => {
                    tools.push(e.token.clone());
                    3
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "vocabulary entry {i} ({:?}) out of order",
                        e.token
                    )))
                }
            };
        }
        if stage < 2 {
            return Err(Error::Schema("vocabulary must contain eos and unk".into()));
        }
        Self::from_parts(base, tools)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.dump()).expect("vocab serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: VocabDump =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("vocabulary: {e}")))?;
        Self::from_dump(&dump)
    }

    /// SHA-256 of the canonical dump, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.dump()).expect("vocab serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Builds a base lexicon from text sources in first-appearance order.
pub fn lexicon_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for text in texts {
        for w in lexicon_words(text) {
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(names: &[&str]) -> ToolGraph {
        ToolGraph::new(
            names
                .iter()
                .map(|n| (n.to_string(), "does a thing".to_string()))
                .collect(),
            std::iter::empty(),
        )
        .unwrap()
    }

    fn lexicon(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn surface_normalization() {
        assert_eq!(tool_surface("Image-to-Text"), "<Image_to_Text>");
        assert_eq!(tool_surface("Tool_003"), "<Tool_003>");
    }

    #[test]
    fn layout_and_size() {
        let names: Vec<String> = (0..23).map(|i| format!("T{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let v = ToolVocabulary::build(&lexicon(100), &graph(&refs)).unwrap();
        assert_eq!(v.total_size(), 125);
        assert_eq!(v.restricted_output_ids().len(), 24);
        assert_eq!(*v.restricted_output_ids().last().unwrap(), v.eos_id());
        assert!(v.restricted_output_ids().iter().all(|&id| id >= 100));
    }

    #[test]
    fn single_tool_restricted_set() {
        let v = ToolVocabulary::build(&lexicon(3), &graph(&["A"])).unwrap();
        assert_eq!(v.restricted_output_ids(), vec![5, 3]);
    }

    #[test]
    fn surface_collision() {
        let err = ToolVocabulary::build(&lexicon(2), &graph(&["A-B", "A_B"])).unwrap_err();
        assert!(matches!(err, Error::Collision(_)));
    }

    #[test]
    fn duplicate_lexicon_rejected() {
        let lex = vec!["a".to_string(), "a".to_string()];
        assert!(ToolVocabulary::build(&lex, &graph(&["A"])).is_err());
        assert!(ToolVocabulary::build(&[], &graph(&["A"])).is_err());
    }

    #[test]
    fn decode_counts_hallucinations() {
        let lex = vec!["the".to_string()];
        let v = ToolVocabulary::build(&lex, &graph(&["A", "B"])).unwrap();
        let a = v.tool_token(0).unwrap();
        let b = v.tool_token(1).unwrap();
        let d = v.decode_tokens(&[a, b, v.eos_id()]);
        assert_eq!((d.tools.as_slice(), d.hallucinated), (&[0, 1][..], 0));
        let d = v.decode_tokens(&[a, v.word_id("the").unwrap(), b]);
        assert_eq!((d.tools.as_slice(), d.hallucinated, d.generated), (&[0, 1][..], 1, 3));
        let d = v.decode_tokens(&[v.eos_id()]);
        assert!(d.tools.is_empty() && d.hallucinated == 0);
    }

    #[test]
    fn encode_four_tool_sequence() {
        let g = graph(&["Video-to-Audio", "Voice-Changer", "Audio-to-Image", "Image-Colorizer"]);
        let v = ToolVocabulary::build(&lexicon(1), &g).unwrap();
        assert_eq!(
            v.render_tools(&[0, 1, 2, 3]).unwrap(),
            "<Video_to_Audio><Voice_Changer><Audio_to_Image><Image_Colorizer>"
        );
        let enc = v.encode_trajectory(&[0, 1]).unwrap();
        assert_eq!(v.decode_tokens(&enc.token_ids).tools, vec![0, 1]);
        assert!(v.encode_trajectory(&[]).unwrap().token_ids.is_empty());
        assert!(v.encode_trajectory(&[9]).is_err());
    }

    #[test]
    fn text_encoding_keeps_tool_tokens_atomic() {
        let lex = lexicon_from_texts(["use tool : now."]);
        let v = ToolVocabulary::build(&lex, &graph(&["Image-to-Text"])).unwrap();
        let ids = v.encode_text("Use tool: <Image_to_Text> now <Bogus>");
        assert_eq!(ids[3], v.tool_token(0).unwrap());
        assert_eq!(ids[0], v.word_id("use").unwrap());
        assert!(ids[5..].contains(&v.unk_id()));
    }

    #[test]
    fn splitter_rules() {
        let p = lexicon_words("I have 'example.mp4', Tool_003!");
        assert_eq!(
            p,
            vec!["i", "have", "'", "example", ".", "mp4", "'", ",", "tool_003", "!"]
        );
    }

    #[test]
    fn dump_round_trip_and_hash() {
        let v = ToolVocabulary::build(&lexicon(5), &graph(&["A", "B"])).unwrap();
        let back = ToolVocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
        let other = ToolVocabulary::build(&lexicon(6), &graph(&["A", "B"])).unwrap();
        assert_ne!(v.hash(), other.hash());
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_round_trip(seq in proptest::collection::vec(0usize..6, 0..=8)) {
            let v = ToolVocabulary::build(&lexicon(4), &graph(&["A", "B", "C", "D", "E", "F"])).unwrap();
            let enc = v.encode_trajectory(&seq).unwrap();
            let dec = v.decode_tokens(&enc.token_ids);
            proptest::prop_assert_eq!(dec.tools, seq);
            proptest::prop_assert_eq!(dec.hallucinated, 0);
        }
    }
}
