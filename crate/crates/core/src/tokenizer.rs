//! Byte-level BPE and the plain-text role framing used to prompt each
//! speaker.
//!
//! Role markers (`"A: "`, `"B: "`) and the end-of-utterance marker
//! (`"\n\n\n"`) are ordinary text that goes through BPE like everything else.
//! A framed turn is always encoded as `encode(marker) ++ encode(body + EOU)`
//! so the marker tokens seen in training are exactly the tokens force-fed to
//! open a turn during generation.

use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const END_OF_UTTERANCE: &str = "\n\n\n";
const BYTE_SYMBOLS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::User, Role::System];

    pub fn marker(self) -> &'static str {
        match self {
            Role::User => "A: ",
            Role::System => "B: ",
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::User => Role::System,
            Role::System => Role::User,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Role::User => 0,
            Role::System => 1,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::System => "system",
        })
    }
}

/// `marker + text + "\n\n\n"`. Text containing the end marker, or ending in
/// a newline that would run into it, is rejected so the first marker found
/// in the output is always the final one.
pub fn format_turn(role: Role, text: &str) -> Result<String> {
    if text.contains(END_OF_UTTERANCE) {
        return Err(Error::InvalidArgument(
            "utterance contains the end-of-utterance marker".into(),
        ));
    }
    if text.ends_with('\n') {
        return Err(Error::InvalidArgument("utterance ends with a newline".into()));
    }
    Ok(format!("{}{text}{END_OF_UTTERANCE}", role.marker()))
}

/// The two BPE pieces of a framed turn: the marker and the body with its
/// end marker. Merges never cross the boundary between them.
pub fn turn_pieces(role: Role, text: &str) -> [String; 2] {
    [role.marker().to_string(), format!("{text}{END_OF_UTTERANCE}")]
}

/// Ordered token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl Deref for TokenSeq {
    type Target = [u32];
    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

impl TokenSeq {
    pub fn concat(mut self, other: &TokenSeq) -> TokenSeq {
        self.0.extend_from_slice(other);
        self
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    merges: Vec<[u32; 2]>,
    size: usize,
}

/// Byte symbols plus an ordered merge list.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    symbols: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Vocab {
    /// The 256-symbol byte vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Vocab {
            merges: Vec::new(),
            symbols: (0..=255u8).map(|b| vec![b]).collect(),
            ranks: HashMap::new(),
        }
    }

    /// Rebuilds a vocabulary from its merge list, checking that every merge
    /// only references symbols that exist before it.
    pub fn from_merges(merges: &[(u32, u32)]) -> Result<Self> {
        let mut v = Vocab::bytes_only();
        for &(l, r) in merges {
            let next = v.symbols.len() as u32;
            if l >= next || r >= next {
                return Err(Error::Format(format!(
                    "merge ({l}, {r}) references an undefined symbol (next id {next})"
                )));
            }
            v.push_merge(l, r);
        }
        Ok(v)
    }

    fn push_merge(&mut self, l: u32, r: u32) {
        let mut sym = self.symbols[l as usize].clone();
        sym.extend_from_slice(&self.symbols[r as usize]);
        self.ranks.insert((l, r), self.merges.len() as u32);
        self.merges.push((l, r));
        self.symbols.push(sym);
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn symbol(&self, id: u32) -> Option<&[u8]> {
        self.symbols.get(id as usize).map(Vec::as_slice)
    }

    /// Learns merges from `pieces`. Pairs are counted within pieces only.
    /// The most frequent pair is merged first; ties go to the
    /// lexicographically smaller `(left bytes, right bytes)`. Training stops
    /// early once no adjacent pair remains.
    ///
    /// `seed` only matters when `max_pieces` caps the corpus, in which case it
    /// picks the retained subset.
    pub fn train<S: AsRef<str>>(pieces: &[S], vocab_size: usize, seed: u64, max_pieces: Option<usize>) -> Result<Self> {
        if vocab_size < BYTE_SYMBOLS {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the {BYTE_SYMBOLS} byte symbols"
            )));
        }
        let mut texts: Vec<&[u8]> = pieces
            .iter()
            .map(|p| p.as_ref().as_bytes())
            .filter(|b| !b.is_empty())
            .collect();
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(cap) = max_pieces {
            if texts.len() > cap {
                texts.shuffle(&mut rng::seeded(seed));
                texts.truncate(cap);
            }
        }

        let mut weights: HashMap<&[u8], u64> = HashMap::new();
        for t in texts {
            *weights.entry(t).or_default() += 1;
        }
        let mut words: Vec<(Vec<u32>, u64)> = weights
            .into_iter()
            .map(|(b, w)| (b.iter().map(|&x| x as u32).collect(), w))
            .collect();
        words.sort();

        let mut vocab = Vocab::bytes_only();
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        while vocab.size() < vocab_size {
            words.retain(|(w, _)| w.len() > 1);
            counts.clear();
            for (w, n) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += n;
                }
            }
            let Some((&best, _)) = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (
                        vocab.symbols[pa.0 as usize].as_slice(),
                        vocab.symbols[pa.1 as usize].as_slice(),
                    );
                    let kb = (
                        vocab.symbols[pb.0 as usize].as_slice(),
                        vocab.symbols[pb.1 as usize].as_slice(),
                    );
                    kb.cmp(&ka)
                })
            }) else {
                break;
            };
            let new_id = vocab.size() as u32;
            vocab.push_merge(best.0, best.1);
            for (w, _) in words.iter_mut() {
                merge_pair(w, best, new_id);
            }
        }
        Ok(vocab)
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges in rank order: repeatedly merges every occurrence of the
    /// lowest-ranked adjacent pair.
    pub fn encode_bytes(&self, bytes: &[u8]) -> TokenSeq {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(&mut ids, pair, BYTE_SYMBOLS as u32 + rank);
        }
        TokenSeq(ids)
    }

    /// Canonical encoding of a framed turn.
    pub fn encode_turn(&self, role: Role, text: &str) -> Result<TokenSeq> {
        let framed = format_turn(role, text)?;
        let body = &framed[role.marker().len()..];
        Ok(self.encode(role.marker()).concat(&self.encode(body)))
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let sym = self.symbols.get(id as usize).ok_or(Error::OutOfRange {
                what: "token id",
                index: id as usize,
                limit: self.size(),
            })?;
            out.extend_from_slice(sym);
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8 (possible mid-generation).
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            size: self.size(),
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        let merges: Vec<(u32, u32)> = file.merges.iter().map(|m| (m[0], m[1])).collect();
        let v = Vocab::from_merges(&merges)?;
        if v.size() != file.size {
            return Err(Error::Format(format!(
                "vocab declares size {} but its merges give {}",
                file.size,
                v.size()
            )));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Vocab::from_json(&fs::read_to_string(path)?)
    }
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn merge_pair(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    if ids.len() < 2 {
        return;
    }
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            ids[out] = new_id;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}
