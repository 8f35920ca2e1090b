//! Plain-text vocabulary and a minimal byte-fallback BPE tokenizer.
//!
//! The vocab file holds one token per line (id = line number); the merges
//! file holds one `left right` pair per line in merge priority order.
//! Tokens spelled `<0xNN>` are byte-fallback entries; `<bos>`, `<eos>` and
//! `<pad>` are recognized as special ids.

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerAlgo {
    Bpe,
    Char,
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("merges file line {0}: expected `left right`")]
    BadMergeLine(usize),
    #[error("token id {0} out of range")]
    BadTokenId(u32),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    byte_ids: HashMap<u8, u32>,
    pub bos: Option<u32>,
    pub eos: Option<u32>,
    pub pad: Option<u32>,
}

impl Vocab {
    pub fn from_text(vocab_text: &str, merges_text: Option<&str>) -> Result<Vocab, VocabError> {
        let tokens: Vec<String> = vocab_text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        let mut ids = HashMap::new();
        let mut byte_ids = HashMap::new();
        let (mut bos, mut eos, mut pad) = (None, None, None);
        for (i, tok) in tokens.iter().enumerate() {
            let id = i as u32;
            ids.entry(tok.clone()).or_insert(id);
            match tok.as_str() {
                "<bos>" | "<s>" => bos = bos.or(Some(id)),
                "<eos>" | "</s>" => eos = eos.or(Some(id)),
                "<pad>" => pad = pad.or(Some(id)),
                _ => {
                    if let Some(b) = parse_byte_token(tok) {
                        byte_ids.entry(b).or_insert(id);
                    }
                }
            }
        }
        let mut merges = Vec::new();
        let mut merge_rank = HashMap::new();
        if let Some(text) = merges_text {
            for (ix, line) in text.lines().enumerate() {
                let line = line.trim_end();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (left, right) = line
                    .split_once(' ')
                    .ok_or(VocabError::BadMergeLine(ix + 1))?;
                let pair = (left.to_string(), right.to_string());
                merge_rank.entry(pair.clone()).or_insert(merges.len());
                merges.push(pair);
            }
        }
        Ok(Vocab {
            tokens,
            ids,
            merges,
            merge_rank,
            byte_ids,
            bos,
            eos,
            pad,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Result<&str, VocabError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::BadTokenId(id))
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Encode text to token ids. Characters without a token of their own
    /// fall back to `<0xNN>` byte tokens, which makes encoding total as long
    /// as the vocab carries the byte alphabet.
    pub fn encode(&self, algo: TokenizerAlgo, text: &str) -> Vec<u32> {
        match algo {
            TokenizerAlgo::Char => self.encode_chars(text),
            TokenizerAlgo::Bpe => self.encode_bpe(text),
        }
    }

    fn encode_chars(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut buf = [0u8; 4];
        for ch in text.chars() {
            let s = ch.encode_utf8(&mut buf);
            if let Some(id) = self.ids.get(s) {
                out.push(*id);
            } else {
                self.push_bytes(s.as_bytes(), &mut out);
            }
        }
        out
    }

    fn encode_bpe(&self, text: &str) -> Vec<u32> {
        // Start from single characters, then apply merges in rank order.
        let mut symbols: Vec<String> = text.chars().map(String::from).collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for (pos, pair) in symbols.windows(2).enumerate() {
                if let Some(&rank) = self.merge_rank.get(&(pair[0].clone(), pair[1].clone())) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, pos));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = self.merges[rank].clone();
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        let mut out = Vec::new();
        for sym in &symbols {
            if let Some(id) = self.ids.get(sym) {
                out.push(*id);
            } else {
                self.push_bytes(sym.as_bytes(), &mut out);
            }
        }
        out
    }

    fn push_bytes(&self, bytes: &[u8], out: &mut Vec<u32>) {
        for b in bytes {
            if let Some(id) = self.byte_ids.get(b) {
                out.push(*id);
            }
            // A byte without a fallback token cannot be represented; the
            // generated vocabularies always carry the full byte alphabet.
        }
    }

    /// Decode ids back to text. Specials are dropped; byte tokens are
    /// reassembled before UTF-8 decoding.
    pub fn decode(&self, ids: &[u32]) -> Result<String, VocabError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if Some(id) == self.bos || Some(id) == self.eos || Some(id) == self.pad {
                continue;
            }
            let tok = self.token(id)?;
            if let Some(b) = parse_byte_token(tok) {
                bytes.push(b);
            } else {
                bytes.extend_from_slice(tok.as_bytes());
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// A vocab holding specials, the full byte alphabet, printable ASCII
    /// chars, and any extra tokens; used by generated checkpoints and tests.
    pub fn synthetic(extra_tokens: &[&str], merges: &[(&str, &str)]) -> Vocab {
        let mut lines = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
        ];
        for b in 0u16..=255 {
            lines.push(format!("<0x{b:02X}>"));
        }
        for c in 32u8..=126 {
            lines.push((c as char).to_string());
        }
        for t in extra_tokens {
            lines.push((*t).to_string());
        }
        let vocab_text = lines.join("\n");
        let merges_text = merges
            .iter()
            .map(|(a, b)| format!("{a} {b}"))
            .collect::<Vec<_>>()
            .join("\n");
        Vocab::from_text(&vocab_text, Some(&merges_text)).expect("synthetic vocab is well formed")
    }
}

fn parse_byte_token(tok: &str) -> Option<u8> {
    let hex = tok.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_encodes_to_nothing() {
        let v = Vocab::synthetic(&[], &[]);
        assert!(v.encode(TokenizerAlgo::Bpe, "").is_empty());
        assert!(v.encode(TokenizerAlgo::Char, "").is_empty());
    }

    #[test]
    fn no_merges_yields_one_id_per_char() {
        let v = Vocab::synthetic(&[], &[]);
        let ids = v.encode(TokenizerAlgo::Bpe, "abc");
        assert_eq!(ids.len(), 3);
        assert_eq!(v.decode(&ids).unwrap(), "abc");
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let v = Vocab::synthetic(&["ab", "abc"], &[("a", "b"), ("ab", "c")]);
        let ids = v.encode(TokenizerAlgo::Bpe, "abc");
        assert_eq!(ids, vec![v.id("abc").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "abc");
        // A later pair never outranks an earlier one.
        let v2 = Vocab::synthetic(&["bc", "ab"], &[("a", "b"), ("b", "c")]);
        let ids2 = v2.encode(TokenizerAlgo::Bpe, "abc");
        assert_eq!(ids2[0], v2.id("ab").unwrap());
    }

    #[test]
    fn unknown_chars_fall_back_to_bytes() {
        let v = Vocab::synthetic(&[], &[]);
        let ids = v.encode(TokenizerAlgo::Bpe, "é");
        assert_eq!(ids.len(), 2); // two UTF-8 bytes
        assert_eq!(v.decode(&ids).unwrap(), "é");
    }

    #[test]
    fn specials_detected_and_dropped_on_decode() {
        let v = Vocab::synthetic(&[], &[]);
        assert_eq!(v.bos, Some(1));
        assert_eq!(v.eos, Some(2));
        assert_eq!(v.pad, Some(0));
        let mut ids = vec![v.bos.unwrap()];
        ids.extend(v.encode(TokenizerAlgo::Bpe, "hi"));
        ids.push(v.eos.unwrap());
        assert_eq!(v.decode(&ids).unwrap(), "hi");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn ascii_roundtrip(s in "[ -~]{0,40}") {
            let v = Vocab::synthetic(
                &["th", "the", "in", "ing"],
                &[("t", "h"), ("th", "e"), ("i", "n"), ("in", "g")],
            );
            let ids = v.encode(TokenizerAlgo::Bpe, &s);
            prop_assert_eq!(v.decode(&ids).unwrap(), s.clone());
            let ids = v.encode(TokenizerAlgo::Char, &s);
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
