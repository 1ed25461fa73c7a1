//! Byte-level BPE tokenizer.
//!
//! The base alphabet is the 256 byte values. Merges are learned by repeatedly
//! joining the most frequent adjacent pair; four special tokens (end of
//! document and the three infilling sentinels) are appended after the learned
//! vocabulary so they can never be produced by encoding plain text.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{ForgeError, Result};

pub type TokenId = u32;

pub const BYTE_TOKENS: usize = 256;
pub const NUM_SPECIALS: usize = 4;

const VOCAB_FILE: &str = "vocab.txt";
const MERGES_FILE: &str = "merges.txt";
const SPECIALS_FILE: &str = "specials.txt";

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["eod", "fim_prefix", "fim_suffix", "fim_middle"];
const SPECIAL_TEXT: [&str; NUM_SPECIALS] = ["<|endoftext|>", "<fim_prefix>", "<fim_suffix>", "<fim_middle>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpecialTokens {
    pub eod: TokenId,
    pub fim_prefix: TokenId,
    pub fim_suffix: TokenId,
    pub fim_middle: TokenId,
}

impl SpecialTokens {
    pub fn ids(&self) -> [TokenId; NUM_SPECIALS] {
        [self.eod, self.fim_prefix, self.fim_suffix, self.fim_middle]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids().contains(&id)
    }
}

/// How special tokens appear in decoded text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpecialRendering {
    /// Specials decode to nothing.
    #[default]
    Hidden,
    /// Specials decode to their marker text, e.g. `<fim_middle>`.
    Named,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    merge_rank: HashMap<(TokenId, TokenId), u32>,
    specials: SpecialTokens,
}

impl BpeVocab {
    /// Builds a vocabulary from ranked merges; merge `r` creates token `256 + r`.
    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = tokens.len() as TokenId;
            if l >= next || r >= next {
                return Err(ForgeError::Invalid(format!(
                    "merge {rank} references token not yet defined ({l}, {r})"
                )));
            }
            let mut bytes = tokens[l as usize].clone();
            bytes.extend_from_slice(&tokens[r as usize]);
            tokens.push(bytes);
        }
        let base = tokens.len() as TokenId;
        let specials = SpecialTokens { eod: base, fim_prefix: base + 1, fim_suffix: base + 2, fim_middle: base + 3 };
        tokens.extend(SPECIAL_TEXT.iter().map(|s| s.as_bytes().to_vec()));
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &pair) in merges.iter().enumerate() {
            if merge_rank.insert(pair, rank as u32).is_some() {
                return Err(ForgeError::Invalid(format!("duplicate merge ({}, {})", pair.0, pair.1)));
            }
        }
        Ok(BpeVocab { tokens, merges, merge_rank, specials })
    }

    /// Only the 256 byte tokens and the specials.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of byte + merge tokens (everything below the first special).
    pub fn base_size(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Lowest-rank-first merge application.
    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        if text.len() < 2 || self.merges.is_empty() {
            return text.iter().map(|&b| b as TokenId).collect();
        }
        let n = text.len();
        let mut ids: Vec<TokenId> = text.iter().map(|&b| b as TokenId).collect();
        // Doubly linked list over live positions.
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut next: Vec<usize> = (1..=n).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Reverse<(u32, usize, TokenId, TokenId)>>, i: usize, l: TokenId, r: TokenId| {
            if let Some(&rank) = self.merge_rank.get(&(l, r)) {
                heap.push(Reverse((rank, i, l, r)));
            }
        };
        for i in 0..n - 1 {
            push(&mut heap, i, ids[i], ids[i + 1]);
        }
        while let Some(Reverse((_, i, l, r))) = heap.pop() {
            let j = next[i];
            // Stale entry: either side changed since it was queued.
            if !alive[i] || j >= n || ids[i] != l || ids[j] != r {
                continue;
            }
            let merged = BYTE_TOKENS as TokenId + self.merge_rank[&(l, r)];
            ids[i] = merged;
            alive[j] = false;
            next[i] = next[j];
            if next[i] < n {
                prev[next[i]] = i;
            }
            if prev[i] < n {
                push(&mut heap, prev[i], ids[prev[i]], merged);
            }
            if next[i] < n {
                push(&mut heap, i, merged, ids[next[i]]);
            }
        }
        (0..n).filter(|&i| alive[i]).map(|i| ids[i]).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        self.decode_with(ids, SpecialRendering::Hidden)
    }

    pub fn decode_with(&self, ids: &[TokenId], rendering: SpecialRendering) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(ForgeError::UnknownTokenId(id))?;
            if self.specials.contains(id) && rendering == SpecialRendering::Hidden {
                continue;
            }
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
        let mut vocab = String::new();
        for (id, bytes) in self.tokens.iter().enumerate() {
            vocab.push_str(&format!("{id}\t{}\n", to_hex(bytes)));
        }
        let mut merges = String::new();
        for (l, r) in &self.merges {
            merges.push_str(&format!("{l} {r}\n"));
        }
        let mut specials = String::new();
        for (name, id) in SPECIAL_NAMES.iter().zip(self.specials.ids()) {
            specials.push_str(&format!("{name}={id}\n"));
        }
        for (file, body) in [(VOCAB_FILE, vocab), (MERGES_FILE, merges), (SPECIALS_FILE, specials)] {
            let path = dir.join(file);
            fs::write(&path, body).map_err(|e| ForgeError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |file: &str| {
            let path = dir.join(file);
            fs::read_to_string(&path).map_err(|e| ForgeError::io(&path, e))
        };
        let vocab_text = read(VOCAB_FILE)?;
        let merges_text = read(MERGES_FILE)?;
        let specials_text = read(SPECIALS_FILE)?;

        let mut listed: Vec<Vec<u8>> = Vec::new();
        for (lineno, line) in numbered_lines(&vocab_text) {
            let (id, hex) = line
                .split_once('\t')
                .ok_or_else(|| ForgeError::format(VOCAB_FILE, lineno, "expected <id>\\t<hex-bytes>"))?;
            let id: usize = id.parse().map_err(|_| ForgeError::format(VOCAB_FILE, lineno, "bad token id"))?;
            if id < listed.len() {
                return Err(ForgeError::format(VOCAB_FILE, lineno, format!("duplicate token id {id}")));
            }
            if id != listed.len() {
                return Err(ForgeError::format(VOCAB_FILE, lineno, format!("token id {id} out of order")));
            }
            let bytes = from_hex(hex).ok_or_else(|| ForgeError::format(VOCAB_FILE, lineno, "bad hex bytes"))?;
            listed.push(bytes);
        }

        let mut merges = Vec::new();
        for (lineno, line) in numbered_lines(&merges_text) {
            let mut parts = line.split(' ');
            let pair = match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) => l.parse().ok().zip(r.parse().ok()),
                _ => None,
            };
            let pair = pair.ok_or_else(|| ForgeError::format(MERGES_FILE, lineno, "expected <left-id> <right-id>"))?;
            merges.push(pair);
        }

        let mut found: [Option<TokenId>; NUM_SPECIALS] = [None; NUM_SPECIALS];
        for (lineno, line) in numbered_lines(&specials_text) {
            let (name, id) =
                line.split_once('=').ok_or_else(|| ForgeError::format(SPECIALS_FILE, lineno, "expected <name>=<id>"))?;
            let slot = SPECIAL_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ForgeError::format(SPECIALS_FILE, lineno, format!("unknown special {name:?}")))?;
            if found[slot].is_some() {
                return Err(ForgeError::format(SPECIALS_FILE, lineno, format!("special {name} listed twice")));
            }
            found[slot] = Some(id.parse().map_err(|_| ForgeError::format(SPECIALS_FILE, lineno, "bad token id"))?);
        }
        if let Some(missing) = found.iter().position(Option::is_none) {
            return Err(ForgeError::format(
                SPECIALS_FILE,
                numbered_lines(&specials_text).count() + 1,
                format!("missing special {}", SPECIAL_NAMES[missing]),
            ));
        }

        let vocab = BpeVocab::from_merges(merges)
            .map_err(|e| ForgeError::format(MERGES_FILE, 0, e.to_string()))?;
        let expected = vocab.specials.ids();
        for (slot, id) in found.iter().enumerate() {
            if id.unwrap() != expected[slot] {
                return Err(ForgeError::format(
                    SPECIALS_FILE,
                    slot + 1,
                    format!("{} must be {} (appended after {} base tokens)", SPECIAL_NAMES[slot], expected[slot], vocab.base_size()),
                ));
            }
        }
        if listed.len() != vocab.tokens.len() {
            return Err(ForgeError::format(
                VOCAB_FILE,
                listed.len(),
                format!("{} tokens listed, merges imply {}", listed.len(), vocab.tokens.len()),
            ));
        }
        for (id, (have, want)) in listed.iter().zip(&vocab.tokens).enumerate() {
            if have != want {
                return Err(ForgeError::format(VOCAB_FILE, id + 1, format!("token {id} bytes disagree with merges")));
            }
        }
        Ok(vocab)
    }
}

fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty())
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

/// Learns `target_vocab_size - 260` merges (fewer if the corpus runs out of pairs).
///
/// Frequency ties go to the lexicographically smaller merged byte string, then
/// to the smaller `(left, right)` id pair.
pub fn train_bpe<I, D>(corpus: I, target_vocab_size: usize) -> Result<BpeVocab>
where
    I: IntoIterator<Item = D>,
    D: AsRef<[u8]>,
{
    let minimum = BYTE_TOKENS + NUM_SPECIALS;
    let mut seqs: Vec<Vec<TokenId>> = corpus
        .into_iter()
        .map(|d| d.as_ref().iter().map(|&b| b as TokenId).collect())
        .collect();
    if seqs.iter().all(Vec::is_empty) {
        return Err(ForgeError::EmptyCorpus);
    }
    if target_vocab_size < minimum {
        return Err(ForgeError::VocabTooSmall { requested: target_vocab_size, minimum });
    }
    let wanted = target_vocab_size - minimum;

    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut where_: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (s, seq) in seqs.iter().enumerate() {
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
            where_.entry((w[0], w[1])).or_default().insert(s);
        }
    }

    let mut merges = Vec::with_capacity(wanted);
    while merges.len() < wanted {
        let mut best: Option<((TokenId, TokenId), i64)> = None;
        for (&pair, &count) in &counts {
            if count <= 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => match count.cmp(&bc) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => {
                        let a = merged_bytes(&tokens, pair);
                        let b = merged_bytes(&tokens, bp);
                        (a, pair) < (b, bp)
                    }
                },
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, _)) = best else { break };
        let new_id = tokens.len() as TokenId;
        tokens.push(merged_bytes(&tokens, pair));
        merges.push(pair);

        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for s in affected {
            let seq = &mut seqs[s];
            if !seq.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            for w in seq.windows(2) {
                *counts.get_mut(&(w[0], w[1])).unwrap() -= 1;
            }
            *seq = apply_merge(seq, pair, new_id);
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
                where_.entry((w[0], w[1])).or_default().insert(s);
            }
        }
        counts.retain(|_, c| *c > 0);
    }
    if merges.len() < wanted {
        log::warn!("corpus ran out of pairs after {} of {} merges", merges.len(), wanted);
    }
    BpeVocab::from_merges(merges)
}

fn merged_bytes(tokens: &[Vec<u8>], (l, r): (TokenId, TokenId)) -> Vec<u8> {
    let mut out = tokens[l as usize].clone();
    out.extend_from_slice(&tokens[r as usize]);
    out
}

/// Replaces every non-overlapping occurrence of `pair`, scanning left to right.
pub(crate) fn apply_merge(seq: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = b'a' as TokenId;
    const B: TokenId = b'b' as TokenId;

    /// Applies every merge in rank order over the whole sequence.
    fn rank_order_oracle(vocab: &BpeVocab, text: &[u8]) -> Vec<TokenId> {
        let mut seq: Vec<TokenId> = text.iter().map(|&b| b as TokenId).collect();
        for (rank, &pair) in vocab.merges().iter().enumerate() {
            seq = apply_merge(&seq, pair, (BYTE_TOKENS + rank) as TokenId);
        }
        seq
    }

    #[test]
    fn single_pair_corpus() {
        let v = train_bpe(["aaaa"], 261).unwrap();
        assert_eq!(v.vocab_size(), 261);
        assert_eq!(v.merges(), &[(A, A)]);
        assert_eq!(v.token_bytes(256).unwrap(), b"aa");
        assert_eq!(v.specials().eod, 257);
    }

    #[test]
    fn no_room_for_merges() {
        let v = train_bpe(["ab"], 260).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.vocab_size(), 260);
    }

    #[test]
    fn second_merge_builds_on_first() {
        let v = train_bpe(["abab", "abab"], 262).unwrap();
        assert_eq!(v.merges(), &[(A, B), (256, 256)]);
    }

    #[test]
    fn ties_prefer_smaller_bytes() {
        // "ba" and "ab" both occur once in "bab"; ("a","b") merges to the smaller "ab".
        let v = train_bpe(["bab"], 261).unwrap();
        assert_eq!(v.merges(), &[(A, B)]);
    }

    #[test]
    fn train_errors() {
        assert!(matches!(train_bpe(Vec::<&str>::new(), 300), Err(ForgeError::EmptyCorpus)));
        assert!(matches!(train_bpe([""], 300), Err(ForgeError::EmptyCorpus)));
        assert!(matches!(train_bpe(["abc"], 259), Err(ForgeError::VocabTooSmall { .. })));
    }

    #[test]
    fn encode_examples() {
        let v = BpeVocab::from_merges(vec![(A, B)]).unwrap();
        assert_eq!(v.encode(b"abab"), vec![256, 256]);
        assert_eq!(v.encode(b""), Vec::<TokenId>::new());
        let bytes = BpeVocab::bytes_only();
        assert_eq!(bytes.encode(b"hi"), vec![b'h' as TokenId, b'i' as TokenId]);
    }

    #[test]
    fn decode_examples() {
        let v = train_bpe(["public class A {} public class B {}"], 300).unwrap();
        let s = b"public class A {}";
        assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        assert_eq!(v.decode(&[]).unwrap(), b"");
        assert_eq!(v.decode(&[v.specials().eod]).unwrap(), b"");
        assert_eq!(v.decode_with(&[v.specials().fim_middle], SpecialRendering::Named).unwrap(), b"<fim_middle>");
        assert!(matches!(v.decode(&[v.vocab_size() as TokenId]), Err(ForgeError::UnknownTokenId(_))));
    }

    #[test]
    fn overlapping_pairs_merge_left_to_right() {
        let v = BpeVocab::from_merges(vec![(A, A)]).unwrap();
        assert_eq!(v.encode(b"aaa"), vec![256, A]);
        assert_eq!(v.encode(b"aaaa"), vec![256, 256]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = train_bpe(["int x = 0; int y = 1; return x + y;"], 290).unwrap();
        v.save(dir.path()).unwrap();
        assert_eq!(BpeVocab::load(dir.path()).unwrap(), v);
    }

    #[test]
    fn load_rejects_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        BpeVocab::bytes_only().save(dir.path()).unwrap();
        let path = dir.path().join(VOCAB_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("1\t01\n", "0\t01\n", 1);
        fs::write(&path, text).unwrap();
        let err = BpeVocab::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate token id 0"), "{err}");
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn load_rejects_missing_special() {
        let dir = tempfile::tempdir().unwrap();
        BpeVocab::bytes_only().save(dir.path()).unwrap();
        let path = dir.path().join(SPECIALS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.lines().take(3).collect::<Vec<_>>().join("\n")).unwrap();
        let err = BpeVocab::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing special fim_middle"), "{err}");
    }

    #[test]
    fn load_names_bad_merge_line() {
        let dir = tempfile::tempdir().unwrap();
        BpeVocab::from_merges(vec![(A, B)]).unwrap().save(dir.path()).unwrap();
        fs::write(dir.path().join(MERGES_FILE), "97 98\nnot a merge\n").unwrap();
        let err = BpeVocab::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("merges.txt:2"), "{err}");
    }

    fn small_vocab() -> BpeVocab {
        let corpus = [
            "public static int add(int a, int b) { return a + b; }",
            "for (int i = 0; i < n; i++) { sum += i; }",
            "aaaaaaaa bbbb abababab",
        ];
        train_bpe(corpus, 340).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(s in proptest::collection::vec(any::<u8>(), 0..512)) {
            let v = small_vocab();
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        }

        #[test]
        fn encode_matches_rank_order_oracle(s in "[ab ()+;=inta]{0,64}") {
            let v = small_vocab();
            let ids = v.encode(s.as_bytes());
            prop_assert_eq!(&ids, &rank_order_oracle(&v, s.as_bytes()));
            prop_assert!(ids.iter().all(|&id| !v.specials().contains(id)));
            prop_assert_eq!(ids, v.encode(s.as_bytes()));
        }
    }
}
