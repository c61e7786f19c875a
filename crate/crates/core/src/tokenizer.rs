//! WordPiece-style subword vocabulary trained on the task corpus, fixed-length
//! encoding, and masked-language-model corruption.
//!
//! Vocabulary training follows the WordPiece likelihood criterion: start from
//! the character alphabet (word-initial characters plus `##`-prefixed
//! continuation characters) and repeatedly merge the adjacent pair with the
//! highest `freq(xy) / (freq(x) · freq(y))`. Pairs rarer than `min_freq` are
//! never merged, so rare words stay split. Ties are broken by the merged
//! token string, which makes the result a pure function of the corpus.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const NUM_SPECIAL: usize = 5;

/// Label value for positions that do not contribute to the MLM loss.
pub const IGNORE_INDEX: i64 = -100;

pub const CONTINUATION_PREFIX: &str = "##";

const SPECIALS: [&str; NUM_SPECIAL] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// One fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Same content cut to `len` positions. Only PAD may be cut.
    pub(crate) fn truncated(&self, len: usize) -> EncodedInput {
        debug_assert!(len >= self.real_len());
        EncodedInput {
            ids: self.ids[..len].to_vec(),
            attention_mask: self.attention_mask[..len].to_vec(),
        }
    }
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. The five special
    /// tokens must come first, in `PAD, UNK, CLS, SEP, MASK` order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIALS {
            return Err(Error::Vocab(format!(
                "the first {NUM_SPECIAL} tokens must be {SPECIALS:?}"
            )));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {tok:?} at id {id}")));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Subword pieces of `text`, with `[UNK]` for words that cannot be
    /// segmented.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        pre_tokenize(text)
            .into_iter()
            .flat_map(|word| self.word_pieces(word))
            .map(|id| self.id_to_token[id].clone())
            .collect()
    }

    /// Greedy longest-match-first segmentation of one pre-token.
    fn word_pieces(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK_ID];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut candidate: String = chars[start..end].iter().collect();
                if start > 0 {
                    candidate.insert_str(0, CONTINUATION_PREFIX);
                }
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        pieces
    }

    /// `[CLS] pieces… [SEP] [PAD]…`, exactly `max_len` long. Content is
    /// truncated so that `[SEP]` always survives.
    pub fn encode(&self, text: &str, max_len: usize) -> EncodedInput {
        assert!(max_len >= 3, "max_len must leave room for [CLS], content and [SEP]");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        for word in pre_tokenize(text) {
            ids.extend(self.word_pieces(word));
        }
        ids.truncate(max_len - 1);
        ids.push(SEP_ID);
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let attention_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        EncodedInput {
            ids,
            attention_mask,
        }
    }

    /// Tokens for every non-PAD id.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_owned())
            .collect()
    }
}

pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> EncodedInput {
    vocab.encode(text, max_len)
}

/// Splits on whitespace; every non-alphanumeric character becomes its own
/// pre-token.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word_start = None;
        for (i, c) in chunk.char_indices() {
            if c.is_alphanumeric() {
                word_start.get_or_insert(i);
            } else {
                if let Some(s) = word_start.take() {
                    out.push(&chunk[s..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = word_start {
            out.push(&chunk[s..]);
        }
    }
    out
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{c}")
            }
        })
        .collect()
}

fn merged_token(left: &str, right: &str) -> String {
    format!(
        "{left}{}",
        right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right)
    )
}

/// Trains a vocabulary of at most `max_size` entries on `corpus`.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: u64) -> Result<Vocab> {
    if max_size <= NUM_SPECIAL {
        return Err(Error::Vocab(format!(
            "max_size must exceed the {NUM_SPECIAL} special tokens, got {max_size}"
        )));
    }
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for text in corpus {
        for w in pre_tokenize(text.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Vocab("cannot build a vocabulary from an empty corpus".into()));
    }
    let budget = max_size - NUM_SPECIAL;

    // Symbols are interned; `symbols[id]` is the token text.
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_ids.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            (symbols.len() - 1) as u32
        })
    };

    let mut words: Vec<(Vec<u32>, u64)> = Vec::with_capacity(word_counts.len());
    for (w, &count) in &word_counts {
        let syms = initial_symbols(w)
            .into_iter()
            .map(|s| intern(s, &mut symbols))
            .collect();
        words.push((syms, count));
    }

    let mut symbol_freq: Vec<u64> = vec![0; symbols.len()];
    for (syms, count) in &words {
        for &s in syms {
            symbol_freq[s as usize] += count;
        }
    }

    // Alphabet, most frequent first; excess characters are dropped.
    let mut alphabet: Vec<u32> = (0..symbols.len() as u32).collect();
    alphabet.sort_by(|&a, &b| {
        symbol_freq[b as usize]
            .cmp(&symbol_freq[a as usize])
            .then_with(|| symbols[a as usize].cmp(&symbols[b as usize]))
    });
    alphabet.truncate(budget);
    let mut in_vocab: HashSet<u32> = alphabet.iter().copied().collect();
    let mut vocab_order: Vec<String> = alphabet.iter().map(|&s| symbols[s as usize].clone()).collect();
    let mut vocab_strings: HashSet<String> = vocab_order.iter().cloned().collect();

    let mut pair_freq: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    let add_word_pairs = |idx: usize,
                          syms: &[u32],
                          count: u64,
                          in_vocab: &HashSet<u32>,
                          pair_freq: &mut HashMap<(u32, u32), u64>,
                          pair_words: &mut HashMap<(u32, u32), HashSet<usize>>| {
        for w in syms.windows(2) {
            if in_vocab.contains(&w[0]) && in_vocab.contains(&w[1]) {
                *pair_freq.entry((w[0], w[1])).or_default() += count;
                pair_words.entry((w[0], w[1])).or_default().insert(idx);
            }
        }
    };
    for (idx, (syms, count)) in words.iter().enumerate() {
        add_word_pairs(idx, syms, *count, &in_vocab, &mut pair_freq, &mut pair_words);
    }

    while vocab_order.len() < budget {
        let mut best: Option<((u32, u32), u64, String)> = None;
        for (&pair, &f) in &pair_freq {
            if f == 0 || f < min_freq {
                continue;
            }
            let candidate_better = match &best {
                None => true,
                Some((bp, bf, bs)) => {
                    // Compare f / (fa·fb) as exact rationals.
                    let lhs = f as u128
                        * symbol_freq[bp.0 as usize] as u128
                        * symbol_freq[bp.1 as usize] as u128;
                    let rhs = *bf as u128
                        * symbol_freq[pair.0 as usize] as u128
                        * symbol_freq[pair.1 as usize] as u128;
                    match lhs.cmp(&rhs) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => {
                            let s = merged_token(&symbols[pair.0 as usize], &symbols[pair.1 as usize]);
                            match s.cmp(bs) {
                                Ordering::Less => true,
                                Ordering::Greater => false,
                                Ordering::Equal => pair < *bp,
                            }
                        }
                    }
                }
            };
            if candidate_better {
                let s = merged_token(&symbols[pair.0 as usize], &symbols[pair.1 as usize]);
                best = Some((pair, f, s));
            }
        }
        let Some(((left, right), _, merged)) = best else {
            break;
        };

        let new_sym = intern(merged.clone(), &mut symbols);
        if symbol_freq.len() < symbols.len() {
            symbol_freq.resize(symbols.len(), 0);
        }
        in_vocab.insert(new_sym);
        if vocab_strings.insert(merged.clone()) {
            vocab_order.push(merged);
        }

        let mut affected: Vec<usize> = pair_words
            .remove(&(left, right))
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        pair_freq.remove(&(left, right));
        for idx in affected {
            let (syms, count) = &words[idx];
            let count = *count;
            // retract this word's contribution
            for w in syms.windows(2) {
                if let Some(f) = pair_freq.get_mut(&(w[0], w[1])) {
                    *f = f.saturating_sub(count);
                }
                if let Some(set) = pair_words.get_mut(&(w[0], w[1])) {
                    set.remove(&idx);
                }
            }
            for &s in syms {
                symbol_freq[s as usize] -= count;
            }
            let mut merged_syms = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    merged_syms.push(new_sym);
                    i += 2;
                } else {
                    merged_syms.push(syms[i]);
                    i += 1;
                }
            }
            for &s in &merged_syms {
                symbol_freq[s as usize] += count;
            }
            add_word_pairs(idx, &merged_syms, count, &in_vocab, &mut pair_freq, &mut pair_words);
            words[idx].0 = merged_syms;
        }
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(vocab_order.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())));
    tokens.truncate(max_size);
    Vocab::from_tokens(tokens)
}

/// BERT-style corruption. Each content position (not CLS/SEP/PAD) is
/// selected with probability `mask_prob`; a selected position becomes
/// `[MASK]` 80% of the time, a random non-special id 10% of the time, and is
/// left unchanged otherwise. Labels hold the original id at selected
/// positions and [`IGNORE_INDEX`] elsewhere.
pub fn mask_for_mlm(
    input: &EncodedInput,
    rng_seed: u64,
    mask_prob: f64,
    vocab_size: usize,
) -> (EncodedInput, Vec<i64>) {
    assert!(
        mask_prob > 0.0 && mask_prob < 1.0,
        "mask_prob must lie in (0, 1), got {mask_prob}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut masked = input.clone();
    let mut labels = vec![IGNORE_INDEX; input.len()];
    for (pos, &id) in input.ids.iter().enumerate() {
        if id < NUM_SPECIAL || input.attention_mask[pos] == 0 {
            continue;
        }
        if rng.gen::<f64>() >= mask_prob {
            continue;
        }
        labels[pos] = id as i64;
        let r: f64 = rng.gen();
        if r < 0.8 {
            masked.ids[pos] = MASK_ID;
        } else if r < 0.9 && vocab_size > NUM_SPECIAL {
            masked.ids[pos] = rng.gen_range(NUM_SPECIAL..vocab_size);
        }
    }
    (masked, labels)
}
