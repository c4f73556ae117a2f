//! Unified vocabulary, special tokens and category → sub-token index sets.
//!
//! IDs are assigned in a fixed order: the base tokens first (in the order
//! given), then `<FG>`, `<BG>`, `<OTHERS>`, `<depth>`, `<image>` and finally
//! the 1001 depth tokens `<custom_0>..<custom_1000>`. For `n` base tokens this
//! puts `<FG>` at `n`, `<depth>` at `n + 3` and `<custom_b>` at `n + 5 + b`.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Number of depth-bin tokens, `<custom_0>` through `<custom_1000>`.
pub const DEPTH_TOKENS: usize = 1001;
/// Highest depth bin; bin 0 is the ignore bin.
pub const MAX_BIN: u32 = 1000;

pub const FG: &str = "<FG>";
pub const BG: &str = "<BG>";
pub const OTHERS: &str = "<OTHERS>";
pub const DEPTH: &str = "<depth>";
/// Vision placeholder used in prompts.
pub const IMAGE: &str = "<image>";

const NAMED_SPECIALS: [&str; 5] = [FG, BG, OTHERS, DEPTH, IMAGE];

pub type TokenId = u32;

/// Characters seeded by [`with_characters`] so every lowercase ASCII
/// category name can fall back to per-character tokens.
pub const SEED_CHARACTERS: &str = "abcdefghijklmnopqrstuvwxyz0123456789-_'";

pub fn custom_token(bin: u32) -> String {
    format!("<custom_{bin}>")
}

/// Appends the single-character tokens of [`SEED_CHARACTERS`] that are not
/// already present.
pub fn with_characters<S: AsRef<str>>(base: &[S]) -> Vec<String> {
    let mut out: Vec<String> = base.iter().map(|s| s.as_ref().to_string()).collect();
    for ch in SEED_CHARACTERS.chars() {
        let s = ch.to_string();
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    base_len: usize,
    max_base_chars: usize,
}

pub fn build_vocabulary<S: AsRef<str>>(base_tokens: &[S]) -> Result<Vocabulary> {
    if base_tokens.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let base_len = base_tokens.len();
    let mut tokens = Vec::with_capacity(base_len + NAMED_SPECIALS.len() + DEPTH_TOKENS);
    tokens.extend(base_tokens.iter().map(|s| s.as_ref().to_string()));
    tokens.extend(NAMED_SPECIALS.iter().map(|s| s.to_string()));
    tokens.extend((0..DEPTH_TOKENS as u32).map(custom_token));

    let mut index = HashMap::with_capacity(tokens.len());
    for (id, tok) in tokens.iter().enumerate() {
        if tok.is_empty() || tok.contains('\n') || tok.contains('\r') {
            return Err(Error::InvalidToken(tok.clone()));
        }
        if index.insert(tok.clone(), id as TokenId).is_some() {
            return Err(Error::DuplicateToken(tok.clone()));
        }
    }
    let max_base_chars = tokens[..base_len]
        .iter()
        .map(|t| t.chars().count())
        .max()
        .unwrap_or(1);
    Ok(Vocabulary {
        tokens,
        index,
        base_len,
        max_base_chars,
    })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn fg(&self) -> TokenId {
        self.base_len as TokenId
    }

    pub fn bg(&self) -> TokenId {
        self.base_len as TokenId + 1
    }

    pub fn others(&self) -> TokenId {
        self.base_len as TokenId + 2
    }

    pub fn depth(&self) -> TokenId {
        self.base_len as TokenId + 3
    }

    pub fn image(&self) -> TokenId {
        self.base_len as TokenId + 4
    }

    /// ID of `<custom_bin>`; `None` for bins above 1000.
    pub fn custom(&self, bin: u32) -> Option<TokenId> {
        (bin <= MAX_BIN).then(|| self.base_len as TokenId + 5 + bin)
    }

    /// IDs of `<custom_1>..=<custom_1000>`, the supervised depth slice.
    pub fn depth_bin_ids(&self) -> std::ops::Range<TokenId> {
        let first = self.base_len as TokenId + 6;
        first..first + MAX_BIN
    }

    /// Every ID that is not a depth token: base tokens plus the named specials.
    pub fn text_ids(&self) -> std::ops::Range<TokenId> {
        0..(self.base_len + NAMED_SPECIALS.len()) as TokenId
    }

    /// One token per line; the line number is the ID.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Vocabulary::to_text`]. The trailing special block must be
    /// present and in the canonical order.
    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let n_special = NAMED_SPECIALS.len() + DEPTH_TOKENS;
        if lines.len() <= n_special {
            return Err(Error::VocabularyMismatch(format!(
                "{} lines is too short for a vocabulary",
                lines.len()
            )));
        }
        let base_len = lines.len() - n_special;
        let vocab = build_vocabulary(&lines[..base_len])?;
        if vocab.tokens[base_len..] != lines[base_len..] {
            return Err(Error::VocabularyMismatch(
                "special-token block is missing or out of order".into(),
            ));
        }
        Ok(vocab)
    }

    fn base_id(&self, piece: &str) -> Option<TokenId> {
        self.index
            .get(piece)
            .copied()
            .filter(|&id| (id as usize) < self.base_len)
    }
}

/// Lowercase, whitespace-free form used for matching category names.
pub fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Segments a category name into base-vocabulary tokens by greedy
/// longest match, falling back to single characters. Returns the sorted,
/// de-duplicated ID set.
pub fn tokenize_category(name: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let norm = normalize_name(name);
    if norm.is_empty() {
        return Err(Error::EmptyName);
    }
    let chars: Vec<char> = norm.chars().collect();
    let mut ids = Vec::new();
    let mut pos = 0;
    let mut piece = String::new();
    while pos < chars.len() {
        let longest = vocab.max_base_chars.min(chars.len() - pos);
        let mut matched = None;
        for len in (1..=longest).rev() {
            piece.clear();
            piece.extend(&chars[pos..pos + len]);
            if let Some(id) = vocab.base_id(&piece) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                ids.push(id);
                pos += len;
            }
            None => {
                return Err(Error::UncoveredCharacter {
                    name: name.to_string(),
                    ch: chars[pos],
                })
            }
        }
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

/// Category names with their sub-token index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTokenMap {
    names: Vec<String>,
    token_sets: Vec<Vec<TokenId>>,
}

impl CategoryTokenMap {
    pub fn new(names: Vec<String>, token_sets: Vec<Vec<TokenId>>, vocab_size: usize) -> Result<Self> {
        if names.len() != token_sets.len() {
            return Err(Error::ShapeError(format!(
                "{} names but {} token sets",
                names.len(),
                token_sets.len()
            )));
        }
        let mut sets = Vec::with_capacity(token_sets.len());
        for (k, mut set) in token_sets.into_iter().enumerate() {
            if set.is_empty() {
                return Err(Error::EmptyTokenSet(k));
            }
            if let Some(&bad) = set.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::VocabularyMismatch(format!(
                    "category {k} references id {bad} outside vocabulary of {vocab_size}"
                )));
            }
            set.sort_unstable();
            set.dedup();
            sets.push(set);
        }
        Ok(Self {
            names,
            token_sets: sets,
        })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S], vocab: &Vocabulary) -> Result<Self> {
        let sets = names
            .iter()
            .map(|n| tokenize_category(n.as_ref(), vocab))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            names.iter().map(|n| n.as_ref().to_string()).collect(),
            sets,
            vocab.len(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn token_set(&self, k: usize) -> &[TokenId] {
        &self.token_sets[k]
    }

    pub fn token_sets(&self) -> &[Vec<TokenId>] {
        &self.token_sets
    }

    /// Sorted union of every category's token set.
    pub fn all_ids(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = self.token_sets.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_fixed_special_ids() {
        let v = build_vocabulary(&["cat", "dog"]).unwrap();
        assert_eq!(v.len(), 1008);
        assert_eq!(v.fg(), 2);
        assert_eq!(v.depth(), 5);
        assert_eq!(v.image(), 6);
        assert_eq!(v.custom(0), Some(7));
        assert_eq!(v.id("<custom_0>"), Some(7));
        assert_eq!(v.id("<custom_1000>"), Some(1007));
        assert_eq!(v.custom(1001), None);
        assert_eq!(v.depth_bin_ids(), 8..1008);
        assert_eq!(v.text_ids(), 0..7);
    }

    #[test]
    fn empty_and_duplicate_inputs() {
        let empty: [&str; 0] = [];
        assert_eq!(build_vocabulary(&empty), Err(Error::EmptyVocabulary));
        assert_eq!(
            build_vocabulary(&["a", "a"]),
            Err(Error::DuplicateToken("a".into()))
        );
        assert_eq!(
            build_vocabulary(&["x", "<FG>"]),
            Err(Error::DuplicateToken("<FG>".into()))
        );
        assert!(matches!(
            build_vocabulary(&["a\nb"]),
            Err(Error::InvalidToken(_))
        ));
    }

    #[test]
    fn greedy_segmentation() {
        let v = build_vocabulary(&with_characters(&["cat", "dog", "ca"])).unwrap();
        assert_eq!(tokenize_category("cat", &v).unwrap(), vec![0]);
        assert_eq!(tokenize_category("catdog", &v).unwrap(), vec![0, 1]);
        assert_eq!(tokenize_category("  CAT ", &v).unwrap(), vec![0]);
        assert_eq!(tokenize_category(" ", &v), Err(Error::EmptyName));
    }

    #[test]
    fn character_fallback() {
        let v = build_vocabulary(&with_characters::<&str>(&[])).unwrap();
        let ids = tokenize_category("zebra", &v).unwrap();
        let mut expect: Vec<u32> = "zebra".chars().map(|c| v.id(&c.to_string()).unwrap()).collect();
        expect.sort_unstable();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids, expect);
    }

    #[test]
    fn uncovered_character_is_reported() {
        let v = build_vocabulary(&["cat"]).unwrap();
        assert!(matches!(
            tokenize_category("cab", &v),
            Err(Error::UncoveredCharacter { ch: 'c', .. })
        ));
    }

    #[test]
    fn spaces_are_stripped() {
        let v = build_vocabulary(&with_characters(&["traffic", "light"])).unwrap();
        let a = tokenize_category("traffic light", &v).unwrap();
        let b = tokenize_category("trafficlight", &v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0, 1]);
    }

    #[test]
    fn text_round_trip() {
        let v = build_vocabulary(&["sky", "road"]).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(v.to_text().lines().nth(1), Some("road"));
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn category_map_validation() {
        let v = build_vocabulary(&with_characters(&["street", "light", "traffic"])).unwrap();
        let m = CategoryTokenMap::from_names(&["streetlight", "traffic light"], &v).unwrap();
        // sub-word overlap between categories is legal
        assert!(m.token_set(0).contains(&1) && m.token_set(1).contains(&1));
        assert_eq!(m.all_ids(), vec![0, 1, 2]);
        assert_eq!(
            CategoryTokenMap::new(vec!["a".into()], vec![vec![]], 10),
            Err(Error::EmptyTokenSet(0))
        );
        assert!(CategoryTokenMap::new(vec!["a".into()], vec![vec![10]], 10).is_err());
    }
}
