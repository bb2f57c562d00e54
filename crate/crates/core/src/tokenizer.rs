//! Byte-pair-encoding subwords over one vocabulary shared by every language,
//! with one language-tag symbol per language appended at the end.
//!
//! Words are whitespace-delimited; the last character of each word carries the
//! end-of-word marker `</w>`, so decoding restores single-space word boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const END_OF_WORD: &str = "</w>";
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// Rendering of [`UNK`] in decoded text.
pub const UNK_MARKER: &str = "<unk>";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("need at least two languages, got {0}")]
    TooFewLanguages(usize),
    #[error("duplicate language {0:?}")]
    DuplicateLanguage(String),
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("token id {0} out of range for vocabulary of {1}")]
    OutOfRange(usize, usize),
    #[error("malformed {kind} file at line {line}: {msg}")]
    Format { kind: &'static str, line: usize, msg: String },
    #[error("{0}")]
    Io(String),
}

/// Ordered merge operations; position is priority.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i == last { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl MergeTable {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        MergeTable { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Learns up to `num_merges` merges, each the most frequent adjacent pair at
    /// its step; ties go to the lexicographically smallest `(left, right)`.
    pub fn learn<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Self, TokenizerError> {
        let mut freqs: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *freqs.entry(w).or_default() += 1;
            }
        }
        if freqs.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut words: Vec<(Vec<String>, usize)> = freqs.into_iter().map(|(w, n)| (word_symbols(w), n)).collect();
        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, n) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, n) in counts {
                if best.is_none_or(|(_, m)| n > m) {
                    best = Some((pair, n));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                if syms.len() > 1 {
                    *syms = merge_pair(syms, &l, &r);
                }
            }
            merges.push((l, r));
        }
        Ok(MergeTable::from_merges(merges))
    }

    /// Segments one word into subword symbols by replaying merges in priority order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            syms = merge_pair(&syms, l, r);
        }
        syms
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(TokenizerError::Format { kind: "merge", line: i + 1, msg: format!("{line:?}") })
                }
            }
        }
        let table = MergeTable::from_merges(merges);
        if table.ranks.len() != table.merges.len() {
            return Err(TokenizerError::Format { kind: "merge", line: 0, msg: "duplicate merge".into() });
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text()).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

/// Tag symbol for a language name.
pub fn tag_symbol(language: &str) -> String {
    format!("<2{language}>")
}

/// Dense id assignment: specials, then subword units, then one tag per language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    units: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
}

impl Vocab {
    /// Builds the shared vocabulary: every corpus character in both word-internal
    /// and word-final form (sorted), then merge results in learning order, then tags.
    pub fn build<S: AsRef<str>>(
        table: &MergeTable,
        corpus: &[S],
        languages: &[&str],
    ) -> Result<Self, TokenizerError> {
        if languages.len() < 2 {
            return Err(TokenizerError::TooFewLanguages(languages.len()));
        }
        let mut seen = BTreeSet::new();
        for l in languages {
            if !seen.insert(*l) {
                return Err(TokenizerError::DuplicateLanguage(l.to_string()));
            }
        }
        let chars: BTreeSet<char> = corpus.iter().flat_map(|l| l.as_ref().chars()).filter(|c| !c.is_whitespace()).collect();
        let mut units: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut base: Vec<String> = chars.iter().flat_map(|c| [c.to_string(), format!("{c}{END_OF_WORD}")]).collect();
        base.sort();
        units.extend(base);
        for (l, r) in table.merges() {
            units.push(format!("{l}{r}"));
        }
        units.extend(languages.iter().map(|l| tag_symbol(l)));
        Self::from_units(units, languages.iter().map(|s| s.to_string()).collect())
    }

    fn from_units(mut units: Vec<String>, languages: Vec<String>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(units.len());
        let mut deduped = Vec::with_capacity(units.len());
        for u in units.drain(..) {
            if !index.contains_key(&u) {
                index.insert(u.clone(), deduped.len());
                deduped.push(u);
            }
        }
        Ok(Vocab { units: deduped, index, languages })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn num_tags(&self) -> usize {
        self.languages.len()
    }

    /// First tag id; every id from here to `len()` is a language tag.
    pub fn first_tag(&self) -> usize {
        self.units.len() - self.languages.len()
    }

    pub fn is_tag(&self, id: usize) -> bool {
        id >= self.first_tag() && id < self.units.len()
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn tag_id(&self, language: &str) -> Result<usize, TokenizerError> {
        self.languages
            .iter()
            .position(|l| l == language)
            .map(|k| self.first_tag() + k)
            .ok_or_else(|| TokenizerError::UnknownLanguage(language.to_string()))
    }

    /// Language name of a tag id.
    pub fn tag_language(&self, id: usize) -> Option<&str> {
        if self.is_tag(id) {
            Some(&self.languages[id - self.first_tag()])
        } else {
            None
        }
    }

    /// Encodes one line; characters absent from the inventory become [`UNK`].
    pub fn encode(&self, text: &str, table: &MergeTable) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            for sym in table.segment_word(word) {
                match self.index.get(&sym) {
                    Some(&id) if id >= SPECIALS.len() && !self.is_tag(id) => ids.push(id),
                    _ => ids.extend(self.unknown_fallback(&sym)),
                }
            }
        }
        ids
    }

    /// Character-level fallback for a symbol missing from the vocabulary.
    fn unknown_fallback(&self, sym: &str) -> Vec<usize> {
        let (body, final_marker) = match sym.strip_suffix(END_OF_WORD) {
            Some(b) => (b, true),
            None => (sym, false),
        };
        let chars: Vec<char> = body.chars().collect();
        chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = if final_marker && i + 1 == chars.len() { format!("{c}{END_OF_WORD}") } else { c.to_string() };
                match self.index.get(&s) {
                    Some(&id) if id >= SPECIALS.len() && !self.is_tag(id) => id,
                    _ => UNK,
                }
            })
            .collect()
    }

    /// Renders ids back to text. PAD, BOS, EOS and tags render as nothing; UNK as [`UNK_MARKER`].
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut s = String::new();
        for &id in ids {
            let unit = self.unit(id).ok_or(TokenizerError::OutOfRange(id, self.len()))?;
            if id == UNK {
                s.push_str(UNK_MARKER);
            } else if id < SPECIALS.len() || self.is_tag(id) {
                continue;
            } else if let Some(body) = unit.strip_suffix(END_OF_WORD) {
                s.push_str(body);
                s.push(' ');
            } else {
                s.push_str(unit);
            }
        }
        Ok(s.trim_end().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for u in &self.units {
            s.push_str(u);
            s.push('\n');
        }
        s
    }

    /// Parses a vocabulary file; trailing `<2name>` lines are the language tags.
    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let units: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if units.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::Format { kind: "vocab", line: i + 1, msg: format!("expected {s}") });
            }
        }
        let mut languages = Vec::new();
        for u in units.iter().rev() {
            match u.strip_prefix("<2").and_then(|r| r.strip_suffix('>')) {
                Some(name) if !name.is_empty() => languages.push(name.to_string()),
                _ => break,
            }
        }
        languages.reverse();
        if languages.len() < 2 {
            return Err(TokenizerError::TooFewLanguages(languages.len()));
        }
        let n = units.len();
        let v = Self::from_units(units, languages)?;
        if v.len() != n {
            return Err(TokenizerError::Format { kind: "vocab", line: 0, msg: "duplicate unit".into() });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text()).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

/// Prepends the tag of `language` to `ids`.
pub fn with_tag(vocab: &Vocab, language: &str, ids: &[usize]) -> Result<Vec<usize>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len() + 1);
    out.push(vocab.tag_id(language)?);
    out.extend_from_slice(ids);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(l: &str, r: &str) -> (String, String) {
        (l.to_string(), r.to_string())
    }

    /// Independent pair counter used to confirm tie situations.
    fn brute_pair_counts(corpus: &[&str]) -> BTreeMap<(String, String), usize> {
        let mut counts = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                let chars: Vec<char> = w.chars().collect();
                for i in 0..chars.len().saturating_sub(1) {
                    let right = if i + 2 == chars.len() { format!("{}</w>", chars[i + 1]) } else { chars[i + 1].to_string() };
                    *counts.entry((chars[i].to_string(), right)).or_default() += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn single_dominant_pair() {
        let t = MergeTable::learn(&["abab abab"], 1).unwrap();
        assert_eq!(t.merges(), &[pair("a", "b")]);
    }

    #[test]
    fn zero_merges_is_character_segmentation() {
        let t = MergeTable::learn(&["hello"], 0).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.segment_word("hello"), vec!["h", "e", "l", "l", "o</w>"]);
    }

    #[test]
    fn tie_goes_to_lexicographically_smallest_pair() {
        let corpus = ["xy cd"];
        let counts = brute_pair_counts(&corpus);
        let max = *counts.values().max().unwrap();
        let tied: Vec<_> = counts.iter().filter(|(_, &n)| n == max).map(|(p, _)| p.clone()).collect();
        assert_eq!(tied, vec![pair("c", "d</w>"), pair("x", "y</w>")]);
        let t = MergeTable::learn(&corpus, 1).unwrap();
        assert_eq!(t.merges()[0], tied[0]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(MergeTable::learn::<&str>(&[], 3), Err(TokenizerError::EmptyCorpus));
        assert_eq!(MergeTable::learn(&["   "], 3), Err(TokenizerError::EmptyCorpus));
    }

    #[test]
    fn merges_stop_when_pairs_run_out() {
        let t = MergeTable::learn(&["ab ab"], 100).unwrap();
        assert_eq!(t.merges(), &[pair("a", "b</w>")]);
    }

    #[test]
    fn fully_merged_word_encodes_to_one_unit() {
        let corpus = ["lower lowest low low"];
        let t = MergeTable::learn(&corpus, 50).unwrap();
        // manual replay on "low"
        let mut syms = vec!["l".to_string(), "o".into(), "w</w>".into()];
        for (l, r) in t.merges() {
            syms = merge_pair(&syms, l, r);
        }
        assert_eq!(syms, vec!["low</w>"]);
        let v = Vocab::build(&t, &corpus, &["a", "b"]).unwrap();
        assert_eq!(v.encode("low", &t), vec![v.id("low</w>").unwrap()]);
    }

    #[test]
    fn vocab_layout() {
        let t = MergeTable::learn(&["ab"], 0).unwrap();
        let v = Vocab::build(&t, &["ab"], &["x", "y", "z"]).unwrap();
        let units: Vec<_> = (0..v.len()).map(|i| v.unit(i).unwrap()).collect();
        assert_eq!(units, vec!["<pad>", "<s>", "</s>", "<unk>", "a", "a</w>", "b", "b</w>", "<2x>", "<2y>", "<2z>"]);
        assert_eq!(v.first_tag(), 8);
        let four = Vocab::build(&t, &["ab"], &["w", "x", "y", "z"]).unwrap();
        assert_eq!(four.num_tags(), 4);
        assert!((four.first_tag()..four.len()).all(|i| four.is_tag(i)));
        assert_eq!(Vocab::build(&t, &["ab"], &["x", "x"]), Err(TokenizerError::DuplicateLanguage("x".into())));
        assert_eq!(Vocab::build(&t, &["ab"], &["x"]), Err(TokenizerError::TooFewLanguages(1)));
    }

    #[test]
    fn each_merge_adds_one_unit() {
        let corpus = ["the cat sat on the mat", "a cat and a hat"];
        let base = Vocab::build(&MergeTable::learn(&corpus, 0).unwrap(), &corpus, &["a", "b"]).unwrap().len();
        for n in 1..12 {
            let t = MergeTable::learn(&corpus, n).unwrap();
            assert_eq!(t.len(), n.min(10));
            assert_eq!(Vocab::build(&t, &corpus, &["a", "b"]).unwrap().len(), base + t.len());
        }
    }

    #[test]
    fn tags() {
        let t = MergeTable::learn(&["ab"], 0).unwrap();
        let v = Vocab::build(&t, &["ab"], &["fr", "es"]).unwrap();
        assert_ne!(v.tag_id("fr").unwrap(), v.tag_id("es").unwrap());
        assert_eq!(v.tag_id("de"), Err(TokenizerError::UnknownLanguage("de".into())));
        let ids = v.encode("ab ba", &t);
        let tagged = with_tag(&v, "es", &ids).unwrap();
        assert_eq!(&tagged[1..], ids.as_slice());
        assert_eq!(v.tag_language(tagged[0]), Some("es"));
        assert!(ids.iter().all(|&i| !v.is_tag(i)));
        // a tag symbol typed as plain text is not a tag
        let t2 = MergeTable::learn(&["<2fr>"], 10).unwrap();
        let v2 = Vocab::build(&t2, &["<2fr>"], &["fr", "es"]).unwrap();
        assert!(v2.encode("<2fr>", &t2).iter().all(|&i| !v2.is_tag(i)));
    }

    #[test]
    fn decode_conventions() {
        let corpus = ["hello world"];
        let t = MergeTable::learn(&corpus, 5).unwrap();
        let v = Vocab::build(&t, &corpus, &["a", "b"]).unwrap();
        assert_eq!(v.decode(&v.encode("hello world", &t)).unwrap(), "hello world");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(v.encode("", &t).is_empty());
        let ids = v.encode("hello wqrld", &t);
        assert!(ids.contains(&UNK));
        assert_eq!(v.decode(&ids).unwrap(), "hello w<unk>rld");
        assert_eq!(v.decode(&[v.len()]), Err(TokenizerError::OutOfRange(v.len(), v.len())));
    }

    #[test]
    fn files_roundtrip() {
        let corpus = ["the cat sat on the mat", "a cat and a hat"];
        let t = MergeTable::learn(&corpus, 8).unwrap();
        let v = Vocab::build(&t, &corpus, &["en", "fr", "es"]).unwrap();
        assert_eq!(MergeTable::from_text(&t.to_text()).unwrap(), t);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(MergeTable::from_text("a b c\n").is_err());
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = ["one two three two one", "three three one"];
        let a = MergeTable::learn(&corpus, 20).unwrap();
        let b = MergeTable::learn(&corpus, 20).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let va = Vocab::build(&a, &corpus, &["x", "y"]).unwrap();
        let vb = Vocab::build(&b, &corpus, &["x", "y"]).unwrap();
        assert_eq!(va.to_text(), vb.to_text());
    }

    proptest! {
        #[test]
        fn roundtrip_over_inventory(words in proptest::collection::vec("[a-f]{1,6}", 0..8), merges in 0usize..30) {
            let corpus = ["abc def fed cab bad", "face bead dab"];
            let t = MergeTable::learn(&corpus, merges).unwrap();
            let v = Vocab::build(&t, &corpus, &["x", "y"]).unwrap();
            let line = words.join(" ");
            let ids = v.encode(&line, &t);
            prop_assert_eq!(&v.encode(&line, &t), &ids);
            prop_assert_eq!(v.decode(&ids).unwrap(), line);
        }
    }
}
