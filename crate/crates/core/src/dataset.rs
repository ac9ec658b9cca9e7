//! CSV corpus loading, whitespace tokenization, vocabulary and a
//! stratified hold-out split.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::SeededRng;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub label: String,
    pub text: String,
}

impl LabeledExample {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        LabeledExample { label: label.into(), text: text.into() }
    }
}

/// A token-id sequence of fixed length with its padding mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub label: usize,
}

impl EncodedExample {
    /// Ids and mask without trailing padding, keeping at least one position.
    pub fn unpadded(&self) -> (&[usize], &[bool]) {
        let n = self.mask.iter().rposition(|&m| m).map_or(1, |i| i + 1).min(self.ids.len());
        (&self.ids[..n], &self.mask[..n])
    }
}

/// Reads a CSV with a header containing `label` and `text` columns.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path)
}

/// [`load_csv`] over any reader; `path` is used only in error messages.
pub fn read_csv(reader: impl std::io::Read, path: &Path) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let malformed = |line: u64, message: String| Error::MalformedRow { path: path.to_path_buf(), line, message };
    let headers = rdr.headers().map_err(|e| malformed(e.position().map_or(1, |p| p.line()), e.to_string()))?.clone();
    let column = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
            .ok_or(Error::MissingColumn { path: path.to_path_buf(), column: name })
    };
    let (label_col, text_col) = (column("label")?, column("text")?);

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| malformed(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let label = record.get(label_col).unwrap_or("").trim();
        let text = record.get(text_col).unwrap_or("").trim();
        if label.is_empty() {
            return Err(malformed(line, "empty label".into()));
        }
        if text.is_empty() {
            return Err(malformed(line, "empty text".into()));
        }
        out.push(LabeledExample::new(label, text));
    }
    Ok(out)
}

/// Writes examples as a `label,text` CSV.
pub fn write_csv(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["label", "text"]).map_err(|e| csv_io(path, e))?;
    for ex in examples {
        w.write_record([&ex.label, &ex.text]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201c}'
                | '\u{201d}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00ab}'
                | '\u{00bb}'
                | '\u{00bf}'
                | '\u{00a1}'
        )
}

/// Lowercases, splits on Unicode whitespace and strips leading and
/// trailing punctuation from each token. Tokens that end up empty are
/// dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.trim_matches(is_punctuation).to_lowercase()).filter(|t| !t.is_empty()).collect()
}

/// Sorted class names and their indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn from_examples(examples: &[LabeledExample]) -> Self {
        let mut names: Vec<String> = examples.iter().map(|e| e.label.clone()).collect();
        names.sort();
        names.dedup();
        LabelMap { names }
    }

    pub fn from_names(mut names: Vec<String>) -> Self {
        names.sort();
        names.dedup();
        LabelMap { names }
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(label)).ok()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved entries plus every token seen at least `min_count` times,
    /// in order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut order = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let kept = order.into_iter().filter(|t| counts[t] >= min_count);
        Self::from_tokens([PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()].into_iter().chain(kept).collect())
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::InvalidArgument(format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids truncated or padded to `max_len`, with the padding mask. A text
    /// without tokens encodes as a single UNK.
    pub fn encode(&self, text: &str, max_len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids: Vec<usize> = tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect();
        if ids.is_empty() && max_len > 0 {
            ids.push(UNK_ID);
        }
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < real).collect();
        (ids, mask)
    }

    /// Token strings for every non-padding id.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter(|&&id| id != PAD_ID).map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_owned()).collect()
    }

    /// Encodes labeled examples against an existing vocabulary.
    pub fn encode_examples(&self, examples: &[LabeledExample], max_len: usize, labels: &LabelMap) -> Result<Vec<EncodedExample>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        examples
            .iter()
            .map(|ex| {
                let label = labels.index(&ex.label).ok_or_else(|| Error::InvalidArgument(format!("unknown label `{}`", ex.label)))?;
                let (ids, mask) = self.encode(&ex.text, max_len);
                Ok(EncodedExample { ids, mask, label })
            })
            .collect()
    }
}

/// Builds a vocabulary from `examples` and encodes them with it.
pub fn build_vocab_encode(
    examples: &[LabeledExample],
    min_count: usize,
    max_len: usize,
    labels: &LabelMap,
) -> Result<(Vocabulary, Vec<EncodedExample>)> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to build a vocabulary from"));
    }
    let vocab = Vocabulary::build(examples.iter().map(|e| e.text.as_str()), min_count)?;
    let encoded = vocab.encode_examples(examples, max_len, labels)?;
    Ok((vocab, encoded))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub label_map: LabelMap,
}

/// Per class, `floor(count × test_fraction)` examples go to test, kept
/// within `[1, count − 1]` so both sides see every class with at least
/// two examples. Classes with a single example stay in train.
/// Both sides keep input order.
pub fn stratified_split(examples: &[LabeledExample], test_fraction: f64, rng: &mut SeededRng) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_class.entry(&ex.label).or_default().push(i);
    }
    let mut in_test = vec![false; examples.len()];
    for (label, mut idx) in by_class {
        let count = idx.len();
        if count < 2 {
            log::warn!("class `{label}` has {count} example(s); keeping it in train only");
            continue;
        }
        let take = ((count as f64 * test_fraction + 1e-9).floor() as usize).clamp(1, count - 1);
        rng.shuffle(&mut idx);
        for &i in &idx[..take] {
            in_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = examples.iter().zip(&in_test).partition(|(_, &t)| t);
    Ok(DatasetSplit {
        train: train.into_iter().map(|(e, _)| e.clone()).collect(),
        test: test.into_iter().map(|(e, _)| e.clone()).collect(),
        label_map: LabelMap::from_examples(examples),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<Vec<LabeledExample>> {
        read_csv(s.as_bytes(), Path::new("inline.csv"))
    }

    #[test]
    fn toy_csv_keeps_file_order_and_quoted_commas() {
        let rows = parse("label,text\nflu,\"fever, chills\"\ncold,sneezing\nflu,\"aches, \"\"bad\"\" ones\"\n").unwrap();
        assert_eq!(
            rows,
            vec![
                LabeledExample::new("flu", "fever, chills"),
                LabeledExample::new("cold", "sneezing"),
                LabeledExample::new("flu", "aches, \"bad\" ones"),
            ]
        );
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse("label,text\n").unwrap().is_empty());
    }

    #[test]
    fn extra_columns_and_reordering_are_fine() {
        let rows = parse("id,text,label\n0,itchy skin,Psoriasis\n").unwrap();
        assert_eq!(rows, vec![LabeledExample::new("Psoriasis", "itchy skin")]);
    }

    #[test]
    fn missing_column_is_named() {
        match parse("label,body\na,b\n") {
            Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "text"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse("label,text\na,b\nc\n") {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse("label,text\na,b\nc,  \n") {
            Err(Error::MalformedRow { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("empty text"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_csv("/nonexistent/file.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let rows = vec![LabeledExample::new("a", "x, y"), LabeledExample::new("b", "line\nbreak")];
        write_csv(&p, &rows).unwrap();
        assert_eq!(load_csv(&p).unwrap(), rows);
    }

    #[test]
    fn punctuation_is_stripped() {
        assert_eq!(tokenize("Fever, rash."), vec!["fever", "rash"]);
        assert_eq!(tokenize("  “Itchy”\tskin… don't "), vec!["itchy", "skin", "don't"]);
        assert!(tokenize("-- ...").is_empty());
    }

    #[test]
    fn tokenless_text_encodes_as_unk() {
        let v = Vocabulary::build(["a"], 1).unwrap();
        assert_eq!(v.encode("?!", 3), (vec![UNK_ID, PAD_ID, PAD_ID], vec![true, false, false]));
    }

    #[test]
    fn min_count_threshold() {
        let ex = vec![LabeledExample::new("x", "a b"), LabeledExample::new("x", "a c")];
        let labels = LabelMap::from_examples(&ex);
        let (vocab, enc) = build_vocab_encode(&ex, 2, 3, &labels).unwrap();
        assert_eq!(vocab.tokens(), &[PAD_TOKEN, UNK_TOKEN, "a"]);
        assert_eq!(enc[0].ids, vec![2, UNK_ID, PAD_ID]);
        assert_eq!(enc[1].ids, vec![2, UNK_ID, PAD_ID]);
        assert_eq!(enc[0].mask, vec![true, true, false]);
    }

    #[test]
    fn truncation_leaves_no_padding() {
        let ex = vec![LabeledExample::new("x", "one two three four five six")];
        let (_, enc) = build_vocab_encode(&ex, 1, 4, &LabelMap::from_examples(&ex)).unwrap();
        assert_eq!(enc[0].ids, vec![2, 3, 4, 5]);
        assert!(enc[0].mask.iter().all(|&m| m));
    }

    #[test]
    fn empty_example_list_is_rejected() {
        assert!(matches!(build_vocab_encode(&[], 1, 4, &LabelMap::from_names(vec![])), Err(Error::Empty(_))));
    }

    #[test]
    fn vocabulary_restores_from_tokens() {
        let v = Vocabulary::build(["b a b"], 1).unwrap();
        let w = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(v, w);
        assert!(Vocabulary::from_tokens(vec!["a".into(), "b".into()]).is_err());
        assert!(Vocabulary::from_tokens(vec![PAD_TOKEN.into(), UNK_TOKEN.into(), "x".into(), "x".into()]).is_err());
    }

    fn classes(per_class: usize, k: usize) -> Vec<LabeledExample> {
        (0..per_class * k).map(|i| LabeledExample::new(format!("c{}", i % k), format!("text {i}"))).collect()
    }

    fn per_class(rows: &[LabeledExample]) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in rows {
            *m.entry(r.label.clone()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn fifty_per_class_splits_ten_forty() {
        let split = stratified_split(&classes(50, 24), 0.2, &mut SeededRng::new(42)).unwrap();
        assert!(per_class(&split.test).values().all(|&c| c == 10));
        assert!(per_class(&split.train).values().all(|&c| c == 40));
        assert_eq!(split.label_map.len(), 24);
    }

    #[test]
    fn half_of_two_is_one() {
        let split = stratified_split(&classes(2, 3), 0.5, &mut SeededRng::new(1)).unwrap();
        assert!(per_class(&split.test).values().all(|&c| c == 1));
        assert!(per_class(&split.train).values().all(|&c| c == 1));
    }

    #[test]
    fn singleton_class_stays_in_train() {
        let mut rows = classes(5, 2);
        rows.push(LabeledExample::new("lonely", "only one"));
        let split = stratified_split(&rows, 0.2, &mut SeededRng::new(3)).unwrap();
        assert!(split.train.iter().any(|e| e.label == "lonely"));
        assert!(!split.test.iter().any(|e| e.label == "lonely"));
        assert_eq!(per_class(&split.test)["c0"], 1);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(stratified_split(&classes(4, 2), f, &mut SeededRng::new(0)).is_err());
        }
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(per in 1usize..12, k in 1usize..6, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let rows = classes(per, k);
            let a = stratified_split(&rows, frac, &mut SeededRng::new(seed)).unwrap();
            let b = stratified_split(&rows, frac, &mut SeededRng::new(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.train.len() + a.test.len(), rows.len());
            let mut all: Vec<_> = a.train.iter().chain(&a.test).map(|e| e.text.clone()).collect();
            all.sort();
            let mut expected: Vec<_> = rows.iter().map(|e| e.text.clone()).collect();
            expected.sort();
            prop_assert_eq!(all, expected);
            let test_counts = per_class(&a.test);
            for label in per_class(&rows).keys() {
                let want = if per < 2 { 0 } else { ((per as f64 * frac + 1e-9).floor() as usize).clamp(1, per - 1) };
                prop_assert_eq!(test_counts.get(label).copied().unwrap_or(0), want);
            }
        }

        #[test]
        fn decode_inverts_encode_for_known_tokens(words in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
            let text = words.join(" ");
            let vocab = Vocabulary::build([text.as_str()], 1).unwrap();
            let (ids, _) = vocab.encode(&text, words.len() + 3);
            prop_assert_eq!(vocab.decode(&ids), tokenize(&text));
        }
    }
}
