//! Interaction corpora: parsing, 5-core filtering, truncation, leave-one-out
//! splitting and the global frequency statistics every adaptive formula uses.
//!
//! Raw item identifiers are remapped to dense [`ItemId`]s in `[0, |V|)`; the
//! [`Vocabulary`] keeps the mapping back to the original integers.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{FaclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One user's chronologically ordered history, earliest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: String,
    pub items: Vec<ItemId>,
}

impl InteractionSequence {
    pub fn new(user: impl Into<String>, items: Vec<ItemId>) -> Self {
        Self {
            user: user.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Dense item index <-> original integer identifier.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    raw: Vec<u64>,
    index: HashMap<u64, ItemId>,
}

impl Vocabulary {
    pub fn from_raw_ids(ids: impl IntoIterator<Item = u64>) -> Self {
        let mut v = Vocabulary::default();
        for id in ids {
            v.intern(id);
        }
        v
    }

    pub fn intern(&mut self, raw: u64) -> ItemId {
        if let Some(&id) = self.index.get(&raw) {
            return id;
        }
        let id = ItemId(self.raw.len() as u32);
        self.raw.push(raw);
        self.index.insert(raw, id);
        id
    }

    pub fn lookup(&self, raw: u64) -> Option<ItemId> {
        self.index.get(&raw).copied()
    }

    pub fn raw_id(&self, item: ItemId) -> u64 {
        self.raw[item.index()]
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> {
        (0..self.raw.len() as u32).map(ItemId)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<InteractionSequence>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// Builds a corpus whose vocabulary is exactly the items it contains,
    /// indexed in order of first appearance.
    pub fn from_raw(sequences: Vec<(String, Vec<u64>)>) -> Self {
        let mut vocab = Vocabulary::default();
        let sequences = sequences
            .into_iter()
            .map(|(user, raw)| {
                let items = raw.into_iter().map(|r| vocab.intern(r)).collect();
                InteractionSequence { user, items }
            })
            .collect();
        Corpus { sequences, vocab }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    fn to_raw(&self) -> Vec<(String, Vec<u64>)> {
        self.sequences
            .iter()
            .map(|s| {
                (
                    s.user.clone(),
                    s.items.iter().map(|&i| self.vocab.raw_id(i)).collect(),
                )
            })
            .collect()
    }

    /// Serializes back to the `user<TAB>item( item)*` format using raw ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            write_line(
                &mut out,
                &s.user,
                s.items.iter().map(|&i| self.vocab.raw_id(i)),
            );
        }
        out
    }
}

pub(crate) fn write_line(out: &mut String, user: &str, items: impl Iterator<Item = u64>) {
    out.push_str(user);
    out.push('\t');
    for (k, item) in items.enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{item}");
    }
    out.push('\n');
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, Vec<u64>)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (user, rest) = line.split_once('\t').ok_or_else(|| FaclError::Parse {
            line: lineno,
            message: "missing tab between user and items".into(),
        })?;
        let user = user.trim();
        if user.is_empty() {
            return Err(FaclError::Parse {
                line: lineno,
                message: "empty user identifier".into(),
            });
        }
        let items = rest
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u64>().map_err(|_| FaclError::Parse {
                    line: lineno,
                    message: format!("non-integer item token `{tok}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(FaclError::Parse {
                line: lineno,
                message: "empty item list".into(),
            });
        }
        if !seen.insert(user.to_string()) {
            return Err(FaclError::DuplicateUser {
                line: lineno,
                user: user.to_string(),
            });
        }
        out.push((lineno, user.to_string(), items));
    }
    Ok(out)
}

/// Parses `user<TAB>item( item)*` lines. Blank lines are ignored.
pub fn parse_interactions(text: &str) -> Result<Corpus> {
    let rows = parse_lines(text)?;
    Ok(Corpus::from_raw(
        rows.into_iter().map(|(_, u, items)| (u, items)).collect(),
    ))
}

/// Parses against a fixed vocabulary; unknown items are an error.
pub fn parse_with_vocabulary(text: &str, vocab: &Vocabulary) -> Result<Vec<InteractionSequence>> {
    parse_lines(text)?
        .into_iter()
        .map(|(line, user, raw)| {
            let items = raw
                .into_iter()
                .map(|r| {
                    vocab.lookup(r).ok_or_else(|| FaclError::Parse {
                        line,
                        message: format!("item {r} is not in the vocabulary"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(InteractionSequence { user, items })
        })
        .collect()
}

/// Iterated k-core filter: drops items seen fewer than `min_count` times and
/// users with fewer than `min_count` interactions until nothing changes.
pub fn apply_five_core_filter(corpus: &Corpus, min_count: usize) -> Result<Corpus> {
    if min_count == 0 {
        return Err(FaclError::Config("min_count must be at least 1".into()));
    }
    let mut rows = corpus.to_raw();
    loop {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for (_, items) in &rows {
            for &i in items {
                *counts.entry(i).or_default() += 1;
            }
        }
        let mut changed = false;
        for (_, items) in rows.iter_mut() {
            let before = items.len();
            items.retain(|i| counts[i] >= min_count);
            changed |= items.len() != before;
        }
        let before = rows.len();
        rows.retain(|(_, items)| items.len() >= min_count);
        changed |= rows.len() != before;
        if !changed {
            break;
        }
    }
    if rows.is_empty() {
        return Err(FaclError::EmptyCorpus { min_count });
    }
    Ok(Corpus::from_raw(rows))
}

/// Keeps the most recent `max_len` items of every sequence.
pub fn truncate_sequences(corpus: &Corpus, max_len: usize) -> Corpus {
    assert!(max_len >= 2, "max_len must be at least 2");
    let rows = corpus
        .to_raw()
        .into_iter()
        .map(|(u, items)| {
            let skip = items.len().saturating_sub(max_len);
            (u, items[skip..].to_vec())
        })
        .collect();
    Corpus::from_raw(rows)
}

/// A prefix and the item that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub user: String,
    pub input: Vec<ItemId>,
    pub target: ItemId,
}

impl LabeledPair {
    /// The full sequence `input ++ [target]`.
    pub fn joined(&self) -> Vec<ItemId> {
        let mut v = self.input.clone();
        v.push(self.target);
        v
    }
}

/// Writes pairs as interaction lines whose last item is the target.
pub fn labeled_pairs_to_text(pairs: &[LabeledPair], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for p in pairs {
        write_line(
            &mut out,
            &p.user,
            p.joined().into_iter().map(|i| vocab.raw_id(i)),
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct Split {
    /// Training sequences, indexed against the parent corpus vocabulary.
    pub train: Corpus,
    pub valid: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
    /// Users with fewer than three interactions.
    pub excluded: Vec<String>,
}

/// Leave-one-out: last item is the test target, second-to-last the
/// validation target, everything before is training data.
pub fn leave_one_out_split(corpus: &Corpus) -> Split {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut excluded = Vec::new();
    for s in &corpus.sequences {
        let n = s.len();
        if n < 3 {
            excluded.push(s.user.clone());
            continue;
        }
        train.push(InteractionSequence::new(
            s.user.clone(),
            s.items[..n - 2].to_vec(),
        ));
        valid.push(LabeledPair {
            user: s.user.clone(),
            input: s.items[..n - 2].to_vec(),
            target: s.items[n - 2],
        });
        test.push(LabeledPair {
            user: s.user.clone(),
            input: s.items[..n - 1].to_vec(),
            target: s.items[n - 1],
        });
    }
    Split {
        train: Corpus {
            sequences: train,
            vocab: corpus.vocab.clone(),
        },
        valid,
        test,
        excluded,
    }
}

/// Per-item occurrence counts over the training split. Items that never occur
/// in training have count zero and are outside the training vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    #[inline]
    pub fn count(&self, item: ItemId) -> u64 {
        self.counts.get(item.index()).copied().unwrap_or(0)
    }

    #[inline]
    pub fn f(&self, item: ItemId) -> f64 {
        self.count(item) as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Items with at least one training occurrence.
    pub fn training_items(&self) -> impl Iterator<Item = (ItemId, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (ItemId(i as u32), c))
    }

    pub fn num_training_items(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn build_frequency_table(train: &Corpus) -> FrequencyTable {
    let mut counts = vec![0u64; train.vocab.len()];
    for s in &train.sequences {
        for &i in &s.items {
            counts[i.index()] += 1;
        }
    }
    FrequencyTable { counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    /// Mean count over items that occur in training.
    pub global_avg_frequency: f64,
    /// Mean training-sequence length.
    pub global_avg_length: f64,
}

pub fn corpus_stats(train: &Corpus, freq: &FrequencyTable) -> Result<CorpusStats> {
    let distinct = freq.num_training_items();
    if train.is_empty() || distinct == 0 {
        return Err(FaclError::Config(
            "statistics need a non-empty training split".into(),
        ));
    }
    Ok(CorpusStats {
        global_avg_frequency: freq.total() as f64 / distinct as f64,
        global_avg_length: train.num_interactions() as f64 / train.len() as f64,
    })
}

/// Half-open count intervals `[edges[i-1], edges[i])`; the last bin is unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrequencyBins {
    pub edges: Vec<u64>,
    pub labels: Vec<String>,
}

impl FrequencyBins {
    pub fn new(edges: Vec<u64>) -> Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FaclError::Config(format!(
                "bin edges must be strictly increasing, got {edges:?}"
            )));
        }
        let labels = match edges.len() {
            0 => vec!["all".to_string()],
            1 => vec!["low".into(), "high".into()],
            2 => vec!["low".into(), "medium".into(), "high".into()],
            n => (0..=n).map(|i| format!("bin{i}")).collect(),
        };
        Ok(Self { edges, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bin_of(&self, count: u64) -> usize {
        self.edges.partition_point(|&e| e <= count)
    }

    pub fn label(&self, bin: usize) -> &str {
        &self.labels[bin]
    }
}

/// Bins for item counts, plus the bin of every item in the table.
pub fn assign_frequency_bins(
    freq: &FrequencyTable,
    edges: &[u64],
) -> Result<(FrequencyBins, Vec<usize>)> {
    let bins = FrequencyBins::new(edges.to_vec())?;
    let per_item = freq.counts().iter().map(|&c| bins.bin_of(c)).collect();
    Ok((bins, per_item))
}

/// Tercile edges of a count distribution; duplicate edges collapse, so
/// heavily tied distributions may yield fewer than three bins.
pub fn tercile_edges(counts: impl IntoIterator<Item = u64>) -> Vec<u64> {
    let mut sorted: Vec<u64> = counts.into_iter().collect();
    if sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_unstable();
    let n = sorted.len();
    let mut edges: Vec<u64> = [n / 3, (2 * n) / 3]
        .iter()
        .map(|&k| sorted[k.min(n - 1)])
        .filter(|&e| e > sorted[0])
        .collect();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(c: &Corpus) -> Vec<(String, Vec<u64>)> {
        c.to_raw()
    }

    fn corpus(rows: &[(&str, &[u64])]) -> Corpus {
        Corpus::from_raw(
            rows.iter()
                .map(|(u, i)| (u.to_string(), i.to_vec()))
                .collect(),
        )
    }

    #[test]
    fn parses_a_line() {
        let c = parse_interactions("u1\t3 7 7 9").unwrap();
        assert_eq!(raw(&c), vec![("u1".to_string(), vec![3, 7, 7, 9])]);
        assert_eq!(c.vocab.len(), 3);
    }

    #[test]
    fn empty_document_is_empty_corpus() {
        let c = parse_interactions("").unwrap();
        assert!(c.is_empty());
        assert!(c.vocab.is_empty());
    }

    #[test]
    fn duplicate_user_rejected() {
        let err = parse_interactions("u1\t3\nu1\t4").unwrap_err();
        assert_eq!(
            err,
            FaclError::DuplicateUser {
                line: 2,
                user: "u1".into()
            }
        );
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        for (text, line) in [
            ("u1 3 4", 1),
            ("u1\t3\nu2\t4 x", 2),
            ("u1\t3\n\nu2\t", 3),
            ("u1\t-3", 1),
        ] {
            match parse_interactions(text) {
                Err(FaclError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let text = "a\t5 1 5\nb\t2\n";
        assert_eq!(parse_interactions(text).unwrap().to_text(), text);
    }

    #[test]
    fn five_core_fixpoint_unchanged() {
        let rows: Vec<(String, Vec<u64>)> = (0..5)
            .map(|u| (format!("u{u}"), vec![1, 2, 3, 4, 5]))
            .collect();
        let c = Corpus::from_raw(rows.clone());
        assert_eq!(raw(&apply_five_core_filter(&c, 5).unwrap()), rows);
    }

    #[test]
    fn min_count_one_is_noop() {
        let c = corpus(&[("a", &[1, 2]), ("b", &[3])]);
        assert_eq!(raw(&apply_five_core_filter(&c, 1).unwrap()), raw(&c));
    }

    fn naive_filter(rows: &[(String, Vec<u64>)], k: usize) -> Vec<(String, Vec<u64>)> {
        let mut rows = rows.to_vec();
        for _ in 0..100 {
            let mut counts: HashMap<u64, usize> = HashMap::new();
            rows.iter()
                .flat_map(|r| &r.1)
                .for_each(|&i| *counts.entry(i).or_default() += 1);
            rows = rows
                .into_iter()
                .map(|(u, v)| {
                    (
                        u,
                        v.into_iter().filter(|i| counts[i] >= k).collect::<Vec<_>>(),
                    )
                })
                .filter(|(_, v)| v.len() >= k)
                .collect();
        }
        rows
    }

    #[test]
    fn five_core_cascade_matches_hand_trace() {
        let c = corpus(&[
            ("u0", &[1, 2, 3, 4, 5, 6]),
            ("u1", &[1, 2, 3, 4, 5, 6]),
            ("u2", &[1, 2, 3, 4, 5, 6]),
            ("u3", &[1, 2, 3, 4, 5, 6]),
            ("u4", &[1, 2, 3, 4, 9, 5]),
            ("u5", &[6, 9, 9, 9, 7]),
        ]);
        // Pass 1: 9 (count 4) and 7 (count 1) go; u5 shrinks to [6] and goes.
        // Pass 2: 6 now has count 4 and goes; u0..u3 keep [1..5], u4 keeps [1,2,3,4,5].
        let out = apply_five_core_filter(&c, 5).unwrap();
        let expected: Vec<(String, Vec<u64>)> = (0..5)
            .map(|u| (format!("u{u}"), vec![1, 2, 3, 4, 5]))
            .collect();
        assert_eq!(raw(&out), expected);
        assert_eq!(raw(&out), naive_filter(&raw(&c), 5));
        assert_eq!(out.vocab.len(), 5);
    }

    #[test]
    fn five_core_empty_result_is_an_error() {
        let c = corpus(&[("a", &[1, 2, 3])]);
        assert_eq!(
            apply_five_core_filter(&c, 5).unwrap_err(),
            FaclError::EmptyCorpus { min_count: 5 }
        );
    }

    #[test]
    fn truncation_keeps_suffix() {
        let long: Vec<u64> = (0..60).collect();
        let c = Corpus::from_raw(vec![
            ("a".into(), long.clone()),
            ("b".into(), (0..10).collect()),
        ]);
        let t = truncate_sequences(&c, 50);
        assert_eq!(raw(&t)[0].1, long[10..].to_vec());
        assert_eq!(raw(&t)[1].1, (0..10).collect::<Vec<u64>>());
        let t = truncate_sequences(&corpus(&[("a", &[1, 2, 3])]), 2);
        assert_eq!(raw(&t)[0].1, vec![2, 3]);
        assert_eq!(t.vocab.len(), 2);
    }

    #[test]
    fn split_examples() {
        let c = corpus(&[("a", &[1, 2, 3, 4, 5]), ("b", &[1, 2, 3]), ("c", &[1, 2])]);
        let id = |r| c.vocab.lookup(r).unwrap();
        let ids = |rs: &[u64]| rs.iter().map(|&r| id(r)).collect::<Vec<_>>();
        let s = leave_one_out_split(&c);
        assert_eq!(s.train.sequences[0].items, ids(&[1, 2, 3]));
        assert_eq!(s.valid[0].input, ids(&[1, 2, 3]));
        assert_eq!(s.valid[0].target, id(4));
        assert_eq!(s.test[0].input, ids(&[1, 2, 3, 4]));
        assert_eq!(s.test[0].target, id(5));
        assert_eq!(s.train.sequences[1].items, ids(&[1]));
        assert_eq!(s.valid[1].input, ids(&[1]));
        assert_eq!(s.valid[1].target, id(2));
        assert_eq!(s.test[1].input, ids(&[1, 2]));
        assert_eq!(s.test[1].target, id(3));
        assert_eq!(s.excluded, vec!["c".to_string()]);
        assert_eq!(s.train.vocab, c.vocab);
    }

    #[test]
    fn frequency_counts_and_stats() {
        let c = corpus(&[("a", &[3, 7, 7, 9]), ("b", &[7])]);
        let f = build_frequency_table(&c);
        let id = |r| c.vocab.lookup(r).unwrap();
        assert_eq!((f.count(id(3)), f.count(id(7)), f.count(id(9))), (1, 3, 1));
        let st = corpus_stats(&c, &f).unwrap();
        assert!((st.global_avg_frequency - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(st.global_avg_length, 2.5);

        let one = corpus(&[("a", &[1])]);
        let f1 = build_frequency_table(&one);
        assert_eq!(f1.counts(), &[1]);
        let st1 = corpus_stats(&one, &f1).unwrap();
        assert_eq!(
            (st1.global_avg_frequency, st1.global_avg_length),
            (1.0, 1.0)
        );

        let disjoint = corpus(&[("a", &[1, 2]), ("b", &[3, 3])]);
        assert_eq!(build_frequency_table(&disjoint).counts(), &[1, 1, 2]);
    }

    #[test]
    fn stats_on_empty_training_split_fail() {
        let c = Corpus::default();
        assert!(corpus_stats(&c, &build_frequency_table(&c)).is_err());
    }

    #[test]
    fn bins_are_left_closed() {
        let b = FrequencyBins::new(vec![10, 50]).unwrap();
        assert_eq!(b.label(b.bin_of(7)), "low");
        assert_eq!(b.label(b.bin_of(10)), "medium");
        assert_eq!(b.label(b.bin_of(49)), "medium");
        assert_eq!(b.label(b.bin_of(50)), "high");
        assert_eq!(b.label(b.bin_of(10_000)), "high");
        let all = FrequencyBins::new(vec![]).unwrap();
        assert_eq!((all.len(), all.bin_of(0), all.bin_of(u64::MAX)), (1, 0, 0));
        assert!(FrequencyBins::new(vec![5, 5]).is_err());
        assert!(FrequencyBins::new(vec![6, 5]).is_err());
    }

    #[test]
    fn terciles() {
        assert_eq!(tercile_edges(1..=9), vec![4, 7]);
        assert_eq!(tercile_edges([1, 1, 1, 1]), Vec::<u64>::new());
        assert_eq!(tercile_edges([1, 1, 1, 5, 5, 9]), vec![5]);
    }
}
