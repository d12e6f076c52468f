//! Character-level tokenization of datums: corpus-derived vocabulary,
//! per-datum encoding with a terminal CLS slot, two-level padding
//! (intra-datum and extra-datum), and batch collation.

use indexmap::IndexMap;
use ndarray::Array2;
use sha2::Digest;
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{Datum, RowRecord};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS_DATUM: u32 = 2;
pub const CLS_TARGET: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

const SPECIAL_NAMES: [&str; 4] = ["<PAD>", "<UNK>", "<CLS_DATUM>", "<CLS_TARGET>"];

/// Immutable character vocabulary. Ids are dense: the four specials
/// occupy 0..4 and characters follow in codepoint order. Characters
/// outside the vocabulary encode as UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    /// Insertion order matches id order (first entry has id 4).
    char_to_id: IndexMap<char, u32>,
}

impl CharVocab {
    pub fn size(&self) -> usize {
        self.char_to_id.len() + NUM_SPECIALS as usize
    }

    pub fn encode_char(&self, c: char) -> u32 {
        self.char_to_id.get(&c).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, c: char) -> bool {
        self.char_to_id.contains_key(&c)
    }

    /// Line-oriented file form: specials first, then one
    /// `codepoint<TAB>id` line per character. Round-trips bit-exactly.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", name, i));
        }
        for (c, id) in &self.char_to_id {
            out.push_str(&format!("{}\t{}\n", *c as u32, id));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| Error::data("vocab file truncated before specials"))?;
            let expected = format!("{}\t{}", name, i);
            if line != expected {
                return Err(Error::data(format!(
                    "vocab file line {:?} does not match expected special {:?}",
                    line, expected
                )));
            }
        }
        let mut char_to_id = IndexMap::new();
        for line in lines {
            let (cp, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("bad vocab line {:?}", line)))?;
            let cp: u32 = cp
                .parse()
                .map_err(|_| Error::data(format!("bad codepoint in vocab line {:?}", line)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::data(format!("bad id in vocab line {:?}", line)))?;
            let c = char::from_u32(cp)
                .ok_or_else(|| Error::data(format!("invalid codepoint {}", cp)))?;
            let expected = NUM_SPECIALS + char_to_id.len() as u32;
            if id != expected {
                return Err(Error::data(format!(
                    "non-dense vocab id {} (expected {})",
                    id, expected
                )));
            }
            if char_to_id.insert(c, id).is_some() {
                return Err(Error::data(format!("duplicate vocab character {:?}", c)));
            }
        }
        Ok(CharVocab { char_to_id })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_file_string(&text)
    }

    /// SHA-256 of the file form, hex-encoded; model files embed this to
    /// cross-check the vocabulary they were trained with.
    pub fn sha256_hex(&self) -> String {
        let digest = sha2::Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// Builds the vocabulary from corpus rows: every character of the
/// serialized row text (datums joined by single spaces, so the
/// flat-text separator is always covered) with frequency >= min_count,
/// ordered by codepoint.
pub fn build_vocab<'a, I>(rows: I, min_count: usize) -> Result<CharVocab>
where
    I: IntoIterator<Item = &'a RowRecord>,
{
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut any = false;
    for row in rows {
        any = true;
        for c in row.row_text().chars() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::data("cannot build a vocabulary from an empty corpus"));
    }
    let mut char_to_id = IndexMap::new();
    for (c, n) in counts {
        if n >= min_count {
            let id = NUM_SPECIALS + char_to_id.len() as u32;
            char_to_id.insert(c, id);
        }
    }
    Ok(CharVocab { char_to_id })
}

/// Counters for silent-but-tracked truncation events.
#[derive(Debug, Default, Clone, Copy)]
pub struct EncodeStats {
    /// Datums whose character text was cut to fit max_datum_len.
    pub datums_truncated: usize,
    /// Datums dropped from rows exceeding the max datum count.
    pub datums_dropped: usize,
    /// Flat-text rows cut to fit the max row length.
    pub rows_flat_truncated: usize,
}

/// Encodes one datum: characters of `column:value` truncated to
/// `max_len - 1`, then CLS_DATUM appended. Returns (ids, cls_position).
pub fn encode_datum(
    d: &Datum,
    vocab: &CharVocab,
    max_len: usize,
    stats: &mut EncodeStats,
) -> (Vec<u32>, usize) {
    assert!(max_len >= 2, "max_len must leave room for one char + CLS");
    let text = d.serialized();
    let mut ids: Vec<u32> = Vec::new();
    let mut truncated = false;
    for c in text.chars() {
        if ids.len() == max_len - 1 {
            truncated = true;
            break;
        }
        ids.push(vocab.encode_char(c));
    }
    if truncated {
        stats.datums_truncated += 1;
    }
    ids.push(CLS_DATUM);
    let cls = ids.len() - 1;
    (ids, cls)
}

/// An encoded-but-unpadded row: the collation precursor.
#[derive(Debug, Clone)]
pub struct EncodedRow {
    /// Per datum: (ids ending in CLS_DATUM, cls position).
    pub datums: Vec<(Vec<u32>, usize)>,
}

impl EncodedRow {
    pub fn max_datum_len(&self) -> usize {
        self.datums.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0)
    }
}

/// Encodes all datums of a row, capping the datum count at
/// `max_datums` (excess datums are dropped and counted).
pub fn encode_row_precursor(
    r: &RowRecord,
    vocab: &CharVocab,
    max_datum_len: usize,
    max_datums: usize,
    stats: &mut EncodeStats,
) -> EncodedRow {
    let keep = r.datums.len().min(max_datums);
    if r.datums.len() > max_datums {
        stats.datums_dropped += r.datums.len() - max_datums;
    }
    let datums = r.datums[..keep]
        .iter()
        .map(|d| encode_datum(d, vocab, max_datum_len, stats))
        .collect();
    EncodedRow { datums }
}

/// One row as a rectangular token grid with masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedRow {
    /// [D, L] token ids; PAD everywhere no real token sits.
    pub token_ids: Array2<u32>,
    /// [D, L]; true exactly where token_ids != PAD.
    pub char_mask: Array2<bool>,
    /// [D]; true for real datums, false for dummy padding datums.
    pub datum_mask: Vec<bool>,
    /// [D]; CLS_DATUM index per datum (0 for dummy datums).
    pub cls_positions: Vec<usize>,
}

/// Pads one encoded row to a fixed [pad_to_datums, pad_to_len] grid:
/// intra-datum padding extends each datum with PAD, extra-datum padding
/// appends all-PAD dummy datums.
pub fn pad_encoded_row(
    row: &EncodedRow,
    pad_to_datums: usize,
    pad_to_len: usize,
) -> Result<TokenizedRow> {
    if row.datums.is_empty() {
        return Err(Error::data("cannot tokenize a row with zero datums"));
    }
    if row.datums.len() > pad_to_datums {
        return Err(Error::data(format!(
            "row has {} datums but pad_to_datums is {}",
            row.datums.len(),
            pad_to_datums
        )));
    }
    if row.max_datum_len() > pad_to_len {
        return Err(Error::data(format!(
            "row has a {}-token datum but pad_to_len is {}",
            row.max_datum_len(),
            pad_to_len
        )));
    }
    let mut token_ids = Array2::<u32>::from_elem((pad_to_datums, pad_to_len), PAD);
    let mut char_mask = Array2::<bool>::from_elem((pad_to_datums, pad_to_len), false);
    let mut datum_mask = vec![false; pad_to_datums];
    let mut cls_positions = vec![0usize; pad_to_datums];
    for (d, (ids, cls)) in row.datums.iter().enumerate() {
        for (j, &id) in ids.iter().enumerate() {
            token_ids[[d, j]] = id;
            char_mask[[d, j]] = true;
        }
        datum_mask[d] = true;
        cls_positions[d] = *cls;
    }
    Ok(TokenizedRow {
        token_ids,
        char_mask,
        datum_mask,
        cls_positions,
    })
}

/// Encodes one row straight to a fixed [pad_to_datums, pad_to_len] grid.
pub fn encode_row(
    r: &RowRecord,
    vocab: &CharVocab,
    max_datum_len: usize,
    pad_to_datums: usize,
    pad_to_len: usize,
    stats: &mut EncodeStats,
) -> Result<TokenizedRow> {
    let precursor = encode_row_precursor(r, vocab, max_datum_len, pad_to_datums, stats);
    pad_encoded_row(&precursor, pad_to_datums, pad_to_len)
}

/// Pads a batch of precursors to shared dimensions: the batch maxima of
/// datum count and datum length.
pub fn collate(rows: &[EncodedRow]) -> Result<Vec<TokenizedRow>> {
    if rows.is_empty() {
        return Err(Error::data("cannot collate an empty batch"));
    }
    let pad_to_datums = rows.iter().map(|r| r.datums.len()).max().unwrap();
    let pad_to_len = rows.iter().map(|r| r.max_datum_len()).max().unwrap();
    rows.iter()
        .map(|r| pad_encoded_row(r, pad_to_datums, pad_to_len))
        .collect()
}

/// Flat-text encoding: CLS_TARGET followed by the characters of the
/// whole serialized row, truncated to `max_row_chars`.
pub fn encode_flat_precursor(
    r: &RowRecord,
    vocab: &CharVocab,
    max_row_chars: usize,
    stats: &mut EncodeStats,
) -> Vec<u32> {
    assert!(max_row_chars >= 2);
    let text = r.row_text();
    let mut ids = vec![CLS_TARGET];
    let mut truncated = false;
    for c in text.chars() {
        if ids.len() == max_row_chars {
            truncated = true;
            break;
        }
        ids.push(vocab.encode_char(c));
    }
    if truncated {
        stats.rows_flat_truncated += 1;
    }
    ids
}

/// Pads flat-encoded rows to the batch maximum length. Returns token
/// ids [B, T] and the matching non-PAD mask.
pub fn collate_flat(rows: &[Vec<u32>]) -> Result<(Array2<u32>, Array2<bool>)> {
    if rows.is_empty() {
        return Err(Error::data("cannot collate an empty batch"));
    }
    let t = rows.iter().map(|r| r.len()).max().unwrap();
    let mut ids = Array2::<u32>::from_elem((rows.len(), t), PAD);
    let mut mask = Array2::<bool>::from_elem((rows.len(), t), false);
    for (i, row) in rows.iter().enumerate() {
        for (j, &id) in row.iter().enumerate() {
            ids[[i, j]] = id;
            mask[[i, j]] = true;
        }
    }
    Ok((ids, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(datums: &[(&str, &str)]) -> RowRecord {
        RowRecord {
            domain: "t".to_string(),
            domain_id: -1,
            datums: datums
                .iter()
                .map(|(c, v)| Datum {
                    column: c.to_string(),
                    value: v.to_string(),
                })
                .collect(),
            label: 0,
        }
    }

    #[test]
    fn vocab_from_single_datum_corpus() {
        let rows = vec![row(&[("a", "1")])];
        let v = build_vocab(&rows, 1).unwrap();
        // Specials plus {'1', ':', 'a'} in codepoint order.
        assert_eq!(v.size(), 7);
        assert_eq!(v.encode_char('1'), 4);
        assert_eq!(v.encode_char(':'), 5);
        assert_eq!(v.encode_char('a'), 6);
        assert_eq!(v.encode_char('z'), UNK);
        let v2 = build_vocab(&rows, 1).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn vocab_min_count_threshold() {
        let rows = vec![row(&[("aa", "z")])];
        // 'a' appears twice, 'z' once, ':' once.
        let v = build_vocab(&rows, 2).unwrap();
        assert!(v.contains('a'));
        assert!(!v.contains('z'));
        assert_eq!(v.encode_char('z'), UNK);
    }

    #[test]
    fn vocab_covers_flat_separator() {
        let rows = vec![row(&[("a", "1"), ("b", "2")])];
        let v = build_vocab(&rows, 1).unwrap();
        assert!(v.contains(' '), "space separator must be in-vocabulary");
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let rows: Vec<RowRecord> = vec![];
        assert!(build_vocab(&rows, 1).is_err());
    }

    #[test]
    fn vocab_file_round_trip_is_bit_exact() {
        let rows = vec![row(&[("age", "39"), ("city", "Paris 9e")])];
        let v = build_vocab(&rows, 1).unwrap();
        let text = v.to_file_string();
        let v2 = CharVocab::from_file_string(&text).unwrap();
        assert_eq!(v, v2);
        assert_eq!(text, v2.to_file_string());
        assert_eq!(v.sha256_hex(), v2.sha256_hex());
    }

    #[test]
    fn encode_datum_appends_cls() {
        let rows = vec![row(&[("a", "1")])];
        let v = build_vocab(&rows, 1).unwrap();
        let mut stats = EncodeStats::default();
        let (ids, cls) = encode_datum(&rows[0].datums[0], &v, 16, &mut stats);
        assert_eq!(ids, vec![v.encode_char('a'), v.encode_char(':'), v.encode_char('1'), CLS_DATUM]);
        assert_eq!(cls, 3);
        assert_eq!(stats.datums_truncated, 0);
    }

    #[test]
    fn encode_datum_truncates_and_counts() {
        let rows = vec![row(&[("ab", "c")])];
        let v = build_vocab(&rows, 1).unwrap();
        let mut stats = EncodeStats::default();
        let (ids, cls) = encode_datum(&rows[0].datums[0], &v, 3, &mut stats);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[2], CLS_DATUM);
        assert_eq!(cls, 2);
        assert_eq!(stats.datums_truncated, 1);
    }

    #[test]
    fn unseen_char_encodes_as_unk() {
        let rows = vec![row(&[("a", "1")])];
        let v = build_vocab(&rows, 1).unwrap();
        let mut stats = EncodeStats::default();
        let euro = row(&[("a", "€")]);
        let (ids, _) = encode_datum(&euro.datums[0], &v, 16, &mut stats);
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn encode_row_masks_follow_invariants() {
        let r = row(&[("ab", "xy"), ("c", "")]);
        let v = build_vocab(&[r.clone()], 1).unwrap();
        let mut stats = EncodeStats::default();
        let t = encode_row(&r, &v, 16, 5, 8, &mut stats).unwrap();
        assert_eq!(t.token_ids.shape(), [5, 8]);
        assert_eq!(t.datum_mask, vec![true, true, false, false, false]);
        // char_mask is true exactly where token != PAD.
        for d in 0..5 {
            for l in 0..8 {
                assert_eq!(t.char_mask[[d, l]], t.token_ids[[d, l]] != PAD);
            }
        }
        // CLS_DATUM is the last unmasked slot of each real datum.
        for d in 0..2 {
            let cls = t.cls_positions[d];
            assert_eq!(t.token_ids[[d, cls]], CLS_DATUM);
            assert!(t.char_mask[[d, cls]]);
            for l in cls + 1..8 {
                assert!(!t.char_mask[[d, l]]);
            }
        }
        // Dummy datums are fully masked.
        for d in 2..5 {
            assert!((0..8).all(|l| !t.char_mask[[d, l]]));
        }
        // "ab:xy" has 5 chars + CLS = 6; "c:" has 2 chars + CLS = 3.
        assert_eq!(t.cls_positions[0], 5);
        assert_eq!(t.cls_positions[1], 2);
    }

    #[test]
    fn encode_row_twice_is_identical() {
        let r = row(&[("ab", "xy"), ("c", "9")]);
        let v = build_vocab(&[r.clone()], 1).unwrap();
        let mut s1 = EncodeStats::default();
        let mut s2 = EncodeStats::default();
        let a = encode_row(&r, &v, 16, 4, 8, &mut s1).unwrap();
        let b = encode_row(&r, &v, 16, 4, 8, &mut s2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collate_uses_batch_maxima() {
        let r1 = row(&[("a", "1"), ("b", "2"), ("c", "3")]);
        let r2 = row(&[("aa", "11"), ("b", "2"), ("c", "3"), ("d", "4"), ("e", "5")]);
        let v = build_vocab(&[r1.clone(), r2.clone()], 1).unwrap();
        let mut stats = EncodeStats::default();
        let p1 = encode_row_precursor(&r1, &v, 64, 64, &mut stats);
        let p2 = encode_row_precursor(&r2, &v, 64, 64, &mut stats);
        let batch = collate(&[p1.clone(), p2]).unwrap();
        assert_eq!(batch[0].token_ids.shape(), batch[1].token_ids.shape());
        assert_eq!(batch[0].token_ids.shape()[0], 5);
        // "aa:11" = 5 chars + CLS.
        assert_eq!(batch[0].token_ids.shape()[1], 6);
        // Singleton batch keeps the row's own maxima.
        let single = collate(&[p1]).unwrap();
        assert_eq!(single[0].token_ids.shape(), [3, 4]);
    }

    #[test]
    fn anagram_pair_has_distinct_id_sequences() {
        let r1 = row(&[("elbow", "201.1")]);
        let r2 = row(&[("below", "1.012")]);
        let v = build_vocab(&[r1.clone(), r2.clone()], 1).unwrap();
        let mut stats = EncodeStats::default();
        let (ids1, _) = encode_datum(&r1.datums[0], &v, 64, &mut stats);
        let (ids2, _) = encode_datum(&r2.datums[0], &v, 64, &mut stats);
        assert_ne!(ids1, ids2);
        // Same character multiset, though: sorting makes them equal.
        let mut s1 = ids1.clone();
        let mut s2 = ids2.clone();
        s1.sort();
        s2.sort();
        assert_eq!(s1, s2);
    }

    #[test]
    fn flat_encoding_prepends_cls_and_truncates() {
        let r = row(&[("ab", "xy"), ("c", "9")]);
        let v = build_vocab(&[r.clone()], 1).unwrap();
        let mut stats = EncodeStats::default();
        let ids = encode_flat_precursor(&r, &v, 256, &mut stats);
        assert_eq!(ids[0], CLS_TARGET);
        // "ab:xy c:9" is 9 chars.
        assert_eq!(ids.len(), 10);
        assert_eq!(stats.rows_flat_truncated, 0);
        let short = encode_flat_precursor(&r, &v, 4, &mut stats);
        assert_eq!(short.len(), 4);
        assert_eq!(stats.rows_flat_truncated, 1);

        let (grid, mask) = collate_flat(&[ids.clone(), short]).unwrap();
        assert_eq!(grid.shape(), [2, 10]);
        assert!(mask[[0, 9]]);
        assert!(!mask[[1, 9]]);
        assert_eq!(grid[[1, 9]], PAD);
    }
}
