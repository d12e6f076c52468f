//! Corpus loading, row serialization, fold planning, and the toy
//! corruptor used by desk-scale experiments.
//!
//! A corpus is described by a JSON manifest listing, per table, one real
//! CSV and one or more synthetic CSVs produced by external generators.
//! Rows become [`RowRecord`]s: ordered `column:value` datums plus a
//! binary label (0 = real, 1 = synthetic) and the source table name.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One table of the corpus: a real CSV and its synthetic counterparts.
#[derive(Debug, Clone)]
pub struct TableSource {
    pub table_name: String,
    pub real_path: PathBuf,
    pub synthetic_paths: Vec<PathBuf>,
    /// Column names from the real file's header, in file order.
    pub column_names: Vec<String>,
}

/// One `column:value` cell. Cell text is preserved byte-for-byte; no
/// numeric re-rendering or case folding happens anywhere downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datum {
    pub column: String,
    pub value: String,
}

impl Datum {
    /// The serialized form `column:value` with no added whitespace.
    pub fn serialized(&self) -> String {
        format!("{}:{}", self.column, self.value)
    }
}

/// One labeled classification instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowRecord {
    /// Source table name (the row's domain).
    pub domain: String,
    /// Index into the fold's training-domain list; -1 until a fold
    /// assigns it, and -1 permanently for held-out-table rows.
    pub domain_id: i64,
    pub datums: Vec<Datum>,
    /// 0 = real, 1 = synthetic.
    pub label: u8,
}

impl RowRecord {
    /// Full row text: datums serialized and joined with single spaces.
    /// This is both the flat-text model input and the text the
    /// character vocabulary is counted over.
    pub fn row_text(&self) -> String {
        let parts: Vec<String> = self.datums.iter().map(|d| d.serialized()).collect();
        parts.join(" ")
    }
}

/// Table-to-role assignment for one cross-validation fold. Train,
/// validation, and test table sets are pairwise disjoint, so both the
/// validation and test tables are entirely unseen during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub train_tables: Vec<String>,
    pub val_tables: Vec<String>,
    pub test_tables: Vec<String>,
}

#[derive(Deserialize)]
struct ManifestFile {
    tables: Vec<ManifestTable>,
}

#[derive(Deserialize)]
struct ManifestTable {
    name: String,
    real: String,
    synthetic: Vec<String>,
}

/// Reads a CSV into (header, rows). Every row must match the header
/// width; the file must contain at least one data row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open csv {}: {}", path.display(), e)))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("bad csv header in {}: {}", path.display(), e)))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::data(format!("empty header in {}", path.display())));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::data(format!("bad csv row in {}: {}", path.display(), e)))?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "empty table: {} has a header but no rows",
            path.display()
        )));
    }
    Ok((headers, rows))
}

/// Loads and validates a corpus manifest. Synthetic files must carry
/// exactly the same column set as their table's real file (order may
/// differ); table names must be unique.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<TableSource>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.to_path_buf(), e))?;
    let manifest: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("manifest {}: {}", manifest_path.display(), e)))?;
    if manifest.tables.is_empty() {
        return Err(Error::data("manifest lists no tables"));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = BTreeSet::new();
    let mut sources = Vec::new();
    for t in &manifest.tables {
        if !seen.insert(t.name.clone()) {
            return Err(Error::data(format!("duplicate table name: {}", t.name)));
        }
        if t.synthetic.is_empty() {
            return Err(Error::data(format!(
                "table {} lists no synthetic files",
                t.name
            )));
        }
        let real_path = base.join(&t.real);
        let (columns, _) = read_csv(&real_path)?;
        for c in &columns {
            if c.is_empty() {
                return Err(Error::data(format!(
                    "table {}: empty column name in {}",
                    t.name,
                    real_path.display()
                )));
            }
            if c.contains(':') {
                log::warn!(
                    "table {}: column name {:?} contains ':'; datum text is not re-splittable",
                    t.name,
                    c
                );
            }
        }
        let real_set: BTreeSet<&String> = columns.iter().collect();
        let mut synthetic_paths = Vec::new();
        for s in &t.synthetic {
            let sp = base.join(s);
            let (scols, _) = read_csv(&sp)?;
            let syn_set: BTreeSet<&String> = scols.iter().collect();
            if let Some(missing) = real_set.difference(&syn_set).next() {
                return Err(Error::data(format!(
                    "table {}: synthetic file {} is missing column {:?}",
                    t.name,
                    sp.display(),
                    missing
                )));
            }
            if let Some(extra) = syn_set.difference(&real_set).next() {
                return Err(Error::data(format!(
                    "table {}: synthetic file {} has unknown column {:?}",
                    t.name,
                    sp.display(),
                    extra
                )));
            }
            synthetic_paths.push(sp);
        }
        sources.push(TableSource {
            table_name: t.name.clone(),
            real_path,
            synthetic_paths,
            column_names: columns,
        });
    }
    Ok(sources)
}

/// Pairs column names with cell text, preserving cells byte-for-byte.
pub fn serialize_row(column_names: &[String], cells: &[String]) -> Result<Vec<Datum>> {
    if column_names.len() != cells.len() {
        return Err(Error::data(format!(
            "row width {} does not match header width {}",
            cells.len(),
            column_names.len()
        )));
    }
    Ok(column_names
        .iter()
        .zip(cells)
        .map(|(c, v)| Datum {
            column: c.clone(),
            value: v.clone(),
        })
        .collect())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic per-purpose sub-seed; independent of table order in
/// the manifest because it hashes the table name rather than its index.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a(&bytes)
}

/// Draws `k` distinct indices from `0..n` by partial Fisher-Yates;
/// result order is the draw order.
fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Builds the labeled row mixture: per table, `budget/2` real rows and
/// `budget/2` synthetic rows, the synthetic half split as evenly as
/// possible across that table's generators (first files in manifest
/// order absorb the remainder). Sampling is without replacement and
/// fully determined by `seed`.
///
/// Synthetic cells are re-ordered into the real file's column order, so
/// datum order is canonical per table regardless of generator output
/// order.
pub fn build_rows(
    sources: &[TableSource],
    per_table_budget: usize,
    seed: u64,
) -> Result<Vec<RowRecord>> {
    if per_table_budget < 2 {
        return Err(Error::data("per-table budget must be at least 2"));
    }
    let n_real = per_table_budget / 2;
    let n_syn_total = per_table_budget / 2;

    let mut out = Vec::new();
    for src in sources {
        let (headers, real_rows) = read_csv(&src.real_path)?;
        if real_rows.len() < n_real {
            return Err(Error::data(format!(
                "table {}: need {} real rows, file has {}",
                src.table_name,
                n_real,
                real_rows.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("{}::real", src.table_name)));
        for idx in sample_indices(real_rows.len(), n_real, &mut rng) {
            out.push(RowRecord {
                domain: src.table_name.clone(),
                domain_id: -1,
                datums: serialize_row(&headers, &real_rows[idx])?,
                label: 0,
            });
        }

        let g = src.synthetic_paths.len();
        let base = n_syn_total / g;
        let rem = n_syn_total % g;
        for (gi, sp) in src.synthetic_paths.iter().enumerate() {
            let want = base + usize::from(gi < rem);
            if want == 0 {
                continue;
            }
            let (sheaders, srows) = read_csv(sp)?;
            if srows.len() < want {
                return Err(Error::data(format!(
                    "table {}: need {} synthetic rows from {}, file has {}",
                    src.table_name,
                    want,
                    sp.display(),
                    srows.len()
                )));
            }
            // Map the synthetic file's column order onto the real one.
            let order: Vec<usize> = src
                .column_names
                .iter()
                .map(|c| {
                    sheaders
                        .iter()
                        .position(|s| s == c)
                        .expect("validated by load_corpus")
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
                seed,
                &format!("{}::syn{}", src.table_name, gi),
            ));
            for idx in sample_indices(srows.len(), want, &mut rng) {
                let cells: Vec<String> =
                    order.iter().map(|&j| srows[idx][j].clone()).collect();
                out.push(RowRecord {
                    domain: src.table_name.clone(),
                    domain_id: -1,
                    datums: serialize_row(&src.column_names, &cells)?,
                    label: 1,
                });
            }
        }
    }
    Ok(out)
}

/// Partitions tables into the 3 cross-table folds: a seeded shuffle of
/// the (sorted) table names, split into near-equal groups G0..G2; fold
/// k tests on Gk, validates on G(k+1 mod 3), trains on the remaining
/// group. Sorting before the shuffle makes the plans independent of
/// input order.
pub fn build_fold_plans(table_names: &[String], seed: u64) -> Result<Vec<FoldPlan>> {
    let mut names: Vec<String> = table_names.to_vec();
    names.sort();
    names.dedup();
    if names.len() != table_names.len() {
        return Err(Error::data("duplicate table names in fold planning"));
    }
    if names.len() < 3 {
        return Err(Error::data(format!(
            "cross-table folds need at least 3 tables, got {}",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "fold-shuffle"));
    let n = names.len();
    for i in 0..n - 1 {
        let j = i + rng.random_range(0..n - i);
        names.swap(i, j);
    }
    let base = n / 3;
    let rem = n % 3;
    let mut groups: Vec<Vec<String>> = Vec::with_capacity(3);
    let mut start = 0;
    for gi in 0..3 {
        let size = base + usize::from(gi < rem);
        groups.push(names[start..start + size].to_vec());
        start += size;
    }
    let plans: Vec<FoldPlan> = (0..3)
        .map(|k| FoldPlan {
            fold_index: k,
            test_tables: groups[k].clone(),
            val_tables: groups[(k + 1) % 3].clone(),
            train_tables: groups[(k + 2) % 3].clone(),
        })
        .collect();
    validate_fold_plans(&plans, table_names)?;
    Ok(plans)
}

/// Runtime assertion of the fold-plan contract: the three table sets of
/// every fold are pairwise disjoint and cover the corpus, and each
/// table appears in exactly one test set across the folds.
pub fn validate_fold_plans(plans: &[FoldPlan], all_tables: &[String]) -> Result<()> {
    let all: BTreeSet<&String> = all_tables.iter().collect();
    let mut tested: Vec<&String> = Vec::new();
    for p in plans {
        let train: BTreeSet<&String> = p.train_tables.iter().collect();
        let val: BTreeSet<&String> = p.val_tables.iter().collect();
        let test: BTreeSet<&String> = p.test_tables.iter().collect();
        if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
            return Err(Error::data(format!(
                "fold {}: train/val/test table sets overlap",
                p.fold_index
            )));
        }
        let union: BTreeSet<&String> = train.union(&val).chain(test.iter()).copied().collect();
        if union != all {
            return Err(Error::data(format!(
                "fold {}: table groups do not cover the corpus",
                p.fold_index
            )));
        }
        tested.extend(test);
    }
    tested.sort();
    let mut expected: Vec<&String> = all_tables.iter().collect();
    expected.sort();
    if tested != expected {
        return Err(Error::data(
            "fold plans do not test every table exactly once",
        ));
    }
    Ok(())
}

/// Toy synthetic-data generators for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptMode {
    /// Permutes every column independently: marginals preserved,
    /// inter-column dependence destroyed.
    MarginalShuffle,
    /// Adds seeded Gaussian noise at 5% of the column's standard
    /// deviation to cells that parse as numbers; other cells untouched.
    GaussianJitter,
}

impl std::str::FromStr for CorruptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal-shuffle" => Ok(CorruptMode::MarginalShuffle),
            "gaussian-jitter" => Ok(CorruptMode::GaussianJitter),
            other => Err(Error::usage(format!("unknown corrupt mode: {}", other))),
        }
    }
}

/// Writes a corrupted copy of `real_csv` to `out_csv`.
pub fn toy_corruptor(real_csv: &Path, out_csv: &Path, mode: CorruptMode, seed: u64) -> Result<()> {
    let (headers, rows) = read_csv(real_csv)?;
    let n = rows.len();
    let mut columns: Vec<Vec<String>> = (0..headers.len())
        .map(|j| rows.iter().map(|r| r[j].clone()).collect())
        .collect();

    match mode {
        CorruptMode::MarginalShuffle => {
            for (j, col) in columns.iter_mut().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("shuffle-col{}", j)));
                for i in 0..n.saturating_sub(1) {
                    let k = i + rng.random_range(0..n - i);
                    col.swap(i, k);
                }
            }
        }
        CorruptMode::GaussianJitter => {
            for (j, col) in columns.iter_mut().enumerate() {
                let numeric: Vec<f64> = col.iter().filter_map(|c| c.parse::<f64>().ok()).collect();
                if numeric.len() < 2 {
                    continue;
                }
                let mean = numeric.iter().sum::<f64>() / numeric.len() as f64;
                let var = numeric.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (numeric.len() - 1) as f64;
                let scale = 0.05 * var.sqrt();
                if scale == 0.0 {
                    continue;
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("jitter-col{}", j)));
                for cell in col.iter_mut() {
                    if let Ok(v) = cell.parse::<f64>() {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        *cell = format!("{}", v + scale * z);
                    }
                }
            }
        }
    }

    let file = std::fs::File::create(out_csv).map_err(|e| Error::io(out_csv.to_path_buf(), e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(&headers)
        .map_err(|e| Error::data(format!("write {}: {}", out_csv.display(), e)))?;
    for i in 0..n {
        let row: Vec<&String> = columns.iter().map(|c| &c[i]).collect();
        writer
            .write_record(row)
            .map_err(|e| Error::data(format!("write {}: {}", out_csv.display(), e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(out_csv.to_path_buf(), e))?;
    Ok(())
}
