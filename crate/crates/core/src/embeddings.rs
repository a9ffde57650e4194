//! Word-embedding tables, category representation vectors and the cosine
//! similarity matrices used to steer noise sampling.
//!
//! A category is represented by the arithmetic mean of the embedding vectors
//! of its descriptive tokens. The closed matrix compares the base categories
//! with each other (`n x n`); the open matrix compares the open-noise source
//! categories against the base categories (`m x n`).

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Token to vector lookup parsed from a plain-text embedding file.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
    /// Lines whose token had already been seen; the later line wins.
    pub duplicate_count: usize,
    /// Lines carrying an all-zero vector. They are not stored, since cosine
    /// similarity is undefined for them.
    pub zero_vector_count: usize,
}

impl EmbeddingTable {
    /// Builds a table from in-memory entries. Tokens are lowercased.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut table: Option<EmbeddingTable> = None;
        for (i, (token, vector)) in entries.into_iter().enumerate() {
            let t = table.get_or_insert_with(|| EmbeddingTable::empty(vector.len()));
            t.insert(token.as_ref(), vector, i + 1)?;
        }
        table.ok_or_else(|| Error::EmptyInput("no embedding entries".into()))
    }

    fn empty(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: HashMap::new(),
            duplicate_count: 0,
            zero_vector_count: 0,
        }
    }

    fn insert(&mut self, token: &str, vector: Vec<f64>, line: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Parse {
                line,
                message: format!("expected {} components, found {}", self.dim, vector.len()),
            });
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("non-finite component {bad}"),
            });
        }
        if vector.iter().all(|&v| v == 0.0) {
            self.zero_vector_count += 1;
            return Ok(());
        }
        if self.entries.insert(token.to_lowercase(), vector).is_some() {
            self.duplicate_count += 1;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(&token.to_lowercase()).map(Vec::as_slice)
    }
}

/// Parses the `token f1 f2 ... fdim` line format. The dimension is taken from
/// the first non-blank line.
pub fn parse_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let mut fields = line.split_ascii_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let vector = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("cannot parse `{f}` as a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vector.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("token `{token}` has no vector components"),
            });
        }
        let t = table.get_or_insert_with(|| EmbeddingTable::empty(vector.len()));
        t.insert(token, vector, line_no)?;
    }
    let table = table.ok_or_else(|| Error::EmptyInput("embedding stream has no entries".into()))?;
    if table.duplicate_count > 0 {
        log::warn!(
            "{} duplicate embedding tokens (last occurrence kept)",
            table.duplicate_count
        );
    }
    if table.zero_vector_count > 0 {
        log::warn!("{} zero embedding vectors skipped", table.zero_vector_count);
    }
    Ok(table)
}

/// A named category and the tokens whose vectors are averaged to represent it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub tokens: Vec<String>,
}

fn split_tokens(raw: &str) -> impl Iterator<Item = String> + '_ {
    raw.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl CategorySpec {
    /// Each raw token is lowercased and split on whitespace and underscores,
    /// so `"pickup_truck"` contributes `pickup` and `truck`.
    pub fn new<S: AsRef<str>>(name: impl Into<String>, raw_tokens: &[S]) -> Result<Self> {
        let name = name.into();
        let tokens: Vec<String> = raw_tokens.iter().flat_map(|t| split_tokens(t.as_ref())).collect();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("category `{name}` has no tokens")));
        }
        Ok(CategorySpec { name, tokens })
    }

    /// Derives the tokens from the display name itself.
    pub fn from_name(name: &str) -> Result<Self> {
        CategorySpec::new(name, &[name])
    }
}

/// Parses a category list: one category per line, `name<TAB>tok[,tok...]`.
/// A line without a tab uses the name as its token source. Blank lines and
/// lines starting with `#` are ignored.
pub fn parse_category_list<R: BufRead>(reader: R) -> Result<Vec<CategorySpec>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let spec = match trimmed.split_once('\t') {
            Some((name, toks)) => {
                let raw: Vec<&str> = toks.split(',').collect();
                CategorySpec::new(name.trim(), &raw)
            }
            None => CategorySpec::from_name(trimmed.trim()),
        };
        out.push(spec.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("category list has no entries".into()));
    }
    Ok(out)
}

/// Component-wise mean of the category's token vectors.
pub fn category_vector(spec: &CategorySpec, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; table.dim()];
    for token in &spec.tokens {
        let v = table.get(token).ok_or_else(|| Error::MissingToken {
            token: token.clone(),
            category: spec.name.clone(),
        })?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = spec.tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Closed,
    Open,
}

/// Row-major matrix of cosine similarities. Rows are source categories,
/// columns are base (target) categories.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    kind: MatrixKind,
}

const CLOSED_TOL: f64 = 1e-12;

impl SimilarityMatrix {
    /// Validates and wraps raw values.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, kind: MatrixKind) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix("empty matrix".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMatrix(format!("entry {v} outside [-1, 1]")));
        }
        let m = SimilarityMatrix {
            rows,
            cols,
            values,
            kind,
        };
        if kind == MatrixKind::Closed {
            if rows != cols {
                return Err(Error::InvalidMatrix(format!(
                    "closed matrix must be square, got {rows}x{cols}"
                )));
            }
            for i in 0..rows {
                if (m.get(i, i) - 1.0).abs() > CLOSED_TOL {
                    return Err(Error::InvalidMatrix(format!(
                        "diagonal entry {i} is {} (expected 1)",
                        m.get(i, i)
                    )));
                }
                for j in 0..i {
                    if (m.get(i, j) - m.get(j, i)).abs() > CLOSED_TOL {
                        return Err(Error::InvalidMatrix(format!("not symmetric at ({i}, {j})")));
                    }
                }
            }
        }
        Ok(m)
    }

    /// Cosine similarities between raw representation vectors. For
    /// [`MatrixKind::Closed`] `sources` and `targets` must be the same list;
    /// only the upper triangle is computed and the diagonal is exactly 1.
    pub fn from_vectors(sources: &[Vec<f64>], targets: &[Vec<f64>], kind: MatrixKind) -> Result<Self> {
        for (i, v) in sources.iter().chain(targets).enumerate() {
            if math::norm(v) == 0.0 || !math::norm(v).is_finite() {
                return Err(Error::ZeroNorm {
                    category: format!("#{i}"),
                });
            }
        }
        let (rows, cols) = (sources.len(), targets.len());
        let mut values = vec![0.0; rows * cols];
        match kind {
            MatrixKind::Closed => {
                if sources != targets {
                    return Err(Error::InvalidMatrix(
                        "closed matrix needs identical source and target lists".into(),
                    ));
                }
                for i in 0..rows {
                    values[i * cols + i] = 1.0;
                    for j in i + 1..cols {
                        let c = math::cosine(&sources[i], &targets[j]);
                        values[i * cols + j] = c;
                        values[j * cols + i] = c;
                    }
                }
            }
            MatrixKind::Open => {
                for i in 0..rows {
                    for j in 0..cols {
                        values[i * cols + j] = math::cosine(&sources[i], &targets[j]);
                    }
                }
            }
        }
        SimilarityMatrix::new(rows, cols, values, kind)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Transposed copy. The kind is kept as is, which is only meaningful for
    /// closed matrices (where it is the identity) and for inspection.
    pub fn transpose(&self) -> SimilarityMatrix {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.get(r, c);
            }
        }
        SimilarityMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
            kind: self.kind,
        }
    }
}

/// Similarity between category lists resolved through an embedding table.
pub fn similarity_matrix(
    sources: &[CategorySpec],
    targets: &[CategorySpec],
    table: &EmbeddingTable,
    kind: MatrixKind,
) -> Result<SimilarityMatrix> {
    if kind == MatrixKind::Closed && sources != targets {
        return Err(Error::InvalidMatrix(
            "closed matrix needs identical source and target category lists".into(),
        ));
    }
    let resolve = |specs: &[CategorySpec]| -> Result<Vec<Vec<f64>>> {
        specs
            .iter()
            .map(|s| {
                let v = category_vector(s, table)?;
                if math::norm(&v) == 0.0 {
                    return Err(Error::ZeroNorm {
                        category: s.name.clone(),
                    });
                }
                Ok(v)
            })
            .collect()
    };
    let src = resolve(sources)?;
    let tgt = if kind == MatrixKind::Closed {
        src.clone()
    } else {
        resolve(targets)?
    };
    SimilarityMatrix::from_vectors(&src, &tgt, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(entries: &[(&str, &[f64])]) -> EmbeddingTable {
        EmbeddingTable::from_entries(entries.iter().map(|(t, v)| (*t, v.to_vec()))).unwrap()
    }

    #[test]
    fn parses_fifty_dimensional_line() {
        let floats: Vec<String> = (0..50).map(|i| format!("{}", 0.1 + i as f64 * 0.01)).collect();
        let text = format!("cat {}\n", floats.join(" "));
        let t = parse_embeddings(text.as_bytes()).unwrap();
        assert_eq!(t.dim(), 50);
        assert!(t.get("cat").is_some());
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(parse_embeddings(&b""[..]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn duplicate_token_last_wins() {
        let t = parse_embeddings(&b"a 1 0\na 0 1\n"[..]).unwrap();
        assert_eq!(t.get("a").unwrap(), &[0.0, 1.0]);
        assert_eq!(t.duplicate_count, 1);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        match parse_embeddings(&b"a 1 0\nb 1\n"[..]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_embeddings(&b"a 1 0\nb 1 x\n"[..]) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains('x'));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tokens_are_lowercased() {
        let t = parse_embeddings(&b"Truck 1 2\n"[..]).unwrap();
        assert_eq!(t.get("truck").unwrap(), &[1.0, 2.0]);
        assert_eq!(t.get("TRUCK").unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn category_vector_means() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let single = CategorySpec::new("a", &["a"]).unwrap();
        assert_eq!(category_vector(&single, &t).unwrap(), vec![1.0, 0.0]);
        let pair = CategorySpec::new("ab", &["a", "b"]).unwrap();
        assert_eq!(category_vector(&pair, &t).unwrap(), vec![0.5, 0.5]);
        let missing = CategorySpec::new("am", &["a", "missing"]).unwrap();
        match category_vector(&missing, &t) {
            Err(Error::MissingToken { token, category }) => {
                assert_eq!(token, "missing");
                assert_eq!(category, "am");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multiword_names_split_on_space_and_underscore() {
        let c = CategorySpec::from_name("Pickup_Truck").unwrap();
        assert_eq!(c.tokens, vec!["pickup", "truck"]);
        let c = CategorySpec::new("x", &["sea lion", "seal"]).unwrap();
        assert_eq!(c.tokens, vec!["sea", "lion", "seal"]);
    }

    #[test]
    fn category_list_format() {
        let text = "# header\ncat\tcat\nsea lion\tsea,lion\n\nmaple_tree\n";
        let cats = parse_category_list(text.as_bytes()).unwrap();
        assert_eq!(cats.len(), 3);
        assert_eq!(cats[1].name, "sea lion");
        assert_eq!(cats[1].tokens, vec!["sea", "lion"]);
        assert_eq!(cats[2].tokens, vec!["maple", "tree"]);
    }

    #[test]
    fn similarity_examples() {
        let t = table(&[("x", &[1.0, 0.0]), ("y", &[0.0, 1.0]), ("d", &[1.0, 1.0])]);
        let x = CategorySpec::from_name("x").unwrap();
        let y = CategorySpec::from_name("y").unwrap();
        let d = CategorySpec::from_name("d").unwrap();

        let m = similarity_matrix(std::slice::from_ref(&x), std::slice::from_ref(&y), &t, MatrixKind::Open).unwrap();
        assert_eq!(m.get(0, 0), 0.0);

        // cos((1,1),(1,0)) = 1/sqrt(2)
        let m = similarity_matrix(&[d], std::slice::from_ref(&x), &t, MatrixKind::Open).unwrap();
        assert!((m.get(0, 0) - 0.707_106_781_186_547_5).abs() < 1e-12);

        let cats = vec![x, y];
        let c = similarity_matrix(&cats, &cats, &t, MatrixKind::Closed).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(1, 1), 1.0);
    }

    #[test]
    fn closed_requires_same_lists() {
        let t = table(&[("x", &[1.0, 0.0]), ("y", &[0.0, 1.0])]);
        let x = CategorySpec::from_name("x").unwrap();
        let y = CategorySpec::from_name("y").unwrap();
        assert!(similarity_matrix(&[x], &[y], &t, MatrixKind::Closed).is_err());
    }

    #[test]
    fn zero_norm_category_is_rejected() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[-1.0, 0.0])]);
        let ab = CategorySpec::new("ab", &["a", "b"]).unwrap();
        let a = CategorySpec::from_name("a").unwrap();
        assert!(matches!(
            similarity_matrix(&[ab], &[a], &t, MatrixKind::Open),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn zero_vectors_are_skipped_and_counted() {
        let t = parse_embeddings(&b"a 0 0\nb 1 0\n"[..]).unwrap();
        assert_eq!(t.zero_vector_count, 1);
        assert!(t.get("a").is_none());
    }

    fn vectors(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| math::norm(v) > 1e-3),
            n,
        )
    }

    proptest! {
        #[test]
        fn closed_matrix_invariants(vs in vectors(6, 4)) {
            let m = SimilarityMatrix::from_vectors(&vs, &vs, MatrixKind::Closed).unwrap();
            for i in 0..6 {
                prop_assert!((m.get(i, i) - 1.0).abs() <= 1e-12);
                for j in 0..6 {
                    prop_assert!((m.get(i, j) - m.get(j, i)).abs() <= 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }

        #[test]
        fn open_matrix_transpose_law(a in vectors(3, 5), b in vectors(4, 5)) {
            let ab = SimilarityMatrix::from_vectors(&a, &b, MatrixKind::Open).unwrap();
            let ba = SimilarityMatrix::from_vectors(&b, &a, MatrixKind::Open).unwrap();
            let t = ab.transpose();
            for (x, y) in t.values().iter().zip(ba.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn category_vector_is_permutation_invariant(vs in vectors(4, 3), perm in Just(()).prop_perturb(|_, mut rng| {
            let mut idx: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                let j = (rng.next_u32() as usize) % (i + 1);
                idx.swap(i, j);
            }
            idx
        })) {
            let names = ["w", "x", "y", "z"];
            let t = EmbeddingTable::from_entries(names.iter().zip(&vs).map(|(n, v)| (*n, v.clone()))).unwrap();
            let spec = CategorySpec::new("c", &names).unwrap();
            let shuffled: Vec<&str> = perm.iter().map(|&i| names[i]).collect();
            let spec2 = CategorySpec::new("c", &shuffled).unwrap();
            let a = category_vector(&spec, &t).unwrap();
            let b = category_vector(&spec2, &t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
