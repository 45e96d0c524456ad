//! On-disk formats: graph directories, edge-feature tables, matrix-market
//! features, JSON documents and checkpoints. Every write goes to a temporary
//! file in the destination directory and is renamed into place.
//!
//! A graph directory holds
//!
//! ```text
//! edges.tsv                 src  dst  weight
//! features.tsv | .mtx       dense rows, or a matrix-market coordinate file
//! nodes.tsv                 node [batch] [community] [class]
//! meta.json                 {"n_nodes", "n_features", "masks": {"train", "val", "test"}}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::edge_features::EdgeFeatureTable;
use crate::error::{Error, Result};
use crate::graph::{Edge, Graph, Masks};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_TSV: &str = "features.tsv";
pub const FEATURES_MTX: &str = "features.mtx";
pub const NODES_FILE: &str = "nodes.tsv";
pub const META_FILE: &str = "meta.json";

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    atomic_write(path, &params.to_checkpoint_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::read_checkpoint(&bytes[..]).map_err(|e| Error::format(path, e.to_string()))
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn parse<T: std::str::FromStr>(path: &Path, line: u64, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: cannot parse {what} from `{field}`")))
}

/// Reads a headed TSV into rows of raw fields.
fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<(u64, Vec<String>)>)> {
    let mut rdr = tsv_reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn expect_header(path: &Path, header: &[String], expected: &[&str]) -> Result<()> {
    if header.len() < expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::format(path, format!("expected header starting with {expected:?}, got {header:?}")));
    }
    Ok(())
}

/// Dense matrix as header-less tab-separated rows.
pub fn write_dense_tsv(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_dense_tsv(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let m = read_matrix(path)?;
    if m.shape() != [rows, cols] {
        return Err(Error::format(path, format!("expected a {rows}×{cols} matrix, got {:?}", m.shape())));
    }
    Ok(m)
}

/// Reads a feature matrix: matrix-market when the extension is `.mtx`,
/// otherwise header-less dense TSV with the shape taken from the file.
pub fn read_matrix(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "mtx") {
        return read_matrix_market(path);
    }
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split('\t')
            .map(|f| parse::<f64>(path, i as u64 + 1, f, "a number"))
            .collect::<Result<Vec<_>>>()?;
        let width = *cols.get_or_insert(vals.len());
        if vals.len() != width {
            return Err(Error::format(path, format!("line {}: expected {width} columns, got {}", i + 1, vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

/// Coordinate-format matrix-market writer (`real general`, 1-based).
pub fn write_matrix_market(path: &Path, m: &Tensor) -> Result<()> {
    let mut body = String::new();
    let mut nnz = 0;
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if *v != 0.0 {
                body.push_str(&format!("{} {} {v}\n", r + 1, c + 1));
                nnz += 1;
            }
        }
    }
    let text = format!(
        "%%MatrixMarket matrix coordinate real general\n{} {} {nnz}\n{body}",
        m.rows(),
        m.cols()
    );
    atomic_write(path, text.as_bytes())
}

/// Reads a `coordinate` matrix-market file with `real`, `integer` or
/// `pattern` entries and `general` symmetry; duplicates are summed.
pub fn read_matrix_market(path: &Path) -> Result<Tensor> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let (_, banner) = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let tokens: Vec<String> = banner.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" || tokens[2] != "coordinate" {
        return Err(Error::format(path, format!("unsupported banner `{banner}`")));
    }
    let pattern = match tokens[3].as_str() {
        "real" | "integer" => false,
        "pattern" => true,
        other => return Err(Error::format(path, format!("unsupported field type `{other}`"))),
    };
    if tokens[4] != "general" {
        return Err(Error::format(path, format!("unsupported symmetry `{}`", tokens[4])));
    }
    let mut body = lines.filter(|(_, l)| !l.starts_with('%') && !l.trim().is_empty());
    let (i, size) = body.next().ok_or_else(|| Error::format(path, "missing size line"))?;
    let dims = size
        .split_whitespace()
        .map(|f| parse::<usize>(path, i as u64 + 1, f, "a size"))
        .collect::<Result<Vec<_>>>()?;
    let [rows, cols, nnz] = dims[..] else {
        return Err(Error::format(path, format!("line {}: size line needs 3 fields", i + 1)));
    };
    let mut m = Tensor::zeros(vec![rows, cols]);
    let mut seen = 0;
    for (i, line) in body {
        let line_no = i as u64 + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        let want = if pattern { 2 } else { 3 };
        if f.len() != want {
            return Err(Error::format(path, format!("line {line_no}: expected {want} fields")));
        }
        let r: usize = parse(path, line_no, f[0], "a row index")?;
        let c: usize = parse(path, line_no, f[1], "a column index")?;
        if r == 0 || c == 0 || r > rows || c > cols {
            return Err(Error::format(path, format!("line {line_no}: entry ({r}, {c}) outside {rows}×{cols}")));
        }
        let v: f64 = if pattern { 1.0 } else { parse(path, line_no, f[2], "a value")? };
        m.set(r - 1, c - 1, m.get(r - 1, c - 1) + v);
        seen += 1;
    }
    if seen != nnz {
        return Err(Error::format(path, format!("header declares {nnz} entries, found {seen}")));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sidecar describing a graph directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphMeta {
    pub n_nodes: usize,
    pub n_features: usize,
    #[serde(default)]
    pub masks: Option<MaskIndices>,
}

fn mask_from(path: &Path, idx: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut m = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::format(path, format!("mask index {i} out of range for {n} nodes")));
        }
        m[i] = true;
    }
    Ok(m)
}

/// Writes `g` as a graph directory with dense TSV features.
pub fn write_graph_dir(dir: &Path, g: &Graph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::from("src\tdst\tweight\n");
    for e in g.edges() {
        edges.push_str(&format!("{}\t{}\t{}\n", e.src, e.dst, e.weight));
    }
    atomic_write(&dir.join(EDGES_FILE), edges.as_bytes())?;
    write_dense_tsv(&dir.join(FEATURES_TSV), g.features())?;
    let columns: Vec<(&str, &[usize])> = [("batch", g.batch()), ("community", g.community()), ("class", g.class())]
        .into_iter()
        .filter_map(|(n, l)| l.map(|l| (n, l)))
        .collect();
    let mut nodes = String::from("node");
    for (name, _) in &columns {
        nodes.push('\t');
        nodes.push_str(name);
    }
    nodes.push('\n');
    for i in 0..g.n_nodes() {
        nodes.push_str(&i.to_string());
        for (_, l) in &columns {
            nodes.push_str(&format!("\t{}", l[i]));
        }
        nodes.push('\n');
    }
    atomic_write(&dir.join(NODES_FILE), nodes.as_bytes())?;
    let meta = GraphMeta {
        n_nodes: g.n_nodes(),
        n_features: g.n_features(),
        masks: g.masks().map(|m| MaskIndices {
            train: m.train_nodes(),
            val: m.val_nodes(),
            test: m.test_nodes(),
        }),
    };
    write_json(&dir.join(META_FILE), &meta)
}

/// Loads a graph directory, preferring `features.mtx` over `features.tsv`.
pub fn read_graph_dir(dir: &Path) -> Result<Graph> {
    let meta: GraphMeta = read_json(&dir.join(META_FILE))?;
    let n = meta.n_nodes;
    let mtx = dir.join(FEATURES_MTX);
    let features = if mtx.exists() {
        let m = read_matrix_market(&mtx)?;
        if m.shape() != [n, meta.n_features] {
            return Err(Error::format(&mtx, format!("shape {:?} disagrees with meta {n}×{}", m.shape(), meta.n_features)));
        }
        m
    } else {
        read_dense_tsv(&dir.join(FEATURES_TSV), n, meta.n_features)?
    };
    let path = dir.join(EDGES_FILE);
    let (header, rows) = read_rows(&path)?;
    expect_header(&path, &header, &["src", "dst", "weight"])?;
    let edges = rows
        .iter()
        .map(|(line, f)| {
            Ok(Edge::new(
                parse(&path, *line, &f[0], "a source id")?,
                parse(&path, *line, &f[1], "a target id")?,
                parse(&path, *line, &f[2], "a weight")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(n, edges, features).map_err(|e| Error::format(&path, e.to_string()))?;
    let path = dir.join(NODES_FILE);
    if path.exists() {
        let (header, rows) = read_rows(&path)?;
        expect_header(&path, &header, &["node"])?;
        if rows.len() != n {
            return Err(Error::format(&path, format!("expected {n} rows, got {}", rows.len())));
        }
        let mut cols = vec![vec![0usize; n]; header.len() - 1];
        for (r, (line, f)) in rows.iter().enumerate() {
            let node: usize = parse(&path, *line, &f[0], "a node id")?;
            if node != r {
                return Err(Error::format(&path, format!("line {line}: nodes must be listed in order, got {node}")));
            }
            for (c, col) in cols.iter_mut().enumerate() {
                col[r] = parse(&path, *line, &f[c + 1], "a label")?;
            }
        }
        for (name, labels) in header[1..].iter().zip(cols) {
            g = match name.as_str() {
                "batch" => g.with_batch(labels)?,
                "community" => g.with_community(labels)?,
                "class" => g.with_class(labels)?,
                other => return Err(Error::format(&path, format!("unknown label column `{other}`"))),
            };
        }
    }
    if let Some(m) = &meta.masks {
        let p = dir.join(META_FILE);
        let masks = Masks {
            train: mask_from(&p, &m.train, n)?,
            val: mask_from(&p, &m.val, n)?,
            test: mask_from(&p, &m.test, n)?,
        };
        g = g.with_masks(masks).map_err(|e| Error::format(&p, e.to_string()))?;
    }
    Ok(g)
}

/// Edge-feature table as TSV: `src dst <columns…>` in edge-id order.
pub fn write_edge_table(path: &Path, g: &Graph, table: &EdgeFeatureTable) -> Result<()> {
    table.check_edge_count(g.n_edges())?;
    let mut out = String::from("src\tdst");
    for c in table.columns() {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (id, e) in g.edges().enumerate() {
        out.push_str(&format!("{}\t{}", e.src, e.dst));
        for v in table.row(id) {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads an edge-feature table and checks it row-aligns with `g`.
pub fn read_edge_table(path: &Path, g: &Graph) -> Result<EdgeFeatureTable> {
    let (header, rows) = read_rows(path)?;
    expect_header(path, &header, &["src", "dst"])?;
    let columns: Vec<String> = header[2..].to_vec();
    if rows.len() != g.n_edges() {
        return Err(Error::format(path, format!("expected {} edges, got {}", g.n_edges(), rows.len())));
    }
    let mut data = Vec::with_capacity(rows.len() * columns.len());
    for ((line, f), e) in rows.iter().zip(g.edges()) {
        let (s, d): (usize, usize) = (parse(path, *line, &f[0], "a source id")?, parse(path, *line, &f[1], "a target id")?);
        if (s, d) != (e.src, e.dst) {
            return Err(Error::format(path, format!("line {line}: edge ({s}, {d}) does not match graph edge ({}, {})", e.src, e.dst)));
        }
        for v in &f[2..] {
            data.push(parse(path, *line, v, "a feature value")?);
        }
    }
    let values = Tensor::new(vec![rows.len(), columns.len()], data)?;
    EdgeFeatureTable::new(columns, values).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_market_sums_duplicates_and_reads_pattern() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mtx");
        fs::write(&p, "%%MatrixMarket matrix coordinate real general\n% c\n2 3 3\n1 1 1.5\n2 3 -2\n1 1 0.5\n").unwrap();
        let m = read_matrix_market(&p).unwrap();
        assert_eq!(m.data(), &[2.0, 0.0, 0.0, 0.0, 0.0, -2.0]);
        fs::write(&p, "%%MatrixMarket matrix coordinate pattern general\n2 2 1\n2 1\n").unwrap();
        assert_eq!(read_matrix_market(&p).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn matrix_market_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mtx");
        fs::write(&p, "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1\n").unwrap();
        assert!(matches!(read_matrix_market(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
