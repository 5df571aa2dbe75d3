//! File formats: graph and belief JSON, dense CSV tables, task bundles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dist::{DirectedMarginals, EdgeBeliefs};
use crate::graph::{DirectedGraph, SkeletonGraph};
use crate::taskgen::{TaskMeta, TaskSample};
use crate::trainer::write_atomic;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    p: usize,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonJson {
    p: usize,
    links: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BeliefsJson {
    p: usize,
    nu: Vec<f64>,
    s: Vec<f64>,
}

pub fn graph_to_json(g: &DirectedGraph) -> String {
    let doc = GraphJson {
        p: g.p(),
        edges: g.edges().into_iter().map(|(j, k)| [j, k]).collect(),
    };
    serde_json::to_string(&doc).expect("graph serializes")
}

pub fn graph_from_json(text: &str) -> Result<DirectedGraph> {
    let doc: GraphJson = serde_json::from_str(text)?;
    let edges: Vec<_> = doc.edges.iter().map(|&[j, k]| (j, k)).collect();
    DirectedGraph::from_edges(doc.p, &edges)
}

pub fn skeleton_to_json(a: &SkeletonGraph) -> String {
    let doc = SkeletonJson {
        p: a.p(),
        links: a.links().into_iter().map(|(j, k)| [j, k]).collect(),
    };
    serde_json::to_string(&doc).expect("skeleton serializes")
}

pub fn skeleton_from_json(text: &str) -> Result<SkeletonGraph> {
    let doc: SkeletonJson = serde_json::from_str(text)?;
    if let Some(&[j, k]) = doc.links.iter().find(|[j, k]| j >= k) {
        return Err(Error::Format(format!("link [{j},{k}] must have j < k")));
    }
    let links: Vec<_> = doc.links.iter().map(|&[j, k]| (j, k)).collect();
    SkeletonGraph::from_links(doc.p, &links)
}

/// `nu` holds the strict upper triangle row by row.
pub fn beliefs_to_json(b: &EdgeBeliefs) -> String {
    let doc = BeliefsJson {
        p: b.p(),
        nu: b.nu_upper(),
        s: b.scores().to_vec(),
    };
    serde_json::to_string(&doc).expect("beliefs serialize")
}

pub fn beliefs_from_json(text: &str) -> Result<EdgeBeliefs> {
    let doc: BeliefsJson = serde_json::from_str(text)?;
    let p = doc.p;
    if doc.nu.len() != p * p.saturating_sub(1) / 2 {
        return Err(Error::DimensionMismatch {
            expected: p * p.saturating_sub(1) / 2,
            got: doc.nu.len(),
        });
    }
    let mut dense = vec![0.0; p * p];
    let mut it = doc.nu.iter();
    for j in 0..p {
        for k in j + 1..p {
            let v = *it.next().unwrap();
            dense[j * p + k] = v;
            dense[k * p + j] = v;
        }
    }
    EdgeBeliefs::from_probs(p, &dense, doc.s)
}

fn format_cell(x: f64) -> String {
    format!("{x:.16e}")
}

/// Dense `p×p` CSV without a header.
pub fn marginals_to_csv(r: &DirectedMarginals) -> String {
    let p = r.p();
    let mut s = String::new();
    for row in r.as_dense().chunks(p.max(1)).take(p) {
        s.push_str(
            &row.iter()
                .map(|&x| format_cell(x))
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
    }
    s
}

/// A numeric table with optional column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Option<Vec<String>>,
    pub data: Tensor,
}

/// Writes an `[n, p]` tensor with a `x0,x1,…` header and 17 significant
/// digits, which round-trips every `f64`.
pub fn data_to_csv(x: &Tensor) -> Result<String> {
    let [_, p] = x.shape() else {
        return Err(Error::shape(
            "data_to_csv",
            format!("expected [n, p], got {:?}", x.shape()),
        ));
    };
    let p = *p;
    let mut s = (0..p)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for row in x.data().chunks(p.max(1)) {
        s.push_str(
            &row.iter()
                .map(|&v| format_cell(v))
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
    }
    Ok(s)
}

/// Reads a rectangular numeric CSV. A first line that does not parse as
/// numbers is taken as a header. Rows and columns in errors are 1-based
/// over the file's data rows.
pub fn data_from_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records().peekable();
    let mut columns = None;
    if let Some(Ok(first)) = records.peek() {
        if first.iter().any(|c| c.parse::<f64>().is_err()) && first.iter().all(|c| !c.is_empty()) {
            columns = Some(first.iter().map(str::to_string).collect::<Vec<_>>());
            records.next();
        }
    }
    let mut data = Vec::new();
    let mut width = columns.as_ref().map(Vec::len);
    let mut n = 0;
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let row = i + 1;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Data {
                    row,
                    col: rec.len().min(w) + 1,
                    msg: format!("row has {} cells, expected {w}", rec.len()),
                })
            }
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data {
                    row,
                    col: j + 1,
                    msg: format!("`{cell}` is not a finite number"),
                })?;
            data.push(v);
        }
        n += 1;
    }
    let p = width.unwrap_or(0);
    if n == 0 || p == 0 {
        return Err(Error::Data {
            row: 0,
            col: 0,
            msg: "table has no data".into(),
        });
    }
    Ok(Table {
        columns,
        data: Tensor::new(&[n, p], data)?,
    })
}

/// Centers each column and scales it to unit variance (divisor n).
/// Constant columns are only centered.
pub fn standardize_columns(x: &mut Tensor) -> Result<()> {
    let [n, p] = *x.shape() else {
        return Err(Error::shape(
            "standardize_columns",
            format!("expected [n, p], got {:?}", x.shape()),
        ));
    };
    let data = x.data_mut();
    for j in 0..p {
        let mean = (0..n).map(|i| data[i * p + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (data[i * p + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * p + j] = (data[i * p + j] - mean) / sd;
        }
    }
    Ok(())
}

pub const BUNDLE_DATA: &str = "data.csv";
pub const BUNDLE_GRAPH: &str = "graph.json";
pub const BUNDLE_META: &str = "meta.json";

pub fn write_bundle(dir: &Path, task: &TaskSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(BUNDLE_DATA), data_to_csv(&task.x)?.as_bytes())?;
    write_atomic(
        &dir.join(BUNDLE_GRAPH),
        graph_to_json(&task.gstar).as_bytes(),
    )?;
    write_atomic(
        &dir.join(BUNDLE_META),
        serde_json::to_string_pretty(&task.meta)?.as_bytes(),
    )
}

pub fn read_bundle(dir: &Path) -> Result<TaskSample> {
    let table = data_from_csv(&fs::read_to_string(dir.join(BUNDLE_DATA))?)?;
    let gstar = graph_from_json(&fs::read_to_string(dir.join(BUNDLE_GRAPH))?)?;
    let meta: TaskMeta = serde_json::from_str(&fs::read_to_string(dir.join(BUNDLE_META))?)?;
    if gstar.p() != table.data.shape()[1] {
        return Err(Error::DimensionMismatch {
            expected: gstar.p(),
            got: table.data.shape()[1],
        });
    }
    Ok(TaskSample {
        x: table.data,
        gstar,
        meta,
    })
}

/// Bundle subdirectories of `root` in name order.
pub fn list_bundles(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(BUNDLE_DATA).is_file() && p.join(BUNDLE_GRAPH).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_json_layout() {
        let g = DirectedGraph::from_edges(3, &[(0, 2), (1, 2)]).unwrap();
        assert_eq!(graph_to_json(&g), r#"{"p":3,"edges":[[0,2],[1,2]]}"#);
        assert_eq!(graph_from_json(&graph_to_json(&g)).unwrap(), g);
    }

    #[test]
    fn skeleton_links_must_be_ordered() {
        assert!(skeleton_from_json(r#"{"p":3,"links":[[2,0]]}"#).is_err());
        let a = skeleton_from_json(r#"{"p":3,"links":[[0,2]]}"#).unwrap();
        assert!(a.has_link(2, 0));
        assert_eq!(skeleton_to_json(&a), r#"{"p":3,"links":[[0,2]]}"#);
    }

    #[test]
    fn beliefs_round_trip_exactly() {
        let b = EdgeBeliefs::from_probs(
            3,
            &[0.0, 0.1, 0.7, 0.1, 0.0, 1.0 / 3.0, 0.7, 1.0 / 3.0, 0.0],
            vec![0.5, -1.25, 1e-3],
        )
        .unwrap();
        let back = beliefs_from_json(&beliefs_to_json(&b)).unwrap();
        assert_eq!(back.nu_matrix(), b.nu_matrix());
        assert_eq!(back.scores(), b.scores());
    }

    #[test]
    fn csv_round_trip_exactly() {
        let x = Tensor::new(&[2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567]).unwrap();
        let t = data_from_csv(&data_to_csv(&x).unwrap()).unwrap();
        assert_eq!(t.data, x);
        assert_eq!(t.columns.unwrap(), vec!["x0", "x1"]);
    }

    #[test]
    fn csv_without_header() {
        let t = data_from_csv("1,2\n3,4\n").unwrap();
        assert!(t.columns.is_none());
        assert_eq!(t.data.shape(), &[2, 2]);
    }

    #[test]
    fn non_numeric_cell_is_located() {
        let err = data_from_csv("a,b\n1,2\n3,oops\n").unwrap_err();
        assert!(matches!(err, Error::Data { row: 2, col: 2, .. }), "{err:?}");
        let err = data_from_csv("1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Data { row: 2, .. }), "{err:?}");
    }

    #[test]
    fn standardize_matches_moments() {
        let mut x = Tensor::new(&[4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 10.0, 5.0]).unwrap();
        standardize_columns(&mut x).unwrap();
        let col0: Vec<f64> = (0..4).map(|i| x.data()[i * 2]).collect();
        let mean = col0.iter().sum::<f64>() / 4.0;
        let var = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!((0..4).all(|i| x.data()[i * 2 + 1] == 0.0));
    }
}
