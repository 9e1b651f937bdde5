//! Line-delimited dataset files.
//!
//! The first line is a header `{"schema_version", "feature_dim", "num_classes",
//! "num_graphs"}`; each following line is one graph record. Edge truth is a
//! string of `0`/`1` characters in edge order and node features are row-major.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, GenMeta, GraphInstance, Split, SCHEMA_VERSION};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    feature_dim: usize,
    num_classes: usize,
    num_graphs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Vec<f64>,
    label: usize,
    edge_truth: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<GenMeta>,
}

impl Record {
    fn from_graph(g: &GraphInstance, split: Split) -> Self {
        Record {
            num_nodes: g.num_nodes,
            edges: g.edges.clone(),
            node_features: g.node_features.iter().copied().collect(),
            label: g.label,
            edge_truth: g.edge_truth.iter().map(|&t| if t { '1' } else { '0' }).collect(),
            split,
            meta: g.meta.clone(),
        }
    }

    fn into_graph(self, feature_dim: usize) -> std::result::Result<(GraphInstance, Split), String> {
        let node_features = Array2::from_shape_vec((self.num_nodes, feature_dim), self.node_features)
            .map_err(|_| format!("node_features is not {}x{feature_dim}", self.num_nodes))?;
        let edge_truth = self
            .edge_truth
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(format!("edge_truth contains `{other}`")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if edge_truth.len() != self.edges.len() {
            return Err(format!(
                "edge_truth has {} bits for {} edges",
                edge_truth.len(),
                self.edges.len()
            ));
        }
        Ok((
            GraphInstance {
                num_nodes: self.num_nodes,
                edges: self.edges,
                node_features,
                label: self.label,
                edge_truth,
                meta: self.meta,
            },
            self.split,
        ))
    }
}

pub fn write_dataset_to<W: Write>(d: &Dataset, mut out: W) -> Result<()> {
    d.validate()?;
    let header = Header {
        schema_version: SCHEMA_VERSION,
        feature_dim: d.feature_dim,
        num_classes: d.num_classes,
        num_graphs: d.graphs.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (g, &split) in d.graphs.iter().zip(&d.splits) {
        serde_json::to_writer(&mut out, &Record::from_graph(g, split))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset_from<R: Read>(input: R) -> Result<Dataset> {
    let mut lines = BufReader::new(input).lines();
    let header_line = lines.next().ok_or_else(|| Error::Malformed {
        record: 0,
        line: 1,
        message: "missing header".into(),
    })??;
    let raw: serde_json::Value = serde_json::from_str(&header_line).map_err(|e| Error::Malformed {
        record: 0,
        line: 1,
        message: format!("header: {e}"),
    })?;
    // check the version before the rest of the header so a future layout still
    // reports a version error
    let found = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Malformed {
            record: 0,
            line: 1,
            message: "header has no schema_version".into(),
        })?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::Malformed {
        record: 0,
        line: 1,
        message: format!("header: {e}"),
    })?;

    let mut dataset = Dataset::empty(header.feature_dim, header.num_classes);
    for (index, line) in lines.enumerate() {
        let line = line?;
        let line_no = index + 2;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            record: index,
            line: line_no,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let (graph, split) = record.into_graph(header.feature_dim).map_err(malformed)?;
        dataset.graphs.push(graph);
        dataset.splits.push(split);
    }
    if dataset.graphs.len() != header.num_graphs {
        return Err(Error::Malformed {
            record: dataset.graphs.len(),
            line: dataset.graphs.len() + 2,
            message: format!(
                "header announces {} graphs, file holds {}",
                header.num_graphs,
                dataset.graphs.len()
            ),
        });
    }
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    write_dataset_to(d, BufWriter::new(file))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_dataset_from(file)
}

/// Serialized bytes of a dataset; the basis for byte-level determinism checks.
pub fn dataset_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset_to(d, &mut buf)?;
    Ok(buf)
}
