//! TUDataset parsing, feature encoding, summary statistics, and splits.
//!
//! The on-disk format is the published TUDataset text convention: a dataset
//! `DS` in directory `dir` consists of
//!
//! - `DS_A.txt` — one `i, j` pair per line, 1-based node ids numbered
//!   globally across the whole dataset; undirected edges conventionally
//!   appear in both directions;
//! - `DS_graph_indicator.txt` — line `k` holds the 1-based graph id of
//!   node `k`;
//! - `DS_graph_labels.txt` — line `g` holds graph `g`'s class label;
//! - `DS_node_labels.txt` — line `k` holds node `k`'s integer label;
//! - `DS_node_attributes.txt` — line `k` holds comma-separated reals.
//!
//! Node features default to one-hot encodings of the node labels over the
//! dataset-wide label alphabet (sorted ascending); attribute files are
//! ignored unless explicitly requested. Directed duplicate pairs collapse
//! to one undirected edge and self-loops are dropped.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::{RngStream, Tensor};
use crate::{Error, Result};

/// One graph: node features, undirected edge list, class label.
#[derive(Debug, Clone)]
pub struct GraphRecord {
    /// `n×d` node feature matrix.
    pub node_features: Tensor,
    /// Undirected edges as 0-based local index pairs, each stored once with
    /// the smaller endpoint first, sorted.
    pub edges: Vec<(u32, u32)>,
    /// Class index in `[0, num_classes)`.
    pub label: usize,
    /// Original 1-based graph id from the source files.
    pub graph_id: usize,
}

impl GraphRecord {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// A parsed dataset with contiguous class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<GraphRecord>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// How the feature matrices were built.
    pub encoding: String,
    /// Sorted original node-label alphabet when one-hot encoding was used.
    pub label_alphabet: Option<Vec<i64>>,
    /// Sorted original class-label values; index = remapped class.
    pub class_values: Vec<i64>,
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            train,
            val,
            test,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.val <= 0.0 || self.test <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "split fractions must be positive, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "split fractions must sum to 1, got {}",
                self.train + self.val + self.test
            )));
        }
        Ok(())
    }
}

/// Table-style summary of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_graphs: usize,
    pub num_classes: usize,
    pub avg_nodes: f64,
    pub avg_edges: f64,
    pub feature_dim: usize,
}

impl DatasetStats {
    pub const CSV_HEADER: &'static str =
        "dataset,num_graphs,num_classes,avg_nodes,avg_edges,feature_dim";

    pub fn csv_row(&self, dataset: &str) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{}",
            dataset, self.num_graphs, self.num_classes, self.avg_nodes, self.avg_edges,
            self.feature_dim
        )
    }
}

/// Parser switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Build features from `DS_node_attributes.txt` instead of one-hot node
    /// labels. Skips the known-dimension validation, since that table
    /// describes the label encoding.
    pub use_attributes: bool,
}

/// Expected one-hot feature dimensions for datasets we can cross-check.
fn known_feature_dim(name: &str) -> Option<usize> {
    match name {
        "PROTEINS" => Some(3),
        "NCI1" => Some(37),
        "Mutagenicity" => Some(14),
        _ => None,
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

fn parse_int(file: &Path, line_no: usize, field: &str) -> Result<i64> {
    field.trim().parse::<i64>().map_err(|_| Error::Format {
        file: file.display().to_string(),
        line: line_no,
        msg: format!("expected an integer, got {field:?}"),
    })
}

/// Read a whole single-column integer file.
fn read_int_column(path: &Path) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(parse_int(path, line_no, t)?);
    }
    Ok(out)
}

/// Fields separated by commas with optional surrounding spaces.
fn split_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(',').map(str::trim).filter(|f| !f.is_empty())
}

/// One-hot encode node labels over a sorted alphabet.
///
/// Each label becomes the unit vector selecting its alphabet position; the
/// feature dimension is the alphabet size.
pub fn encode_one_hot(labels: &[i64], alphabet: &[i64]) -> Result<Tensor> {
    let d = alphabet.len();
    let mut t = Tensor::zeros(labels.len(), d);
    for (i, lab) in labels.iter().enumerate() {
        let pos = alphabet
            .binary_search(lab)
            .map_err(|_| Error::InvalidInput(format!("node label {lab} not in alphabet")))?;
        t.values_mut()[i * d + pos] = 1.0;
    }
    Ok(t)
}

/// Parse a TUDataset directory with default options.
pub fn parse_tudataset(dir: &Path, name: &str) -> Result<Dataset> {
    parse_tudataset_with(dir, name, &ParseOptions::default())
}

pub fn parse_tudataset_with(dir: &Path, name: &str, opts: &ParseOptions) -> Result<Dataset> {
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{name}_{suffix}.txt")) };

    // Node -> graph assignment.
    let indicator_path = file("graph_indicator");
    let indicator = read_int_column(&indicator_path)?;
    if indicator.is_empty() {
        return Err(Error::Format {
            file: indicator_path.display().to_string(),
            line: 1,
            msg: "empty graph indicator".into(),
        });
    }
    let num_graphs = *indicator.iter().max().unwrap();
    if num_graphs < 1 {
        return Err(Error::Format {
            file: indicator_path.display().to_string(),
            line: 1,
            msg: format!("graph ids must be positive, found {num_graphs}"),
        });
    }
    let num_graphs = num_graphs as usize;
    let mut nodes_per_graph: Vec<Vec<u32>> = vec![Vec::new(); num_graphs];
    // node_graph[k] = (graph index, local node index) for global node k.
    let mut node_graph = Vec::with_capacity(indicator.len());
    for (k, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(Error::Format {
                file: indicator_path.display().to_string(),
                line: k + 1,
                msg: format!("graph id {g} out of range"),
            });
        }
        let gi = g as usize - 1;
        let local = nodes_per_graph[gi].len() as u32;
        nodes_per_graph[gi].push(k as u32);
        node_graph.push((gi, local));
    }
    for (gi, nodes) in nodes_per_graph.iter().enumerate() {
        if nodes.is_empty() {
            return Err(Error::Format {
                file: indicator_path.display().to_string(),
                line: 1,
                msg: format!("graph {} has no nodes", gi + 1),
            });
        }
    }

    // Graph labels, remapped to a contiguous range.
    let labels_path = file("graph_labels");
    let raw_graph_labels = read_int_column(&labels_path)?;
    if raw_graph_labels.len() != num_graphs {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            line: raw_graph_labels.len(),
            msg: format!(
                "{} graph labels for {} graphs",
                raw_graph_labels.len(),
                num_graphs
            ),
        });
    }
    let mut class_values: Vec<i64> = raw_graph_labels.clone();
    class_values.sort_unstable();
    class_values.dedup();
    let graph_labels: Vec<usize> = raw_graph_labels
        .iter()
        .map(|l| class_values.binary_search(l).unwrap())
        .collect();

    // Edges: undirected canonicalization with self-loops dropped.
    let a_path = file("A");
    let mut edge_sets: Vec<BTreeSet<(u32, u32)>> = vec![BTreeSet::new(); num_graphs];
    for (line_no, line) in open_lines(&a_path)? {
        let line = line.map_err(|source| Error::Io {
            path: a_path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = split_fields(&line);
        let (i, j) = match (fields.next(), fields.next()) {
            (Some(a), Some(b)) => (
                parse_int(&a_path, line_no, a)?,
                parse_int(&a_path, line_no, b)?,
            ),
            _ => {
                return Err(Error::Format {
                    file: a_path.display().to_string(),
                    line: line_no,
                    msg: format!("expected an edge pair, got {line:?}"),
                })
            }
        };
        let check = |v: i64| -> Result<usize> {
            if v < 1 || v as usize > node_graph.len() {
                return Err(Error::Format {
                    file: a_path.display().to_string(),
                    line: line_no,
                    msg: format!(
                        "node id {v} has no graph indicator entry (dataset has {} nodes)",
                        node_graph.len()
                    ),
                });
            }
            Ok(v as usize - 1)
        };
        let (i, j) = (check(i)?, check(j)?);
        if i == j {
            continue;
        }
        let (gi, li) = node_graph[i];
        let (gj, lj) = node_graph[j];
        if gi != gj {
            return Err(Error::Format {
                file: a_path.display().to_string(),
                line: line_no,
                msg: format!(
                    "edge joins nodes of different graphs ({} and {})",
                    gi + 1,
                    gj + 1
                ),
            });
        }
        edge_sets[gi].insert((li.min(lj), li.max(lj)));
    }

    // Node features.
    let labels_file = file("node_labels");
    let attrs_file = file("node_attributes");
    let (features_per_graph, feature_dim, encoding, label_alphabet): (
        Vec<Tensor>,
        usize,
        String,
        Option<Vec<i64>>,
    ) = if opts.use_attributes || !labels_file.exists() {
        if !attrs_file.exists() {
            // Name the file callers most likely forgot.
            return Err(Error::MissingFile(if opts.use_attributes {
                attrs_file
            } else {
                labels_file
            }));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(node_graph.len());
        let mut dim = None;
        for (line_no, line) in open_lines(&attrs_file)? {
            let line = line.map_err(|source| Error::Io {
                path: attrs_file.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = split_fields(&line)
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Format {
                        file: attrs_file.display().to_string(),
                        line: line_no,
                        msg: format!("expected a real number, got {f:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Format {
                        file: attrs_file.display().to_string(),
                        line: line_no,
                        msg: format!("attribute row of width {}, expected {}", row.len(), d),
                    })
                }
                _ => {}
            }
            rows.push(row);
        }
        if rows.len() != node_graph.len() {
            return Err(Error::Format {
                file: attrs_file.display().to_string(),
                line: rows.len(),
                msg: format!(
                    "{} attribute rows for {} nodes",
                    rows.len(),
                    node_graph.len()
                ),
            });
        }
        let dim = dim.unwrap_or(0);
        let feats = nodes_per_graph
            .iter()
            .map(|nodes| {
                let mut t = Tensor::zeros(nodes.len(), dim);
                for (local, &global) in nodes.iter().enumerate() {
                    t.values_mut()[local * dim..(local + 1) * dim]
                        .copy_from_slice(&rows[global as usize]);
                }
                t
            })
            .collect();
        (feats, dim, format!("raw node attributes (d={dim})"), None)
    } else {
        let node_labels = read_int_column(&labels_file)?;
        if node_labels.len() != node_graph.len() {
            return Err(Error::Format {
                file: labels_file.display().to_string(),
                line: node_labels.len(),
                msg: format!(
                    "{} node labels for {} nodes",
                    node_labels.len(),
                    node_graph.len()
                ),
            });
        }
        let mut alphabet = node_labels.clone();
        alphabet.sort_unstable();
        alphabet.dedup();
        let feats = nodes_per_graph
            .iter()
            .map(|nodes| {
                let labels: Vec<i64> = nodes.iter().map(|&g| node_labels[g as usize]).collect();
                encode_one_hot(&labels, &alphabet)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = alphabet.len();
        (
            feats,
            d,
            format!("one-hot over {d} node labels"),
            Some(alphabet),
        )
    };

    if !opts.use_attributes {
        if let Some(expected) = known_feature_dim(name) {
            if feature_dim != expected {
                return Err(Error::Validation(format!(
                    "{name}: encoded feature dimension {feature_dim} but the published \
                     summary says {expected}"
                )));
            }
        }
    }

    let graphs = features_per_graph
        .into_iter()
        .zip(edge_sets)
        .zip(graph_labels)
        .enumerate()
        .map(|(gi, ((node_features, edges), label))| GraphRecord {
            node_features,
            edges: edges.into_iter().collect(),
            label,
            graph_id: gi + 1,
        })
        .collect();

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: class_values.len(),
        feature_dim,
        encoding,
        label_alphabet,
        class_values,
    })
}

/// Arithmetic means over graphs; edges counted undirected.
pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    assert!(!ds.graphs.is_empty(), "stats of an empty dataset");
    let n = ds.graphs.len() as f64;
    DatasetStats {
        num_graphs: ds.graphs.len(),
        num_classes: ds.num_classes,
        avg_nodes: ds.graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / n,
        avg_edges: ds.graphs.iter().map(|g| g.num_edges() as f64).sum::<f64>() / n,
        feature_dim: ds.feature_dim,
    }
}

/// Seeded shuffle, then cuts at `floor(N·train)` and
/// `floor(N·train) + floor(N·val)`; the remainder is the test split.
pub fn split_dataset(
    ds: &Dataset,
    spec: &SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let n = ds.graphs.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "cannot split a dataset of {n} graphs three ways"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    RngStream::new(spec.seed).shuffle(&mut indices);
    let n_train = (n as f64 * spec.train).floor() as usize;
    let n_val = (n as f64 * spec.val).floor() as usize;
    let train = indices[..n_train].to_vec();
    let val = indices[n_train..n_train + n_val].to_vec();
    let test = indices[n_train + n_val..].to_vec();
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(format!(
            "split of {n} graphs leaves an empty part ({}/{}/{})",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok((train, val, test))
}

/// Serialize a dataset back to the TUDataset text format.
///
/// Each undirected edge is written in both directions, matching the
/// published convention; original node-label and class-label values are
/// restored. Only datasets parsed with one-hot features can be written.
pub fn write_tudataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let alphabet = ds.label_alphabet.as_ref().ok_or_else(|| {
        Error::InvalidInput("write_tudataset requires one-hot encoded features".into())
    })?;
    let open = |suffix: &str| -> Result<std::io::BufWriter<File>> {
        let path = dir.join(format!("{}_{suffix}.txt", ds.name));
        Ok(std::io::BufWriter::new(File::create(&path).map_err(
            |source| Error::Io {
                path: path.display().to_string(),
                source,
            },
        )?))
    };
    let io_err = |source: std::io::Error| Error::Io {
        path: dir.display().to_string(),
        source,
    };

    let mut fa = open("A")?;
    let mut fi = open("graph_indicator")?;
    let mut fl = open("graph_labels")?;
    let mut fn_ = open("node_labels")?;
    let mut offset: usize = 0;
    for (gi, g) in ds.graphs.iter().enumerate() {
        let n = g.num_nodes();
        for r in 0..n {
            writeln!(fi, "{}", gi + 1).map_err(io_err)?;
            let row = g.node_features.row(r);
            let pos = row
                .iter()
                .position(|&v| v == 1.0)
                .ok_or_else(|| Error::InvalidInput("feature row is not one-hot".into()))?;
            writeln!(fn_, "{}", alphabet[pos]).map_err(io_err)?;
        }
        writeln!(fl, "{}", ds.class_values[g.label]).map_err(io_err)?;
        for &(a, b) in &g.edges {
            let (a, b) = (a as usize + 1 + offset, b as usize + 1 + offset);
            writeln!(fa, "{a}, {b}").map_err(io_err)?;
            writeln!(fa, "{b}, {a}").map_err(io_err)?;
        }
        offset += n;
    }
    Ok(())
}
