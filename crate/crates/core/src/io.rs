//! File formats: graph specs and results as JSON, datasets and sweep tables
//! as CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{TaskIncidence, TemporalGraph};
use crate::metrics::SweepRecord;
use crate::scm::{Dataset, ScmConfig, VarLayout};

/// Graph spec document. `incidence` lists the 1-based `[segment, task]`
/// pairs that are relevant; boundaries `t` in `disconnected_boundaries` cut
/// both `s_t -> s_{t+1}` and `a_t -> s_{t+1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub seg_len: usize,
    #[serde(rename = "M")]
    pub n_tasks: usize,
    pub incidence: Vec<(usize, usize)>,
    #[serde(default)]
    pub disconnected_boundaries: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GraphSpec {
    pub fn from_graph(graph: &TemporalGraph, seed: Option<u64>) -> Self {
        GraphSpec {
            steps: graph.steps(),
            seg_len: graph.seg_len(),
            n_tasks: graph.n_tasks(),
            incidence: graph.incidence().pairs(),
            disconnected_boundaries: graph.disconnected_boundaries(),
            seed,
        }
    }

    pub fn to_graph(&self) -> Result<TemporalGraph> {
        if self.seg_len < 2 {
            return Err(Error::InvalidGraph(format!(
                "segment length L must be >= 2, got {}",
                self.seg_len
            )));
        }
        if self.steps == 0 || !self.steps.is_multiple_of(self.seg_len) {
            return Err(Error::InvalidGraph(format!(
                "T = {} is not a positive multiple of L = {}",
                self.steps, self.seg_len
            )));
        }
        let inc = TaskIncidence::from_pairs(self.steps / self.seg_len, self.n_tasks, &self.incidence)?;
        TemporalGraph::from_disconnected(self.steps, self.seg_len, self.n_tasks, inc, &self.disconnected_boundaries)
    }
}

/// Observation step applied after sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMeta {
    pub obs_dim: usize,
    pub mixing_seed: u64,
}

/// Companion of a dataset file: everything needed to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub graph: GraphSpec,
    pub scm: ScmConfig,
    pub params_seed: u64,
    pub sample_seed: u64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationMeta>,
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| with_path(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| with_path(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Header of `s[t].j` style names, then one sample per row. Values use the
/// shortest representation that round-trips.
pub fn write_dataset<W: Write>(w: W, data: &Dataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(data.layout().names())?;
    let mut row = Vec::with_capacity(data.layout().width());
    for r in data.samples().row_iter() {
        row.clear();
        row.extend(r.iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut input = csv::Reader::from_reader(r);
    let names: Vec<String> = input.headers()?.iter().map(str::to_owned).collect();
    let layout = VarLayout::parse_names(&names)?;
    let width = layout.width();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in input.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(Error::Parse(format!(
                "data row {} has {} fields, header has {width}",
                line + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("data row {}: '{field}' is not a number", line + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Dataset::new(layout, DMatrix::from_row_slice(rows, width, &values))
}

pub fn write_dataset_file(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| with_path(path, e))?;
    write_dataset(BufWriter::new(file), data)
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| with_path(path, e))?;
    read_dataset(BufReader::new(file))
}

/// Sweep table with header `method,T,L,M,seed,n,accuracy,mcc,runtime_s`.
pub fn write_sweep<W: Write>(w: W, records: &[SweepRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["method", "T", "L", "M", "seed", "n", "accuracy", "mcc", "runtime_s"])?;
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep<R: Read>(r: R) -> Result<Vec<SweepRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}
