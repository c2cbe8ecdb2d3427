use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{deserialize, op_histogram, serialize, validate, weight_payload_bytes, Graph, IrError, Precision};

/// Sidecar summary written next to every model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub precision: Precision,
    pub node_count: usize,
    pub histogram: BTreeMap<String, usize>,
    pub weight_payload_bytes: usize,
}

impl Manifest {
    pub fn of(graph: &Graph) -> Self {
        Manifest {
            name: graph.name().to_string(),
            precision: graph.precision(),
            node_count: graph.node_count(),
            histogram: op_histogram(graph)
                .into_iter()
                .map(|(k, v)| (k.name().to_string(), v))
                .collect(),
            weight_payload_bytes: weight_payload_bytes(graph),
        }
    }
}

/// `model.mce` -> `model.mce.json`
pub fn manifest_path(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn io_err(path: &Path, e: impl ToString) -> IrError {
    IrError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Validates, serializes and writes the model plus its JSON manifest.
pub fn write_model(path: &Path, graph: &Graph) -> Result<Manifest, IrError> {
    validate(graph).into_result()?;
    std::fs::write(path, serialize(graph)).map_err(|e| io_err(path, e))?;
    let manifest = Manifest::of(graph);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let sidecar = manifest_path(path);
    std::fs::write(&sidecar, json + "\n").map_err(|e| io_err(&sidecar, e))?;
    Ok(manifest)
}

/// Reads and validates a model file.
pub fn read_model(path: &Path) -> Result<Graph, IrError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let graph = deserialize(&bytes)?;
    validate(&graph).into_result()?;
    Ok(graph)
}
