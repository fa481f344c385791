//! JSON-lines instance and reference-solution files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::ProblemInstance;
use super::tour::Tour;
use super::ProblemError;

/// One line of a reference-solution file: the instance plus `tour` and `length`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    #[serde(flatten)]
    pub instance: ProblemInstance,
    pub tour: Tour,
    pub length: f64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ProblemError {
    ProblemError::Io(format!("{}: {e}", path.display()))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ProblemError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ProblemError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<ProblemInstance>, ProblemError> {
    read_lines(path)
}

pub fn write_instances(path: &Path, instances: &[ProblemInstance]) -> Result<(), ProblemError> {
    write_lines(path, instances)
}

pub fn read_solutions(path: &Path) -> Result<Vec<SolutionRecord>, ProblemError> {
    read_lines(path)
}

pub fn write_solutions(path: &Path, records: &[SolutionRecord]) -> Result<(), ProblemError> {
    write_lines(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{exact_optimal, generate_instance, ProblemKind};

    #[test]
    fn instance_file_keys() {
        let inst = generate_instance(ProblemKind::Cvrp, 3, 4).unwrap();
        let v: serde_json::Value = serde_json::to_value(&inst).unwrap();
        for key in ["kind", "coords", "depot", "demand", "capacity"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["kind"], "cvrp");
        let tsp = serde_json::to_value(generate_instance(ProblemKind::Tsp, 3, 4).unwrap()).unwrap();
        assert!(tsp.get("depot").is_none());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let insts: Vec<_> = (0..3).map(|s| generate_instance(ProblemKind::Tsp, 6, s).unwrap()).collect();
        let p = dir.path().join("i.jsonl");
        write_instances(&p, &insts).unwrap();
        assert_eq!(read_instances(&p).unwrap(), insts);

        let recs: Vec<_> = insts
            .iter()
            .map(|i| {
                let (length, tour) = exact_optimal(i).unwrap();
                SolutionRecord { instance: i.clone(), tour, length }
            })
            .collect();
        let q = dir.path().join("s.jsonl");
        write_solutions(&q, &recs).unwrap();
        assert_eq!(read_solutions(&q).unwrap(), recs);
    }

    #[test]
    fn invalid_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"kind\":\"tsp\",\"coords\":[[2.0,0.0]]}\n").unwrap();
        assert!(read_instances(&p).is_err());
    }
}
