use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalReport, HarnessError, MetricRow};

/// One point of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub wall_time_s: f64,
    pub eval_greedy_length: f64,
    pub best_so_far: f64,
}

/// First evaluation at or below a target length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub threshold: f64,
    pub env_steps: u64,
    pub wall_time_s: f64,
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub curve: PathBuf,
    pub table: PathBuf,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct Summary<'a> {
    curve: &'a [CurvePoint],
    time_to_threshold: Vec<Option<ThresholdHit>>,
    evaluations: Vec<&'a EvalReport>,
}

/// Evaluated rows of a metric log with a running best.
pub fn learning_curve(rows: &[MetricRow]) -> Vec<CurvePoint> {
    let mut best = f64::INFINITY;
    rows.iter()
        .filter_map(|r| {
            let len = r.eval_greedy_length?;
            best = best.min(len);
            Some(CurvePoint { env_steps: r.env_steps, wall_time_s: r.wall_time_s, eval_greedy_length: len, best_so_far: best })
        })
        .collect()
}

pub fn time_to_threshold(curve: &[CurvePoint], threshold: f64) -> Option<ThresholdHit> {
    curve.iter().find(|p| p.eval_greedy_length <= threshold).map(|p| ThresholdHit {
        threshold,
        env_steps: p.env_steps,
        wall_time_s: p.wall_time_s,
    })
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::io(path, e)
}

/// Writes `curve.csv`, `comparison.csv` and `report.json` into `dir`.
pub fn emit_report(
    rows: &[MetricRow],
    evaluations: &[EvalReport],
    thresholds: &[f64],
    dir: &Path,
) -> Result<ReportFiles, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let curve = learning_curve(rows);
    let files = ReportFiles {
        curve: dir.join("curve.csv"),
        table: dir.join("comparison.csv"),
        summary: dir.join("report.json"),
    };

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&files.curve).map_err(|e| csv_err(&files.curve, e))?;
    w.write_record(["env_steps", "wall_time_s", "eval_greedy_length", "best_so_far"]).map_err(|e| csv_err(&files.curve, e))?;
    for p in &curve {
        w.serialize(p).map_err(|e| csv_err(&files.curve, e))?;
    }
    w.flush().map_err(|e| csv_err(&files.curve, e))?;

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&files.table).map_err(|e| csv_err(&files.table, e))?;
    w.write_record([
        "env_steps",
        "reference",
        "strategy",
        "mean_length",
        "std_length",
        "mean_gap",
        "instances",
        "samples_or_expansions",
        "wall_time_s",
    ])
    .map_err(|e| csv_err(&files.table, e))?;
    for ev in evaluations {
        for s in &ev.strategies {
            w.write_record([
                ev.env_steps.to_string(),
                ev.reference.as_str().to_string(),
                s.strategy.to_string(),
                s.mean_length.to_string(),
                s.std_length.to_string(),
                s.mean_gap.to_string(),
                ev.instances.to_string(),
                s.total_samples_or_expansions.to_string(),
                s.wall_time_s.to_string(),
            ])
            .map_err(|e| csv_err(&files.table, e))?;
        }
    }
    w.flush().map_err(|e| csv_err(&files.table, e))?;

    let summary = Summary {
        curve: &curve,
        time_to_threshold: thresholds.iter().map(|&t| time_to_threshold(&curve, t)).collect(),
        evaluations: evaluations.iter().collect(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Format(e.to_string()))?;
    std::fs::write(&files.summary, json).map_err(|e| HarnessError::io(&files.summary, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, eval: Option<f64>) -> MetricRow {
        MetricRow { env_steps: step, wall_time_s: step as f64 / 10.0, eval_greedy_length: eval, ..Default::default() }
    }

    #[test]
    fn best_so_far_is_non_increasing() {
        let rows = vec![row(1, Some(7.0)), row(2, None), row(3, Some(7.5)), row(4, Some(6.2)), row(5, Some(6.4))];
        let c = learning_curve(&rows);
        assert_eq!(c.len(), 4);
        assert!(c.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
        assert_eq!(c.last().unwrap().best_so_far, 6.2);
    }

    #[test]
    fn threshold_crossing_step() {
        let rows = vec![row(100, Some(7.0)), row(200, Some(6.5)), row(300, Some(5.9)), row(400, Some(5.5))];
        let hit = time_to_threshold(&learning_curve(&rows), 6.0).unwrap();
        assert_eq!(hit.env_steps, 300);
        assert!(time_to_threshold(&learning_curve(&rows), 5.0).is_none());
    }

    #[test]
    fn empty_log_gives_well_formed_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[], &[], &[6.0], dir.path()).unwrap();
        let curve = std::fs::read_to_string(&files.curve).unwrap();
        assert_eq!(curve.trim(), "env_steps,wall_time_s,eval_greedy_length,best_so_far");
        assert_eq!(std::fs::read_to_string(&files.table).unwrap().lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files.summary).unwrap()).unwrap();
        assert_eq!(v["curve"].as_array().unwrap().len(), 0);
        assert!(v["time_to_threshold"][0].is_null());
    }
}
