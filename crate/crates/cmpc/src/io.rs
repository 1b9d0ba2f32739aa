//! File formats: step logs (CSV/JSON), GP datasets, certificates and KPI reports.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cmpc_core::gp::GpDataset;
use cmpc_core::kpi::{self, KpiReport, ScenarioSummary};
use cmpc_core::sim::{ScenarioLog, StepRecord};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// One row per executed step, columns named as the fields of [`StepRecord`].
pub fn write_steps_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in steps {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: std::result::Result<Vec<StepRecord>, _> = r.deserialize().collect();
    Ok(rows?)
}

/// `<stem>.csv` with the steps and `<stem>.json` with the full log.
pub fn write_log(dir: &Path, stem: &str, log: &ScenarioLog) -> Result<()> {
    write_steps_csv(&dir.join(format!("{stem}.csv")), &log.steps)?;
    write_json(&dir.join(format!("{stem}.json")), log)
}

const GP_HEADER: [&str; 5] = ["z1", "z2", "z3", "z4", "y"];

/// Header `z1,z2,z3,z4,y`; values use the shortest round-trip formatting.
pub fn write_gp_csv(path: &Path, ds: &GpDataset) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(GP_HEADER)?;
    for (z, y) in ds.z.iter().zip(&ds.y) {
        w.write_record([z[0], z[1], z[2], z[3], *y].map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gp_csv(path: &Path, capacity: Option<usize>) -> Result<GpDataset> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    if r.headers()?.iter().collect::<Vec<_>>() != GP_HEADER {
        bail!("{}: expected header z1,z2,z3,z4,y", path.display());
    }
    let mut ds = GpDataset::new(capacity);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        if v.len() != 5 {
            bail!("{}: row {} has {} columns", path.display(), i + 1, v.len());
        }
        ds.push([v[0], v[1], v[2], v[3]], v[4]);
    }
    Ok(ds)
}

/// Per-scenario KPI rows as CSV.
pub fn write_summaries_csv(path: &Path, rows: &[ScenarioSummary]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries_csv(path: &Path) -> Result<Vec<ScenarioSummary>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: std::result::Result<Vec<ScenarioSummary>, _> = r.deserialize().collect();
    Ok(rows?)
}

/// `kpi.json`, `table.txt` and `scenarios.csv` in `dir`.
pub fn write_report(dir: &Path, report: &KpiReport) -> Result<()> {
    write_json(&dir.join("kpi.json"), report)?;
    fs::write(dir.join("table.txt"), kpi::table(report))?;
    write_summaries_csv(&dir.join("scenarios.csv"), &report.scenarios)
}
