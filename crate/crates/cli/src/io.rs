//! Long-format CSV in and out, and atomic file writes.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fpca_core::json::format_f64;
use fpca_core::LongitudinalSample;

/// Reads `id,time,value[,group]` rows from `path`. See [`parse_csv`].
pub fn ingest_csv(path: &Path, group_col: Option<&str>) -> Result<Vec<LongitudinalSample>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    parse_csv(file, &path.display().to_string(), group_col)
}

/// Parses long-format rows into one sample per id, in order of first
/// appearance, with times sorted.
///
/// The group column defaults to `group` when present. Naming a column that
/// does not exist is an error. Diagnostics carry `source:line`, counting the
/// header as line 1.
pub fn parse_csv<R: Read>(
    reader: R,
    source: &str,
    group_col: Option<&str>,
) -> Result<Vec<LongitudinalSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .with_context(|| format!("{source}:1: cannot read header"))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = ["id", "time", "value"]
        .into_iter()
        .filter(|c| col(c).is_none())
        .collect();
    if !missing.is_empty() {
        bail!("{source}:1: missing column(s): {}", missing.join(", "));
    }
    let (id_i, t_i, v_i) = (
        col("id").unwrap(),
        col("time").unwrap(),
        col("value").unwrap(),
    );
    let g_i = match group_col {
        Some(name) => {
            Some(col(name).ok_or_else(|| anyhow!("{source}:1: missing group column {name:?}"))?)
        }
        None => col("group"),
    };

    struct Rows {
        obs: Vec<(f64, f64, u64)>,
        group: Option<String>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Rows> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let record = record.with_context(|| format!("{source}:{line}: malformed row"))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let id = field(id_i);
        if id.is_empty() {
            bail!("{source}:{line}: empty id");
        }
        let number = |i: usize, what: &str| -> Result<f64> {
            let raw = field(i);
            let x: f64 = raw
                .parse()
                .map_err(|_| anyhow!("{source}:{line}: {what} {raw:?} is not a number"))?;
            if !x.is_finite() {
                bail!("{source}:{line}: {what} {raw:?} is not finite");
            }
            Ok(x)
        };
        let t = number(t_i, "time")?;
        let y = number(v_i, "value")?;
        let group = g_i.map(|i| field(i).to_string()).filter(|g| !g.is_empty());
        let rows = by_id.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Rows {
                obs: Vec::new(),
                group: group.clone(),
            }
        });
        if rows.group != group {
            bail!(
                "{source}:{line}: subject {id:?} changes group from {:?} to {:?}",
                rows.group.as_deref().unwrap_or(""),
                group.as_deref().unwrap_or("")
            );
        }
        rows.obs.push((t, y, line));
    }
    if order.is_empty() {
        bail!("{source}: no data rows");
    }
    order
        .into_iter()
        .map(|id| {
            let mut rows = by_id.remove(&id).expect("id recorded on first sight");
            rows.obs
                .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            for w in rows.obs.windows(2) {
                if w[0].0 == w[1].0 {
                    bail!(
                        "{source}:{}: duplicate time {} for subject {id:?} (first at line {})",
                        w[1].2,
                        w[1].0,
                        w[0].2
                    );
                }
            }
            let times = rows.obs.iter().map(|o| o.0).collect();
            let values = rows.obs.iter().map(|o| o.1).collect();
            LongitudinalSample::new(id.as_str(), times, values, rows.group)
                .map_err(|e| anyhow!("{source}: {e}"))
        })
        .collect()
}

/// Writes samples as `id,time,value[,group]`; the group column appears when
/// any sample has a group.
pub fn samples_to_csv(samples: &[LongitudinalSample]) -> Result<Vec<u8>> {
    let grouped = samples.iter().any(|s| s.group().is_some());
    let mut header = vec!["id", "time", "value"];
    if grouped {
        header.push("group");
    }
    let mut rows = Vec::new();
    for s in samples {
        for (t, y) in s.observations() {
            let mut row = vec![s.subject_id().to_string(), format_f64(t), format_f64(y)];
            if grouped {
                row.push(s.group().unwrap_or("").to_string());
            }
            rows.push(row);
        }
    }
    table_to_csv(&header, &rows)
}

/// Serializes a header and string rows.
pub fn table_to_csv<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|x| x.as_ref()))?;
    }
    w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))
}

/// Writes through a temporary sibling file and renames it into place, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{} is not a file path", path.display()))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))
}
