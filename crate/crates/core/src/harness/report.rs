use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::campaign::{write_records, AttackRecord};
use crate::error::{Error, Result};

/// Cumulative success fraction of one (attack, epsilon) group.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCdf {
    pub attack: String,
    pub epsilon: f64,
    pub queries: Vec<u64>,
    pub fraction: Vec<f64>,
}

/// `fraction[k]` is the share of `records` that succeeded within
/// `grid[k]` queries. Labels come from the first record.
pub fn compute_cdf(records: &[AttackRecord], grid: &[u64]) -> Result<SuccessCdf> {
    let first = records.first().ok_or(Error::EmptyRecords)?;
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("query grid must be strictly increasing".into()));
    }
    let mut hits: Vec<u64> = records.iter().filter(|r| r.success).map(|r| r.queries).collect();
    hits.sort_unstable();
    let total = records.len() as f64;
    let fraction = grid
        .iter()
        .map(|q| hits.partition_point(|h| h <= q) as f64 / total)
        .collect();
    Ok(SuccessCdf {
        attack: first.attack.clone(),
        epsilon: first.epsilon,
        queries: grid.to_vec(),
        fraction,
    })
}

/// One curve per (attack, epsilon) present in `records`, sorted by
/// epsilon then attack name.
pub fn group_cdfs(records: &[AttackRecord], grid: &[u64]) -> Result<Vec<SuccessCdf>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut groups: BTreeMap<(u64, &str), Vec<AttackRecord>> = BTreeMap::new();
    for r in records {
        // positive floats order like their bit patterns
        groups
            .entry((r.epsilon.to_bits(), r.attack.as_str()))
            .or_default()
            .push(r.clone());
    }
    groups.values().map(|g| compute_cdf(g, grid)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CdfRow {
    queries: u64,
    fraction: f64,
    attack: String,
    epsilon: f64,
}

pub fn write_cdf_csv(path: impl AsRef<Path>, cdfs: &[SuccessCdf]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut out = csv::Writer::from_path(path).map_err(csv_err)?;
    for cdf in cdfs {
        for (q, f) in cdf.queries.iter().zip(&cdf.fraction) {
            out.serialize(CdfRow {
                queries: *q,
                fraction: *f,
                attack: cdf.attack.clone(),
                epsilon: cdf.epsilon,
            })
            .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_cdf_csv`]; consecutive rows with equal labels form one
/// curve.
pub fn read_cdf_csv(path: impl AsRef<Path>) -> Result<Vec<SuccessCdf>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cdfs: Vec<SuccessCdf> = Vec::new();
    for (i, row) in reader.deserialize::<CdfRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        match cdfs.last_mut() {
            Some(c) if c.attack == row.attack && c.epsilon.to_bits() == row.epsilon.to_bits() => {
                c.queries.push(row.queries);
                c.fraction.push(row.fraction);
            }
            _ => cdfs.push(SuccessCdf {
                attack: row.attack,
                epsilon: row.epsilon,
                queries: vec![row.queries],
                fraction: vec![row.fraction],
            }),
        }
    }
    Ok(cdfs)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Step plot of cumulative success against queries, one polyline per curve.
pub fn render_svg(epsilon: f64, cdfs: &[&SuccessCdf]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 140.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 50.0;
    let max_q = cdfs
        .iter()
        .flat_map(|c| c.queries.last().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let px = |q: f64| LEFT + q / max_q * (W - LEFT - RIGHT);
    let py = |f: f64| H - BOTTOM - f * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">epsilon = {epsilon}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{LEFT}" y1="{0}" x2="{LEFT}" y2="{TOP}" stroke="black"/>"#,
        py(0.0),
        px(max_q)
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{f}</text>"#, LEFT - 6.0, py(f) + 4.0);
        let q = (max_q * f).round();
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{q}</text>"#, px(q), py(0.0) + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">queries</text>"#, px(max_q / 2.0), H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">cumulative fraction</text>"#,
        py(0.5)
    );
    for (k, cdf) in cdfs.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut points = format!("{},{}", px(0.0), py(0.0));
        let mut last = 0.0;
        for (q, f) in cdf.queries.iter().zip(&cdf.fraction) {
            let x = px(*q as f64);
            let _ = write!(points, " {x},{} {x},{}", py(last), py(*f));
            last = *f;
        }
        let name = escape(&cdf.attack);
        let _ = writeln!(
            s,
            r#"<polyline data-attack="{name}" fill="none" stroke="{colour}" stroke-width="2" points="{points}"/>"#
        );
        let y = TOP + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{name}</text>"#,
            W - RIGHT + 12.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one SVG per epsilon; returns the paths in epsilon order.
pub fn write_plots(dir: impl AsRef<Path>, cdfs: &[SuccessCdf]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_eps: BTreeMap<u64, Vec<&SuccessCdf>> = BTreeMap::new();
    for c in cdfs {
        by_eps.entry(c.epsilon.to_bits()).or_default().push(c);
    }
    let mut paths = Vec::new();
    for (bits, curves) in by_eps {
        let eps = f64::from_bits(bits);
        let path = dir.join(format!("cdf_eps_{eps}.svg"));
        fs::write(&path, render_svg(eps, &curves)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// `records.jsonl`, `cdf.csv` and the per-epsilon plots under `dir`.
pub fn emit_outputs(records: &[AttackRecord], cdfs: &[SuccessCdf], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records(dir.join("records.jsonl"), records)?;
    write_cdf_csv(dir.join("cdf.csv"), cdfs)?;
    write_plots(dir, cdfs)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::campaign::RecordStatus;

    pub(crate) fn record(attack: &str, success: bool, queries: u64) -> AttackRecord {
        AttackRecord {
            image_id: "0".into(),
            original_class: 0,
            target_class: 1,
            epsilon: 0.05,
            attack: attack.into(),
            seed: 0,
            success,
            queries,
            final_loss: Some(0.0),
            stop: None,
            status: RecordStatus::Ok,
            error: None,
            wall_time_ms: 0.0,
        }
    }

    #[test]
    fn failures_stay_in_the_denominator() {
        let r = [record("a", true, 5), record("a", true, 10), record("a", false, 30)];
        let c = compute_cdf(&r, &[5, 10]).unwrap();
        assert_eq!(c.fraction, vec![1.0 / 3.0, 2.0 / 3.0]);
        let none = [record("a", false, 3), record("a", false, 9)];
        assert_eq!(compute_cdf(&none, &[1, 10]).unwrap().fraction, vec![0.0, 0.0]);
        let all = [record("a", true, 1), record("a", true, 1)];
        assert_eq!(compute_cdf(&all, &[1, 2]).unwrap().fraction, vec![1.0, 1.0]);
    }

    #[test]
    fn empty_records_and_bad_grids_fail() {
        assert!(matches!(compute_cdf(&[], &[1]), Err(Error::EmptyRecords)));
        assert!(compute_cdf(&[record("a", true, 1)], &[2, 2]).is_err());
    }

    #[test]
    fn svg_has_a_polyline_per_attack() {
        let r = [record("square", true, 3), record("bobyqa", false, 9), record("square", false, 9)];
        let cdfs = group_cdfs(&r, &[1, 5, 10]).unwrap();
        let refs: Vec<&SuccessCdf> = cdfs.iter().collect();
        let svg = render_svg(0.05, &refs);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(r#"data-attack="square""#));
        assert!(svg.contains(r#"data-attack="bobyqa""#));
    }
}
