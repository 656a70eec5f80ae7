use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rad_per_m_to_deg_per_100m, EvalConfig, EvalError, SegmentError};

/// How per-segment errors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Arithmetic mean, as the KITTI devkit reports.
    Mean,
    /// Root mean square.
    Rmse,
}

/// Statistics of one length bucket or speed bin. Units: `t_err` in %,
/// `r_err` in deg/100m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub t_err: f64,
    pub r_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub by_length: Vec<Bucket>,
    pub by_speed: Vec<Bucket>,
    /// Overall translational drift, %.
    pub t_rel: f64,
    /// Overall rotational drift, deg/100m.
    pub r_rel: f64,
    pub count: usize,
}

fn combine(values: impl Iterator<Item = f64>, how: Aggregation) -> (f64, usize) {
    let (mut acc, mut n) = (0.0, 0usize);
    for v in values {
        acc += match how {
            Aggregation::Mean => v,
            Aggregation::Rmse => v * v,
        };
        n += 1;
    }
    if n == 0 {
        return (0.0, 0);
    }
    let m = acc / n as f64;
    (if how == Aggregation::Rmse { m.sqrt() } else { m }, n)
}

fn bucket(errs: &[&SegmentError], lower: f64, upper: f64, how: Aggregation) -> Bucket {
    let (t, count) = combine(errs.iter().map(|e| e.t_err), how);
    let (r, _) = combine(errs.iter().map(|e| e.r_err), how);
    Bucket {
        lower,
        upper,
        count,
        t_err: 100.0 * t,
        r_err: rad_per_m_to_deg_per_100m(r),
    }
}

/// Index of the speed bin for `speed`; out-of-range speeds go to the end bins.
fn speed_bin(edges: &[f64], speed: f64) -> usize {
    let bins = edges.len() - 1;
    edges[1..]
        .iter()
        .position(|&e| speed < e)
        .unwrap_or(bins - 1)
}

impl EvalReport {
    /// Per-length and per-speed statistics plus overall averages taken over
    /// every segment (not over bucket means).
    pub fn aggregate(errors: &[SegmentError], cfg: &EvalConfig) -> Self {
        let how = cfg.aggregation;
        let mut sorted: Vec<&SegmentError> = errors.iter().collect();
        // order-independent accumulation
        sorted.sort_by(|a, b| {
            (a.first_frame, a.length.to_bits(), a.t_err.to_bits(), a.r_err.to_bits())
                .cmp(&(b.first_frame, b.length.to_bits(), b.t_err.to_bits(), b.r_err.to_bits()))
        });
        let by_length = cfg
            .lengths
            .iter()
            .map(|&len| {
                let sel: Vec<_> = sorted.iter().copied().filter(|e| e.length == len).collect();
                bucket(&sel, len, len, how)
            })
            .collect();
        let edges = &cfg.speed_edges;
        let by_speed = (0..edges.len().saturating_sub(1))
            .map(|b| {
                let sel: Vec<_> = sorted
                    .iter()
                    .copied()
                    .filter(|e| speed_bin(edges, e.speed) == b)
                    .collect();
                bucket(&sel, edges[b], edges[b + 1], how)
            })
            .collect();
        let overall = bucket(&sorted, 0.0, 0.0, how);
        Self {
            aggregation: how,
            by_length,
            by_speed,
            t_rel: overall.t_err,
            r_rel: overall.r_err,
            count: overall.count,
        }
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        serde_json::to_string_pretty(self).map_err(|e| EvalError::Serialize(e.to_string()))
    }

    /// One row per bucket: `kind,lower,upper,count,t_err_pct,r_err_deg_per_100m`,
    /// with a final `overall` row.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| EvalError::Serialize(e.to_string());
        w.write_record(["kind", "lower", "upper", "count", "t_err_pct", "r_err_deg_per_100m"])
            .map_err(ser)?;
        let rows = self
            .by_length
            .iter()
            .map(|b| ("length", b))
            .chain(self.by_speed.iter().map(|b| ("speed", b)));
        for (kind, b) in rows {
            w.write_record([
                kind.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.t_err.to_string(),
                b.r_err.to_string(),
            ])
            .map_err(ser)?;
        }
        w.write_record([
            "overall".to_string(),
            String::new(),
            String::new(),
            self.count.to_string(),
            self.t_rel.to_string(),
            self.r_rel.to_string(),
        ])
        .map_err(ser)?;
        let bytes = w.into_inner().map_err(|e| EvalError::Serialize(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<(), EvalError> {
        let stem = stem.as_ref();
        fs::write(stem.with_extension("json"), self.to_json()?)?;
        fs::write(stem.with_extension("csv"), self.to_csv()?)?;
        Ok(())
    }
}
