//! Exhaustive search over the two guidance weights.

use std::cmp::Ordering;

use inpaint_core::guidance::GuidanceConfig;
use inpaint_core::metrics::{median, MetricRegistry};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::infer::{run_batch, Models};
use crate::manifest::Utterance;
use crate::{streams, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub w1: f64,
    pub w2: f64,
    /// Median of the primary metric over utterances; `None` if undefined
    /// everywhere or if every utterance failed.
    pub primary: Option<f64>,
    pub secondary: Option<f64>,
    pub failures: usize,
    /// First sampling stream of the cell, identical across cells.
    pub sample_stream: u64,
}

/// Orders rows by primary, then secondary metric (lower first, undefined
/// last), then by the weights, which makes the order total.
pub fn rank_rows(rows: &mut [GridRow]) {
    fn metric(a: Option<f64>, b: Option<f64>) -> Ordering {
        match (a, b) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    }
    rows.sort_by(|a, b| {
        metric(a.primary, b.primary)
            .then(metric(a.secondary, b.secondary))
            .then(a.w1.total_cmp(&b.w1))
            .then(a.w2.total_cmp(&b.w2))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

/// One inference sweep per `(w1, w2)` pair, ranked.
pub fn grid_search(
    cfg: &RunConfig,
    models: &Models<'_>,
    utts: &[Utterance],
    w1_set: &[f64],
    w2_set: &[f64],
    plugins: &MetricRegistry,
) -> Result<Vec<GridRow>> {
    if w1_set.is_empty() || w2_set.is_empty() {
        return Err(Error::Config("grid search needs nonempty w1 and w2 sets".into()));
    }
    let mut rows = Vec::with_capacity(w1_set.len() * w2_set.len());
    for &w1 in w1_set {
        for &w2 in w2_set {
            let gcfg = GuidanceConfig { w1, w2, ..cfg.guidance };
            let results = run_batch(cfg, &gcfg, models, utts, plugins);
            let mut prim = Vec::new();
            let mut sec = Vec::new();
            let mut failures = 0;
            for r in &results {
                match r {
                    Ok(res) => {
                        prim.extend(res.metric(&cfg.grid.primary));
                        sec.extend(res.metric(&cfg.grid.secondary));
                    }
                    Err(e) => {
                        log::warn!("grid cell w1={w1} w2={w2}: {e}");
                        failures += 1;
                    }
                }
            }
            log::info!("grid cell w1={w1} w2={w2} done");
            rows.push(GridRow {
                rank: 0,
                w1,
                w2,
                primary: median(&prim),
                secondary: median(&sec),
                failures,
                sample_stream: streams::SAMPLE_BASE,
            });
        }
    }
    rank_rows(&mut rows);
    Ok(rows)
}

pub fn rows_to_jsonl(rows: &[GridRow]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}
