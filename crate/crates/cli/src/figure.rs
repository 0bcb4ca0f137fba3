//! Plot-ready long-format series and curve-crossing detection.

use paddles_core::trainer::{EpochRecord, RunReport};
use paddles_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FIGURE_CSV_HEADER: &str = "epoch,series,metric,value";
pub const CROSSING_CSV_HEADER: &str = "series_a,series_b,metric,first_crossing";

type Getter = fn(&EpochRecord) -> Option<f64>;

const METRICS: [(&str, Getter); 4] = [
    ("train_loss", |r| Some(r.train_loss)),
    ("acc_clean_subset", |r| r.acc_clean_subset),
    ("acc_noisy_subset", |r| r.acc_noisy_subset),
    ("test_acc", |r| r.test_acc),
];

/// Metrics whose curves are compared across series.
const CROSSING_METRICS: [&str; 2] = ["acc_clean_subset", "acc_noisy_subset"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub series_a: String,
    pub series_b: String,
    pub metric: String,
    /// First epoch at which `a − b` takes the sign opposite to its last
    /// non-zero sign.
    pub first_crossing: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureData {
    pub csv: String,
    pub crossings: Vec<Crossing>,
}

impl FigureData {
    pub fn crossings_csv(&self) -> String {
        let mut out = format!("{CROSSING_CSV_HEADER}\n");
        for c in &self.crossings {
            let at = c.first_crossing.map_or_else(|| "none".to_string(), |e| e.to_string());
            out.push_str(&format!("{},{},{},{at}\n", c.series_a, c.series_b, c.metric));
        }
        out
    }
}

/// First epoch where `values_a − values_b` flips sign.
pub fn first_crossing(epochs: &[usize], a: &[f64], b: &[f64]) -> Option<usize> {
    let mut last = 0.0f64;
    for ((&e, x), y) in epochs.iter().zip(a).zip(b) {
        let d = x - y;
        if d == 0.0 {
            continue;
        }
        if last != 0.0 && d.signum() != last.signum() {
            return Some(e);
        }
        last = d;
    }
    None
}

/// Reshapes named reports into `epoch,series,metric,value` rows and finds
/// the first crossing of every series pair on the subset-accuracy curves.
pub fn emit_figure_data(series: &[(&str, &RunReport)]) -> Result<FigureData> {
    let Some((_, first)) = series.first() else {
        return Err(Error::Input("no reports to plot".into()));
    };
    let epochs: Vec<usize> = first.rows.iter().map(|r| r.epoch).collect();
    for (name, report) in series {
        let axis: Vec<usize> = report.rows.iter().map(|r| r.epoch).collect();
        if axis != epochs {
            return Err(Error::Input(format!("series {name} does not share the epoch axis of {}", series[0].0)));
        }
    }
    let mut csv = format!("{FIGURE_CSV_HEADER}\n");
    for (i, &epoch) in epochs.iter().enumerate() {
        for (name, report) in series {
            for (metric, get) in METRICS {
                if let Some(v) = get(&report.rows[i]) {
                    csv.push_str(&format!("{epoch},{name},{metric},{v}\n"));
                }
            }
        }
    }
    let mut crossings = Vec::new();
    for (i, (name_a, a)) in series.iter().enumerate() {
        for (name_b, b) in &series[i + 1..] {
            for metric in CROSSING_METRICS {
                let get = METRICS.iter().find(|(m, _)| *m == metric).expect("known metric").1;
                let va: Vec<f64> = a.rows.iter().map(|r| get(r).unwrap_or(f64::NAN)).collect();
                let vb: Vec<f64> = b.rows.iter().map(|r| get(r).unwrap_or(f64::NAN)).collect();
                crossings.push(Crossing {
                    series_a: name_a.to_string(),
                    series_b: name_b.to_string(),
                    metric: metric.to_string(),
                    first_crossing: first_crossing(&epochs, &va, &vb),
                });
            }
        }
    }
    Ok(FigureData { csv, crossings })
}
