//! Per-epoch diagnostics, the metrics CSV schema and multi-seed aggregation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{EnvState, Trajectory};

fn revisit_fraction(states: &[EnvState]) -> f64 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for s in states {
        *counts.entry(s.id).or_default() += 1;
    }
    if counts.is_empty() {
        return 0.0;
    }
    counts.values().filter(|&&c| c >= 2).count() as f64 / counts.len() as f64
}

/// Batch mean of the per-trajectory fraction of distinct states visited at
/// least twice.
pub fn exploration_degree(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().map(|t| revisit_fraction(&t.env_states())).sum::<f64>() / trajectories.len() as f64
}

/// Variant that pools visits across the whole batch before counting.
pub fn exploration_degree_pooled(trajectories: &[Trajectory]) -> f64 {
    let all: Vec<EnvState> = trajectories.iter().flat_map(|t| t.env_states()).collect();
    revisit_fraction(&all)
}

pub fn average_episode_steps(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().map(|t| t.horizon_used as f64).sum::<f64>() / trajectories.len() as f64
}

pub fn success_rate(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().filter(|t| t.success).count() as f64 / trajectories.len() as f64
}

/// Pointwise mean and population standard deviation of equal-length series.
pub fn seed_aggregate(runs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = runs.first() else { return Err(Error::Empty("seed runs")) };
    let len = first.len();
    if let Some(bad) = runs.iter().find(|r| r.len() != len) {
        return Err(Error::LengthMismatch { expected: len, found: bad.len() });
    }
    let n = runs.len() as f64;
    let mean: Vec<f64> = (0..len).map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let std = (0..len)
        .map(|i| (runs.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok((mean, std))
}

/// Trailing moving average; the first `window - 1` points average what is available.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for i in 0..series.len() {
        acc += series[i];
        if i >= window {
            acc -= series[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Least-squares slope of `series` against its index.
pub fn ols_slope(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    if series.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = series.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in series.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Formats with six significant digits in the shortest plain form.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let rounded: f64 = format!("{x:.5e}").parse().unwrap_or(x);
    format!("{rounded}")
}

/// Rounds to six significant digits, the CSV precision.
pub fn round_sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

pub const CSV_HEADER: &str = "epoch,success_rate,exploration_degree,mean_episode_steps,reward_task,\
reward_format,reward_explore,group_size_histogram,policy_loss,reward_model_objective";

/// One epoch of diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub success_rate: f64,
    pub exploration_degree: f64,
    pub mean_episode_steps: f64,
    pub reward_task: f64,
    pub reward_format: f64,
    pub reward_explore: f64,
    /// Group size → number of transitions in groups of that size.
    pub group_size_histogram: BTreeMap<usize, usize>,
    pub policy_loss: f64,
    pub reward_model_objective: f64,
}

pub fn histogram_to_string(h: &BTreeMap<usize, usize>) -> String {
    h.iter().map(|(s, c)| format!("{s}:{c}")).collect::<Vec<_>>().join(";")
}

pub fn histogram_from_string(text: &str) -> Result<BTreeMap<usize, usize>> {
    let bad = || Error::Encoding(format!("histogram `{text}`"));
    if text.is_empty() {
        return Ok(BTreeMap::new());
    }
    text.split(';')
        .map(|pair| {
            let (s, c) = pair.split_once(':').ok_or_else(bad)?;
            Ok((s.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
        })
        .collect()
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        [
            self.epoch.to_string(),
            fmt_sig(self.success_rate),
            fmt_sig(self.exploration_degree),
            fmt_sig(self.mean_episode_steps),
            fmt_sig(self.reward_task),
            fmt_sig(self.reward_format),
            fmt_sig(self.reward_explore),
            histogram_to_string(&self.group_size_histogram),
            fmt_sig(self.policy_loss),
            fmt_sig(self.reward_model_objective),
        ]
        .join(",")
    }

    pub fn from_csv(line: &str) -> Result<MetricRow> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 10 {
            return Err(Error::LengthMismatch { expected: 10, found: cols.len() });
        }
        let num = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| Error::Encoding(format!("column {i}: `{}`", cols[i])))
        };
        Ok(MetricRow {
            epoch: cols[0].parse().map_err(|_| Error::Encoding(format!("epoch `{}`", cols[0])))?,
            success_rate: num(1)?,
            exploration_degree: num(2)?,
            mean_episode_steps: num(3)?,
            reward_task: num(4)?,
            reward_format: num(5)?,
            reward_explore: num(6)?,
            group_size_histogram: histogram_from_string(cols[7])?,
            policy_loss: num(8)?,
            reward_model_objective: num(9)?,
        })
    }

    /// The row with every real rounded to CSV precision.
    pub fn rounded(&self) -> MetricRow {
        MetricRow {
            success_rate: round_sig(self.success_rate),
            exploration_degree: round_sig(self.exploration_degree),
            mean_episode_steps: round_sig(self.mean_episode_steps),
            reward_task: round_sig(self.reward_task),
            reward_format: round_sig(self.reward_format),
            reward_explore: round_sig(self.reward_explore),
            policy_loss: round_sig(self.policy_loss),
            reward_model_objective: round_sig(self.reward_model_objective),
            ..self.clone()
        }
    }
}

/// Header plus one line per row.
pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::Encoding("metrics CSV header".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRow::from_csv).collect()
}
