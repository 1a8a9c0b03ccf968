//! Aggregation of replay records into the report bundle.
//!
//! Days are UTC calendar days. Daily penalties sum the penalty of every
//! activity a worker's accounts submitted that day, in hours.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::replay::SimRecord;
use super::{ActivityLogRow, SimConfig};
use crate::classifier::{Confusion, Label};
use crate::error::SimError;

const DAY_MS: u64 = 86_400_000;
const HOUR_MS: f64 = 3_600_000.0;

/// JSON has no NaN; undefined statistics travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Honest-penalty histogram edges, in seconds.
pub const HONEST_BIN_EDGES: [f64; 11] = [0.0, 2.5, 5.0, 10.0, 30.0, 60.0, 120.0, 300.0, 600.0, 3600.0, 86_400.0];

#[derive(Clone, Debug, Default)]
pub struct FoldOutcome {
    pub fold: String,
    pub records: Vec<SimRecord>,
    pub tickets: u64,
    pub retries: u64,
    pub rejected: u64,
    pub accumulation_violations: u64,
    pub max_daily_accepted: u64,
    /// `(2qΔ, attempts)` for every puzzle hashed for real.
    pub real_solves: Vec<(f64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyPenalty {
    pub worker_id: String,
    pub day: String,
    pub activities: u64,
    pub penalty_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStat {
    pub rank: u32,
    pub n: usize,
    pub mean_hours: f64,
    pub q1_hours: f64,
    pub median_hours: f64,
    pub q3_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo_s: f64,
    /// Exclusive upper edge; `None` for the last bin.
    pub hi_s: Option<f64>,
    pub count: u64,
}

/// Per-timeout rate checks over every issued puzzle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SerializationCheck {
    pub tau_min_s: f64,
    /// `86400/τ_min + 1`.
    pub bound_per_day: u64,
    /// Most activities any user or cluster had accepted in one day.
    pub max_accepted_per_day: u64,
    /// Puzzles whose timeout was not `max(previous, now) + τ`.
    pub accumulation_violations: u64,
    pub tickets: u64,
    pub retries: u64,
    pub rejected: u64,
}

impl SerializationCheck {
    pub fn holds(&self) -> bool {
        self.max_accepted_per_day <= self.bound_per_day && self.accumulation_violations == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RealSolves {
    pub count: usize,
    #[serde(with = "nan_as_null")]
    pub mean_attempts: f64,
    /// Mean of `2qΔ`.
    #[serde(with = "nan_as_null")]
    pub mean_expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub rows: usize,
    pub skipped_rows: usize,
    pub folds: usize,
    pub config: SimConfig,
    pub records: Vec<SimRecord>,
    pub daily: Vec<DailyPenalty>,
    pub by_rank: Vec<RankStat>,
    pub honest_histogram: Vec<HistBin>,
    pub confusion: Confusion,
    #[serde(with = "nan_as_null")]
    pub fpr: f64,
    #[serde(with = "nan_as_null")]
    pub fnr: f64,
    #[serde(with = "nan_as_null")]
    pub accuracy: f64,
    #[serde(with = "nan_as_null")]
    pub avg_fraud_penalty_hours: f64,
    /// Share of honest records with a penalty of at most `maxh`.
    #[serde(with = "nan_as_null")]
    pub honest_within_maxh: f64,
    /// Spearman correlation of rank against median penalty, over ranks
    /// with at least [`MIN_RANK_SAMPLES`] records.
    #[serde(with = "nan_as_null")]
    pub rank_spearman: f64,
    pub serialization: SerializationCheck,
    pub real_solves: RealSolves,
}

pub const MIN_RANK_SAMPLES: usize = 3;

fn day_label(day: u64) -> String {
    chrono::DateTime::from_timestamp((day * 86_400) as i64, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| format!("day{day}"))
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation, with ties given their average rank. NaN when
/// either side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub(crate) fn build_report(
    rows: &[ActivityLogRow],
    skipped: usize,
    cfg: &SimConfig,
    outcomes: Vec<FoldOutcome>,
) -> SimReport {
    let folds = outcomes.len();
    let mut serialization = SerializationCheck {
        tau_min_s: cfg.penalty.minh(),
        bound_per_day: (86_400.0 / cfg.penalty.minh()).floor() as u64 + 1,
        ..Default::default()
    };
    let mut real = Vec::new();
    let mut records = Vec::new();
    for o in outcomes {
        serialization.max_accepted_per_day = serialization.max_accepted_per_day.max(o.max_daily_accepted);
        serialization.accumulation_violations += o.accumulation_violations;
        serialization.tickets += o.tickets;
        serialization.retries += o.retries;
        serialization.rejected += o.rejected;
        real.extend(o.real_solves);
        records.extend(o.records);
    }

    let first_day = rows.first().map_or(0, |r| r.timestamp * 1000 / DAY_MS);
    let last_day = rows.last().map_or(0, |r| r.timestamp * 1000 / DAY_MS);
    let mut daily_map: BTreeMap<(String, u64), (u64, f64)> = BTreeMap::new();
    let mut workers: Vec<&str> = records.iter().filter_map(|r| r.worker_id.as_deref()).collect();
    workers.sort();
    workers.dedup();
    for w in &workers {
        for d in first_day..=last_day {
            daily_map.insert((w.to_string(), d), (0, 0.0));
        }
    }
    let mut by_rank: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut honest_bins = vec![0u64; HONEST_BIN_EDGES.len()];
    let mut confusion = Confusion::default();
    let (mut fraud_sum, mut fraud_n) = (0.0, 0usize);
    let (mut honest_ok, mut honest_n) = (0usize, 0usize);
    let maxh_ms = crate::penalty::to_millis(cfg.penalty.maxh());
    for r in &records {
        confusion.add(r.label, r.fraud_score >= cfg.threshold);
        let hours = r.penalty_ms as f64 / HOUR_MS;
        match r.label {
            Label::Fraud => {
                fraud_sum += hours;
                fraud_n += 1;
                if let Some(w) = &r.worker_id {
                    let e = daily_map.entry((w.clone(), r.arrived_at / DAY_MS)).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 += hours;
                }
                if let Some(k) = r.rank {
                    by_rank.entry(k).or_default().push(hours);
                }
            }
            Label::Honest => {
                honest_n += 1;
                if r.penalty_ms <= maxh_ms {
                    honest_ok += 1;
                }
                let s = r.penalty_ms as f64 / 1000.0;
                let bin = HONEST_BIN_EDGES.iter().rposition(|&e| s >= e).unwrap_or(0);
                honest_bins[bin] += 1;
            }
        }
    }

    let daily = daily_map
        .into_iter()
        .map(|((worker_id, d), (activities, penalty_hours))| DailyPenalty {
            worker_id,
            day: day_label(d),
            activities,
            penalty_hours,
        })
        .collect();
    let by_rank: Vec<RankStat> = by_rank
        .into_iter()
        .map(|(rank, mut v)| {
            v.sort_by(f64::total_cmp);
            RankStat {
                rank,
                n: v.len(),
                mean_hours: v.iter().sum::<f64>() / v.len() as f64,
                q1_hours: quantile(&v, 0.25),
                median_hours: quantile(&v, 0.5),
                q3_hours: quantile(&v, 0.75),
            }
        })
        .collect();
    let (rx, my): (Vec<f64>, Vec<f64>) = by_rank
        .iter()
        .filter(|s| s.n >= MIN_RANK_SAMPLES)
        .map(|s| (s.rank as f64, s.median_hours))
        .unzip();
    let honest_histogram = HONEST_BIN_EDGES
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistBin {
            lo_s: lo,
            hi_s: HONEST_BIN_EDGES.get(i + 1).copied(),
            count: honest_bins[i],
        })
        .collect();
    let real_solves = if real.is_empty() {
        RealSolves::default()
    } else {
        let n = real.len() as f64;
        RealSolves {
            count: real.len(),
            mean_attempts: real.iter().map(|r| r.1 as f64).sum::<f64>() / n,
            mean_expected: real.iter().map(|r| r.0).sum::<f64>() / n,
        }
    };
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };

    SimReport {
        rows: rows.len(),
        skipped_rows: skipped,
        folds,
        config: cfg.clone(),
        fpr: confusion.fpr(),
        fnr: confusion.fnr(),
        accuracy: confusion.accuracy(),
        confusion,
        records,
        daily,
        rank_spearman: spearman(&rx, &my),
        by_rank,
        honest_histogram,
        avg_fraud_penalty_hours: if fraud_n == 0 { f64::NAN } else { fraud_sum / fraud_n as f64 },
        honest_within_maxh: ratio(honest_ok, honest_n),
        serialization,
        real_solves,
    }
}

fn write_csv<T: Serialize>(path: &Path, items: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    for i in items {
        w.serialize(i)?;
    }
    w.flush()?;
    Ok(())
}

impl SimReport {
    /// Write `records.csv`, `daily.csv`, `rank.csv`, `honest_hist.csv`,
    /// `report.json` and `summary.txt` into `dir`.
    pub fn write_bundle(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("records.csv"), &self.records)?;
        write_csv(&dir.join("daily.csv"), &self.daily)?;
        write_csv(&dir.join("rank.csv"), &self.by_rank)?;
        write_csv(&dir.join("honest_hist.csv"), &self.honest_histogram)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| SimError::Io(e.into()))?;
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SimError::Io(e.into()))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rows replayed      {} ({} skipped), {} folds", self.rows, self.skipped_rows, self.folds);
        let _ = writeln!(
            s,
            "detection          accuracy {:.4}  FPR {:.4}  FNR {:.4}  (tp {} fp {} tn {} fn {})",
            self.accuracy, self.fpr, self.fnr, self.confusion.tp, self.confusion.fp, self.confusion.tn, self.confusion.fn_
        );
        let _ = writeln!(s, "avg fraud penalty  {:.2} h", self.avg_fraud_penalty_hours);
        let _ = writeln!(s, "honest within maxh {:.4}", self.honest_within_maxh);
        let _ = writeln!(s, "rank vs penalty    spearman {:.3}", self.rank_spearman);
        let c = &self.serialization;
        let _ = writeln!(
            s,
            "serialization      max {} accepted/day (bound {}), {} accumulation violations over {} puzzles",
            c.max_accepted_per_day, c.bound_per_day, c.accumulation_violations, c.tickets
        );
        if self.real_solves.count > 0 {
            let r = &self.real_solves;
            let _ = writeln!(
                s,
                "real solves        {} puzzles, mean attempts {:.1} vs expected {:.1}",
                r.count, r.mean_attempts, r.mean_expected
            );
        }
        let _ = writeln!(s, "penalty by rank (hours)");
        for r in self.by_rank.iter().take(15) {
            let _ = writeln!(
                s,
                "  {:>3}  n={:<4} median {:>7.2}  q1 {:>7.2}  q3 {:>7.2}",
                r.rank, r.n, r.median_hours, r.q1_hours, r.q3_hours
            );
        }
        s
    }
}

/// Fraud earnings against a mining baseline, in USD per day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payout {
    pub avg_penalty_hours: f64,
    pub activities_per_day: f64,
    pub fraud_usd_per_day: f64,
    pub mining_usd_per_day: f64,
    pub fraud_pays: bool,
}

/// One fraudster serialized on one timeout posts `24 / avg_penalty_hours`
/// activities a day, each paid `price_usd`.
pub fn payout_from_penalty(avg_penalty_hours: f64, price_usd: f64, mining_usd_per_day: f64) -> Payout {
    let activities_per_day = if avg_penalty_hours > 0.0 {
        24.0 / avg_penalty_hours
    } else {
        f64::INFINITY
    };
    let fraud_usd_per_day = if price_usd == 0.0 { 0.0 } else { activities_per_day * price_usd };
    Payout {
        avg_penalty_hours,
        activities_per_day,
        fraud_usd_per_day,
        mining_usd_per_day,
        fraud_pays: fraud_usd_per_day > mining_usd_per_day,
    }
}

pub fn payout_compare(report: &SimReport, price_usd: f64, mining_usd_per_day: f64) -> Payout {
    payout_from_penalty(report.avg_fraud_penalty_hours, price_usd, mining_usd_per_day)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payout_anchors() {
        let p = payout_from_penalty(15.34, 2.0, 3.67);
        assert!((p.fraud_usd_per_day - 48.0 / 15.34).abs() < 1e-12);
        assert!((p.fraud_usd_per_day - 3.13).abs() < 0.005);
        assert!(!p.fraud_pays);
        assert_eq!(payout_from_penalty(15.34, 0.0, 3.67).fraud_usd_per_day, 0.0);
        assert_eq!(payout_from_penalty(24.0, 2.0, 3.67).fraud_usd_per_day, 2.0);
        assert!(payout_from_penalty(0.5, 2.0, 3.67).fraud_pays);
    }

    #[test]
    fn quantiles_and_spearman() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Ties: x = 1..4, y = [1, 2, 2, 3] gives ranks [1, 2.5, 2.5, 4].
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]);
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12, "{r}");
        assert!(spearman(&[1.0], &[1.0]).is_nan());
    }

    #[test]
    fn day_labels_are_utc() {
        assert_eq!(day_label(0), "1970-01-01");
        assert_eq!(day_label(1_704_067_200 / 86_400), "2024-01-01");
    }
}
