use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ads_value, by_adjust, observed_value, t1ps, utility};
use crate::error::{Error, Result};
use crate::funnel::{ArmLog, ObjectiveTally, RankWeights, RequestRecord};
use crate::rng::{self, tags};
use crate::world::{AdvertiserId, CampaignId, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapParams {
    /// Zero skips significance testing.
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams {
            resamples: 10_000,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveMetrics {
    pub objective: u8,
    pub recall: Option<f64>,
    pub auction_recall: Option<f64>,
    pub rncg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub name: String,
    pub n_requests: usize,
    pub n_impressions: usize,
    pub recall: Option<f64>,
    pub auction_recall: Option<f64>,
    pub rncg: Option<f64>,
    pub by_objective: Vec<ObjectiveMetrics>,
    pub revenue: f64,
    pub utility_per_mille: f64,
    pub ads_value: f64,
    pub ads_value_skipped_campaigns: usize,
    pub t1ps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub control: Option<f64>,
    pub treatment: Option<f64>,
    /// Relative change in percent; absent when the control value is zero or
    /// either value is undefined.
    pub delta_pct: Option<f64>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Requests served by the treatment config, over which both arms are read.
    pub bucket_requests: usize,
    pub bootstrap: BootstrapParams,
    pub control: ArmMetrics,
    pub treatment: ArmMetrics,
    pub deltas: Vec<MetricDelta>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

// Per-request additive components: six per tally (overall first, then one
// block per objective), followed by the ecosystem sums below.
const TALLY: usize = 6;
const REVENUE: usize = 0;
const UTILITY: usize = 1;
const IMPRESSIONS: usize = 2;
const ADS_VALUE: usize = 3;
const ECOSYSTEM: usize = 4;

fn tally_row(t: &ObjectiveTally) -> [f64; TALLY] {
    [
        t.engaged_hit as f64,
        t.engaged as f64,
        t.winners_hit as f64,
        t.winners as f64,
        t.rncg_num,
        t.rncg_den,
    ]
}

/// Metric names in report order.
fn metric_names(n_objectives: usize) -> Vec<String> {
    let mut names = vec!["recall".to_string(), "auction_recall".into(), "rncg".into()];
    for o in 1..=n_objectives {
        names.extend([
            format!("recall_obj{o}"),
            format!("auction_recall_obj{o}"),
            format!("rncg_obj{o}"),
        ]);
    }
    names.extend(["revenue", "utility_per_mille", "ads_value", "t1ps"].map(String::from));
    names
}

struct ArmRows {
    width: usize,
    /// Row-major, one row per bucket request.
    rows: Vec<f64>,
    advertisers: Vec<Vec<AdvertiserId>>,
    n_advertisers: usize,
}

impl ArmRows {
    fn n(&self) -> usize {
        self.advertisers.len()
    }

    fn values(&self, sums: &[f64], served: &[u64], n_objectives: usize) -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(3 * (n_objectives + 1) + ECOSYSTEM);
        for block in 0..=n_objectives {
            let s = &sums[block * TALLY..(block + 1) * TALLY];
            out.extend([
                ratio(s[0], s[1]),
                ratio(s[2], s[3]),
                Some(ratio(s[4], s[5]).unwrap_or(0.0)),
            ]);
        }
        let e = &sums[(n_objectives + 1) * TALLY..];
        out.push(Some(e[REVENUE]));
        out.push(Some(if e[IMPRESSIONS] > 0.0 {
            1000.0 * e[UTILITY] / e[IMPRESSIONS]
        } else {
            0.0
        }));
        out.push(Some(e[ADS_VALUE]));
        let served: BTreeMap<AdvertiserId, u64> = served
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(a, &c)| (AdvertiserId(a as u32), c))
            .collect();
        out.push(Some(t1ps(&served)));
        out
    }
}

/// Reads both arms over the requests the treatment arm served with its own
/// config (every request when none is flagged). Cost per conversion for ads
/// value comes from the control arm's full traffic.
pub fn compare(
    world: &World,
    control: &ArmLog,
    treatment: &ArmLog,
    weights: &RankWeights,
    params: &BootstrapParams,
) -> Result<MetricsReport> {
    if control.requests.len() != treatment.requests.len()
        || control
            .requests
            .iter()
            .zip(&treatment.requests)
            .any(|(a, b)| a.request_id != b.request_id)
    {
        return Err(Error::DataIntegrity(
            "arms were not run over the same requests".into(),
        ));
    }
    let n_objectives = world.config.objective_count;
    if let Some(r) = control
        .requests
        .iter()
        .chain(&treatment.requests)
        .find(|r| r.by_objective.len() != n_objectives)
    {
        return Err(Error::DataIntegrity(format!(
            "request {} has {} objective tallies, expected {n_objectives}",
            r.request_id,
            r.by_objective.len()
        )));
    }
    let any_treated = treatment.requests.iter().any(|r| r.treated);
    let bucket: BTreeSet<u64> = treatment
        .requests
        .iter()
        .filter(|r| r.treated || !any_treated)
        .map(|r| r.request_id)
        .collect();

    let mut reference: BTreeMap<CampaignId, (f64, u64)> = BTreeMap::new();
    for imp in &control.impressions {
        let e = reference.entry(imp.campaign_id).or_default();
        e.0 += imp.price;
        e.1 += imp.converted as u64;
    }
    let cost_per_conversion = |c: CampaignId| match reference.get(&c) {
        Some(&(revenue, n)) if n > 0 => Some(revenue / n as f64),
        _ => None,
    };

    let read = |log: &ArmLog| -> (ArmMetrics, ArmRows) {
        let requests: Vec<_> = log
            .requests
            .iter()
            .filter(|r| bucket.contains(&r.request_id))
            .collect();
        let impressions: Vec<_> = log
            .impressions
            .iter()
            .filter(|i| bucket.contains(&i.request_id))
            .collect();
        let width = (n_objectives + 1) * TALLY + ECOSYSTEM;
        let mut rows = vec![0.0; requests.len() * width];
        let mut advertisers = vec![Vec::new(); requests.len()];
        let position: BTreeMap<u64, usize> = requests
            .iter()
            .enumerate()
            .map(|(i, r)| (r.request_id, i))
            .collect();
        for (i, r) in requests.iter().enumerate() {
            let row = &mut rows[i * width..(i + 1) * width];
            for (block, t) in std::iter::once(&r.overall)
                .chain(&r.by_objective)
                .enumerate()
            {
                row[block * TALLY..(block + 1) * TALLY].copy_from_slice(&tally_row(t));
            }
        }
        for imp in &impressions {
            let i = position[&imp.request_id];
            let e = &mut rows[i * width + (n_objectives + 1) * TALLY..(i + 1) * width];
            e[REVENUE] += imp.price;
            e[UTILITY] += observed_value(imp.bid, imp.positive, imp.negative, weights);
            e[IMPRESSIONS] += 1.0;
            if imp.converted {
                e[ADS_VALUE] += cost_per_conversion(imp.campaign_id).unwrap_or(0.0);
            }
            advertisers[i].push(imp.advertiser_id);
        }

        let mut served: BTreeMap<AdvertiserId, u64> = BTreeMap::new();
        let mut conversions: BTreeMap<CampaignId, u64> = BTreeMap::new();
        for imp in &impressions {
            *served.entry(imp.advertiser_id).or_default() += 1;
            *conversions.entry(imp.campaign_id).or_default() += imp.converted as u64;
        }
        let tally_metrics = |pick: &dyn Fn(&RequestRecord) -> &ObjectiveTally| {
            let s = requests.iter().fold([0.0; TALLY], |mut acc, r| {
                for (a, x) in acc.iter_mut().zip(tally_row(pick(r))) {
                    *a += x;
                }
                acc
            });
            (
                ratio(s[0], s[1]),
                ratio(s[2], s[3]),
                Some(ratio(s[4], s[5]).unwrap_or(0.0)),
            )
        };
        let (recall, auction_recall, rncg) = tally_metrics(&|r| &r.overall);
        let by_objective = (0..n_objectives)
            .map(|o| {
                let (recall, auction_recall, rncg) = tally_metrics(&|r| &r.by_objective[o]);
                ObjectiveMetrics {
                    objective: o as u8 + 1,
                    recall,
                    auction_recall,
                    rncg,
                }
            })
            .collect();
        let av = ads_value(&reference, &conversions);
        let observed: Vec<(f64, bool, bool)> = impressions
            .iter()
            .map(|i| (i.bid, i.positive, i.negative))
            .collect();
        let metrics = ArmMetrics {
            name: log.name.clone(),
            n_requests: requests.len(),
            n_impressions: impressions.len(),
            recall,
            auction_recall,
            rncg,
            by_objective,
            revenue: impressions.iter().map(|i| i.price).sum(),
            utility_per_mille: utility(&observed, weights),
            ads_value: av.value,
            ads_value_skipped_campaigns: av.skipped_campaigns,
            t1ps: t1ps(&served),
        };
        (
            metrics,
            ArmRows {
                width,
                rows,
                advertisers,
                n_advertisers: world.advertisers.len(),
            },
        )
    };
    let (control_metrics, control_rows) = read(control);
    let (treatment_metrics, treatment_rows) = read(treatment);

    let names = metric_names(n_objectives);
    let flat = |m: &ArmMetrics| -> Vec<Option<f64>> {
        let mut v = vec![m.recall, m.auction_recall, m.rncg];
        for o in &m.by_objective {
            v.extend([o.recall, o.auction_recall, o.rncg]);
        }
        v.extend([
            Some(m.revenue),
            Some(m.utility_per_mille),
            Some(m.ads_value),
            Some(m.t1ps),
        ]);
        v
    };
    let c_values = flat(&control_metrics);
    let t_values = flat(&treatment_metrics);
    let p_values = bootstrap_p_values(
        &control_rows,
        &treatment_rows,
        n_objectives,
        names.len(),
        params,
    );

    let tested: Vec<usize> = (0..names.len())
        .filter(|&i| p_values[i].is_some())
        .collect();
    let raw: Vec<f64> = tested.iter().map(|&i| p_values[i].unwrap_or(1.0)).collect();
    let adjusted = by_adjust(&raw)?;
    let mut p_adjusted = vec![None; names.len()];
    for (&i, a) in tested.iter().zip(adjusted) {
        p_adjusted[i] = Some(a);
    }

    let deltas = names
        .into_iter()
        .enumerate()
        .map(|(i, metric)| {
            let delta_pct = match (c_values[i], t_values[i]) {
                (Some(c), Some(t)) if c != 0.0 => Some(100.0 * (t - c) / c),
                _ => None,
            };
            MetricDelta {
                metric,
                control: c_values[i],
                treatment: t_values[i],
                delta_pct,
                p_value: p_values[i],
                p_adjusted: p_adjusted[i],
            }
        })
        .collect();
    Ok(MetricsReport {
        bucket_requests: bucket.len(),
        bootstrap: params.clone(),
        control: control_metrics,
        treatment: treatment_metrics,
        deltas,
    })
}

/// Two-sample bootstrap: each resample draws the bucket requests of both arms
/// independently with replacement. The two-sided p-value is twice the
/// smaller tail mass of the resampled deltas around zero, capped at 1.
fn bootstrap_p_values(
    control: &ArmRows,
    treatment: &ArmRows,
    n_objectives: usize,
    n_metrics: usize,
    params: &BootstrapParams,
) -> Vec<Option<f64>> {
    if params.resamples == 0 || control.n() == 0 || treatment.n() == 0 {
        return vec![None; n_metrics];
    }
    let mut rng = rng::stream(params.seed, tags::BOOTSTRAP_CI);
    let mut below = vec![0usize; n_metrics];
    let mut above = vec![0usize; n_metrics];
    let mut valid = vec![0usize; n_metrics];
    let resample = |arm: &ArmRows, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut sums = vec![0.0; arm.width];
        let mut served = vec![0u64; arm.n_advertisers];
        for _ in 0..arm.n() {
            let i = rng.random_range(0..arm.n());
            for (s, x) in sums
                .iter_mut()
                .zip(&arm.rows[i * arm.width..(i + 1) * arm.width])
            {
                *s += x;
            }
            for a in &arm.advertisers[i] {
                served[a.index()] += 1;
            }
        }
        arm.values(&sums, &served, n_objectives)
    };
    for _ in 0..params.resamples {
        let c = resample(control, &mut rng);
        let t = resample(treatment, &mut rng);
        for k in 0..n_metrics {
            if let (Some(c), Some(t)) = (c[k], t[k]) {
                valid[k] += 1;
                if t - c <= 0.0 {
                    below[k] += 1;
                }
                if t - c >= 0.0 {
                    above[k] += 1;
                }
            }
        }
    }
    (0..n_metrics)
        .map(|k| {
            (valid[k] > 0).then(|| (2.0 * below[k].min(above[k]) as f64 / valid[k] as f64).min(1.0))
        })
        .collect()
}

fn cell(v: Option<f64>, precision: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.precision$}"))
}

impl MetricsReport {
    /// Aligned-column text rendering, one metric per row.
    pub fn table(&self) -> String {
        let header = ["metric", "control", "treatment", "delta %", "p", "p adj"];
        let rows: Vec<[String; 6]> = self
            .deltas
            .iter()
            .map(|d| {
                [
                    d.metric.clone(),
                    cell(d.control, 4),
                    cell(d.treatment, 4),
                    d.delta_pct
                        .map_or_else(|| "-".into(), |x| format!("{x:+.2}")),
                    cell(d.p_value, 4),
                    cell(d.p_adjusted, 4),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} vs {} over {} bucket requests",
            self.treatment.name, self.control.name, self.bucket_requests
        );
        let line = |out: &mut String, cells: &[&str]| {
            let mut first = true;
            for (c, w) in cells.iter().zip(widths) {
                if first {
                    let _ = write!(out, "{c:<w$}");
                    first = false;
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&mut out, &header);
        for r in &rows {
            line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}
