//! Unbiased Pass@k and search-ads business metrics.

use serde::{Deserialize, Serialize};

use crate::{LabError, Result, Scalar};

/// `n` samples drawn, `c` of them correct, budget `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskQuery {
    pub n: u64,
    pub c: u64,
    pub k: u64,
}

impl PasskQuery {
    pub fn new(n: u64, c: u64, k: u64) -> Result<Self> {
        if c > n {
            return Err(LabError::InvalidQuery(format!("c = {c} > n = {n}")));
        }
        if k == 0 || k > n {
            return Err(LabError::InvalidQuery(format!(
                "k = {k} outside [1, n = {n}]"
            )));
        }
        Ok(Self { n, c, k })
    }
}

/// `1 - C(n - c, k) / C(n, k)` evaluated as
/// `1 - prod_{i<k} (n - c - i) / (n - i)`; the product is zero when
/// `n - c < k`.
pub fn passk_unbiased<F: Scalar>(q: PasskQuery) -> Result<F> {
    let q = PasskQuery::new(q.n, q.c, q.k)?;
    let fails = q.n - q.c;
    if fails < q.k {
        return Ok(F::one());
    }
    let mut prod = F::one();
    for i in 0..q.k {
        prod = prod * (F::lit((fails - i) as f64) / F::lit((q.n - i) as f64));
    }
    Ok((F::one() - prod).max(F::zero()).min(F::one()))
}

/// Per-prompt sample counts from an evaluation log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCounts {
    #[serde(default)]
    pub prompt_id: String,
    pub n: u64,
    pub c: u64,
}

/// Mean Pass@k over prompts for each `k`.
pub fn passk_curve_from_log<F: Scalar>(records: &[PromptCounts], ks: &[u64]) -> Result<Vec<F>> {
    if records.is_empty() {
        return Err(LabError::EmptyInput("pass@k log has no records".into()));
    }
    ks.iter()
        .map(|&k| {
            let total = records
                .iter()
                .map(|r| passk_unbiased::<F>(PasskQuery::new(r.n, r.c, k)?))
                .sum::<Result<F>>()?;
            Ok(total / F::from_count(records.len()))
        })
        .collect()
}

/// Neumaier-compensated summation.
#[derive(Clone, Copy, Debug, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// One query-ad record of a search-ads log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdsRecord {
    /// 0 irrelevant, 1 partially relevant, 2 fully relevant.
    pub predicted_label: u8,
    pub gt_label: u8,
    #[serde(default)]
    pub impressions: u64,
    #[serde(default)]
    pub clicks: u64,
    #[serde(default)]
    pub revenue: f64,
    #[serde(default)]
    pub purchase_price: Option<f64>,
    #[serde(default)]
    pub purchase_qty: Option<f64>,
}

impl AdsRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.predicted_label > 2 || self.gt_label > 2 {
            return bad(format!(
                "labels must be in {{0, 1, 2}}, got ({}, {})",
                self.predicted_label, self.gt_label
            ));
        }
        if self.clicks > self.impressions {
            return bad(format!(
                "clicks {} > impressions {}",
                self.clicks, self.impressions
            ));
        }
        let negative = |x: Option<f64>| x.is_some_and(|v| !(v >= 0.0));
        if !(self.revenue >= 0.0) || negative(self.purchase_price) || negative(self.purchase_qty) {
            return bad("amounts must be non-negative".into());
        }
        Ok(())
    }
}

fn validate_all(records: &[AdsRecord]) -> Result<()> {
    records.iter().try_for_each(AdsRecord::validate)
}

/// Share of fully-relevant predictions whose ground truth is irrelevant.
pub fn pir(records: &[AdsRecord]) -> Result<f64> {
    validate_all(records)?;
    let predicted: Vec<&AdsRecord> = records.iter().filter(|r| r.predicted_label == 2).collect();
    if predicted.is_empty() {
        return Err(LabError::UndefinedMetric("pir"));
    }
    let bad = predicted.iter().filter(|r| r.gt_label == 0).count();
    Ok(bad as f64 / predicted.len() as f64)
}

/// Clicks per impression, event weighted.
pub fn ctrpi(records: &[AdsRecord]) -> Result<f64> {
    validate_all(records)?;
    let impressions: u64 = records.iter().map(|r| r.impressions).sum();
    if impressions == 0 {
        return Err(LabError::UndefinedMetric("ctrpi"));
    }
    let clicks: u64 = records.iter().map(|r| r.clicks).sum();
    Ok(clicks as f64 / impressions as f64)
}

/// Revenue per click.
pub fn cpc(records: &[AdsRecord]) -> Result<f64> {
    validate_all(records)?;
    let clicks: u64 = records.iter().map(|r| r.clicks).sum();
    if clicks == 0 {
        return Err(LabError::UndefinedMetric("cpc"));
    }
    let mut revenue = CompensatedSum::default();
    records.iter().for_each(|r| revenue.add(r.revenue));
    Ok(revenue.value() / clicks as f64)
}

/// `1000 * ctrpi * cpc`.
pub fn cpm(records: &[AdsRecord]) -> Result<f64> {
    Ok(1000.0 * ctrpi(records)? * cpc(records)?)
}

/// `sum price * quantity` over purchase records.
pub fn gmv(records: &[AdsRecord]) -> Result<f64> {
    validate_all(records)?;
    let mut total = CompensatedSum::default();
    for r in records {
        if let (Some(p), Some(q)) = (r.purchase_price, r.purchase_qty) {
            total.add(p * q);
        }
    }
    Ok(total.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdRevenueMetrics {
    pub ctrpi: f64,
    pub cpc: f64,
    pub cpm: f64,
    pub gmv: f64,
}

pub fn ad_revenue_metrics(records: &[AdsRecord]) -> Result<AdRevenueMetrics> {
    let ctrpi = ctrpi(records)?;
    let cpc = cpc(records)?;
    Ok(AdRevenueMetrics {
        ctrpi,
        cpc,
        cpm: 1000.0 * ctrpi * cpc,
        gmv: gmv(records)?,
    })
}
