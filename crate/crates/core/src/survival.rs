//! Time-to-event analysis: Kaplan-Meier curves, the two-group log-rank
//! test and Cox proportional-hazards regression (Breslow ties).

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use statrs::function::{erf::erfc, gamma::gamma_ur};

/// Two-sided 95% normal quantile used for Cox confidence intervals.
pub const Z_95: f64 = 1.959964;

/// Columns every cohort file carries after `id,time_years,event`.
pub const COHORT_REQUIRED: [&str; 4] = ["ai_cac", "cac", "ai_cac_category", "esc_class"];

#[derive(Debug, thiserror::Error)]
pub enum SurvivalError {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("no events in the data")]
    NoEvents,
    #[error("covariate {0} is constant")]
    ConstantCovariate(String),
    #[error("coefficient for {0} exceeded the divergence bound; the data are likely separated")]
    Diverged(String),
    #[error("statistic must be nonnegative, got {0}")]
    NegativeStatistic(f64),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("unknown covariate {0}")]
    UnknownCovariate(String),
    #[error("observed information matrix is singular")]
    SingularInformation,
    #[error("cohort file: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Follow-up in years.
    pub time: f64,
    pub event: bool,
    pub covariates: IndexMap<String, f64>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<(), SurvivalError> {
        let bad = |reason: String| SurvivalError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(bad(format!("time must be positive, got {}", self.time)));
        }
        if let Some((k, v)) = self.covariates.iter().find(|(_, v)| !v.is_finite()) {
            return Err(bad(format!("covariate {k} is {v}")));
        }
        Ok(())
    }

    pub fn covariate(&self, name: &str) -> Result<f64, SurvivalError> {
        self.covariates
            .get(name)
            .copied()
            .ok_or_else(|| SurvivalError::UnknownCovariate(name.to_string()))
    }
}

/// Ordinal score category: 0 for a zero score, 1 for (0, 100), 2 for 100
/// and above.
pub fn cac_category(score: f64) -> u8 {
    if score <= 0.0 {
        0
    } else if score < 100.0 {
        1
    } else {
        2
    }
}

/// One step of the product-limit estimate: a distinct follow-up time with
/// the risk set just before it, the events and censorings at it, and the
/// survival probability just after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    /// S(t); 1 before the first step.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.time <= t)
            .last()
            .map_or(1.0, |s| s.survival)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), SurvivalError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Product-limit estimator. Subjects censored at an event time are still at
/// risk for that time's events.
pub fn kaplan_meier(records: &[SubjectRecord]) -> Result<KmCurve, SurvivalError> {
    if records.is_empty() {
        return Err(SurvivalError::EmptyCohort);
    }
    for r in records {
        r.validate()?;
    }
    let mut sorted: Vec<&SubjectRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut at_risk = sorted.len();
    // S is kept as base * (at risk now) / base_n, rebased after every
    // censoring, so an uncensored stretch telescopes: with no censoring at
    // all S is exactly (n - k) / n.
    let (mut base, mut base_n) = (1.0, at_risk);
    let mut s = 1.0;
    let mut steps = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let (mut d, mut c) = (0, 0);
        while i < sorted.len() && sorted[i].time == t {
            if sorted[i].event {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        if d > 0 {
            s = base * ((at_risk - d) as f64 / base_n as f64);
        }
        steps.push(KmStep {
            time: t,
            at_risk,
            events: d,
            censored: c,
            survival: s,
        });
        at_risk -= d + c;
        if c > 0 {
            (base, base_n) = (s, at_risk);
        }
    }
    Ok(KmCurve { steps })
}

/// Cumulative event probability `1 - S(t*)`, with `t*` the last event time
/// not after `horizon`.
pub fn km_event_estimate(curve: &KmCurve, horizon: f64) -> f64 {
    1.0 - curve.survival_at(horizon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_a: usize,
    pub expected_a: f64,
}

/// Two-group log-rank test with one degree of freedom.
pub fn log_rank(
    group_a: &[SubjectRecord],
    group_b: &[SubjectRecord],
) -> Result<LogRankResult, SurvivalError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(SurvivalError::EmptyCohort);
    }
    let mut pooled: Vec<(f64, bool, bool)> = Vec::with_capacity(group_a.len() + group_b.len());
    for (g, in_a) in [(group_a, true), (group_b, false)] {
        for r in g {
            r.validate()?;
            pooled.push((r.time, r.event, in_a));
        }
    }
    if !pooled.iter().any(|p| p.1) {
        return Err(SurvivalError::NoEvents);
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut na, mut nb) = (group_a.len() as f64, group_b.len() as f64);
    // Written as sum of (dA*nB - dB*nA)/n so swapping the groups flips the
    // sign of every term exactly.
    let (mut diff, mut var, mut expected_a) = (0.0, 0.0, 0.0);
    let mut observed_a = 0;
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let (mut da, mut db, mut ra, mut rb) = (0.0, 0.0, 0.0, 0.0);
        while i < pooled.len() && pooled[i].0 == t {
            let (_, event, in_a) = pooled[i];
            match (event, in_a) {
                (true, true) => da += 1.0,
                (true, false) => db += 1.0,
                _ => {}
            }
            if in_a {
                ra += 1.0;
            } else {
                rb += 1.0;
            }
            i += 1;
        }
        let d = da + db;
        let n = na + nb;
        if d > 0.0 {
            diff += (da * nb - db * na) / n;
            expected_a += d * na / n;
            observed_a += da as usize;
            if n > 1.0 {
                var += d * (na * nb) * (n - d) / (n * n * (n - 1.0));
            }
        }
        na -= ra;
        nb -= rb;
    }
    let chi2 = if var > 0.0 { diff * diff / var } else { 0.0 };
    Ok(LogRankResult {
        chi2,
        p_value: chi2_sf(chi2, 1.0)?,
        observed_a,
        expected_a,
    })
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> Result<f64, SurvivalError> {
    if x < 0.0 || x.is_nan() {
        return Err(SurvivalError::NegativeStatistic(x));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if df == 1.0 {
        // The 1-df tail is erfc(sqrt(x/2)), sharper than the incomplete gamma.
        return Ok(erfc((x / 2.0).sqrt()));
    }
    Ok(gamma_ur(df / 2.0, x / 2.0))
}

/// Upper tail of the standard normal distribution.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoxOptions {
    pub max_iterations: usize,
    /// Convergence when the largest score component falls below this.
    pub score_tolerance: f64,
    /// Convergence when a step changes the log partial likelihood by less.
    pub loglik_tolerance: f64,
    /// Either tolerance only counts once the Newton step is also below
    /// `step_tolerance * (1 + max |beta|)`; under separation score and
    /// information vanish together and the step does not shrink.
    pub step_tolerance: f64,
    /// Any |beta| above this is reported as divergence.
    pub divergence_bound: f64,
    pub max_halvings: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            score_tolerance: 1e-8,
            loglik_tolerance: 1e-10,
            step_tolerance: 1e-6,
            divergence_bound: 50.0,
            max_halvings: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxCoefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxResult {
    pub coefficients: Vec<CoxCoefficient>,
    pub log_partial_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub ties: String,
}

struct CoxData {
    /// Rows sorted by descending time; covariates centered.
    x: Vec<Vec<f64>>,
    time: Vec<f64>,
    event: Vec<bool>,
}

struct Derivs {
    loglik: f64,
    score: Vec<f64>,
    info: Vec<Vec<f64>>,
}

impl CoxData {
    fn loglik(&self, beta: &[f64]) -> f64 {
        self.evaluate(beta, false).loglik
    }

    /// Breslow log partial likelihood and, optionally, its score and
    /// observed information. The risk set of an event at time t is every
    /// subject with time >= t.
    fn evaluate(&self, beta: &[f64], derivs: bool) -> Derivs {
        let p = beta.len();
        let eta: Vec<f64> = self
            .x
            .iter()
            .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect();
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut s0, mut s1, mut s2) = (0.0, vec![0.0; p], vec![vec![0.0; p]; p]);
        let mut out = Derivs {
            loglik: 0.0,
            score: vec![0.0; p],
            info: vec![vec![0.0; p]; p],
        };
        let n = self.time.len();
        let mut i = 0;
        while i < n {
            // Add every subject tied at this time to the risk set first.
            let t = self.time[i];
            let mut j = i;
            while j < n && self.time[j] == t {
                let w = (eta[j] - shift).exp();
                s0 += w;
                if derivs {
                    for a in 0..p {
                        s1[a] += w * self.x[j][a];
                        for b in 0..p {
                            s2[a][b] += w * self.x[j][a] * self.x[j][b];
                        }
                    }
                }
                j += 1;
            }
            for k in i..j {
                if !self.event[k] {
                    continue;
                }
                out.loglik += eta[k] - shift - s0.ln();
                if derivs {
                    for a in 0..p {
                        let mean_a = s1[a] / s0;
                        out.score[a] += self.x[k][a] - mean_a;
                        for b in 0..p {
                            out.info[a][b] += s2[a][b] / s0 - mean_a * (s1[b] / s0);
                        }
                    }
                }
            }
            i = j;
        }
        out
    }
}

/// Solves `m x = v` by Gaussian elimination with partial pivoting.
fn solve(m: &[Vec<f64>], v: &[f64]) -> Option<Vec<f64>> {
    let p = v.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .zip(v)
        .map(|(row, &b)| row.iter().copied().chain([b]).collect())
        .collect();
    for col in 0..p {
        let piv = (col..p).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if !(a[piv][col].abs() > 1e-300) {
            return None;
        }
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..p).map(|r| a[r][p] / a[r][r]).collect())
}

fn invert(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let p = m.len();
    let cols: Option<Vec<Vec<f64>>> = (0..p)
        .map(|c| {
            let e: Vec<f64> = (0..p).map(|r| f64::from(u8::from(r == c))).collect();
            solve(m, &e)
        })
        .collect();
    let cols = cols?;
    Some(
        (0..p)
            .map(|r| (0..p).map(|c| cols[c][r]).collect())
            .collect(),
    )
}

/// Cox proportional-hazards fit by Newton-Raphson from beta = 0 with step
/// halving whenever the log partial likelihood would decrease.
pub fn cox_fit(
    records: &[SubjectRecord],
    names: &[&str],
    opts: &CoxOptions,
) -> Result<CoxResult, SurvivalError> {
    if records.is_empty() {
        return Err(SurvivalError::EmptyCohort);
    }
    for r in records {
        r.validate()?;
    }
    if !records.iter().any(|r| r.event) {
        return Err(SurvivalError::NoEvents);
    }
    let p = names.len();
    let mut raw: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            names
                .iter()
                .map(|n| r.covariate(n))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    // The partial likelihood only sees covariate differences; centering
    // keeps exp() well scaled without changing the fit.
    for (a, name) in names.iter().enumerate() {
        let first = raw[0][a];
        if raw.iter().all(|row| row[a] == first) {
            return Err(SurvivalError::ConstantCovariate(name.to_string()));
        }
        let mean = raw.iter().map(|row| row[a]).sum::<f64>() / raw.len() as f64;
        raw.iter_mut().for_each(|row| row[a] -= mean);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    let data = CoxData {
        x: order.iter().map(|&i| raw[i].clone()).collect(),
        time: order.iter().map(|&i| records[i].time).collect(),
        event: order.iter().map(|&i| records[i].event).collect(),
    };

    // Under separation the risk sets collapse onto single subjects before
    // |beta| reaches the bound: the likelihood saturates in floating point
    // and the information vanishes relative to the covariate spread.
    let events = data.event.iter().filter(|&&e| e).count() as f64;
    let vanished = |info: &[Vec<f64>]| {
        (0..p).find(|&a| {
            let var = data.x.iter().map(|row| row[a] * row[a]).sum::<f64>() / data.x.len() as f64;
            !(info[a][a] / (events * var) > 1e-8)
        })
    };
    let singular = |info: &[Vec<f64>]| match vanished(info) {
        Some(a) => SurvivalError::Diverged(names[a].to_string()),
        None => SurvivalError::SingularInformation,
    };

    let mut beta = vec![0.0; p];
    let mut d = data.evaluate(&beta, true);
    let mut iterations = 0;
    let mut converged = false;
    let mut last_delta = f64::INFINITY;
    loop {
        let step = solve(&d.info, &d.score).ok_or_else(|| singular(&d.info))?;
        let beta_max = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        let small_step = step
            .iter()
            .all(|s| s.abs() <= opts.step_tolerance * (1.0 + beta_max));
        let score_small = d.score.iter().all(|s| s.abs() < opts.score_tolerance);
        if small_step && (score_small || last_delta.abs() < opts.loglik_tolerance) {
            converged = true;
            break;
        }
        if iterations == opts.max_iterations {
            break;
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        let mut ll = data.loglik(&candidate);
        let mut halvings = 0;
        while !(ll >= d.loglik) && halvings < opts.max_halvings {
            scale /= 2.0;
            candidate = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            ll = data.loglik(&candidate);
            halvings += 1;
        }
        if let Some(a) = candidate
            .iter()
            .position(|b| !(b.abs() <= opts.divergence_bound))
        {
            return Err(SurvivalError::Diverged(names[a].to_string()));
        }
        last_delta = ll - d.loglik;
        beta = candidate;
        d = data.evaluate(&beta, true);
    }
    if let Some(a) = vanished(&d.info) {
        return Err(SurvivalError::Diverged(names[a].to_string()));
    }
    let cov = invert(&d.info).ok_or_else(|| singular(&d.info))?;
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(a, name)| {
            let b = beta[a];
            let se = cov[a][a].max(0.0).sqrt();
            let z = b / se;
            CoxCoefficient {
                name: name.to_string(),
                beta: b,
                se,
                hazard_ratio: b.exp(),
                ci_lower: (b - Z_95 * se).exp(),
                ci_upper: (b + Z_95 * se).exp(),
                z,
                p_value: (2.0 * normal_sf(z.abs())).min(1.0),
            }
        })
        .collect();
    Ok(CoxResult {
        coefficients,
        log_partial_likelihood: d.loglik,
        iterations,
        converged,
        ties: "breslow".into(),
    })
}

/// Writes `id,time_years,event,<covariates...>`; every record must carry the
/// covariates of the first one, in the same order.
pub fn write_cohort_csv(records: &[SubjectRecord], out: impl Write) -> Result<(), SurvivalError> {
    let mut w = csv::Writer::from_writer(out);
    let names: Vec<&String> = records
        .first()
        .map(|r| r.covariates.keys().collect())
        .unwrap_or_default();
    let mut header = vec!["id".to_string(), "time_years".into(), "event".into()];
    header.extend(names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in records {
        if r.covariates.len() != names.len()
            || !r.covariates.keys().zip(&names).all(|(a, b)| a == *b)
        {
            return Err(SurvivalError::Format(format!(
                "record {} has a different covariate set",
                r.id
            )));
        }
        let mut row = vec![
            r.id.clone(),
            r.time.to_string(),
            u8::from(r.event).to_string(),
        ];
        row.extend(r.covariates.values().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a cohort file; every column after `id,time_years,event` becomes a
/// covariate, and the score columns in [`COHORT_REQUIRED`] must be present.
pub fn read_cohort_csv(input: impl Read) -> Result<Vec<SubjectRecord>, SurvivalError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "id" || header[1] != "time_years" || header[2] != "event" {
        return Err(SurvivalError::Format(
            "header must start with id,time_years,event".into(),
        ));
    }
    for req in COHORT_REQUIRED {
        if !header.iter().any(|h| h == req) {
            return Err(SurvivalError::Format(format!("missing column {req}")));
        }
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64, SurvivalError> {
            row[i].trim().parse::<f64>().map_err(|_| {
                SurvivalError::Format(format!("bad number {:?} in column {}", &row[i], header[i]))
            })
        };
        let event = match row[2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(SurvivalError::Format(format!("bad event flag {other:?}"))),
        };
        let covariates = (3..header.len())
            .map(|i| Ok((header[i].clone(), num(i)?)))
            .collect::<Result<_, SurvivalError>>()?;
        let rec = SubjectRecord {
            id: row[0].to_string(),
            time: num(1)?,
            event,
            covariates,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}
