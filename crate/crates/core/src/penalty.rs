//! Fraud score to time penalty conversion.
//!
//! Below the threshold the penalty grows linearly from `minh` to `maxh`.
//! Above it, the deployed conversion is a generalized logistic curve that
//! starts at `minf` and saturates towards `maxf` with growth rate `k`. The
//! exponential and logarithmic alternatives share the linear honest branch
//! and exist for comparison curves only.

use serde::{Deserialize, Serialize};

use crate::error::PenaltyError;

/// Parameters of the conversion, all times in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct PenaltyParams {
    minh: f64,
    maxh: f64,
    minf: f64,
    maxf: f64,
    thr: f64,
    k: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct RawParams {
    minh: f64,
    maxh: f64,
    minf: f64,
    maxf: f64,
    thr: f64,
    k: f64,
}

impl TryFrom<RawParams> for PenaltyParams {
    type Error = PenaltyError;
    fn try_from(r: RawParams) -> Result<Self, Self::Error> {
        PenaltyParams::new(r.minh, r.maxh, r.minf, r.maxf, r.thr, r.k)
    }
}

impl From<PenaltyParams> for RawParams {
    fn from(p: PenaltyParams) -> Self {
        RawParams {
            minh: p.minh,
            maxh: p.maxh,
            minf: p.minf,
            maxf: p.maxf,
            thr: p.thr,
            k: p.k,
        }
    }
}

impl Default for PenaltyParams {
    /// 2 s honest floor, 5 min honest ceiling and fraud floor, 24 h fraud
    /// ceiling, threshold 0.5, growth 30.
    fn default() -> Self {
        PenaltyParams::new(2.0, 300.0, 300.0, 86_400.0, 0.5, 30.0).expect("valid defaults")
    }
}

impl PenaltyParams {
    pub fn new(
        minh: f64,
        maxh: f64,
        minf: f64,
        maxf: f64,
        thr: f64,
        k: f64,
    ) -> Result<Self, PenaltyError> {
        let finite = [minh, maxh, minf, maxf].iter().all(|v| v.is_finite());
        if !(finite && 0.0 < minh && minh <= maxh && maxh <= minf && minf < maxf) {
            return Err(PenaltyError::Ordering(format!(
                "minh={minh} maxh={maxh} minf={minf} maxf={maxf}"
            )));
        }
        if !(thr > 0.0 && thr < 1.0) {
            return Err(PenaltyError::Threshold(thr));
        }
        if !(k.is_finite() && k > 0.0) {
            return Err(PenaltyError::Growth(k));
        }
        Ok(PenaltyParams {
            minh,
            maxh,
            minf,
            maxf,
            thr,
            k,
        })
    }

    pub fn minh(&self) -> f64 {
        self.minh
    }
    pub fn maxh(&self) -> f64 {
        self.maxh
    }
    pub fn minf(&self) -> f64 {
        self.minf
    }
    pub fn maxf(&self) -> f64 {
        self.maxf
    }
    pub fn thr(&self) -> f64 {
        self.thr
    }
    pub fn k(&self) -> f64 {
        self.k
    }

    /// Copy with a different fraud ceiling.
    pub fn with_maxf(&self, maxf: f64) -> Result<Self, PenaltyError> {
        Self::new(self.minh, self.maxh, self.minf, maxf, self.thr, self.k)
    }

    fn honest_branch(&self, r: f64) -> f64 {
        (self.maxh - self.minh) / self.thr * r + self.minh
    }

    fn clamp(&self, tau: f64) -> f64 {
        tau.clamp(self.minh, self.maxf)
    }
}

/// Shape of the fraudulent branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    Logistic,
    Exponential,
    Logarithmic,
}

impl Conversion {
    pub const ALL: [Conversion; 3] = [
        Conversion::Logistic,
        Conversion::Exponential,
        Conversion::Logarithmic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Conversion::Logistic => "logistic",
            Conversion::Exponential => "exponential",
            Conversion::Logarithmic => "logarithmic",
        }
    }

    pub fn apply(self, r: f64, p: &PenaltyParams) -> f64 {
        match self {
            Conversion::Logistic => fraud_to_penalty(r, p),
            Conversion::Exponential => fraud_to_penalty_exp(r, p),
            Conversion::Logarithmic => fraud_to_penalty_log(r, p),
        }
    }
}

fn sanitize(r: f64) -> f64 {
    if r.is_nan() {
        1.0
    } else {
        r.clamp(0.0, 1.0)
    }
}

/// The deployed conversion, in seconds.
pub fn fraud_to_penalty(r: f64, p: &PenaltyParams) -> f64 {
    let r = sanitize(r);
    let tau = if r <= p.thr {
        p.honest_branch(r)
    } else {
        logistic_branch(r, p)
    };
    p.clamp(tau)
}

/// Fraud branch of the logistic conversion, unclamped and defined on all
/// of `[0, 1]`. At `r = thr` it equals `minf`.
pub fn logistic_branch(r: f64, p: &PenaltyParams) -> f64 {
    p.maxf / (1.0 + ((p.maxf - p.minf) / p.minf) * (-p.k * (r - p.thr)).exp())
}

/// Exponential alternative: `(maxf - minf)(e^r - e^thr)/(e - e^thr) + minf`.
pub fn fraud_to_penalty_exp(r: f64, p: &PenaltyParams) -> f64 {
    let r = sanitize(r);
    let tau = if r <= p.thr {
        p.honest_branch(r)
    } else {
        let e_thr = p.thr.exp();
        (p.maxf - p.minf) * (r.exp() - e_thr) / (std::f64::consts::E - e_thr) + p.minf
    };
    p.clamp(tau)
}

/// Logarithmic alternative: `(minf - maxf) log r / log thr + maxf`.
pub fn fraud_to_penalty_log(r: f64, p: &PenaltyParams) -> f64 {
    let r = sanitize(r);
    let tau = if r <= p.thr {
        p.honest_branch(r)
    } else {
        (p.minf - p.maxf) * r.ln() / p.thr.ln() + p.maxf
    };
    p.clamp(tau)
}

/// Seconds to whole milliseconds, rounded to nearest.
pub fn to_millis(seconds: f64) -> u64 {
    (seconds * 1000.0).round().max(0.0) as u64
}

/// Logistic conversion expressed in integer milliseconds.
pub fn penalty_millis(r: f64, p: &PenaltyParams) -> u64 {
    to_millis(fraud_to_penalty(r, p))
}

/// `(r, logistic, exponential, logarithmic)` samples on an even grid over
/// `[0, 1]` as CSV with a header row.
pub fn penalty_curves_csv(p: &PenaltyParams, points: usize) -> String {
    let points = points.max(2);
    let mut out = String::from("r,logistic,exponential,logarithmic\n");
    for i in 0..points {
        let r = i as f64 / (points - 1) as f64;
        out.push_str(&format!(
            "{r:.6},{:.6},{:.6},{:.6}\n",
            fraud_to_penalty(r, p),
            fraud_to_penalty_exp(r, p),
            fraud_to_penalty_log(r, p)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from a 50-digit evaluation of the logistic branch.
    const TAU_AT_1: f64 = 86_392.415_267_232_75;
    const TAU_AT_06: f64 = 5_651.162_889_502_977;
    const EXP_AT_075: f64 = 37_996.603_273_732_78;
    const LOG_AT_075: f64 = 50_665.271_312_091_55;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn anchors() {
        let p = PenaltyParams::default();
        assert_eq!(fraud_to_penalty(0.0, &p), 2.0);
        assert_eq!(fraud_to_penalty(0.5, &p), 300.0);
        assert!(rel(logistic_branch(0.5, &p), 300.0) < 1e-12);
        assert!(rel(fraud_to_penalty(1.0, &p), TAU_AT_1) < 1e-12);
        assert!(rel(fraud_to_penalty(0.6, &p), TAU_AT_06) < 1e-12);
        assert!(fraud_to_penalty(0.6, &p) / fraud_to_penalty(0.5, &p) >= 10.0);
    }

    #[test]
    fn alternatives_endpoints() {
        let p = PenaltyParams::default();
        assert_eq!(fraud_to_penalty_exp(0.5, &p), 300.0);
        assert!(rel(fraud_to_penalty_exp(1.0, &p), 86_400.0) < 1e-12);
        assert!(rel(fraud_to_penalty_log(1.0, &p), 86_400.0) < 1e-12);
        assert!(rel(fraud_to_penalty_exp(0.75, &p), EXP_AT_075) < 1e-12);
        assert!(rel(fraud_to_penalty_log(0.75, &p), LOG_AT_075) < 1e-12);
        // Just above the threshold the alternatives start at minf.
        assert!(rel(fraud_to_penalty_log(0.500_001, &p), 300.0) < 1e-3);
        assert!(rel(fraud_to_penalty_exp(0.500_001, &p), 300.0) < 1e-3);
    }

    #[test]
    fn monotone_and_in_range() {
        let p = PenaltyParams::default();
        let mut prev = 0.0;
        for i in 0..=10_000 {
            let r = i as f64 / 10_000.0;
            let t = fraud_to_penalty(r, &p);
            assert!(t >= prev, "decrease at r={r}");
            assert!(t >= p.minh() && t < p.maxf());
            prev = t;
        }
    }

    #[test]
    fn discontinuity_gap_when_maxh_below_minf() {
        let p = PenaltyParams::new(2.0, 120.0, 300.0, 86_400.0, 0.5, 30.0).unwrap();
        let below = fraud_to_penalty(0.5, &p);
        let above = logistic_branch(0.5, &p);
        assert!((above - below - (p.minf() - p.maxh())).abs() < 1e-9);
    }

    #[test]
    fn invalid_params() {
        assert!(matches!(
            PenaltyParams::new(0.0, 300.0, 300.0, 86_400.0, 0.5, 30.0),
            Err(PenaltyError::Ordering(_))
        ));
        assert!(PenaltyParams::new(2.0, 400.0, 300.0, 86_400.0, 0.5, 30.0).is_err());
        assert!(PenaltyParams::new(2.0, 300.0, 300.0, 300.0, 0.5, 30.0).is_err());
        assert!(matches!(
            PenaltyParams::new(2.0, 300.0, 300.0, 86_400.0, 1.0, 30.0),
            Err(PenaltyError::Threshold(_))
        ));
        assert!(matches!(
            PenaltyParams::new(2.0, 300.0, 300.0, 86_400.0, 0.5, 0.0),
            Err(PenaltyError::Growth(_))
        ));
        let bad: Result<PenaltyParams, _> = serde_json::from_str(
            r#"{"minh":5,"maxh":1,"minf":300,"maxf":86400,"thr":0.5,"k":30}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn curves_csv_shape() {
        let csv = penalty_curves_csv(&PenaltyParams::default(), 11);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "r,logistic,exponential,logarithmic");
        assert!(lines[1].starts_with("0.000000,2.000000,"));
    }

    #[test]
    fn millis() {
        let p = PenaltyParams::default();
        assert_eq!(penalty_millis(0.0, &p), 2000);
        assert_eq!(penalty_millis(0.5, &p), 300_000);
    }
}
