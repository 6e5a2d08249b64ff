//! Interpretation of metric records: nonlinearity regimes, joint trend
//! signatures, metric/loss correlation and width utilization.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::metrics::MetricRecord;

/// Band edges for [`classify_regime`]. The defaults are conventions, chosen
/// to sit well inside the separations typically seen between regimes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeThresholds {
    /// JS at or above this is "high" (nats).
    pub js_high: f64,
    /// JS at or below this is "approximately zero" (nats).
    pub js_zero: f64,
    /// PR gain at or above this is "high".
    pub pr_gain_high: f64,
    /// Upper edge of "moderate" PR gain. Validated but not used by the rules.
    pub pr_gain_moderate: f64,
    /// ΔEEE at or below this is "strongly negative".
    pub deee_strong_neg: f64,
    /// |ΔEEE| at or below this is "approximately zero".
    pub deee_weak_band: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            js_high: 0.1,
            js_zero: 0.01,
            pr_gain_high: 5.0,
            pr_gain_moderate: 2.0,
            deee_strong_neg: -0.1,
            deee_weak_band: 0.02,
        }
    }
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.js_high,
            self.js_zero,
            self.pr_gain_high,
            self.pr_gain_moderate,
            self.deee_strong_neg,
            self.deee_weak_band,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(arg("thresholds must be finite"));
        }
        if !(self.js_zero < self.js_high) {
            return Err(arg("js_zero must be below js_high"));
        }
        if !(self.pr_gain_moderate < self.pr_gain_high) {
            return Err(arg("pr_gain_moderate must be below pr_gain_high"));
        }
        if !(self.deee_strong_neg < 0.0) {
            return Err(arg("deee_strong_neg must be negative"));
        }
        if !(self.deee_weak_band > 0.0) {
            return Err(arg("deee_weak_band must be positive"));
        }
        Ok(())
    }

    /// Parses a JSON object; missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let th: RegimeThresholds = serde_json::from_str(text)?;
        th.validate()?;
        Ok(th)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeLabel {
    /// Large, flattening restructuring.
    BeneficialRestructuring,
    /// Large restructuring that barely reduces top-heaviness.
    CompensatoryRepair,
    /// New directions open but the spectrum stays top-heavy.
    ExpansionWithoutEqualization,
    /// The nonlinearity acts as a near-identity on the spectrum.
    SpectralInertia,
    Unclassified,
}

impl RegimeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeLabel::BeneficialRestructuring => "beneficial_restructuring",
            RegimeLabel::CompensatoryRepair => "compensatory_repair",
            RegimeLabel::ExpansionWithoutEqualization => "expansion_without_equalization",
            RegimeLabel::SpectralInertia => "spectral_inertia",
            RegimeLabel::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// First matching rule wins:
///
/// 1. high JS, high PR gain, strongly negative ΔEEE → beneficial restructuring
/// 2. high JS, high PR gain, otherwise → compensatory repair
/// 3. high PR gain, ΔEEE near zero or positive, JS below high → expansion without equalization
/// 4. JS near zero, ΔEEE near zero → spectral inertia
pub fn classify_regime(rec: &MetricRecord, th: &RegimeThresholds) -> Result<RegimeLabel> {
    let (js, gain, deee) = (rec.js, rec.pr_gain, rec.delta_eee);
    if let Some((name, v)) = rec.values().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Data(format!(
            "record (layer {}, step {}) has non-finite {name} = {v}",
            rec.layer, rec.step
        )));
    }
    let high_js = js >= th.js_high;
    let high_gain = gain >= th.pr_gain_high;
    let flat_deee = deee.abs() <= th.deee_weak_band;
    let label = if high_js && high_gain && deee <= th.deee_strong_neg {
        RegimeLabel::BeneficialRestructuring
    } else if high_js && high_gain {
        RegimeLabel::CompensatoryRepair
    } else if high_gain && (flat_deee || deee > 0.0) && !high_js {
        RegimeLabel::ExpansionWithoutEqualization
    } else if js <= th.js_zero && flat_deee {
        RegimeLabel::SpectralInertia
    } else {
        RegimeLabel::Unclassified
    };
    Ok(label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Up,
    Down,
    Flat,
}

impl Trend {
    pub const ALL: [Trend; 3] = [Trend::Up, Trend::Down, Trend::Flat];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Signature {
    /// SE↑ PR↑ EEE↓: variance spreading into more directions.
    HealthySpectralFlattening,
    /// SE↓ PR↓ EEE↑: variance concentrating into few directions.
    SpectralCollapse,
    NoMatch,
}

impl Signature {
    pub fn as_str(self) -> &'static str {
        match self {
            Signature::HealthySpectralFlattening => "healthy spectral flattening",
            Signature::SpectralCollapse => "spectral collapse",
            Signature::NoMatch => "no match",
        }
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Matches per-record SE/PR/EEE/JS trends against the joint signatures.
/// Neither signature constrains JS.
pub fn match_signature(se: Trend, pr: Trend, eee: Trend, _js: Trend) -> Signature {
    use Trend::*;
    match (se, pr, eee) {
        (Up, Up, Down) => Signature::HealthySpectralFlattening,
        (Down, Down, Up) => Signature::SpectralCollapse,
        _ => Signature::NoMatch,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub metric: String,
    pub r: f64,
    pub n_points: usize,
}

impl CorrelationResult {
    pub fn named(mut self, metric: impl Into<String>) -> Self {
        self.metric = metric.into();
        self
    }
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    if xs.len() != ys.len() {
        return Err(arg(format!(
            "series lengths differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(arg(format!("need at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(arg("series contain non-finite values"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series is constant".into()));
    }
    Ok(CorrelationResult {
        metric: String::new(),
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        n_points: xs.len(),
    })
}

/// Fraction of the FFN width effectively used: `PR_post / D`.
pub fn width_utilization(pr_post: f64, d_ffn: usize) -> Result<f64> {
    if d_ffn == 0 {
        return Err(arg("FFN width must be positive"));
    }
    let d = d_ffn as f64;
    if !(pr_post > 0.0) || !pr_post.is_finite() {
        return Err(arg(format!(
            "participation ratio must be positive, got {pr_post}"
        )));
    }
    if pr_post > d * (1.0 + 1e-12) {
        return Err(arg(format!(
            "participation ratio {pr_post} exceeds width {d_ffn}"
        )));
    }
    Ok((pr_post / d).min(1.0))
}

pub const DEFAULT_SLOPE_TOL: f64 = 1e-3;

/// Least-squares slope of the last `window` points against their index.
pub fn trailing_slope(series: &[f64], window: usize) -> Result<f64> {
    if window < 2 || series.len() < window {
        return Err(arg(format!(
            "need 2 <= window <= len, got window {window} for {} points",
            series.len()
        )));
    }
    let tail = &series[series.len() - window..];
    let w = window as f64;
    let mx = (w - 1.0) / 2.0;
    let my = tail.iter().sum::<f64>() / w;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Classifies the trailing-window slope as up, down or flat.
pub fn trend_of(series: &[f64], window: usize, slope_tol: f64) -> Result<Trend> {
    let slope = trailing_slope(series, window)?;
    Ok(if slope > slope_tol {
        Trend::Up
    } else if slope < -slope_tol {
        Trend::Down
    } else {
        Trend::Flat
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(js: f64, pr_gain: f64, delta_eee: f64) -> MetricRecord {
        MetricRecord {
            layer: 0,
            step: 0,
            se_pre: 1.0,
            se_post: 2.0,
            pr_pre: 2.0,
            pr_post: 2.0 * pr_gain,
            eee_pre: 0.5,
            eee_post: 0.5 + delta_eee,
            js,
            pr_gain,
            delta_eee,
            truncated: false,
        }
    }

    #[test]
    fn regime_examples() {
        let th = RegimeThresholds::default();
        let c = |js, g, d| classify_regime(&rec(js, g, d), &th).unwrap();
        assert_eq!(c(0.4, 50.0, -0.3), RegimeLabel::BeneficialRestructuring);
        assert_eq!(c(0.001, 1.2, 0.005), RegimeLabel::SpectralInertia);
        assert_eq!(
            c(0.05, 50.0, 0.05),
            RegimeLabel::ExpansionWithoutEqualization
        );
        assert_eq!(c(0.4, 50.0, -0.05), RegimeLabel::CompensatoryRepair);
        assert_eq!(c(0.05, 1.5, -0.3), RegimeLabel::Unclassified);
    }

    #[test]
    fn regime_rejects_non_finite() {
        let th = RegimeThresholds::default();
        assert!(classify_regime(&rec(f64::NAN, 1.0, 0.0), &th).is_err());
    }

    #[test]
    fn thresholds_json() {
        let th = RegimeThresholds::from_json(r#"{"js_high": 0.2}"#).unwrap();
        assert_eq!(th.js_high, 0.2);
        assert_eq!(th.js_zero, 0.01);
        assert!(RegimeThresholds::from_json(r#"{"js_zero": 0.5}"#).is_err());
        assert!(RegimeThresholds::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RegimeThresholds::from_json(r#"{"deee_weak_band": -1}"#).is_err());
    }

    #[test]
    fn signature_examples() {
        use Trend::*;
        assert_eq!(
            match_signature(Up, Up, Down, Flat),
            Signature::HealthySpectralFlattening
        );
        assert_eq!(
            match_signature(Up, Up, Down, Up),
            Signature::HealthySpectralFlattening
        );
        assert_eq!(
            match_signature(Down, Down, Up, Down),
            Signature::SpectralCollapse
        );
        assert_eq!(match_signature(Flat, Flat, Flat, Flat), Signature::NoMatch);
    }

    #[test]
    fn pearson_examples() {
        let xs = [0.5, 1.0, 4.0, 2.5];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap().r - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &down).unwrap().r + 1.0).abs() < 1e-15);
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]).unwrap();
        // hand: Sxy = 2, Sxx = 2, Syy = 42/9
        assert!((r.r - 3.0 / 21f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.n_points, 3);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn width_examples() {
        assert!((width_utilization(1822.0, 6144).unwrap() - 0.2965).abs() < 1e-4);
        assert!((width_utilization(71.0, 6144).unwrap() - 0.01156).abs() < 1e-5);
        assert_eq!(width_utilization(6144.0, 6144).unwrap(), 1.0);
        assert!(width_utilization(6145.0, 6144).is_err());
    }

    #[test]
    fn trends() {
        let ramp: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(trend_of(&ramp, 4, DEFAULT_SLOPE_TOL).unwrap(), Trend::Up);
        assert_eq!(
            trend_of(&[3.0; 6], 6, DEFAULT_SLOPE_TOL).unwrap(),
            Trend::Flat
        );
        // noisy prefix then a 0.002/step ramp: the full window sees slope
        // -0.018/7 (down), the last four points see exactly 0.002 (up).
        let mut s = vec![0.0, 0.1, -0.1];
        s.extend((0..4).map(|k| 0.002 * f64::from(k)));
        let slope = trailing_slope(&s, 7).unwrap();
        assert!((slope + 0.018 / 7.0).abs() < 1e-12);
        assert_eq!(trend_of(&s, 7, DEFAULT_SLOPE_TOL).unwrap(), Trend::Down);
        assert_eq!(trend_of(&s, 4, DEFAULT_SLOPE_TOL).unwrap(), Trend::Up);
        assert!(trend_of(&s, 1, DEFAULT_SLOPE_TOL).is_err());
        assert!(trend_of(&s, 8, DEFAULT_SLOPE_TOL).is_err());
    }
}
