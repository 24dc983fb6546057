//! End-to-end analysis of one frequency table and its JSON/text renderings.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chisq::chi_sq_critical;
use crate::error::{Error, Result};
use crate::gee::{gee_score_test, stack, WorkingCorrelation};
use crate::hypothesis::{aic_compare, likelihood_tests, AicComparison, TestKind, TestResult};
use crate::mle::{FitOptions, FitResult};
use crate::model::{CombinedCounts, ModelKind};

pub const SCHEMA: &str = "pairtest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Rosner,
    Donner,
    /// Whichever model has the smaller AIC.
    Auto,
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ModelChoice::Auto);
        }
        Ok(match s.parse::<ModelKind>()? {
            ModelKind::Rosner => ModelChoice::Rosner,
            ModelKind::Donner => ModelChoice::Donner,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub model: ModelChoice,
    pub tests: Vec<TestKind>,
    pub alpha: f64,
    pub working_correlation: WorkingCorrelation,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            model: ModelChoice::Auto,
            tests: TestKind::ALL.to_vec(),
            alpha: 0.05,
            working_correlation: WorkingCorrelation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub pis: Vec<f64>,
    /// `R` or `rho`, depending on the model.
    pub kappa: f64,
    /// Within-subject correlation per group.
    pub rho: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub kappa_fixed: bool,
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        FitSummary {
            pis: f.params.pis().to_vec(),
            kappa: f.params.kappa(),
            rho: f.params.correlations(),
            loglik: f.loglik,
            converged: f.converged,
            boundary: f.boundary,
            kappa_fixed: f.kappa_fixed,
        }
    }
}

/// A test's result, or why it is unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test: TestKind,
    pub df: u32,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema: String,
    pub model: ModelKind,
    /// The model was chosen by AIC rather than given.
    pub model_selected_by_aic: bool,
    pub groups: Vec<String>,
    pub alpha: f64,
    pub critical_value: f64,
    pub aic: Option<AicComparison>,
    pub delta_aic: Option<f64>,
    pub constrained: FitSummary,
    pub unconstrained: FitSummary,
    pub tests: Vec<TestOutcome>,
}

/// Fits both hypotheses under the chosen model and runs the requested tests.
///
/// Failing fits are errors; a test that cannot be computed at the fitted
/// values (for example at a boundary estimate) is reported as unavailable.
pub fn analyze(data: &CombinedCounts, options: &AnalyzeOptions) -> Result<AnalysisReport> {
    if !(0.0..=1.0).contains(&options.alpha) {
        return Err(Error::Usage(format!("alpha = {} outside [0, 1]", options.alpha)));
    }
    if options.tests.is_empty() {
        return Err(Error::Usage("no tests requested".into()));
    }
    let df = (data.num_groups() - 1) as u32;
    let critical = chi_sq_critical(options.alpha, df)?;
    let aic = match options.model {
        ModelChoice::Auto => Some(aic_compare(data)?),
        _ => aic_compare(data).ok(),
    };
    let kind = match (options.model, &aic) {
        (ModelChoice::Rosner, _) => ModelKind::Rosner,
        (ModelChoice::Donner, _) => ModelKind::Donner,
        (ModelChoice::Auto, Some(a)) => a.preferred,
        (ModelChoice::Auto, None) => unreachable!("auto selection computed above"),
    };
    let lik = likelihood_tests(data.groups(), kind, &FitOptions::default())?;
    let outcome = |test: TestKind, result: std::result::Result<&TestResult, String>| match result {
        Ok(r) => TestOutcome {
            test,
            df: r.df,
            statistic: Some(r.statistic),
            p_value: Some(r.p_value),
            reject: Some(options.alpha >= 1.0 || r.statistic > critical),
            error: None,
        },
        Err(message) => TestOutcome {
            test,
            df,
            statistic: None,
            p_value: None,
            reject: None,
            error: Some(message),
        },
    };
    let tests = options
        .tests
        .iter()
        .map(|&test| {
            let res = match test {
                TestKind::LikelihoodRatio => &lik.lr,
                TestKind::Wald => &lik.wald,
                TestKind::Score => &lik.score,
                TestKind::GeeScore => {
                    let gee = gee_score_test(&stack(data), options.working_correlation);
                    return outcome(test, gee.as_ref().map_err(ToString::to_string));
                }
            };
            outcome(test, res.as_ref().map_err(ToString::to_string))
        })
        .collect();
    Ok(AnalysisReport {
        schema: SCHEMA.to_string(),
        model: kind,
        model_selected_by_aic: options.model == ModelChoice::Auto,
        groups: data.labels().to_vec(),
        alpha: options.alpha,
        critical_value: critical,
        delta_aic: aic.map(|a| a.delta_aic),
        aic,
        constrained: FitSummary::from(&lik.null),
        unconstrained: FitSummary::from(&lik.full),
        tests,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Tabular report with every number at four decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let k = self.model.kappa_symbol();
        let how = if self.model_selected_by_aic { "selected by AIC" } else { "given" };
        let _ = writeln!(out, "model: {} ({how})", self.model);
        if let Some(a) = &self.aic {
            let _ = writeln!(
                out,
                "AIC: rosner {:.4}, donner {:.4}, delta_aic {:.4}",
                a.aic_rosner, a.aic_donner, a.delta_aic
            );
        }
        let width = self.groups.iter().map(String::len).max().unwrap_or(0).max(10);
        let row = |out: &mut String, name: &str, values: &[f64]| {
            let _ = write!(out, "  {name:<11}");
            for v in values {
                let _ = write!(out, " {v:>width$.4}");
            }
            out.push('\n');
        };
        for (title, fit) in [("constrained", &self.constrained), ("unconstrained", &self.unconstrained)] {
            let _ = write!(out, "\n{title:<13}");
            for g in &self.groups {
                let _ = write!(out, " {g:>width$}");
            }
            out.push('\n');
            row(&mut out, "pi", &fit.pis);
            row(&mut out, k, &[fit.kappa]);
            if self.model == ModelKind::Rosner {
                row(&mut out, "rho", &fit.rho);
            }
            if fit.boundary {
                out.push_str("  (boundary estimate)\n");
            }
        }
        let _ = writeln!(
            out,
            "\n{:<6} {:>12} {:>4} {:>10}  decision at alpha = {}",
            "test", "statistic", "df", "p-value", self.alpha
        );
        for t in &self.tests {
            match (t.statistic, t.p_value, t.reject) {
                (Some(q), Some(p), Some(reject)) => {
                    let decision = if reject { "reject H0" } else { "do not reject H0" };
                    let _ = writeln!(
                        out,
                        "{:<6} {q:>12.4} {:>4} {p:>10.4}  {decision}",
                        t.test.label(),
                        t.df
                    );
                }
                _ => {
                    let why = t.error.as_deref().unwrap_or("unavailable");
                    let _ = writeln!(out, "{:<6} {:>12} {:>4} {:>10}  {why}", t.test.label(), "-", t.df, "-");
                }
            }
        }
        out
    }
}
