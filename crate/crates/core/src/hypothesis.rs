//! Likelihood ratio, Wald-type and score tests of equal proportions, and
//! AIC comparison of the two correlation models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chisq::chi_sq_sf;
use crate::error::{Error, Result};
use crate::linalg::{inv_quad_form, inverse_sym};
use crate::mle::{
    design_of, fisher_information, fit, fit_constrained, fit_unconstrained, FitOptions,
    FitResult, Restriction,
};
use crate::model::{score_vector, CombinedCounts, GroupCounts, ModelKind};

/// Negative statistics down to this value are rounding noise and read as 0.
const CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    #[serde(rename = "lr")]
    LikelihoodRatio,
    Wald,
    Score,
    #[serde(rename = "gee")]
    GeeScore,
}

impl TestKind {
    pub const ALL: [TestKind; 4] = [
        TestKind::LikelihoodRatio,
        TestKind::Wald,
        TestKind::Score,
        TestKind::GeeScore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestKind::LikelihoodRatio => "lr",
            TestKind::Wald => "wald",
            TestKind::Score => "score",
            TestKind::GeeScore => "gee",
        }
    }

    /// Column heading used in reports.
    pub fn label(self) -> &'static str {
        match self {
            TestKind::LikelihoodRatio => "Q_LR",
            TestKind::Wald => "Q_W",
            TestKind::Score => "Q_S",
            TestKind::GeeScore => "Q_GS",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lr" => Ok(TestKind::LikelihoodRatio),
            "wald" | "w" => Ok(TestKind::Wald),
            "score" | "s" => Ok(TestKind::Score),
            "gee" | "gs" => Ok(TestKind::GeeScore),
            other => Err(Error::Usage(format!("unknown test '{other}'"))),
        }
    }
}

/// Parses a comma-separated list such as `lr,wald,score,gee`.
pub fn parse_test_list(s: &str) -> Result<Vec<TestKind>> {
    let mut out: Vec<TestKind> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let k: TestKind = part.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no tests requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

impl TestResult {
    pub fn new(kind: TestKind, statistic: f64, df: u32) -> Result<Self> {
        if !statistic.is_finite() {
            return Err(Error::Singular("test statistic"));
        }
        let statistic = if statistic < 0.0 {
            if statistic < -CLAMP_TOL {
                return Err(Error::NestingViolation(-statistic));
            }
            0.0
        } else {
            statistic
        };
        Ok(TestResult {
            kind,
            statistic,
            df,
            p_value: chi_sq_sf(statistic, df)?,
        })
    }

    /// Rejection against a precomputed critical value.
    pub fn exceeds(&self, critical: f64) -> bool {
        self.statistic > critical
    }
}

/// Hypothesis matrix of `g - 1` contrasts among the proportions, with a
/// zero column for `kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    rows: DMatrix<f64>,
}

impl ContrastMatrix {
    /// Adjacent differences `pi_i - pi_{i+1}`.
    pub fn adjacent(g: usize) -> Self {
        let mut rows = DMatrix::zeros(g.saturating_sub(1), g + 1);
        for i in 0..g.saturating_sub(1) {
            rows[(i, i)] = 1.0;
            rows[(i, i + 1)] = -1.0;
        }
        ContrastMatrix { rows }
    }

    /// Differences from the first group, `pi_1 - pi_{i+1}`.
    pub fn baseline(g: usize) -> Self {
        let mut rows = DMatrix::zeros(g.saturating_sub(1), g + 1);
        for i in 0..g.saturating_sub(1) {
            rows[(i, 0)] = 1.0;
            rows[(i, i + 1)] = -1.0;
        }
        ContrastMatrix { rows }
    }

    /// Wraps an arbitrary `(g - 1) x (g + 1)` matrix.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        if rows.ncols() < 2 || rows.nrows() + 2 != rows.ncols() {
            return Err(Error::InvalidParameter(format!(
                "contrast matrix must be (g-1) x (g+1), got {} x {}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        Ok(ContrastMatrix { rows })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn num_groups(&self) -> usize {
        self.rows.ncols() - 1
    }

    fn pi_columns(&self) -> DMatrix<f64> {
        let g = self.num_groups();
        self.rows.columns(0, g).into_owned()
    }
}

fn df_for(g: usize) -> Result<u32> {
    if g < 2 {
        return Err(Error::InvalidData(format!(
            "homogeneity tests need at least 2 groups, got {g}"
        )));
    }
    Ok((g - 1) as u32)
}

/// `2 [l(full) - l(null)]`
pub fn lr_from_fits(null: &FitResult, full: &FitResult) -> Result<TestResult> {
    let g = full.params.num_groups();
    TestResult::new(
        TestKind::LikelihoodRatio,
        2.0 * (full.loglik - null.loglik),
        df_for(g)?,
    )
}

/// Wald statistic at the unrestricted estimate:
/// `(C'b)' [C' I^{-1}(b) C]^{-1} (C'b)`.
pub fn wald_from_fit(
    full: &FitResult,
    groups: &[GroupCounts],
    contrast: &ContrastMatrix,
) -> Result<TestResult> {
    let g = full.params.num_groups();
    if contrast.num_groups() != g {
        return Err(Error::InvalidParameter(format!(
            "contrast for {} groups applied to {g}",
            contrast.num_groups()
        )));
    }
    let info = fisher_information(&full.params, &design_of(groups))?;
    let (cov, c, beta) = if full.kappa_fixed {
        let cov = inverse_sym(&info.pi_block()).ok_or(Error::Singular("Fisher information"))?;
        (cov, contrast.pi_columns(), DVector::from_column_slice(full.params.pis()))
    } else {
        let cov = inverse_sym(info.entries()).ok_or(Error::Singular("Fisher information"))?;
        (cov, contrast.rows.clone(), DVector::from_vec(full.params.to_vec()))
    };
    let cb = &c * beta;
    let middle = &c * cov * c.transpose();
    let q = inv_quad_form(&middle, &cb).ok_or(Error::Singular("contrast covariance"))?;
    TestResult::new(TestKind::Wald, q, df_for(g)?)
}

/// Score statistic at the null estimate, `U I^{-1} U'` with the `kappa`
/// component of `U` set to zero.
pub fn score_from_fit(null: &FitResult, groups: &[GroupCounts]) -> Result<TestResult> {
    let g = null.params.num_groups();
    let mut u = score_vector(&null.params, groups)?;
    let info = fisher_information(&null.params, &design_of(groups))?;
    let q = if null.kappa_fixed {
        let u = DVector::from_column_slice(&u[..g]);
        inv_quad_form(&info.pi_block(), &u)
    } else {
        u[g] = 0.0;
        inv_quad_form(info.entries(), &DVector::from_vec(u))
    }
    .ok_or(Error::Singular("Fisher information"))?;
    TestResult::new(TestKind::Score, q, df_for(g)?)
}

pub fn lr_test(data: &CombinedCounts, kind: ModelKind) -> Result<TestResult> {
    let null = fit_constrained(data, kind)?;
    let full = fit_unconstrained(data, kind)?;
    lr_from_fits(&null, &full)
}

pub fn wald_test(data: &CombinedCounts, kind: ModelKind) -> Result<TestResult> {
    let full = fit_unconstrained(data, kind)?;
    wald_from_fit(&full, data.groups(), &ContrastMatrix::adjacent(data.num_groups()))
}

pub fn score_test(data: &CombinedCounts, kind: ModelKind) -> Result<TestResult> {
    let null = fit_constrained(data, kind)?;
    score_from_fit(&null, data.groups())
}

/// Both fits and the three likelihood-based tests from them.
#[derive(Debug)]
pub struct LikelihoodTests {
    pub null: FitResult,
    pub full: FitResult,
    pub lr: Result<TestResult>,
    pub wald: Result<TestResult>,
    pub score: Result<TestResult>,
}

/// Fits both models to `groups` (which need not satisfy the two-group
/// minimum of [`CombinedCounts`]) and computes all three statistics.
pub fn likelihood_tests(
    groups: &[GroupCounts],
    kind: ModelKind,
    options: &FitOptions,
) -> Result<LikelihoodTests> {
    let null = fit(groups, kind, Restriction::EqualProportions, options)?;
    let full = fit(groups, kind, Restriction::None, options)?;
    let lr = lr_from_fits(&null, &full);
    let wald = wald_from_fit(&full, groups, &ContrastMatrix::adjacent(groups.len()));
    let score = score_from_fit(&null, groups);
    Ok(LikelihoodTests {
        null,
        full,
        lr,
        wald,
        score,
    })
}

/// `-2 l + 2 k`, with the combinatorial constant of the likelihood excluded
/// and `k` the number of estimated parameters.
pub fn aic(fit: &FitResult) -> f64 {
    let k = fit.params.num_groups() + usize::from(!fit.kappa_fixed);
    -2.0 * fit.loglik + 2.0 * k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AicComparison {
    pub aic_rosner: f64,
    pub aic_donner: f64,
    /// `AIC(Rosner) - AIC(Donner)`
    pub delta_aic: f64,
    pub preferred: ModelKind,
}

/// Compares the unrestricted fits of both models. Ties go to Rosner's model.
pub fn aic_compare(data: &CombinedCounts) -> Result<AicComparison> {
    let r = fit_unconstrained(data, ModelKind::Rosner)?;
    let d = fit_unconstrained(data, ModelKind::Donner)?;
    Ok(aic_from_fits(&r, &d))
}

pub fn aic_from_fits(rosner: &FitResult, donner: &FitResult) -> AicComparison {
    let (aic_rosner, aic_donner) = (aic(rosner), aic(donner));
    let delta_aic = aic_rosner - aic_donner;
    AicComparison {
        aic_rosner,
        aic_donner,
        delta_aic,
        preferred: if delta_aic <= 0.0 {
            ModelKind::Rosner
        } else {
            ModelKind::Donner
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ome() -> CombinedCounts {
        CombinedCounts::new(vec![
            GroupCounts::new([9, 7, 23], [20, 34]),
            GroupCounts::new([7, 5, 13], [19, 36]),
        ])
        .unwrap()
    }

    fn rp() -> CombinedCounts {
        CombinedCounts::new(vec![
            GroupCounts::new([15, 6, 7], [0, 0]),
            GroupCounts::new([7, 5, 9], [0, 0]),
            GroupCounts::new([3, 2, 14], [0, 0]),
            GroupCounts::new([67, 24, 57], [0, 0]),
        ])
        .unwrap()
    }

    #[test]
    fn ome_rosner_statistics() {
        let d = ome();
        let lr = lr_test(&d, ModelKind::Rosner).unwrap();
        assert_close!(lr.statistic, 0.0394, 1e-3);
        assert_close!(lr.p_value, 0.8426, 1e-3);
        assert_eq!(lr.df, 1);
        let w = wald_test(&d, ModelKind::Rosner).unwrap();
        assert_close!(w.statistic, 0.0391, 1e-3);
        assert_close!(w.p_value, 0.8432, 1e-3);
        let s = score_test(&d, ModelKind::Rosner).unwrap();
        assert_close!(s.statistic, 0.0395, 1e-3);
        assert_close!(s.p_value, 0.8424, 1e-3);
    }

    #[test]
    fn rp_donner_statistics() {
        let d = rp();
        let lr = lr_test(&d, ModelKind::Donner).unwrap();
        assert_close!(lr.statistic, 12.0385, 1e-3);
        assert_close!(lr.p_value, 0.0073, 1e-4);
        assert_eq!(lr.df, 3);
        let w = wald_test(&d, ModelKind::Donner).unwrap();
        assert_close!(w.statistic, 16.3267, 1e-3);
        assert_close!(w.p_value, 0.0010, 1e-4);
        let s = score_test(&d, ModelKind::Donner).unwrap();
        assert_close!(s.statistic, 11.3158, 1e-3);
        assert_close!(s.p_value, 0.0101, 1e-4);
    }

    #[test]
    fn duplicate_groups_give_zero_statistics() {
        let g = GroupCounts::new([6, 4, 9], [7, 8]);
        let d = CombinedCounts::new(vec![g, g]).unwrap();
        for kind in [ModelKind::Rosner, ModelKind::Donner] {
            for t in [
                lr_test(&d, kind).unwrap(),
                wald_test(&d, kind).unwrap(),
                score_test(&d, kind).unwrap(),
            ] {
                assert!(t.statistic.abs() < 1e-8, "{t:?}");
                assert_close!(t.p_value, 1.0, 1e-6);
            }
        }
    }

    #[test]
    fn aic_selection() {
        let c = aic_compare(&ome()).unwrap();
        assert_close!(c.delta_aic, -0.0101, 2e-3);
        assert_eq!(c.preferred, ModelKind::Rosner);
        assert_close!(c.aic_rosner, 274.1305, 1e-3);
        let c = aic_compare(&rp()).unwrap();
        assert_close!(c.delta_aic, 6.1523, 2e-3);
        assert_eq!(c.preferred, ModelKind::Donner);
        assert_close!(c.aic_donner, 443.7967, 1e-3);
    }

    #[test]
    fn contrast_shapes() {
        let a = ContrastMatrix::adjacent(3);
        assert_eq!(a.matrix().shape(), (2, 4));
        assert_eq!(a.matrix()[(1, 1)], 1.0);
        assert_eq!(a.matrix()[(1, 2)], -1.0);
        assert_eq!(a.matrix().column(3).amax(), 0.0);
        assert!(ContrastMatrix::from_matrix(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn negative_statistics() {
        assert_eq!(TestResult::new(TestKind::LikelihoodRatio, -1e-12, 1).unwrap().statistic, 0.0);
        assert!(TestResult::new(TestKind::LikelihoodRatio, -1e-3, 1).is_err());
    }

    #[test]
    fn test_list_parsing() {
        assert_eq!(parse_test_list("lr,wald,score,gee").unwrap(), TestKind::ALL.to_vec());
        assert_eq!(parse_test_list("score, lr").unwrap().len(), 2);
        assert!(parse_test_list("lr,foo").is_err());
        assert!(parse_test_list("").is_err());
    }
}
