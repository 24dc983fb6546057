//! Monte Carlo estimation of type I error and power.
//!
//! Replicate `k` draws from its own ChaCha stream keyed by `(seed, k)`, so
//! results do not depend on scheduling or thread count.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::chi_sq_critical;
use crate::error::{Error, Result};
use crate::gee::{gee_score_test, GeeClusterSet, WorkingCorrelation};
use crate::hypothesis::{likelihood_tests, TestKind};
use crate::mle::{FitOptions, GroupSize};
use crate::model::{corr_convert, probs_unchecked, valid_region, GroupCounts, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    E1,
    E2,
    U,
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E1" => Ok(Design::E1),
            "E2" => Ok(Design::E2),
            "U" | "UG" | "U_G" => Ok(Design::U),
            _ => Err(Error::Usage(format!("unknown design '{s}' (expected E1, E2 or U)"))),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::E1 => "E1",
            Design::E2 => "E2",
            Design::U => "U",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Alternative {
    H1A,
    H1B,
}

impl FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "H1A" | "A" => Ok(Alternative::H1A),
            "H1B" | "B" => Ok(Alternative::H1B),
            _ => Err(Error::Usage(format!("unknown alternative '{s}' (expected H1A or H1B)"))),
        }
    }
}

fn check_preset_g(g: usize) -> Result<()> {
    if matches!(g, 2 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::Usage(format!("presets exist for g = 2, 4 or 8, not {g}")))
    }
}

/// Per-group sizes; every preset uses `m_plus = n_plus`.
pub fn design_presets(design: Design, g: usize) -> Result<Vec<GroupSize>> {
    check_preset_g(g)?;
    let sizes: Vec<u64> = match design {
        Design::E1 => vec![20; g],
        Design::E2 => vec![40; g],
        Design::U => match g {
            2 => vec![20, 40],
            4 => vec![20, 20, 40, 40],
            _ => vec![20, 20, 30, 30, 40, 40, 50, 50],
        },
    };
    Ok(sizes
        .into_iter()
        .map(|s| GroupSize {
            m_plus: s,
            n_plus: s,
        })
        .collect())
}

pub fn alternative_presets(alt: Alternative, g: usize) -> Result<Vec<f64>> {
    check_preset_g(g)?;
    let base: Vec<f64> = match (alt, g) {
        (Alternative::H1A, 2) => vec![0.25, 0.4],
        (Alternative::H1B, 2) => vec![0.2, 0.4],
        (Alternative::H1A, _) => vec![0.25, 0.3, 0.35, 0.4],
        (Alternative::H1B, _) => vec![0.2, 0.2, 0.4, 0.4],
    };
    Ok(base.iter().copied().cycle().take(g).collect())
}

/// How the true within-subject dependence is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    /// Donner-scale correlation; under Rosner's model it is converted to
    /// `R`, which requires a common proportion.
    Rho(f64),
    /// The model's own parameter (`R` or `rho`).
    Kappa(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kind: ModelKind,
    pub sizes: Vec<GroupSize>,
    pub pis: Vec<f64>,
    pub correlation: Correlation,
    pub replicates: u64,
    pub alpha: f64,
    pub seed: u64,
    pub tests: Vec<TestKind>,
    pub working_correlation: WorkingCorrelation,
}

impl SimConfig {
    /// Null configuration with common proportion `pi0`.
    pub fn null(kind: ModelKind, sizes: Vec<GroupSize>, pi0: f64, correlation: Correlation) -> Self {
        let g = sizes.len();
        SimConfig {
            kind,
            sizes,
            pis: vec![pi0; g],
            correlation,
            replicates: 10_000,
            alpha: 0.05,
            seed: 1,
            tests: TestKind::ALL.to_vec(),
            working_correlation: WorkingCorrelation::default(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    /// Model parameter used for sampling.
    pub fn true_kappa(&self) -> Result<f64> {
        match (self.correlation, self.kind) {
            (Correlation::Kappa(k), _) | (Correlation::Rho(k), ModelKind::Donner) => Ok(k),
            (Correlation::Rho(rho), ModelKind::Rosner) => {
                let pi0 = self.pis[0];
                if self.pis.iter().any(|&p| p != pi0) {
                    return Err(Error::InvalidParameter(
                        "a correlation for Rosner's model with unequal proportions is ambiguous; give R directly".into(),
                    ));
                }
                corr_convert(pi0, rho, ModelKind::Donner)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.num_groups();
        if g < 2 {
            return Err(Error::InvalidParameter("at least two groups are required".into()));
        }
        if self.pis.len() != g {
            return Err(Error::InvalidParameter(format!(
                "{} proportions for {g} groups",
                self.pis.len()
            )));
        }
        if self.sizes.iter().any(|s| s.m_plus + s.n_plus == 0) {
            return Err(Error::InvalidParameter("every group needs a positive size".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("replicates must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if self.tests.is_empty() {
            return Err(Error::InvalidParameter("no tests requested".into()));
        }
        let kappa = self.true_kappa()?;
        for &pi in &self.pis {
            let range = valid_region(pi, self.kind)?;
            if !range.contains(kappa) {
                return Err(Error::InvalidParameter(format!(
                    "{} = {kappa} outside [{}, {}] for pi = {pi}",
                    self.kind.kappa_symbol(),
                    range.lo,
                    range.hi
                )));
            }
        }
        Ok(())
    }
}

/// One group's counts: `m2 ~ Bin(m+, p2)`, `m1 | m2 ~ Bin(m+ - m2, p1 / (p1 + p0))`,
/// `n1 ~ Bin(n+, pi)`.
pub fn sample_group<R: rand::Rng + ?Sized>(
    pi: f64,
    kappa: f64,
    kind: ModelKind,
    size: GroupSize,
    rng: &mut R,
) -> GroupCounts {
    let [p0, p1, p2] = probs_unchecked(pi, kappa, kind);
    let draw = |n: u64, p: f64, rng: &mut R| -> u64 {
        if n == 0 {
            return 0;
        }
        Binomial::new(n, p.clamp(0.0, 1.0))
            .expect("probability clamped to [0, 1]")
            .sample(rng)
    };
    let m2 = draw(size.m_plus, p2, rng);
    let rest = p1 + p0;
    let m1 = if rest > 0.0 {
        draw(size.m_plus - m2, p1 / rest, rng)
    } else {
        0
    };
    let m0 = size.m_plus - m2 - m1;
    let n1 = draw(size.n_plus, pi, rng);
    GroupCounts::new([m0, m1, m2], [size.n_plus - n1, n1])
}

fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Draws one replicate dataset.
pub fn sample_replicate(config: &SimConfig, kappa: f64, replicate: u64) -> Vec<GroupCounts> {
    let mut rng = replicate_rng(config.seed, replicate);
    config
        .pis
        .iter()
        .zip(&config.sizes)
        .map(|(&pi, &size)| sample_group(pi, kappa, config.kind, size, &mut rng))
        .collect()
}

/// Statistic per requested test, `None` where the computation failed.
pub fn replicate_statistics(config: &SimConfig, kappa: f64, replicate: u64) -> Vec<Option<f64>> {
    let groups = sample_replicate(config, kappa, replicate);
    let wants_likelihood = config.tests.iter().any(|t| *t != TestKind::GeeScore);
    let lik = if wants_likelihood {
        likelihood_tests(&groups, config.kind, &FitOptions::default()).ok()
    } else {
        None
    };
    config
        .tests
        .iter()
        .map(|test| match (test, &lik) {
            (TestKind::GeeScore, _) => {
                let clusters = GeeClusterSet::from_groups(&groups);
                gee_score_test(&clusters, config.working_correlation)
                    .ok()
                    .map(|r| r.statistic)
            }
            (_, None) => None,
            (TestKind::LikelihoodRatio, Some(l)) => l.lr.as_ref().ok().map(|r| r.statistic),
            (TestKind::Wald, Some(l)) => l.wald.as_ref().ok().map(|r| r.statistic),
            (TestKind::Score, Some(l)) => l.score.as_ref().ok().map(|r| r.statistic),
        })
        .collect()
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None | Some(0) => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Usage(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Statistics for every replicate, in replicate order.
pub fn simulate_statistics(config: &SimConfig, threads: Option<usize>) -> Result<Vec<Vec<Option<f64>>>> {
    config.validate()?;
    let kappa = config.true_kappa()?;
    with_threads(threads, || {
        (0..config.replicates)
            .into_par_iter()
            .map(|k| replicate_statistics(config, kappa, k))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub test: TestKind,
    /// `rejection_count / replicates_used`, or 0 when no replicate succeeded.
    pub rejection_rate: f64,
    pub rejection_count: u64,
    pub replicates_used: u64,
    pub failures: u64,
    pub mc_std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub config: SimConfig,
    pub critical_value: f64,
    pub tests: Vec<TestSummary>,
}

impl SimSummary {
    pub fn get(&self, test: TestKind) -> Option<&TestSummary> {
        self.tests.iter().find(|t| t.test == test)
    }

    /// Aligned table with rates in percent.
    pub fn render_table(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model {}  g {}  N {}  alpha {}  seed {}",
            c.kind,
            c.num_groups(),
            c.replicates,
            c.alpha,
            c.seed
        );
        let _ = writeln!(
            out,
            "{:<6} {:>9} {:>9} {:>9} {:>9}",
            "test", "rate(%)", "se(%)", "used", "failed"
        );
        for t in &self.tests {
            let _ = writeln!(
                out,
                "{:<6} {:>9.2} {:>9.2} {:>9} {:>9}",
                t.test.label(),
                100.0 * t.rejection_rate,
                100.0 * t.mc_std_err,
                t.replicates_used,
                t.failures
            );
        }
        out
    }
}

/// Summarizes per-replicate statistics against the chi-square critical value.
pub fn summarize(config: &SimConfig, stats: &[Vec<Option<f64>>]) -> Result<SimSummary> {
    let df = (config.num_groups() - 1) as u32;
    let critical = chi_sq_critical(config.alpha, df)?;
    let tests = config
        .tests
        .iter()
        .enumerate()
        .map(|(j, &test)| {
            let (mut used, mut count, mut failures) = (0u64, 0u64, 0u64);
            for row in stats {
                match row[j] {
                    Some(q) => {
                        used += 1;
                        if config.alpha >= 1.0 || q > critical {
                            count += 1;
                        }
                    }
                    None => failures += 1,
                }
            }
            let rate = if used > 0 { count as f64 / used as f64 } else { 0.0 };
            let se = if used > 0 {
                (rate * (1.0 - rate) / used as f64).sqrt()
            } else {
                0.0
            };
            TestSummary {
                test,
                rejection_rate: rate,
                rejection_count: count,
                replicates_used: used,
                failures,
                mc_std_err: se,
            }
        })
        .collect();
    Ok(SimSummary {
        config: config.clone(),
        critical_value: critical,
        tests,
    })
}

/// Runs the experiment on the global thread pool.
pub fn run_experiment(config: &SimConfig) -> Result<SimSummary> {
    run_experiment_with_threads(config, None)
}

/// Runs the experiment on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(config: &SimConfig, threads: Option<usize>) -> Result<SimSummary> {
    let stats = simulate_statistics(config, threads)?;
    summarize(config, &stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn size(m: u64, n: u64) -> GroupSize {
        GroupSize {
            m_plus: m,
            n_plus: n,
        }
    }

    #[test]
    fn presets() {
        let e1 = design_presets(Design::E1, 4).unwrap();
        assert!(e1.iter().all(|s| *s == size(20, 20)));
        let u2: Vec<u64> = design_presets(Design::U, 2).unwrap().iter().map(|s| s.m_plus).collect();
        assert_eq!(u2, vec![20, 40]);
        let u8: Vec<u64> = design_presets(Design::U, 8).unwrap().iter().map(|s| s.n_plus).collect();
        assert_eq!(u8, vec![20, 20, 30, 30, 40, 40, 50, 50]);
        assert!(design_presets(Design::E2, 3).is_err());
        assert_eq!(alternative_presets(Alternative::H1A, 2).unwrap(), vec![0.25, 0.4]);
        assert_eq!(alternative_presets(Alternative::H1B, 4).unwrap(), vec![0.2, 0.2, 0.4, 0.4]);
        assert_eq!(
            alternative_presets(Alternative::H1B, 8).unwrap(),
            vec![0.2, 0.2, 0.4, 0.4, 0.2, 0.2, 0.4, 0.4]
        );
        assert_eq!(
            alternative_presets(Alternative::H1A, 8).unwrap(),
            vec![0.25, 0.3, 0.35, 0.4, 0.25, 0.3, 0.35, 0.4]
        );
    }

    #[test]
    fn perfect_correlation_has_no_discordant_pairs() {
        let mut rng = replicate_rng(7, 0);
        let mut total = 0;
        for _ in 0..2000 {
            let c = sample_group(0.5, 1.0, ModelKind::Donner, size(10, 0), &mut rng);
            assert_eq!(c.m1, 0);
            assert_eq!(c.n_plus(), 0);
            total += c.m2;
        }
        assert_close!(total as f64 / 20_000.0, 0.5, 0.02);
    }

    #[test]
    fn sampler_moments() {
        let mut rng = replicate_rng(11, 3);
        let draws = 100_000;
        let (mut organs, mut both) = (0u64, 0u64);
        for _ in 0..draws {
            let c = sample_group(0.3, 0.4, ModelKind::Donner, size(1, 0), &mut rng);
            organs += c.m1 + 2 * c.m2;
            both += c.m2;
        }
        assert_close!(organs as f64 / (2.0 * draws as f64), 0.3, 0.003);
        assert_close!(both as f64 / draws as f64, 0.174, 0.004);
    }

    #[test]
    fn rosner_rho_converts_to_r() {
        let cfg = SimConfig::null(
            ModelKind::Rosner,
            design_presets(Design::E1, 2).unwrap(),
            0.3,
            Correlation::Rho(0.4),
        );
        assert_close!(cfg.true_kappa().unwrap(), 0.7 * 0.4 / 0.3 + 1.0, 1e-12);
        let mut alt = cfg.clone();
        alt.pis = vec![0.25, 0.4];
        assert!(alt.true_kappa().is_err());
        alt.correlation = Correlation::Kappa(1.4);
        assert!(alt.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SimConfig::null(
            ModelKind::Donner,
            design_presets(Design::E1, 2).unwrap(),
            0.3,
            Correlation::Rho(-0.9),
        );
        assert!(cfg.validate().is_err());
        cfg.correlation = Correlation::Rho(0.4);
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alpha_one_rejects_everything() {
        let mut cfg = SimConfig::null(
            ModelKind::Donner,
            design_presets(Design::E1, 2).unwrap(),
            0.3,
            Correlation::Rho(0.4),
        );
        cfg.replicates = 50;
        cfg.alpha = 1.0;
        let s = run_experiment(&cfg).unwrap();
        for t in &s.tests {
            assert_eq!(t.rejection_rate, 1.0, "{t:?}");
        }
    }

    #[test]
    fn summary_invariants() {
        let mut cfg = SimConfig::null(
            ModelKind::Rosner,
            design_presets(Design::E1, 2).unwrap(),
            0.3,
            Correlation::Rho(0.4),
        );
        cfg.replicates = 200;
        let s = run_experiment(&cfg).unwrap();
        for t in &s.tests {
            assert_eq!(t.replicates_used + t.failures, 200);
            assert_close!(t.rejection_rate, t.rejection_count as f64 / t.replicates_used as f64, 0.0);
            let r = t.rejection_rate;
            assert_close!(t.mc_std_err, (r * (1.0 - r) / t.replicates_used as f64).sqrt(), 1e-15);
        }
        assert!(s.render_table().contains("Q_GS"));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = SimConfig::null(
            ModelKind::Donner,
            design_presets(Design::U, 4).unwrap(),
            0.5,
            Correlation::Rho(0.5),
        );
        cfg.replicates = 100;
        let a = run_experiment_with_threads(&cfg, Some(1)).unwrap();
        let b = run_experiment_with_threads(&cfg, Some(4)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
