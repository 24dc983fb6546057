//! Data model and closed-form probability mathematics for paired-organ data.
//!
//! Each group contributes bilateral subjects, whose two organ outcomes
//! follow a trinomial on the number of cured/affected organs, and
//! unilateral subjects contributing a single Bernoulli outcome. The
//! intra-subject correlation is parametrized either by Rosner's constant
//! `R` (conditional response probability `R·π`) or by Donner's common
//! correlation `ρ`.

use serde::{Deserialize, Serialize};

use crate::chisq::ln_gamma;
use crate::error::{Error, Result};

/// Slack allowed when checking closed-interval membership.
const REGION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rosner,
    Donner,
}

impl ModelKind {
    /// Value of the nuisance parameter at which the two organs are independent.
    pub fn independence_kappa(self) -> f64 {
        match self {
            ModelKind::Rosner => 1.0,
            ModelKind::Donner => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rosner => "rosner",
            ModelKind::Donner => "donner",
        }
    }

    /// Conventional symbol for the nuisance parameter.
    pub fn kappa_symbol(self) -> &'static str {
        match self {
            ModelKind::Rosner => "R",
            ModelKind::Donner => "rho",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rosner" | "r" => Ok(ModelKind::Rosner),
            "donner" | "rho" => Ok(ModelKind::Donner),
            other => Err(Error::Usage(format!("unknown model '{other}'"))),
        }
    }
}

/// Counts for one group.
///
/// `m0, m1, m2` count bilateral subjects with 0, 1 or 2 cured/affected
/// organs; `n0, n1` count unilateral subjects with 0 or 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupCounts {
    pub m0: u64,
    pub m1: u64,
    pub m2: u64,
    pub n0: u64,
    pub n1: u64,
}

impl GroupCounts {
    pub fn new(m: [u64; 3], n: [u64; 2]) -> Self {
        GroupCounts {
            m0: m[0],
            m1: m[1],
            m2: m[2],
            n0: n[0],
            n1: n[1],
        }
    }

    pub fn bilateral(&self) -> [u64; 3] {
        [self.m0, self.m1, self.m2]
    }

    pub fn unilateral(&self) -> [u64; 2] {
        [self.n0, self.n1]
    }

    /// `m_{+i}`
    pub fn m_plus(&self) -> u64 {
        self.m0 + self.m1 + self.m2
    }

    /// `n_{+i}`
    pub fn n_plus(&self) -> u64 {
        self.n0 + self.n1
    }

    /// Number of organs observed, `2 m_{+i} + n_{+i}`.
    pub fn organs(&self) -> u64 {
        2 * self.m_plus() + self.n_plus()
    }

    /// Number of cured/affected organs.
    pub fn responders(&self) -> u64 {
        self.m1 + 2 * self.m2 + self.n1
    }

    pub fn is_empty(&self) -> bool {
        self.m_plus() == 0 && self.n_plus() == 0
    }
}

/// Validated multi-group data set: at least two groups, each non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedCounts {
    labels: Vec<String>,
    groups: Vec<GroupCounts>,
}

impl CombinedCounts {
    /// Groups labelled `1..=g`.
    pub fn new(groups: Vec<GroupCounts>) -> Result<Self> {
        let labels = (1..=groups.len()).map(|i| i.to_string()).collect();
        Self::with_labels(labels, groups)
    }

    pub fn with_labels(labels: Vec<String>, groups: Vec<GroupCounts>) -> Result<Self> {
        if labels.len() != groups.len() {
            return Err(Error::InvalidData(format!(
                "{} labels for {} groups",
                labels.len(),
                groups.len()
            )));
        }
        if groups.len() < 2 {
            return Err(Error::InvalidData(format!(
                "at least 2 groups are required, got {}",
                groups.len()
            )));
        }
        if let Some(i) = groups.iter().position(GroupCounts::is_empty) {
            return Err(Error::InvalidData(format!(
                "group '{}' has no observations",
                labels[i]
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::InvalidData(format!("duplicate group label '{a}'")));
            }
        }
        Ok(CombinedCounts { labels, groups })
    }

    pub fn groups(&self) -> &[GroupCounts] {
        &self.groups
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// `m_{++}`
    pub fn total_bilateral(&self) -> u64 {
        self.groups.iter().map(GroupCounts::m_plus).sum()
    }

    /// `n_{++}`
    pub fn total_unilateral(&self) -> u64 {
        self.groups.iter().map(GroupCounts::n_plus).sum()
    }

    /// Reorders groups (and labels) so that new group `k` is old group `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.groups.len()];
        if order.len() != self.groups.len() {
            return Err(Error::InvalidData("permutation length mismatch".into()));
        }
        for &k in order {
            if k >= seen.len() || seen[k] {
                return Err(Error::InvalidData("not a permutation".into()));
            }
            seen[k] = true;
        }
        Ok(CombinedCounts {
            labels: order.iter().map(|&k| self.labels[k].clone()).collect(),
            groups: order.iter().map(|&k| self.groups[k]).collect(),
        })
    }
}

/// Probabilities of 0, 1 and 2 cured/affected organs for one bilateral subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointProbs {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
}

impl JointProbs {
    pub fn as_array(&self) -> [f64; 3] {
        [self.p0, self.p1, self.p2]
    }
}

/// Closed interval of admissible nuisance-parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaRange {
    pub lo: f64,
    pub hi: f64,
}

impl KappaRange {
    pub fn contains(&self, kappa: f64) -> bool {
        kappa >= self.lo - REGION_TOL && kappa <= self.hi + REGION_TOL
    }

    pub fn intersect(&self, other: &KappaRange) -> KappaRange {
        KappaRange {
            lo: self.lo.max(other.lo),
            hi: self.hi.min(other.hi),
        }
    }

    /// Clamps into `[lo + margin, hi - margin]`, or to the midpoint when the
    /// interval is narrower than twice the margin.
    pub fn clamp_interior(&self, kappa: f64, margin: f64) -> f64 {
        let (lo, hi) = (self.lo + margin, self.hi - margin);
        if lo > hi {
            0.5 * (self.lo + self.hi)
        } else {
            kappa.clamp(lo, hi)
        }
    }
}

fn check_proportion(pi: f64) -> Result<()> {
    if pi.is_finite() && pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("proportion {pi} is outside (0, 1)")))
    }
}

/// Admissible values of the nuisance parameter for a group with proportion `pi`.
///
/// The bounds are exactly the values keeping all three joint probabilities
/// nonnegative.
pub fn valid_region(pi: f64, kind: ModelKind) -> Result<KappaRange> {
    check_proportion(pi)?;
    Ok(region_unchecked(pi, kind))
}

pub(crate) fn region_unchecked(pi: f64, kind: ModelKind) -> KappaRange {
    match kind {
        // p2 >= 0, p0 >= 0 | p1 >= 0
        ModelKind::Rosner => KappaRange {
            lo: ((2.0 * pi - 1.0) / (pi * pi)).max(0.0),
            hi: 1.0 / pi,
        },
        // p2 >= 0, p0 >= 0 | p1 >= 0
        ModelKind::Donner => KappaRange {
            lo: (-pi / (1.0 - pi)).max(-(1.0 - pi) / pi),
            hi: 1.0,
        },
    }
}

/// Intersection of the per-group regions: the values of `kappa` admissible
/// for every proportion in `pis` simultaneously.
pub fn joint_region(pis: &[f64], kind: ModelKind) -> Result<KappaRange> {
    let mut range = KappaRange {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    for &pi in pis {
        range = range.intersect(&valid_region(pi, kind)?);
    }
    Ok(range)
}

/// Joint probabilities without region checks. May return slightly negative
/// components outside the valid region.
#[inline]
pub(crate) fn probs_unchecked(pi: f64, kappa: f64, kind: ModelKind) -> [f64; 3] {
    match kind {
        ModelKind::Rosner => {
            let p2 = kappa * pi * pi;
            let p1 = 2.0 * pi * (1.0 - kappa * pi);
            let p0 = 1.0 - 2.0 * pi + kappa * pi * pi;
            [p0, p1, p2]
        }
        ModelKind::Donner => {
            let q = 1.0 - pi;
            let p2 = pi * (pi + q * kappa);
            let p1 = 2.0 * pi * q * (1.0 - kappa);
            let p0 = q * (q + pi * kappa);
            [p0, p1, p2]
        }
    }
}

/// Partial derivatives of `(p0, p1, p2)` with respect to `pi` and `kappa`.
#[inline]
pub(crate) fn probs_jacobian(pi: f64, kappa: f64, kind: ModelKind) -> ([f64; 3], [f64; 3]) {
    match kind {
        ModelKind::Rosner => {
            let d_pi = [-2.0 + 2.0 * kappa * pi, 2.0 - 4.0 * kappa * pi, 2.0 * kappa * pi];
            let d_k = [pi * pi, -2.0 * pi * pi, pi * pi];
            (d_pi, d_k)
        }
        ModelKind::Donner => {
            let q = 1.0 - pi;
            let s = 1.0 - 2.0 * pi;
            let d_pi = [-2.0 * q + kappa * s, 2.0 * s * (1.0 - kappa), 2.0 * pi + kappa * s];
            let v = pi * q;
            let d_k = [v, -2.0 * v, v];
            (d_pi, d_k)
        }
    }
}

pub fn joint_probs(pi: f64, kappa: f64, kind: ModelKind) -> Result<JointProbs> {
    let range = valid_region(pi, kind)?;
    if !kappa.is_finite() || !range.contains(kappa) {
        return Err(Error::InvalidParameter(format!(
            "{} = {kappa} outside [{:.6}, {:.6}] for pi = {pi} under {kind}",
            kind.kappa_symbol(),
            range.lo,
            range.hi
        )));
    }
    let [p0, p1, p2] = probs_unchecked(pi, kappa, kind).map(|p| p.clamp(0.0, 1.0));
    Ok(JointProbs { p0, p1, p2 })
}

/// Converts the nuisance parameter between the two parametrizations at
/// proportion `pi`: `rho = (R - 1) pi / (1 - pi)` and its inverse.
pub fn corr_convert(pi: f64, kappa: f64, from: ModelKind) -> Result<f64> {
    check_proportion(pi)?;
    if !kappa.is_finite() {
        return Err(Error::Domain(format!("non-finite correlation parameter {kappa}")));
    }
    Ok(match from {
        ModelKind::Rosner => (kappa - 1.0) * pi / (1.0 - pi),
        ModelKind::Donner => (1.0 - pi) * kappa / pi + 1.0,
    })
}

/// Parameter vector `(pi_1, ..., pi_g, kappa)` for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    kind: ModelKind,
    pis: Vec<f64>,
    kappa: f64,
}

impl ModelParams {
    pub fn new(kind: ModelKind, pis: Vec<f64>, kappa: f64) -> Result<Self> {
        if pis.is_empty() {
            return Err(Error::InvalidParameter("no group proportions".into()));
        }
        for &pi in &pis {
            joint_probs(pi, kappa, kind)?;
        }
        Ok(ModelParams { kind, pis, kappa })
    }

    pub(crate) fn from_parts(kind: ModelKind, pis: Vec<f64>, kappa: f64) -> Self {
        ModelParams { kind, pis, kappa }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn pis(&self) -> &[f64] {
        &self.pis
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn num_groups(&self) -> usize {
        self.pis.len()
    }

    /// `(pi_1, ..., pi_g, kappa)`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.pis.clone();
        v.push(self.kappa);
        v
    }

    /// Intra-subject correlation of each group on the Donner scale.
    pub fn correlations(&self) -> Vec<f64> {
        self.pis
            .iter()
            .map(|&pi| match self.kind {
                ModelKind::Donner => self.kappa,
                ModelKind::Rosner => (self.kappa - 1.0) * pi / (1.0 - pi),
            })
            .collect()
    }
}

fn check_shape(params: &ModelParams, groups: &[GroupCounts]) -> Result<()> {
    if params.pis.len() != groups.len() {
        return Err(Error::InvalidData(format!(
            "{} proportions for {} groups",
            params.pis.len(),
            groups.len()
        )));
    }
    Ok(())
}

#[inline]
fn xlogy(count: u64, p: f64) -> f64 {
    if count == 0 {
        0.0
    } else if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        count as f64 * p.ln()
    }
}

pub(crate) fn loglik_raw(kind: ModelKind, pis: &[f64], kappa: f64, groups: &[GroupCounts]) -> f64 {
    groups
        .iter()
        .zip(pis)
        .map(|(gc, &pi)| {
            let p = probs_unchecked(pi, kappa, kind);
            xlogy(gc.m0, p[0])
                + xlogy(gc.m1, p[1])
                + xlogy(gc.m2, p[2])
                + xlogy(gc.n0, 1.0 - pi)
                + xlogy(gc.n1, pi)
        })
        .sum()
}

/// Log-likelihood without the combinatorial constant.
///
/// Zero counts contribute nothing even where the matching probability is
/// zero; a positive count on a zero-probability cell yields `-inf`.
pub fn log_likelihood(params: &ModelParams, groups: &[GroupCounts]) -> Result<f64> {
    check_shape(params, groups)?;
    Ok(loglik_raw(params.kind, &params.pis, params.kappa, groups))
}

/// The constant omitted by [`log_likelihood`]: log multinomial and binomial
/// coefficients.
pub fn log_likelihood_constant(groups: &[GroupCounts]) -> f64 {
    let lf = |k: u64| ln_gamma(k as f64 + 1.0);
    groups
        .iter()
        .map(|gc| {
            lf(gc.m_plus()) - lf(gc.m0) - lf(gc.m1) - lf(gc.m2) + lf(gc.n_plus())
                - lf(gc.n0)
                - lf(gc.n1)
        })
        .sum()
}

/// Analytic gradient written into `out` (length g+1). Returns an error
/// naming the group at which a positive count meets a zero probability.
pub(crate) fn score_raw(
    kind: ModelKind,
    pis: &[f64],
    kappa: f64,
    groups: &[GroupCounts],
    out: &mut [f64],
) -> Result<()> {
    let g = pis.len();
    out[g] = 0.0;
    for (i, (gc, &pi)) in groups.iter().zip(pis).enumerate() {
        let p = probs_unchecked(pi, kappa, kind);
        let (d_pi, d_k) = probs_jacobian(pi, kappa, kind);
        let mut s_pi = 0.0;
        for (r, &m) in gc.bilateral().iter().enumerate() {
            if m == 0 {
                continue;
            }
            if p[r] <= 0.0 {
                return Err(Error::Boundary(format!(
                    "group {}: p{r} = {} with {m} observations",
                    i + 1,
                    p[r]
                )));
            }
            let w = m as f64 / p[r];
            s_pi += w * d_pi[r];
            out[g] += w * d_k[r];
        }
        if (gc.n0 > 0 && pi >= 1.0) || (gc.n1 > 0 && pi <= 0.0) {
            return Err(Error::Boundary(format!("group {}: pi = {pi}", i + 1)));
        }
        if gc.n0 > 0 {
            s_pi -= gc.n0 as f64 / (1.0 - pi);
        }
        if gc.n1 > 0 {
            s_pi += gc.n1 as f64 / pi;
        }
        out[i] = s_pi;
    }
    Ok(())
}

/// Gradient of [`log_likelihood`] with respect to `(pi_1, ..., pi_g, kappa)`.
pub fn score_vector(params: &ModelParams, groups: &[GroupCounts]) -> Result<Vec<f64>> {
    check_shape(params, groups)?;
    let mut out = vec![0.0; groups.len() + 1];
    score_raw(params.kind, &params.pis, params.kappa, groups, &mut out)?;
    Ok(out)
}
