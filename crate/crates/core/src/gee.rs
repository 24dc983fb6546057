//! Generalized estimating equations for the group-means model on stacked
//! subject clusters, and the generalized score test of equal means.
//!
//! The mean model is `E[Z_ij] = pi_i 1` with identity link, working
//! covariance `V = A^{1/2} R(alpha) A^{1/2}`, `A = diag(mu (1 - mu))`.
//! Every cluster belongs to exactly one group, so the information and
//! empirical-score matrices of the group-means parametrization are
//! diagonal; only the contrast step needs a dense solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::{TestKind, TestResult};
use crate::linalg::inv_quad_form;
use crate::model::{CombinedCounts, GroupCounts};

/// Fitted means are kept in `[MEAN_CLIP, 1 - MEAN_CLIP]`.
pub const MEAN_CLIP: f64 = 1e-8;
const ALPHA_CLIP: f64 = 1.0 - 1e-6;
const MAX_OUTER: usize = 100;
const MAX_INNER: usize = 100;
const TOL: f64 = 1e-10;

/// One subject: one or two binary responses from a group, repeated
/// `weight` times.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cluster {
    pub group: usize,
    pub responses: Vec<u8>,
    pub weight: u64,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeeClusterSet {
    num_groups: usize,
    clusters: Vec<Cluster>,
}

impl GeeClusterSet {
    pub fn new(num_groups: usize, clusters: Vec<Cluster>) -> Result<Self> {
        for c in &clusters {
            if c.group >= num_groups {
                return Err(Error::InvalidData(format!(
                    "cluster group {} out of range for {num_groups} groups",
                    c.group
                )));
            }
            if !(1..=2).contains(&c.size()) {
                return Err(Error::InvalidData(format!(
                    "cluster of size {}; only 1 or 2 responses are allowed",
                    c.size()
                )));
            }
            if c.responses.iter().any(|&z| z > 1) {
                return Err(Error::InvalidData("responses must be 0 or 1".into()));
            }
        }
        Ok(GeeClusterSet {
            num_groups,
            clusters,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Sum of weighted cluster sizes.
    pub fn total_organs(&self) -> u64 {
        self.clusters.iter().map(|c| c.weight * c.size() as u64).sum()
    }

    /// Number of subjects, i.e. the sum of weights.
    pub fn total_subjects(&self) -> u64 {
        self.clusters.iter().map(|c| c.weight).sum()
    }

    /// One unit-weight cluster per subject.
    pub fn expanded(&self) -> GeeClusterSet {
        let clusters = self
            .clusters
            .iter()
            .flat_map(|c| {
                std::iter::repeat_n(
                    Cluster {
                        weight: 1,
                        ..c.clone()
                    },
                    c.weight as usize,
                )
            })
            .collect();
        GeeClusterSet {
            num_groups: self.num_groups,
            clusters,
        }
    }

    pub fn from_groups(groups: &[GroupCounts]) -> GeeClusterSet {
        let mut clusters = Vec::with_capacity(5 * groups.len());
        for (i, gc) in groups.iter().enumerate() {
            let kinds: [(&[u8], u64); 5] = [
                (&[0, 0], gc.m0),
                (&[1, 0], gc.m1),
                (&[1, 1], gc.m2),
                (&[0], gc.n0),
                (&[1], gc.n1),
            ];
            for (responses, weight) in kinds {
                if weight > 0 {
                    clusters.push(Cluster {
                        group: i,
                        responses: responses.to_vec(),
                        weight,
                    });
                }
            }
        }
        GeeClusterSet {
            num_groups: groups.len(),
            clusters,
        }
    }
}

/// Collapsed clusters for every nonzero cell of `data`.
pub fn stack(data: &CombinedCounts) -> GeeClusterSet {
    GeeClusterSet::from_groups(data.groups())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrStructure {
    Independence,
    Exchangeable,
    Unstructured,
}

impl std::str::FromStr for CorrStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ind" | "independence" => Ok(CorrStructure::Independence),
            "exch" | "cs" | "exchangeable" => Ok(CorrStructure::Exchangeable),
            "un" | "unstructured" => Ok(CorrStructure::Unstructured),
            other => Err(Error::Usage(format!("unknown working correlation '{other}'"))),
        }
    }
}

/// Working correlation; `alpha` is the starting value for the moment
/// iterations and is ignored for independence. With at most two responses
/// per cluster the exchangeable and unstructured forms coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub structure: CorrStructure,
    pub alpha: f64,
}

impl WorkingCorrelation {
    pub fn new(structure: CorrStructure) -> Self {
        WorkingCorrelation {
            structure,
            alpha: 0.0,
        }
    }

    pub fn independence() -> Self {
        Self::new(CorrStructure::Independence)
    }

    pub fn exchangeable() -> Self {
        Self::new(CorrStructure::Exchangeable)
    }

    pub fn unstructured() -> Self {
        Self::new(CorrStructure::Unstructured)
    }
}

impl Default for WorkingCorrelation {
    fn default() -> Self {
        Self::unstructured()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    /// Fitted proportion per group (all equal under the constraint).
    pub group_means: Vec<f64>,
    pub alpha_hat: f64,
    pub scale: f64,
    /// `scale * I0^{-1}` for the fitted mean parameters: `g x g`, or `1 x 1`
    /// for the common-mean fit.
    pub model_cov: DMatrix<f64>,
    /// Sandwich `I0^{-1} M I0^{-1}`.
    pub robust_cov: DMatrix<f64>,
    pub converged: bool,
    /// Means or `alpha` had to be clipped.
    pub degenerate: bool,
    pub iterations: usize,
}

/// Per-cluster quantities at common mean `mu` within the cluster.
/// Returns `(D'V^{-1}D, D'V^{-1}(z - mu))` with `V` excluding the scale.
#[inline]
fn cluster_terms(c: &Cluster, mu: f64, alpha: f64) -> (f64, f64) {
    let v = mu * (1.0 - mu);
    match c.responses.as_slice() {
        [z] => (1.0 / v, (*z as f64 - mu) / v),
        [z1, z2] => {
            let d = (1.0 + alpha) * v;
            (2.0 / d, (*z1 as f64 + *z2 as f64 - 2.0 * mu) / d)
        }
        _ => unreachable!("cluster sizes are validated"),
    }
}

fn clip_mean(x: f64, flag: &mut bool) -> f64 {
    let y = x.clamp(MEAN_CLIP, 1.0 - MEAN_CLIP);
    if y != x {
        *flag = true;
    }
    y
}

struct Moments {
    scale: f64,
    alpha: f64,
}

/// Pearson-residual moment estimates. Divisors subtract the number of mean
/// parameters of the full group model, also when the fit is constrained.
fn moments(set: &GeeClusterSet, means: &[f64], structure: CorrStructure) -> Moments {
    let p = set.num_groups as f64;
    let (mut ss, mut cross, mut n_obs, mut n_pairs) = (0.0, 0.0, 0.0, 0.0);
    for c in &set.clusters {
        let mu = means[c.group];
        let sd = (mu * (1.0 - mu)).sqrt();
        let w = c.weight as f64;
        let r: Vec<f64> = c.responses.iter().map(|&z| (z as f64 - mu) / sd).collect();
        ss += w * r.iter().map(|x| x * x).sum::<f64>();
        n_obs += w * r.len() as f64;
        if let [a, b] = r[..] {
            cross += w * a * b;
            n_pairs += w;
        }
    }
    let scale = if n_obs > p { ss / (n_obs - p) } else { ss / n_obs.max(1.0) };
    let alpha = match structure {
        CorrStructure::Independence => 0.0,
        _ if n_pairs > p && scale > 0.0 => cross / ((n_pairs - p) * scale),
        _ if n_pairs > 0.0 && scale > 0.0 => cross / (n_pairs * scale),
        _ => 0.0,
    };
    Moments { scale, alpha }
}

/// Fits the group-means model, or the common-mean model when
/// `constrain_equal`, alternating mean updates with moment estimates of the
/// scale and working correlation.
pub fn gee_fit(
    set: &GeeClusterSet,
    wc: WorkingCorrelation,
    constrain_equal: bool,
) -> Result<GeeFit> {
    let g = set.num_groups;
    let mut seen = vec![false; g];
    for c in &set.clusters {
        if c.weight > 0 {
            seen[c.group] = true;
        }
    }
    if g == 0 || seen.iter().any(|s| !s) {
        return Err(Error::InvalidData("every group needs at least one cluster".into()));
    }
    let n_par = if constrain_equal { 1 } else { g };
    let param = |group: usize| if constrain_equal { 0 } else { group };

    // start from the organ-level proportions
    let mut num = vec![0.0; n_par];
    let mut den = vec![0.0; n_par];
    for c in &set.clusters {
        let w = c.weight as f64;
        num[param(c.group)] += w * c.responses.iter().map(|&z| z as f64).sum::<f64>();
        den[param(c.group)] += w * c.size() as f64;
    }
    let mut degenerate = false;
    let mut beta: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(a, b)| clip_mean(a / b, &mut degenerate))
        .collect();
    let mut alpha = match wc.structure {
        CorrStructure::Independence => 0.0,
        _ => wc.alpha.clamp(-ALPHA_CLIP, ALPHA_CLIP),
    };
    let expand = |beta: &[f64]| -> Vec<f64> { (0..g).map(|i| beta[param(i)]).collect() };

    let mut converged = false;
    let mut iterations = 0;
    let mut scale = 1.0;
    for outer in 0..MAX_OUTER {
        iterations = outer + 1;
        let prev = beta.clone();
        for _ in 0..MAX_INNER {
            let mut h = vec![0.0; n_par];
            let mut s = vec![0.0; n_par];
            for c in &set.clusters {
                let (hi, si) = cluster_terms(c, beta[param(c.group)], alpha);
                h[param(c.group)] += c.weight as f64 * hi;
                s[param(c.group)] += c.weight as f64 * si;
            }
            let mut delta = 0.0f64;
            for j in 0..n_par {
                let next = clip_mean(beta[j] + s[j] / h[j], &mut degenerate);
                delta = delta.max((next - beta[j]).abs());
                beta[j] = next;
            }
            if delta < 1e-14 {
                break;
            }
        }
        let m = moments(set, &expand(&beta), wc.structure);
        scale = m.scale;
        let mut next_alpha = m.alpha;
        if next_alpha.abs() > ALPHA_CLIP {
            next_alpha = next_alpha.clamp(-ALPHA_CLIP, ALPHA_CLIP);
            degenerate = true;
        }
        let change = beta
            .iter()
            .zip(&prev)
            .fold((next_alpha - alpha).abs(), |m, (a, b)| m.max((a - b).abs()));
        alpha = next_alpha;
        if change < TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::GeeNonConvergence(MAX_OUTER));
    }

    let mut info = vec![0.0; n_par];
    let mut meat = vec![0.0; n_par];
    for c in &set.clusters {
        let (hi, si) = cluster_terms(c, beta[param(c.group)], alpha);
        let w = c.weight as f64;
        info[param(c.group)] += w * hi;
        meat[param(c.group)] += w * si * si;
    }
    let model_cov = DMatrix::from_diagonal(&DVector::from_iterator(
        n_par,
        info.iter().map(|&h| scale / h),
    ));
    let robust_cov = DMatrix::from_diagonal(&DVector::from_iterator(
        n_par,
        info.iter().zip(&meat).map(|(&h, &m)| m / (h * h)),
    ));
    Ok(GeeFit {
        group_means: expand(&beta),
        alpha_hat: alpha,
        scale,
        model_cov,
        robust_cov,
        converged,
        degenerate,
        iterations,
    })
}

/// Generalized score test of equal group means.
///
/// With `U` the full-model estimating function, `I0` its model-based
/// information and `M` the empirical covariance of `U`, all at the
/// common-mean fit, and `L` the adjacent-difference contrasts:
/// `T = (L I0^{-1} U)' (L I0^{-1} M I0^{-1} L')^{-1} (L I0^{-1} U)`.
/// The scale parameter cancels.
pub fn gee_score_test(set: &GeeClusterSet, wc: WorkingCorrelation) -> Result<TestResult> {
    let g = set.num_groups;
    if g < 2 {
        return Err(Error::InvalidData("generalized score test needs 2+ groups".into()));
    }
    let null = gee_fit(set, wc, true)?;
    let mu = null.group_means[0];
    let mut u = vec![0.0; g];
    let mut info = vec![0.0; g];
    let mut meat = vec![0.0; g];
    for c in &set.clusters {
        let (hi, si) = cluster_terms(c, mu, null.alpha_hat);
        let w = c.weight as f64;
        u[c.group] += w * si;
        info[c.group] += w * hi;
        meat[c.group] += w * si * si;
    }
    // I0^{-1} U and the diagonal of I0^{-1} M I0^{-1}
    let shift: Vec<f64> = u.iter().zip(&info).map(|(a, h)| a / h).collect();
    let var: Vec<f64> = meat.iter().zip(&info).map(|(m, h)| m / (h * h)).collect();
    let k = g - 1;
    let v = DVector::from_iterator(k, (0..k).map(|i| shift[i] - shift[i + 1]));
    let cov = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            var[a] + var[a + 1]
        } else if a + 1 == b {
            -var[b]
        } else if b + 1 == a {
            -var[a]
        } else {
            0.0
        }
    });
    let q = inv_quad_form(&cov, &v).ok_or(Error::Singular("empirical score covariance"))?;
    TestResult::new(TestKind::GeeScore, q, k as u32)
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

    #[test]
    fn stacking_expands_each_cell() {
        let d = CombinedCounts::new(vec![
            GroupCounts::new([1, 1, 1], [0, 0]),
            GroupCounts::new([0, 0, 0], [2, 3]),
        ])
        .unwrap();
        let s = stack(&d);
        let first: Vec<_> = s.clusters().iter().filter(|c| c.group == 0).collect();
        assert_eq!(first.len(), 3);
        assert_eq!(first[0].responses, vec![0, 0]);
        assert_eq!(first[1].responses, vec![1, 0]);
        assert_eq!(first[2].responses, vec![1, 1]);
        assert!(first.iter().all(|c| c.weight == 1));
        assert_eq!(s.total_organs(), 6 + 5);
    }

    #[test]
    fn ome_stack_totals() {
        let s = stack(&ome());
        let pairs: u64 = s.clusters().iter().filter(|c| c.size() == 2).map(|c| c.weight).sum();
        let singles: u64 = s.clusters().iter().filter(|c| c.size() == 1).map(|c| c.weight).sum();
        assert_eq!((pairs, singles), (64, 109));
        assert_eq!(s.total_organs(), 2 * 64 + 109);
    }

    #[test]
    fn unilateral_means_are_sample_proportions() {
        let d = CombinedCounts::new(vec![
            GroupCounts::new([0, 0, 0], [7, 3]),
            GroupCounts::new([0, 0, 0], [4, 8]),
        ])
        .unwrap();
        for wc in [WorkingCorrelation::independence(), WorkingCorrelation::unstructured()] {
            let f = gee_fit(&stack(&d), wc, false).unwrap();
            assert_close!(f.group_means[0], 0.3, 1e-14);
            assert_close!(f.group_means[1], 8.0 / 12.0, 1e-14);
        }
    }

    #[test]
    fn ome_means_near_likelihood_estimates() {
        let f = gee_fit(&stack(&ome()), WorkingCorrelation::unstructured(), false).unwrap();
        assert!(f.converged);
        assert_close!(f.group_means[0], 0.6528, 2e-2);
        assert_close!(f.group_means[1], 0.6425, 2e-2);
    }

    #[test]
    fn ome_generalized_score() {
        let t = gee_score_test(&stack(&ome()), WorkingCorrelation::unstructured()).unwrap();
        assert!(((t.statistic - 0.0265) / 0.0265).abs() < 2e-2, "{t:?}");
        assert_close!(t.p_value, 0.8706, 2e-3);
    }

    #[test]
    fn rp_generalized_score() {
        let d = CombinedCounts::new(vec![
            GroupCounts::new([15, 6, 7], [0, 0]),
            GroupCounts::new([7, 5, 9], [0, 0]),
            GroupCounts::new([3, 2, 14], [0, 0]),
            GroupCounts::new([67, 24, 57], [0, 0]),
        ])
        .unwrap();
        let t = gee_score_test(&stack(&d), WorkingCorrelation::unstructured()).unwrap();
        assert!(((t.statistic - 10.6890) / 10.6890).abs() < 2e-2, "{t:?}");
        assert_eq!(t.df, 3);
        assert_close!(t.p_value, 0.0135, 1e-3);
    }

    #[test]
    fn duplicate_groups() {
        let g = GroupCounts::new([3, 4, 6], [5, 2]);
        let d = CombinedCounts::new(vec![g, g]).unwrap();
        let s = stack(&d);
        let t = gee_score_test(&s, WorkingCorrelation::default()).unwrap();
        assert!(t.statistic.abs() < 1e-8);
        let full = gee_fit(&s, WorkingCorrelation::default(), false).unwrap();
        let null = gee_fit(&s, WorkingCorrelation::default(), true).unwrap();
        assert_close!(full.group_means[0], null.group_means[0], 1e-10);
    }

    #[test]
    fn expansion_matches_collapsed() {
        let s = stack(&ome());
        let a = gee_fit(&s, WorkingCorrelation::default(), false).unwrap();
        let b = gee_fit(&s.expanded(), WorkingCorrelation::default(), false).unwrap();
        for (x, y) in a.group_means.iter().zip(&b.group_means) {
            assert_close!(*x, *y, 1e-12);
        }
        assert_close!(a.alpha_hat, b.alpha_hat, 1e-10);
        let ta = gee_score_test(&s, WorkingCorrelation::default()).unwrap();
        let tb = gee_score_test(&s.expanded(), WorkingCorrelation::default()).unwrap();
        assert_close!(ta.statistic, tb.statistic, 1e-10);
    }

    #[test]
    fn invalid_clusters() {
        let bad = Cluster {
            group: 0,
            responses: vec![1, 0, 1],
            weight: 1,
        };
        assert!(GeeClusterSet::new(1, vec![bad]).is_err());
        let bad = Cluster {
            group: 3,
            responses: vec![1],
            weight: 1,
        };
        assert!(GeeClusterSet::new(2, vec![bad]).is_err());
    }

    #[test]
    fn empty_group_is_rejected() {
        let s = GeeClusterSet::new(
            2,
            vec![Cluster {
                group: 0,
                responses: vec![1],
                weight: 2,
            }],
        )
        .unwrap();
        assert!(gee_fit(&s, WorkingCorrelation::default(), false).is_err());
    }
}
