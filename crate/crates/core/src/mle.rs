//! Maximum-likelihood fitting by damped Fisher scoring, and the expected
//! information matrix.
//!
//! Both the full model `(pi_1, ..., pi_g, kappa)` and the null model with a
//! common proportion are fitted by the same solver working on a reduced
//! parameter vector `theta`: the full model uses `theta = beta`, the null
//! model `theta = (pi, kappa)`. The nuisance parameter can also be held
//! fixed, which happens automatically when no bilateral subjects are present
//! (the likelihood is then flat in `kappa`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_sym;
use crate::model::{
    self, loglik_raw, probs_jacobian, probs_unchecked, score_raw, CombinedCounts, GroupCounts,
    KappaRange, ModelKind, ModelParams,
};

/// Distance kept from the boundary of the parameter space while iterating.
pub const INTERIOR_MARGIN: f64 = 1e-10;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Bilateral and unilateral sample sizes of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSize {
    pub m_plus: u64,
    pub n_plus: u64,
}

impl From<&GroupCounts> for GroupSize {
    fn from(c: &GroupCounts) -> Self {
        GroupSize {
            m_plus: c.m_plus(),
            n_plus: c.n_plus(),
        }
    }
}

pub fn design_of(groups: &[GroupCounts]) -> Vec<GroupSize> {
    groups.iter().map(GroupSize::from).collect()
}

/// Expected information, ordered `(pi_1, ..., pi_g, kappa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix {
    entries: DMatrix<f64>,
}

impl InfoMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn num_groups(&self) -> usize {
        self.entries.nrows() - 1
    }

    /// The `g x g` block for the proportions alone.
    pub fn pi_block(&self) -> DMatrix<f64> {
        let g = self.num_groups();
        self.entries.view((0, 0), (g, g)).into_owned()
    }
}

/// Expected information of the log-likelihood at `params` for the given
/// per-group sample sizes.
///
/// Each bilateral subject contributes `sum_r (1/p_r) dp_r dp_r'` and each
/// unilateral subject `1/(pi (1 - pi))` in its own proportion slot, so
/// proportions of different groups are only linked through `kappa`.
pub fn fisher_information(params: &ModelParams, design: &[GroupSize]) -> Result<InfoMatrix> {
    if params.num_groups() != design.len() {
        return Err(Error::InvalidData(format!(
            "{} proportions for {} groups",
            params.num_groups(),
            design.len()
        )));
    }
    information_raw(params.kind(), params.pis(), params.kappa(), design)
        .map(|entries| InfoMatrix { entries })
}

fn information_raw(
    kind: ModelKind,
    pis: &[f64],
    kappa: f64,
    design: &[GroupSize],
) -> Result<DMatrix<f64>> {
    let g = pis.len();
    let mut info = DMatrix::zeros(g + 1, g + 1);
    for (i, (size, &pi)) in design.iter().zip(pis).enumerate() {
        if size.m_plus > 0 {
            let p = probs_unchecked(pi, kappa, kind);
            let (d_pi, d_k) = probs_jacobian(pi, kappa, kind);
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for r in 0..3 {
                let norm2 = d_pi[r] * d_pi[r] + d_k[r] * d_k[r];
                if p[r] <= 0.0 || norm2 > ZERO_CELL_WEIGHT * p[r] {
                    return Err(Error::Boundary(format!(
                        "information undefined: p{r} = {:.3e} in group {}",
                        p[r],
                        i + 1
                    )));
                }
                a += d_pi[r] * d_pi[r] / p[r];
                b += d_pi[r] * d_k[r] / p[r];
                c += d_k[r] * d_k[r] / p[r];
            }
            let m = size.m_plus as f64;
            info[(i, i)] += m * a;
            info[(i, g)] += m * b;
            info[(g, i)] += m * b;
            info[(g, g)] += m * c;
        }
        if size.n_plus > 0 {
            if pi <= 0.0 || pi >= 1.0 {
                return Err(Error::Boundary(format!(
                    "information undefined: pi = {pi} in group {}",
                    i + 1
                )));
            }
            info[(i, i)] += size.n_plus as f64 / (pi * (1.0 - pi));
        }
    }
    Ok(info)
}

/// Per-subject information weight `|dp|^2 / p` above which a cell counts as
/// having zero probability.
const ZERO_CELL_WEIGHT: f64 = 1e9;

/// Which proportions are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Restriction {
    /// One proportion per group.
    None,
    /// `pi_1 = ... = pi_g`.
    EqualProportions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Hold `kappa` at this value instead of estimating it.
    pub fixed_kappa: Option<f64>,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            fixed_kappa: None,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the score over the free coordinates; for boundary optima
    /// the coordinates pushing outward are excluded.
    pub gradient_norm: f64,
    /// Some parameter sits at the margin of the valid region.
    pub boundary: bool,
    /// `kappa` was held fixed rather than estimated.
    pub kappa_fixed: bool,
    pub restriction: Restriction,
}

/// Unrestricted fit of the full model.
pub fn fit_unconstrained(data: &CombinedCounts, kind: ModelKind) -> Result<FitResult> {
    fit(data.groups(), kind, Restriction::None, &FitOptions::default())
}

/// Fit under the null hypothesis of a common proportion.
pub fn fit_constrained(data: &CombinedCounts, kind: ModelKind) -> Result<FitResult> {
    fit(
        data.groups(),
        kind,
        Restriction::EqualProportions,
        &FitOptions::default(),
    )
}

struct Problem<'a> {
    kind: ModelKind,
    groups: &'a [GroupCounts],
    restriction: Restriction,
    fixed_kappa: Option<f64>,
}

impl Problem<'_> {
    fn g(&self) -> usize {
        self.groups.len()
    }

    fn n_pi(&self) -> usize {
        match self.restriction {
            Restriction::None => self.g(),
            Restriction::EqualProportions => 1,
        }
    }

    fn dim(&self) -> usize {
        self.n_pi() + usize::from(self.fixed_kappa.is_none())
    }

    fn expand_pis(&self, theta: &[f64]) -> Vec<f64> {
        match self.restriction {
            Restriction::None => theta[..self.g()].to_vec(),
            Restriction::EqualProportions => vec![theta[0]; self.g()],
        }
    }

    fn expand(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let pis = self.expand_pis(theta);
        let kappa = self.fixed_kappa.unwrap_or_else(|| theta[self.n_pi()]);
        (pis, kappa)
    }

    fn kappa_range(&self, pis: &[f64]) -> KappaRange {
        pis.iter()
            .map(|&p| model::region_unchecked(p, self.kind))
            .fold(
                KappaRange {
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                },
                |acc, r| acc.intersect(&r),
            )
    }

    /// Moves `theta` into the interior of the valid region: proportions into
    /// `[margin, 1 - margin]`, then `kappa` into the region those allow.
    fn project(&self, theta: &mut [f64]) {
        let n_pi = self.n_pi();
        for p in &mut theta[..n_pi] {
            *p = p.clamp(INTERIOR_MARGIN, 1.0 - INTERIOR_MARGIN);
        }
        if self.fixed_kappa.is_none() {
            let (pis, kappa) = self.expand(theta);
            theta[n_pi] = self.kappa_range(&pis).clamp_interior(kappa, INTERIOR_MARGIN);
        }
    }

    fn loglik(&self, theta: &[f64]) -> f64 {
        let (pis, kappa) = self.expand(theta);
        loglik_raw(self.kind, &pis, kappa, self.groups)
    }

    fn score(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let (pis, kappa) = self.expand(theta);
        let mut full = vec![0.0; self.g() + 1];
        score_raw(self.kind, &pis, kappa, self.groups, &mut full)?;
        Ok(self.reduce_score(&full))
    }

    /// Maps a full-model gradient onto the coordinates of `theta`.
    fn reduce_score(&self, full: &[f64]) -> DVector<f64> {
        let g = self.g();
        let mut out = DVector::zeros(self.dim());
        match self.restriction {
            Restriction::None => out.as_mut_slice()[..g].copy_from_slice(&full[..g]),
            Restriction::EqualProportions => out[0] = full[..g].iter().sum(),
        }
        if self.fixed_kappa.is_none() {
            out[self.n_pi()] = full[g];
        }
        out
    }

    fn information(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let (pis, kappa) = self.expand(theta);
        let g = self.g();
        let full = information_raw(self.kind, &pis, kappa, &design_of(self.groups))?;
        let d = self.dim();
        let n_pi = self.n_pi();
        let mut out = DMatrix::zeros(d, d);
        match self.restriction {
            Restriction::None => out.view_mut((0, 0), (g, g)).copy_from(&full.view((0, 0), (g, g))),
            Restriction::EqualProportions => out[(0, 0)] = (0..g).map(|i| full[(i, i)]).sum(),
        }
        if self.fixed_kappa.is_none() {
            let cross: Vec<f64> = match self.restriction {
                Restriction::None => (0..g).map(|i| full[(i, g)]).collect(),
                Restriction::EqualProportions => vec![(0..g).map(|i| full[(i, g)]).sum()],
            };
            for (j, c) in cross.into_iter().enumerate() {
                out[(j, n_pi)] = c;
                out[(n_pi, j)] = c;
            }
            out[(n_pi, n_pi)] = full[(g, g)];
        }
        Ok(out)
    }

    /// Coordinates that sit on the margin and whose score points outward.
    fn active_set(&self, theta: &[f64], score: &DVector<f64>) -> Vec<bool> {
        let n_pi = self.n_pi();
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
        let mut active: Vec<bool> = (0..n_pi)
            .map(|j| {
                (near(theta[j], INTERIOR_MARGIN) && score[j] < 0.0)
                    || (near(theta[j], 1.0 - INTERIOR_MARGIN) && score[j] > 0.0)
            })
            .collect();
        if self.fixed_kappa.is_none() {
            let (pis, kappa) = self.expand(theta);
            let range = self.kappa_range(&pis);
            let s = score[n_pi];
            active.push(
                (near(kappa, range.lo + INTERIOR_MARGIN) && s < 0.0)
                    || (near(kappa, range.hi - INTERIOR_MARGIN) && s > 0.0),
            );
        }
        active
    }

    fn initial(&self) -> Vec<f64> {
        let smoothed =
            |c: &GroupCounts| (c.responders() as f64 + 0.5) / (c.organs() as f64 + 1.0);
        let mut theta: Vec<f64> = match self.restriction {
            Restriction::None => self.groups.iter().map(smoothed).collect(),
            Restriction::EqualProportions => {
                let r: u64 = self.groups.iter().map(GroupCounts::responders).sum();
                let o: u64 = self.groups.iter().map(GroupCounts::organs).sum();
                vec![(r as f64 + 0.5) / (o as f64 + 1.0)]
            }
        };
        if self.fixed_kappa.is_none() {
            let pis = self.expand_pis(&theta);
            let rho = pooled_pair_correlation(self.groups, &pis);
            let kappa = match self.kind {
                ModelKind::Donner => rho,
                ModelKind::Rosner => {
                    let o: u64 = self.groups.iter().map(GroupCounts::organs).sum();
                    let pooled = pis
                        .iter()
                        .zip(self.groups)
                        .map(|(p, c)| p * c.organs() as f64)
                        .sum::<f64>()
                        / o as f64;
                    (1.0 - pooled) * rho / pooled + 1.0
                }
            };
            let range = self.kappa_range(&pis);
            let pad = 0.01 * (range.hi - range.lo);
            theta.push(kappa.clamp(range.lo + pad, range.hi - pad));
        }
        theta
    }
}

impl Problem<'_> {
    /// Proportions maximizing the likelihood at fixed `kappa`; the groups
    /// separate, so each is a one-dimensional search.
    fn best_pis(&self, kappa: f64) -> Option<(Vec<f64>, f64)> {
        let (lo, hi) = pi_interval(kappa, self.kind)?;
        let kind = self.kind;
        match self.restriction {
            Restriction::None => {
                let mut pis = Vec::with_capacity(self.g());
                let mut total = 0.0;
                for gc in self.groups {
                    let f = |p: f64| loglik_raw(kind, &[p], kappa, std::slice::from_ref(gc));
                    let (p, l) = maximize_1d(f, lo, hi);
                    pis.push(p);
                    total += l;
                }
                Some((pis, total))
            }
            Restriction::EqualProportions => {
                let g = self.g();
                let f = |p: f64| loglik_raw(kind, &vec![p; g], kappa, self.groups);
                let (p, l) = maximize_1d(f, lo, hi);
                Some((vec![p], l))
            }
        }
    }

    /// Maximizes the profile log-likelihood over `kappa`. Returns `theta`,
    /// its log-likelihood and the number of profile evaluations.
    fn profile(&self) -> Option<(Vec<f64>, f64, usize)> {
        let evals = std::cell::Cell::new(0usize);
        let profile = |k: f64| {
            evals.set(evals.get() + 1);
            self.best_pis(k).map_or(f64::NEG_INFINITY, |(_, l)| l)
        };
        let kappa = match (self.fixed_kappa, self.kind) {
            (Some(k), _) => k,
            (None, ModelKind::Donner) => maximize_1d(profile, -1.0, 1.0).0,
            (None, ModelKind::Rosner) => {
                let top = self
                    .groups
                    .iter()
                    .map(|c| (c.responders() as f64 + 0.5) / (c.organs() as f64 + 1.0))
                    .fold(0.0, f64::max);
                let mut hi = 2.0 / top;
                loop {
                    let (k, _) = maximize_1d(profile, 0.0, hi);
                    if k < 0.99 * hi || hi > 1e8 {
                        break k;
                    }
                    hi *= 4.0;
                }
            }
        };
        let (mut theta, ll) = self.best_pis(kappa)?;
        if self.fixed_kappa.is_none() {
            theta.push(kappa);
        }
        Some((theta, ll, evals.get()))
    }

    /// Which coordinates of a profile optimum are free, and whether any is
    /// held by a bound.
    fn profile_free_coordinates(&self, theta: &[f64]) -> (Vec<bool>, bool) {
        let (_, kappa) = self.expand(theta);
        let n_pi = self.n_pi();
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
        let (lo, hi) = pi_interval(kappa, self.kind).unwrap_or((INTERIOR_MARGIN, 1.0 - INTERIOR_MARGIN));
        let mut free: Vec<bool> = theta[..n_pi]
            .iter()
            .map(|&p| !near(p, lo) && !near(p, hi))
            .collect();
        if self.fixed_kappa.is_none() {
            let coupled = free.iter().any(|f| !f);
            let edge = match self.kind {
                ModelKind::Donner => near(kappa, -1.0) || near(kappa, 1.0),
                ModelKind::Rosner => kappa.abs() <= 1e-9,
            };
            free.push(!coupled && !edge);
        }
        let boundary = free.iter().any(|f| !f);
        (free, boundary)
    }
}

/// Proportions admitting `kappa`, inside the interior margin. `None` when
/// no proportion is compatible.
fn pi_interval(kappa: f64, kind: ModelKind) -> Option<(f64, f64)> {
    let (lo, hi) = match kind {
        ModelKind::Rosner if kappa < 0.0 => return None,
        ModelKind::Rosner if kappa >= 1.0 => (0.0, 1.0 / kappa),
        ModelKind::Rosner => (0.0, 1.0 / (1.0 + (1.0 - kappa).sqrt())),
        ModelKind::Donner if !(-1.0..=1.0).contains(&kappa) => return None,
        ModelKind::Donner if kappa >= 0.0 => (0.0, 1.0),
        ModelKind::Donner => (-kappa / (1.0 - kappa), 1.0 / (1.0 - kappa)),
    };
    let lo = lo.max(INTERIOR_MARGIN);
    let hi = hi.min(1.0 - INTERIOR_MARGIN);
    (lo <= hi).then_some((lo, hi))
}

/// Maximizes `f` on `[a, b]`: a coarse grid locates the best cell, then
/// golden-section search refines it. Ties and `-inf` are handled, so the
/// objective may be unbounded below near the ends.
fn maximize_1d(mut f: impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    const GRID: usize = 24;
    if b <= a {
        return (a, f(a));
    }
    let h = (b - a) / GRID as f64;
    let xs: Vec<f64> = (0..=GRID).map(|i| if i == GRID { b } else { a + h * i as f64 }).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let best = (0..=GRID).fold(0, |k, i| if fs[i] > fs[k] { i } else { k });
    let (mut lo, mut hi) = (xs[best.saturating_sub(1)], xs[(best + 1).min(GRID)]);
    let (mut x_best, mut f_best) = (xs[best], fs[best]);

    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    for (x, fx) in [(x1, f1), (x2, f2)] {
        if fx > f_best {
            x_best = x;
            f_best = fx;
        }
    }
    (x_best, f_best)
}

/// Moment estimate of the within-pair correlation pooled over groups.
fn pooled_pair_correlation(groups: &[GroupCounts], pis: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (c, &p) in groups.iter().zip(pis) {
        let q = 1.0 - p;
        num += c.m0 as f64 * p * p - c.m1 as f64 * p * q + c.m2 as f64 * q * q;
        den += c.m_plus() as f64 * p * q;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn inf_norm(v: &DVector<f64>, mask: &[bool]) -> f64 {
    v.iter()
        .zip(mask)
        .filter(|(_, &a)| !a)
        .fold(0.0, |m, (x, _)| m.max(x.abs()))
}

/// Fits either model under the given restriction.
///
/// Damped Fisher scoring: the step `I^{-1} U` over the free coordinates is
/// halved until the log-likelihood does not decrease, and every candidate is
/// projected back into the interior of the valid region. Coordinates held at
/// the margin by an outward-pointing score are frozen for that step.
pub fn fit(
    groups: &[GroupCounts],
    kind: ModelKind,
    restriction: Restriction,
    options: &FitOptions,
) -> Result<FitResult> {
    if groups.is_empty() {
        return Err(Error::InvalidData("no groups".into()));
    }
    if let Some(i) = groups.iter().position(GroupCounts::is_empty) {
        return Err(Error::InvalidData(format!("group {} has no observations", i + 1)));
    }
    let no_pairs = groups.iter().all(|c| c.m_plus() == 0);
    let fixed_kappa = match options.fixed_kappa {
        Some(k) => Some(k),
        None if no_pairs => Some(kind.independence_kappa()),
        None => None,
    };
    if let Some(k) = fixed_kappa {
        if !k.is_finite() {
            return Err(Error::InvalidParameter(format!("fixed kappa {k}")));
        }
    }
    let problem = Problem {
        kind,
        groups,
        restriction,
        fixed_kappa,
    };

    let theta = problem.initial();
    if let Some(k) = fixed_kappa {
        // proportions must admit the fixed kappa
        for &p in &problem.expand_pis(&theta) {
            model::joint_probs(p, k, kind)?;
        }
    }
    match scoring(&problem, theta, options) {
        Ok(fit) if !fit.boundary => Ok(fit),
        // scoring can stall on a curved edge of the region; check against
        // the profile optimum
        Ok(fit) => Ok(match profile_fallback(&problem, options) {
            Some(p) if p.loglik >= fit.loglik - 1e-12 * (1.0 + fit.loglik.abs()) => p,
            _ => fit,
        }),
        Err(e @ (Error::NonConvergence { .. } | Error::Singular(_) | Error::Boundary(_))) => {
            profile_fallback(&problem, options).ok_or(e)
        }
        Err(e) => Err(e),
    }
}

/// Retries a failed scoring run from the profile-likelihood optimum and
/// keeps whichever point has the higher log-likelihood.
fn profile_fallback(problem: &Problem<'_>, options: &FitOptions) -> Option<FitResult> {
    let (theta, ll, evaluations) = problem.profile()?;
    if !ll.is_finite() {
        return None;
    }
    let polished = scoring(problem, theta.clone(), options)
        .ok()
        .filter(|f| f.loglik >= ll - 1e-12 * (1.0 + ll.abs()));
    if polished.is_some() {
        return polished;
    }
    let (pis, kappa) = problem.expand(&theta);
    let mut full = vec![0.0; problem.g() + 1];
    score_raw(problem.kind, &pis, kappa, problem.groups, &mut full).ok()?;
    let (free, boundary) = problem.profile_free_coordinates(&theta);
    let reduced = problem.reduce_score(&full);
    let gradient_norm = inf_norm(&reduced, &free.iter().map(|f| !f).collect::<Vec<_>>());
    Some(FitResult {
        params: ModelParams::from_parts(problem.kind, pis, kappa),
        loglik: ll,
        converged: true,
        iterations: evaluations,
        gradient_norm,
        boundary,
        kappa_fixed: problem.fixed_kappa.is_some(),
        restriction: problem.restriction,
    })
}

/// Damped Fisher scoring from `theta`.
fn scoring(problem: &Problem<'_>, mut theta: Vec<f64>, options: &FitOptions) -> Result<FitResult> {
    let kind = problem.kind;
    problem.project(&mut theta);
    let mut ll = problem.loglik(&theta);

    let finish = |theta: &[f64], ll: f64, iterations, gradient_norm, converged, boundary| {
        let (pis, kappa) = problem.expand(theta);
        FitResult {
            params: ModelParams::from_parts(kind, pis, kappa),
            loglik: ll,
            converged,
            iterations,
            gradient_norm,
            boundary,
            kappa_fixed: problem.fixed_kappa.is_some(),
            restriction: problem.restriction,
        }
    };

    let mut grad_norm = f64::INFINITY;
    let mut stalled = 0usize;
    for iter in 0..options.max_iter {
        let score = problem.score(&theta)?;
        let active = problem.active_set(&theta, &score);
        grad_norm = inf_norm(&score, &active);
        if grad_norm <= options.tolerance {
            let boundary = active.iter().any(|&a| a);
            return Ok(finish(&theta, ll, iter, grad_norm, true, boundary));
        }

        let free: Vec<usize> = (0..theta.len()).filter(|&j| !active[j]).collect();
        let info = problem.information(&theta)?;
        let sub_info = DMatrix::from_fn(free.len(), free.len(), |a, b| info[(free[a], free[b])]);
        let sub_score = DVector::from_iterator(free.len(), free.iter().map(|&j| score[j]));
        let step = solve_sym(&sub_info, &sub_score).ok_or(Error::Singular("Fisher information"))?;

        let mut t = 1.0;
        let mut accepted = None;
        let floor = ll - 1e-13 * (1.0 + ll.abs());
        while t > 1e-12 {
            let mut cand = theta.clone();
            for (a, &j) in free.iter().enumerate() {
                cand[j] += t * step[a];
            }
            problem.project(&mut cand);
            let cand_ll = problem.loglik(&cand);
            if cand_ll.is_finite() && cand_ll >= floor {
                accepted = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }

        let Some((cand, cand_ll)) = accepted else {
            stalled = usize::MAX;
            break;
        };
        let moved = cand
            .iter()
            .zip(&theta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        theta = cand;
        ll = cand_ll.max(ll);
        if moved < 1e-15 {
            stalled += 1;
            if stalled >= 3 {
                break;
            }
        } else {
            stalled = 0;
        }
    }

    // No further ascent possible: accept as a boundary optimum when some
    // coordinate is held at the margin.
    let score = problem.score(&theta)?;
    let active = problem.active_set(&theta, &score);
    let on_margin = on_margin(problem, &theta);
    grad_norm = grad_norm.min(inf_norm(&score, &active));
    if stalled > 0 && on_margin {
        return Ok(finish(&theta, ll, options.max_iter, grad_norm, true, true));
    }
    let best = finish(&theta, ll, options.max_iter, grad_norm, false, on_margin);
    Err(Error::NonConvergence {
        iterations: options.max_iter,
        gradient_norm: grad_norm,
        best: Box::new(best),
    })
}

fn on_margin(problem: &Problem<'_>, theta: &[f64]) -> bool {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let n_pi = problem.n_pi();
    let pi_edge = theta[..n_pi]
        .iter()
        .any(|&p| close(p, INTERIOR_MARGIN) || close(p, 1.0 - INTERIOR_MARGIN));
    let kappa_edge = problem.fixed_kappa.is_none() && {
        let (pis, kappa) = problem.expand(theta);
        let r = problem.kappa_range(&pis);
        close(kappa, r.lo + INTERIOR_MARGIN) || close(kappa, r.hi - INTERIOR_MARGIN)
    };
    pi_edge || kappa_edge
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
    fn bernoulli_information() {
        let p = ModelParams::new(ModelKind::Donner, vec![0.3], 0.0).unwrap();
        let info = fisher_information(&p, &[GroupSize { m_plus: 0, n_plus: 50 }]).unwrap();
        let e = info.entries();
        assert!((e[(0, 0)] - 50.0 / (0.3 * 0.7)).abs() < 1e-10);
        assert_eq!(e[(0, 1)], 0.0);
        assert_eq!(e[(1, 1)], 0.0);
    }

    #[test]
    fn cross_group_information_is_zero() {
        let p = ModelParams::new(ModelKind::Rosner, vec![0.3, 0.5, 0.6], 1.2).unwrap();
        let d = vec![GroupSize { m_plus: 5, n_plus: 3 }; 3];
        let e = fisher_information(&p, &d).unwrap().entries().clone();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(e[(i, j)], 0.0);
                }
            }
        }
        assert!((e.clone() - e.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn boundary_information_is_an_error() {
        let p = ModelParams::new(ModelKind::Donner, vec![0.4, 0.5], 1.0).unwrap();
        let d = vec![GroupSize { m_plus: 5, n_plus: 0 }; 2];
        assert!(matches!(fisher_information(&p, &d), Err(Error::Boundary(_))));
    }

    #[test]
    fn ome_rosner_estimates() {
        let d = ome();
        let f0 = fit_constrained(&d, ModelKind::Rosner).unwrap();
        assert!(f0.converged && !f0.boundary);
        assert!((f0.params.pis()[0] - 0.6482).abs() < 5e-4);
        assert!((f0.params.kappa() - 1.3182).abs() < 5e-4);
        let f1 = fit_unconstrained(&d, ModelKind::Rosner).unwrap();
        assert!((f1.params.pis()[0] - 0.6528).abs() < 5e-4);
        assert!((f1.params.pis()[1] - 0.6425).abs() < 5e-4);
        assert!((f1.params.kappa() - 1.3172).abs() < 5e-4);
        assert!(f1.gradient_norm <= 1e-8);
        assert!(f1.loglik >= f0.loglik);
    }

    #[test]
    fn identical_groups_share_the_estimate() {
        let g = GroupCounts::new([4, 3, 6], [5, 7]);
        let d = CombinedCounts::new(vec![g, g, g]).unwrap();
        for kind in [ModelKind::Rosner, ModelKind::Donner] {
            let f0 = fit_constrained(&d, kind).unwrap();
            let f1 = fit_unconstrained(&d, kind).unwrap();
            for &p in f1.params.pis() {
                assert!((p - f0.params.pis()[0]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn perfect_concordance_hits_the_boundary() {
        // no discordant pairs: rho -> 1
        let d = CombinedCounts::new(vec![
            GroupCounts::new([5, 0, 4], [3, 2]),
            GroupCounts::new([3, 0, 6], [2, 4]),
        ])
        .unwrap();
        let f = fit_unconstrained(&d, ModelKind::Donner).unwrap();
        assert!(f.converged && f.boundary);
        assert!((f.params.kappa() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unilateral_only_fixes_kappa() {
        let d = CombinedCounts::new(vec![
            GroupCounts::new([0, 0, 0], [10, 5]),
            GroupCounts::new([0, 0, 0], [6, 9]),
        ])
        .unwrap();
        let f = fit_unconstrained(&d, ModelKind::Donner).unwrap();
        assert!(f.kappa_fixed);
        assert!((f.params.pis()[0] - 5.0 / 15.0).abs() < 1e-9);
        assert!((f.params.pis()[1] - 9.0 / 15.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_group_goes_to_the_margin() {
        let d = CombinedCounts::new(vec![
            GroupCounts::new([6, 0, 0], [4, 0]),
            GroupCounts::new([3, 2, 4], [2, 4]),
        ])
        .unwrap();
        let f = fit_unconstrained(&d, ModelKind::Donner).unwrap();
        assert!(f.boundary);
        assert!(f.params.pis()[0] < 1e-6);
    }
}
