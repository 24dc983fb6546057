#![allow(dead_code)]

use pairtest::io::parse_frequency;
use pairtest::mle::GroupSize;
use pairtest::model::joint_region;
use pairtest::sim::sample_group;
use pairtest::{CombinedCounts, GroupCounts, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ome() -> CombinedCounts {
    parse_frequency(include_str!("../../data/ome.csv")).unwrap()
}

pub fn rp() -> CombinedCounts {
    parse_frequency(include_str!("../../data/rp.csv")).unwrap()
}

/// Joint probabilities computed directly from the model formulas.
pub fn probs(pi: f64, kappa: f64, kind: ModelKind) -> [f64; 3] {
    match kind {
        ModelKind::Rosner => {
            let p2 = kappa * pi * pi;
            let p1 = 2.0 * pi * (1.0 - kappa * pi);
            [1.0 - p1 - p2, p1, p2]
        }
        ModelKind::Donner => {
            let q = 1.0 - pi;
            [q * (q + pi * kappa), 2.0 * pi * q * (1.0 - kappa), pi * (pi + q * kappa)]
        }
    }
}

/// Log-likelihood without constants; `-inf` outside the admissible region.
pub fn loglik(groups: &[GroupCounts], pis: &[f64], kappa: f64, kind: ModelKind) -> f64 {
    let mut total = 0.0;
    for (gc, &pi) in groups.iter().zip(pis) {
        if !(0.0..=1.0).contains(&pi) {
            return f64::NEG_INFINITY;
        }
        let p = probs(pi, kappa, kind);
        if p.iter().any(|&x| x < -1e-15) {
            return f64::NEG_INFINITY;
        }
        let cells = [
            (gc.m0, p[0]),
            (gc.m1, p[1]),
            (gc.m2, p[2]),
            (gc.n0, 1.0 - pi),
            (gc.n1, pi),
        ];
        for (count, prob) in cells {
            if count > 0 {
                if prob <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                total += count as f64 * prob.ln();
            }
        }
    }
    total
}

/// Interior parameters: proportions in `[0.1, 0.9]` and `kappa` strictly
/// inside the joint region.
pub fn interior_params(rng: &mut impl Rng, g: usize, kind: ModelKind) -> (Vec<f64>, f64) {
    let pis: Vec<f64> = (0..g).map(|_| rng.random_range(0.1..0.9)).collect();
    let range = joint_region(&pis, kind).unwrap();
    let kappa = range.lo + (range.hi - range.lo) * rng.random_range(0.1..0.9);
    (pis, kappa)
}

/// Data sampled from the model at random interior parameters.
pub fn random_dataset(seed: u64, g: usize, kind: ModelKind, m_plus: u64, n_plus: u64) -> CombinedCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pis, kappa) = interior_params(&mut rng, g, kind);
    let groups = pis
        .iter()
        .map(|&pi| sample_group(pi, kappa, kind, GroupSize { m_plus, n_plus }, &mut rng))
        .collect();
    CombinedCounts::new(groups).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Golden-section maximization of a unimodal-near-the-optimum function on
/// `[lo, hi]`, started from the best point of a uniform grid.
pub fn grid_golden(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> (f64, f64) {
    let step = (hi - lo) / cells as f64;
    let (mut best_x, mut best_f) = (lo, f(lo));
    for k in 1..=cells {
        let x = lo + step * k as f64;
        let v = f(x);
        if v > best_f {
            best_x = x;
            best_f = v;
        }
    }
    let (mut a, mut b) = ((best_x - step).max(lo), (best_x + step).min(hi));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-13 * (1.0 + a.abs()) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    for x in [a, b, 0.5 * (a + b)] {
        let v = f(x);
        if v > best_f {
            best_x = x;
            best_f = v;
        }
    }
    (best_x, best_f)
}

/// Maximum log-likelihood by nested grid-then-golden searches: over `kappa`
/// outside, over each free proportion inside.
pub fn oracle_max(groups: &[GroupCounts], kind: ModelKind, equal: bool) -> f64 {
    let inner = |kappa: f64| -> f64 {
        if equal {
            let f = |pi: f64| loglik(groups, &vec![pi; groups.len()], kappa, kind);
            grid_golden(&f, 0.0, 1.0, 400).1
        } else {
            groups
                .iter()
                .map(|gc| {
                    let f = |pi: f64| loglik(std::slice::from_ref(gc), &[pi], kappa, kind);
                    grid_golden(&f, 0.0, 1.0, 400).1
                })
                .sum()
        }
    };
    let (lo, hi) = match kind {
        ModelKind::Rosner => (0.0, 12.0),
        ModelKind::Donner => (-1.0, 1.0),
    };
    grid_golden(&inner, lo, hi, 300).1
}
