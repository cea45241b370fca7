//! Exact divergence identities and bounds on finite supports.
//!
//! Everything here works in nats. The `suite` function samples random
//! instances and reports, per check, how many violated the property and the
//! tightest margin seen.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::sim::rng::stream;
use crate::{CoreError, Result};

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    p: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(CoreError::Input("distribution needs at least one support point".into()));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(CoreError::Input("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(CoreError::Input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { p })
    }

    /// Normalises nonnegative masses.
    pub fn from_masses(m: &[f64]) -> Result<Self> {
        let total: f64 = m.iter().sum();
        if !(total > 0.0) || m.iter().any(|&x| !(x >= 0.0)) {
            return Err(CoreError::Input("masses must be nonnegative with positive total".into()));
        }
        Self::new(m.iter().map(|x| x / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    /// Flat Dirichlet draw.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        let m: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        Self::from_masses(&m).expect("exponential draws are positive")
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    fn same_size(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(CoreError::Input(format!(
                "support sizes differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Relabels support point `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        let mut p = vec![0.0; self.len()];
        for (i, &j) in perm.iter().enumerate() {
            p[j] = self.p[i];
        }
        Ok(Self { p })
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(CoreError::Input(format!("permutation of length {} for {n} points", perm.len())));
    }
    for &j in perm {
        if j >= n || seen[j] {
            return Err(CoreError::Input("map is not a permutation".into()));
        }
        seen[j] = true;
    }
    Ok(())
}

pub fn kl(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    p.same_size(q)?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.p.iter().zip(&q.p).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(CoreError::Input(format!("p has mass at point {i} where q has none")));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// `Σ_k w_k P_k`.
pub fn mixture(weights: &DiscreteDist, dists: &[DiscreteDist]) -> Result<DiscreteDist> {
    if weights.len() != dists.len() {
        return Err(CoreError::Input(format!(
            "{} weights for {} distributions",
            weights.len(),
            dists.len()
        )));
    }
    let n = dists[0].len();
    let mut m = vec![0.0; n];
    for (w, d) in weights.p.iter().zip(dists) {
        dists[0].same_size(d)?;
        for (mi, pi) in m.iter_mut().zip(&d.p) {
            *mi += w * pi;
        }
    }
    // The mixture of normalised distributions is normalised up to rounding.
    let total: f64 = m.iter().sum();
    Ok(DiscreteDist {
        p: m.into_iter().map(|x| x / total).collect(),
    })
}

pub fn generalized_jsd(weights: &DiscreteDist, dists: &[DiscreteDist]) -> Result<f64> {
    let mix = mixture(weights, dists)?;
    let mut total = 0.0;
    for (&w, d) in weights.p.iter().zip(dists) {
        if w > 0.0 {
            total += w * kl(d, &mix)?;
        }
    }
    Ok(total)
}

pub fn total_variation(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    p.same_size(q)?;
    Ok(0.5 * p.p.iter().zip(&q.p).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `sqrt(kl(p, q) / 2)`.
pub fn pinsker_bound(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    Ok((kl(p, q)? / 2.0).sqrt())
}

/// Upper bound on `tv(p, q)` from the two-point weighted JSD.
pub fn gjsd_tv_bound(pi_p: f64, p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    let (w, pi_q) = two_point_weights(pi_p)?;
    let g = generalized_jsd(&w, &[p.clone(), q.clone()])?;
    Ok(g.max(0.0).sqrt() / (pi_p.sqrt() * pi_q + pi_p * pi_q.sqrt()))
}

fn two_point_weights(pi0: f64) -> Result<(DiscreteDist, f64)> {
    if !(pi0 > 0.0 && pi0 < 1.0) {
        return Err(CoreError::Input(format!("weight {pi0} must lie strictly inside (0, 1)")));
    }
    let pi1 = 1.0 - pi0;
    Ok((DiscreteDist { p: vec![pi0, pi1] }, pi1))
}

/// Posterior table `F[j][r] = pA_j P_j(r) / Σ_k pA_k P_k(r)`.
pub fn optimal_balancer(pa: &DiscreteDist, repr: &[DiscreteDist]) -> Result<Vec<Vec<f64>>> {
    let mix = unnormalised_mixture(pa, repr)?;
    if let Some(r) = mix.iter().position(|&m| m <= 0.0) {
        return Err(CoreError::Input(format!("mixture has no mass at support point {r}")));
    }
    Ok(pa
        .p
        .iter()
        .zip(repr)
        .map(|(&w, d)| d.p.iter().zip(&mix).map(|(pr, m)| w * pr / m).collect())
        .collect())
}

fn unnormalised_mixture(pa: &DiscreteDist, repr: &[DiscreteDist]) -> Result<Vec<f64>> {
    if repr.is_empty() || pa.len() != repr.len() {
        return Err(CoreError::Input(format!("{} weights for {} distributions", pa.len(), repr.len())));
    }
    let n = repr[0].len();
    let mut mix = vec![0.0; n];
    for (w, d) in pa.p.iter().zip(repr) {
        repr[0].same_size(d)?;
        for (m, p) in mix.iter_mut().zip(&d.p) {
            *m += w * p;
        }
    }
    Ok(mix)
}

/// Expected cross-entropy of a balancer table against the treatment labels:
/// `-Σ_j pA_j Σ_r P_j(r) log F[j][r]`.
pub fn classifier_objective(pa: &DiscreteDist, repr: &[DiscreteDist], table: &[Vec<f64>]) -> Result<f64> {
    if table.len() != repr.len() {
        return Err(CoreError::Input("balancer table needs one row per treatment".into()));
    }
    let mut total = 0.0;
    for ((&w, d), row) in pa.p.iter().zip(repr).zip(table) {
        for (&pr, &f) in d.p.iter().zip(row) {
            let mass = w * pr;
            if mass > 0.0 {
                total -= mass * f.ln();
            }
        }
    }
    Ok(total)
}

/// Exhaustive search over balancer tables whose columns lie on the simplex
/// grid of the given step. The objective separates over support points, so
/// each column is minimised on its own.
pub fn grid_search_balancer(pa: &DiscreteDist, repr: &[DiscreteDist], step: f64) -> Result<f64> {
    let k = repr.len();
    let n = unnormalised_mixture(pa, repr)?.len();
    let ticks = (1.0 / step).round() as usize;
    if ticks == 0 || ((ticks as f64) * step - 1.0).abs() > 1e-9 {
        return Err(CoreError::Input(format!("grid step {step} must divide 1")));
    }
    let mut total = 0.0;
    let mut counts = vec![0usize; k];
    for r in 0..n {
        let masses: Vec<f64> = pa.p.iter().zip(repr).map(|(w, d)| w * d.p[r]).collect();
        let mut best = f64::INFINITY;
        simplex_grid(&mut counts, 0, ticks, &mut |c| {
            let mut v = 0.0;
            for (&m, &cj) in masses.iter().zip(c.iter()) {
                if m > 0.0 {
                    if cj == 0 {
                        return;
                    }
                    v -= m * (cj as f64 / ticks as f64).ln();
                }
            }
            best = best.min(v);
        });
        total += best;
    }
    Ok(total)
}

fn simplex_grid(counts: &mut [usize], at: usize, left: usize, visit: &mut impl FnMut(&[usize])) {
    if at + 1 == counts.len() {
        counts[at] = left;
        visit(counts);
        return;
    }
    for c in 0..=left {
        counts[at] = c;
        simplex_grid(counts, at + 1, left - c, visit);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equilibrium {
    /// `Σ_r P(r) Σ_j F_j(r) log F_j(r)` at the optimal balancer.
    pub game_value: f64,
    pub gjsd: f64,
    /// `Σ_j pA_j log pA_j`, the offset between the two.
    pub constant: f64,
}

impl Equilibrium {
    pub fn gap(&self) -> f64 {
        (self.game_value - self.constant - self.gjsd).abs()
    }
}

pub fn verify_equilibrium_objective(pa: &DiscreteDist, repr: &[DiscreteDist]) -> Result<Equilibrium> {
    let table = optimal_balancer(pa, repr)?;
    let mix = unnormalised_mixture(pa, repr)?;
    let mut game_value = 0.0;
    for (r, &m) in mix.iter().enumerate() {
        let mut inner = 0.0;
        for row in &table {
            let f = row[r];
            if f > 0.0 {
                inner += f * f.ln();
            }
        }
        game_value += m * inner;
    }
    let constant = pa.p.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum();
    Ok(Equilibrium {
        game_value,
        gjsd: generalized_jsd(pa, repr)?,
        constant,
    })
}

/// Equal-weight JSD to the uniform mixture.
pub fn crn_objective(repr: &[DiscreteDist]) -> Result<f64> {
    generalized_jsd(&DiscreteDist::uniform(repr.len())?, repr)
}

/// Mean reverse KL from the treatment-weighted mixture to each group.
pub fn ct_objective(pa: &DiscreteDist, repr: &[DiscreteDist]) -> Result<f64> {
    let mix = mixture(pa, repr)?;
    let k = repr.len() as f64;
    repr.iter().try_fold(0.0, |acc, d| Ok(acc + kl(&mix, d)? / k))
}

/// Treatment-weighted JSD. The extra expected-divergence term of the
/// contrastive variant is left out because it is not pinned down.
pub fn ccpc_defined_objective(pa: &DiscreteDist, repr: &[DiscreteDist]) -> Result<f64> {
    generalized_jsd(pa, repr)
}

/// Finite joint over history states, a binary treatment and potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJointSpec {
    /// `joint[h][a] = P(H = h, A = a)`.
    pub joint: Vec<[f64; 2]>,
    pub outcome_values: Vec<f64>,
    /// `outcome_probs[h][a][y] = P(Y[a] = outcome_values[y] | H = h)`.
    pub outcome_probs: Vec<[Vec<f64>; 2]>,
    pub pi0: f64,
}

impl DiscreteJointSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.joint.len();
        if n == 0 || self.outcome_probs.len() != n || self.outcome_values.is_empty() {
            return Err(CoreError::Input("spec needs matching history and outcome tables".into()));
        }
        let masses: Vec<f64> = self.joint.iter().flatten().copied().collect();
        DiscreteDist::new(masses)?;
        let [m0, m1] = self.treatment_marginal();
        if m0 <= 0.0 || m1 <= 0.0 {
            return Err(CoreError::Input("both treatments need positive probability".into()));
        }
        for probs in self.outcome_probs.iter().flatten() {
            if probs.len() != self.outcome_values.len() {
                return Err(CoreError::Input("outcome distribution has the wrong support".into()));
            }
            DiscreteDist::new(probs.clone())?;
        }
        two_point_weights(self.pi0)?;
        Ok(())
    }

    pub fn treatment_marginal(&self) -> [f64; 2] {
        let m0 = self.joint.iter().map(|j| j[0]).sum();
        let m1 = self.joint.iter().map(|j| j[1]).sum();
        [m0, m1]
    }

    /// History distribution given `A = a`.
    pub fn conditional(&self, a: usize) -> Result<DiscreteDist> {
        let masses: Vec<f64> = self.joint.iter().map(|j| j[a]).collect();
        DiscreteDist::from_masses(&masses)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, states: usize, outcomes: usize) -> Self {
        let joint_flat = DiscreteDist::random(rng, 2 * states);
        let joint = joint_flat.p.chunks(2).map(|c| [c[0], c[1]]).collect();
        let outcome_values = (0..outcomes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let outcome_probs = (0..states)
            .map(|_| {
                [
                    DiscreteDist::random(rng, outcomes).p,
                    DiscreteDist::random(rng, outcomes).p,
                ]
            })
            .collect();
        Self {
            joint,
            outcome_values,
            outcome_probs,
            pi0: rng.random_range(0.01..0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Factual plus counterfactual error against the group-wise factual errors
/// and the divergence penalty, all by exhaustive expectation.
///
/// `hypothesis[r][a]` is the prediction for representation point `r` under
/// treatment `a`; `phi[h]` maps history states to representation points.
pub fn verify_error_bound(
    spec: &DiscreteJointSpec,
    hypothesis: &[[f64; 2]],
    phi: &[usize],
    loss: impl Fn(f64, f64) -> f64,
) -> Result<ErrorBound> {
    spec.validate()?;
    let n = spec.joint.len();
    check_permutation(phi, n)?;
    if hypothesis.len() != n {
        return Err(CoreError::Input("hypothesis needs one row per representation point".into()));
    }
    // Expected loss of predicting outcome a at state h.
    let expected = |h: usize, a: usize| -> f64 {
        let pred = hypothesis[phi[h]][a];
        spec.outcome_values
            .iter()
            .zip(&spec.outcome_probs[h][a])
            .map(|(&y, &q)| q * loss(pred, y))
            .sum()
    };
    let marginal = spec.treatment_marginal();
    let mut factual = 0.0;
    let mut counterfactual = 0.0;
    let mut group = [0.0; 2];
    let mut sup: f64 = 0.0;
    for h in 0..n {
        for a in 0..2 {
            let own = expected(h, a);
            sup = sup.max(own.abs());
            let p = spec.joint[h][a];
            factual += p * own;
            counterfactual += p * expected(h, 1 - a);
            group[a] += p / marginal[a] * own;
        }
    }
    let p0 = spec.conditional(0)?.permuted(phi)?;
    let p1 = spec.conditional(1)?.permuted(phi)?;
    let (w, pi1) = two_point_weights(spec.pi0)?;
    let g = generalized_jsd(&w, &[p0, p1])?.max(0.0);
    let weight = 2.0 * sup / (spec.pi0.sqrt() * pi1 + spec.pi0 * pi1.sqrt());
    let lhs = factual + counterfactual;
    let rhs = group[0] + group[1] + weight * g.sqrt();
    Ok(ErrorBound {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub violations: usize,
    /// Smallest margin for inequalities, largest error for identities.
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

struct Tally {
    name: &'static str,
    trials: usize,
    violations: usize,
    worst: f64,
    margin: bool,
}

impl Tally {
    fn margin(name: &'static str) -> Self {
        Self { name, trials: 0, violations: 0, worst: f64::INFINITY, margin: true }
    }

    fn error(name: &'static str) -> Self {
        Self { name, trials: 0, violations: 0, worst: 0.0, margin: false }
    }

    /// Records an inequality margin (`ok` decides the violation) or an
    /// identity error.
    fn record(&mut self, value: f64, ok: bool) {
        self.trials += 1;
        if !ok || !value.is_finite() {
            self.violations += 1;
        }
        self.worst = if self.margin { self.worst.min(value) } else { self.worst.max(value) };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            trials: self.trials,
            violations: self.violations,
            worst: self.worst,
        }
    }
}

/// Random distribution with occasional exact zeros.
fn sparse_dist<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DiscreteDist {
    loop {
        let m: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { Exp1.sample(rng) })
            .collect();
        if let Ok(d) = DiscreteDist::from_masses(&m) {
            return d;
        }
    }
}

/// Runs every check on `trials` random instances each.
pub fn suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = stream(seed, "theory", 0);
    let mut out = Vec::new();

    let mut gibbs = Tally::margin("kl_nonnegative");
    let mut pinsker = Tally::margin("pinsker");
    let mut c2 = Tally::margin("tv_gjsd_bound");
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let p = sparse_dist(&mut rng, n);
        let q = DiscreteDist::random(&mut rng, n);
        let d = kl(&p, &q)?;
        gibbs.record(d, d >= -1e-15);
        let tv = total_variation(&p, &q)?;
        let slack = pinsker_bound(&p, &q)? - tv;
        pinsker.record(slack, slack >= -1e-12);
        let pi = rng.random_range(0.01..0.99);
        let p2 = sparse_dist(&mut rng, n);
        let slack = gjsd_tv_bound(pi, &p, &p2)? - total_variation(&p, &p2)?;
        c2.record(slack, slack >= -1e-12);
    }
    out.extend([gibbs.finish(), pinsker.finish(), c2.finish()]);

    let mut grid = Tally::margin("optimal_balancer_vs_grid");
    for _ in 0..trials {
        let k = rng.random_range(2..=3);
        let n = rng.random_range(1..=4);
        let pa = DiscreteDist::random(&mut rng, k);
        let repr: Vec<_> = (0..k).map(|_| DiscreteDist::random(&mut rng, n)).collect();
        let closed = classifier_objective(&pa, &repr, &optimal_balancer(&pa, &repr)?)?;
        let searched = grid_search_balancer(&pa, &repr, 0.01)?;
        let slack = searched - closed;
        grid.record(slack, slack >= -1e-3);
    }
    out.push(grid.finish());

    let mut identity = Tally::error("equilibrium_identity");
    let mut invariance = Tally::error("invariant_objectives_vanish");
    let mut separation = Tally::margin("gjsd_positive_when_distinct");
    for _ in 0..trials {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(2..=6);
        let pa = DiscreteDist::random(&mut rng, k);
        let repr: Vec<_> = (0..k).map(|_| DiscreteDist::random(&mut rng, n)).collect();
        let gap = verify_equilibrium_objective(&pa, &repr)?.gap();
        identity.record(gap, gap <= 1e-10);

        let same = vec![repr[0].clone(); k];
        let eq = verify_equilibrium_objective(&pa, &same)?;
        let worst = [
            eq.gjsd.abs(),
            (eq.game_value - eq.constant).abs(),
            crn_objective(&same)?.abs(),
            ct_objective(&pa, &same)?.abs(),
            ccpc_defined_objective(&pa, &same)?.abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        invariance.record(worst, worst <= 1e-12);

        let mut shifted = same;
        shifted[rng.random_range(0..k)] = DiscreteDist::random(&mut rng, n);
        let g = generalized_jsd(&pa, &shifted)?;
        separation.record(g, g > 0.0);
    }
    out.extend([identity.finish(), invariance.finish(), separation.finish()]);

    let mut bound = Tally::margin("error_bound");
    for _ in 0..trials {
        let states = rng.random_range(1..=6);
        let outcomes = rng.random_range(1..=4);
        let spec = DiscreteJointSpec::random(&mut rng, states, outcomes);
        let hypothesis: Vec<[f64; 2]> = (0..states)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let mut phi: Vec<usize> = (0..states).collect();
        rand::seq::SliceRandom::shuffle(phi.as_mut_slice(), &mut rng);
        let b = verify_error_bound(&spec, &hypothesis, &phi, |p, y| (p - y) * (p - y))?;
        bound.record(b.rhs - b.lhs, b.holds);
    }
    out.push(bound.finish());
    Ok(out)
}
