//! Voronoi cells around reference atoms and the losses built on them.
//!
//! Fitted atoms are grouped by their nearest reference atom in the Euclidean
//! norm on `(a, b, sigma)`. A reference atom fitted by a single atom is
//! charged linearly in the parameter offsets; one fitted by `m > 1` atoms is
//! charged with `|da|^2 + |db|^rbar(m) + |dsigma|^{rbar(m)/2}`, which is the
//! natural scale of the over-fitted estimation error.
//!
//! * `D1` compares `(lambda, G)` with the truth directly.
//! * `D3` compares two mixing measures (no proportions).
//! * `D2` switches to `D3` against the combined measure `G_bar(lambda)` when
//!   `g0` shares atoms with the truth and the fit is large enough to
//!   represent it.
//! * `D4` handles `g0` sharing every atom with the truth, where `G_bar` may
//!   carry negative weights and is replaced by its positive part
//!   `G_tilde(lambda)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Atom, MixingMeasure};
use crate::polysys::{r_bar, RBar};

/// Default Euclidean tolerance for treating a g0 atom and a truth atom as the
/// same atom.
pub const DEFAULT_MATCH_TOL: f64 = 1e-9;

const RATIO_REL_TOL: f64 = 1e-9;

/// Loss exponents `rbar(|cell|)` for over-fitted cells.
///
/// Cells of cardinality four or more have no known exponent; they are an
/// error unless a surrogate exponent is configured explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RBarTable {
    /// Exponent used for cells whose exact `rbar` is unknown. Only a lower
    /// bound (7) is known there, so any value is a surrogate.
    #[serde(default)]
    pub fallback_exponent: Option<u32>,
}

impl RBarTable {
    pub fn exponent(&self, cardinality: usize) -> Result<u32> {
        match r_bar(cardinality) {
            Ok(RBar::Exact(r)) => Ok(r),
            Ok(RBar::LowerBound(_)) => self
                .fallback_exponent
                .ok_or(Error::UnsupportedCellSize { cardinality }),
            Err(_) => Err(Error::UnsupportedCellSize { cardinality }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    /// `cell_of[i]` is the reference index of fitted atom `i`.
    pub cell_of: Vec<usize>,
    /// `cells[j]` lists the fitted indices closest to reference atom `j`.
    pub cells: Vec<Vec<usize>>,
}

impl VoronoiAssignment {
    pub fn cardinality(&self, j: usize) -> usize {
        self.cells[j].len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.cells.iter().map(Vec::len).collect()
    }
}

/// Nearest-reference assignment; ties go to the smallest reference index.
pub fn assign_cells(g: &MixingMeasure, reference: &[Atom]) -> Result<VoronoiAssignment> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("no reference atoms".into()));
    }
    if reference.iter().any(|a| a.dim() != g.dim()) {
        return Err(Error::InvalidInput(
            "reference atoms and fitted atoms differ in dimension".into(),
        ));
    }
    let mut cells = vec![Vec::new(); reference.len()];
    let cell_of: Vec<usize> = g
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let mut best = 0;
            let mut best_d = atom.distance(&reference[0]);
            for (j, r) in reference.iter().enumerate().skip(1) {
                let d = atom.distance(r);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            cells[best].push(i);
            best
        })
        .collect();
    Ok(VoronoiAssignment { cell_of, cells })
}

/// Structural relation between `g0` and the true mixing measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Distinguishable,
    PartialOverlap(usize),
    FullOverlap,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Distinguishable => write!(f, "Distinguishable"),
            Regime::PartialOverlap(k) => write!(f, "PartialOverlap({k})"),
            Regime::FullOverlap => write!(f, "FullOverlap"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Distinguishable" => Ok(Regime::Distinguishable),
            "FullOverlap" => Ok(Regime::FullOverlap),
            _ => s
                .strip_prefix("PartialOverlap(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|k| k.parse().ok())
                .map(Regime::PartialOverlap)
                .ok_or_else(|| Error::InvalidInput(format!("unknown regime {s:?}"))),
        }
    }
}

impl Serialize for Regime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Regime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapInfo {
    pub k_bar: usize,
    /// `(g0 index, truth index)` pairs of shared atoms.
    pub matching: Vec<(usize, usize)>,
    pub tol: f64,
    pub regime: Regime,
}

impl OverlapInfo {
    /// Truth index matched to g0 atom `i`, if any.
    pub fn partner_of_g0(&self, i: usize) -> Option<usize> {
        self.matching.iter().find(|m| m.0 == i).map(|m| m.1)
    }

    pub fn partner_of_truth(&self, j: usize) -> Option<usize> {
        self.matching.iter().find(|m| m.1 == j).map(|m| m.0)
    }
}

/// Greedy nearest-pair matching of g0 atoms to truth atoms.
pub fn classify_regime(
    g_star: &MixingMeasure,
    g0_mixture: Option<&MixingMeasure>,
    tol: f64,
) -> Result<OverlapInfo> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "match tolerance must be positive, got {tol}"
        )));
    }
    let Some(g0) = g0_mixture else {
        return Ok(OverlapInfo {
            k_bar: 0,
            matching: vec![],
            tol,
            regime: Regime::Distinguishable,
        });
    };
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a0) in g0.atoms().iter().enumerate() {
        for (j, a) in g_star.atoms().iter().enumerate() {
            let d = a0.distance(a);
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used0 = vec![false; g0.len()];
    let mut used_star = vec![false; g_star.len()];
    let mut matching = Vec::new();
    for (_, i, j) in pairs {
        if !used0[i] && !used_star[j] {
            used0[i] = true;
            used_star[j] = true;
            matching.push((i, j));
        }
    }
    matching.sort_unstable();
    let k_bar = matching.len();
    let regime = if k_bar == 0 {
        Regime::Distinguishable
    } else if k_bar == g0.len() {
        Regime::FullOverlap
    } else {
        Regime::PartialOverlap(k_bar)
    };
    Ok(OverlapInfo {
        k_bar,
        matching,
        tol,
        regime,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBranch {
    D1,
    D3,
    D3AgainstBar,
    D3AgainstTilde,
    NegativeMass,
    VanishingLambda,
    VanishingLambdaTimesD3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
}

/// A loss value with its additive breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub branch: LossBranch,
    pub terms: Vec<LossTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    /// Cardinalities of the Voronoi cells used.
    #[serde(default)]
    pub cell_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl LossReport {
    fn from_terms(branch: LossBranch, terms: Vec<LossTerm>, cell_sizes: Vec<usize>) -> Self {
        LossReport {
            value: terms.iter().map(|t| t.value).sum(),
            branch,
            terms,
            regime: None,
            cell_sizes,
            notes: vec![],
        }
    }

    fn scaled(mut self, factor: f64, branch: LossBranch) -> Self {
        for t in &mut self.terms {
            t.value *= factor;
        }
        self.value = self.terms.iter().map(|t| t.value).sum();
        self.branch = branch;
        self
    }

    fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = Some(regime);
        self
    }
}

fn term(name: impl Into<String>, value: f64) -> LossTerm {
    LossTerm {
        name: name.into(),
        value,
    }
}

/// Parameter-offset contribution of each cell, before any outer factor.
fn cell_parameter_terms(
    g: &MixingMeasure,
    reference: &[Atom],
    cells: &VoronoiAssignment,
    rbar: &RBarTable,
) -> Result<Vec<f64>> {
    cells
        .cells
        .iter()
        .enumerate()
        .map(|(j, members)| {
            let r = &reference[j];
            let exponent = match members.len() {
                0 | 1 => None,
                m => Some(rbar.exponent(m)? as f64),
            };
            Ok(order_free_sum(members.iter().map(|&i| {
                let (p, atom) = (g.weights()[i], &g.atoms()[i]);
                let da2: f64 = atom
                    .a
                    .iter()
                    .zip(&r.a)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let db = (atom.b - r.b).abs();
                let ds = (atom.sigma - r.sigma).abs();
                p * match exponent {
                    None => da2.sqrt() + db + ds,
                    Some(e) => da2 + db.powf(e) + ds.powf(e / 2.0),
                }
            })))
        })
        .collect()
}

/// Sum that does not depend on the order of the summands.
fn order_free_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn check_lambda(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must lie in [0, 1], got {v}"
        )))
    }
}

/// `D1((lambda, G), (lambda*, G*))`.
pub fn loss_d1(
    lambda: f64,
    g: &MixingMeasure,
    lambda_star: f64,
    g_star: &MixingMeasure,
    rbar: &RBarTable,
) -> Result<LossReport> {
    check_lambda("lambda", lambda)?;
    check_lambda("lambda*", lambda_star)?;
    let cells = assign_cells(g, g_star.atoms())?;
    let params = cell_parameter_terms(g, g_star.atoms(), &cells, rbar)?;
    let outer = lambda + lambda_star;
    let mut terms = vec![term("lambda", (lambda - lambda_star).abs())];
    for (j, members) in cells.cells.iter().enumerate() {
        let mass = order_free_sum(members.iter().map(|&i| lambda * g.weights()[i]));
        terms.push(term(format!("cell{j}.params"), outer * params[j]));
        terms.push(term(
            format!("cell{j}.mass"),
            outer * (mass - lambda_star * g_star.weights()[j]).abs(),
        ));
    }
    Ok(LossReport::from_terms(
        LossBranch::D1,
        terms,
        cells.cardinalities(),
    ))
}

/// `D3(G, G_ref)`: parameter offsets within cells of `G_ref` plus plain
/// weight discrepancies.
pub fn loss_d3(g: &MixingMeasure, g_ref: &MixingMeasure, rbar: &RBarTable) -> Result<LossReport> {
    let cells = assign_cells(g, g_ref.atoms())?;
    let params = cell_parameter_terms(g, g_ref.atoms(), &cells, rbar)?;
    let mut terms = Vec::with_capacity(2 * g_ref.len());
    for (j, members) in cells.cells.iter().enumerate() {
        let mass = order_free_sum(members.iter().map(|&i| g.weights()[i]));
        terms.push(term(format!("cell{j}.params"), params[j]));
        terms.push(term(
            format!("cell{j}.mass"),
            (mass - g_ref.weights()[j]).abs(),
        ));
    }
    Ok(LossReport::from_terms(
        LossBranch::D3,
        terms,
        cells.cardinalities(),
    ))
}

/// Masses `lambda * weight` of the combined measure
/// `(1 - lambda*/lambda) G0 + (lambda*/lambda) G*`, with shared atoms merged.
///
/// Truth atoms come first in their original order, followed by the g0 atoms
/// without a partner. The masses sum to `lambda`; they stay defined at
/// `lambda = 0`.
fn combined_masses(
    lambda: f64,
    lambda_star: f64,
    g0: &MixingMeasure,
    g_star: &MixingMeasure,
    overlap: &OverlapInfo,
) -> Vec<(f64, Atom)> {
    let mut out: Vec<(f64, Atom)> = g_star
        .iter()
        .enumerate()
        .map(|(j, (p, atom))| {
            let shared = overlap
                .partner_of_truth(j)
                .map_or(0.0, |i| (lambda - lambda_star) * g0.weights()[i]);
            (lambda_star * p + shared, atom.clone())
        })
        .collect();
    for (i, (p0, atom)) in g0.iter().enumerate() {
        if overlap.partner_of_g0(i).is_none() {
            out.push(((lambda - lambda_star) * p0, atom.clone()));
        }
    }
    out
}

fn check_overlap(g0: &MixingMeasure, g_star: &MixingMeasure, overlap: &OverlapInfo) -> Result<()> {
    if overlap
        .matching
        .iter()
        .any(|&(i, j)| i >= g0.len() || j >= g_star.len())
    {
        return Err(Error::InvalidInput(
            "overlap matching does not fit the given measures".into(),
        ));
    }
    Ok(())
}

/// The combined measure `G_bar(lambda)`.
pub fn overline_g(
    lambda: f64,
    lambda_star: f64,
    g0: &MixingMeasure,
    g_star: &MixingMeasure,
    overlap: &OverlapInfo,
) -> Result<MixingMeasure> {
    check_lambda("lambda*", lambda_star)?;
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "the combined measure needs lambda in (0, 1], got {lambda}"
        )));
    }
    check_overlap(g0, g_star, overlap)?;
    let masses = combined_masses(lambda, lambda_star, g0, g_star, overlap);
    let mut weights = Vec::with_capacity(masses.len());
    let mut atoms = Vec::with_capacity(masses.len());
    for (index, (mass, atom)) in masses.into_iter().enumerate() {
        // unshared g0 atoms carry no weight at lambda = lambda*
        if index >= g_star.len() && mass == 0.0 {
            continue;
        }
        let weight = mass / lambda;
        if weight < 0.0 {
            return Err(Error::InvalidProportion {
                lambda,
                index,
                weight,
            });
        }
        weights.push(weight);
        atoms.push(atom);
    }
    // masses sum to lambda exactly in real arithmetic
    MixingMeasure::normalized(weights, atoms)
}

/// Membership of `lambda` in the admissible set `T` and the violation set
/// `I_lambda` (indices of g0 atoms whose combined weight is negative).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProportionSets {
    pub in_t: bool,
    pub violations: Vec<usize>,
}

/// `T = {lambda in (0, 1] : (lambda* - lambda) p0_i <= lambda* p*_i for all i}`.
///
/// `lambda = 0` is classified into the complement of `T`, with `I_0` taken
/// from the literal inequality.
pub fn proportion_set_membership(
    lambda: f64,
    lambda_star: f64,
    g0: &MixingMeasure,
    g_star: &MixingMeasure,
    overlap: &OverlapInfo,
) -> Result<ProportionSets> {
    check_lambda("lambda", lambda)?;
    check_lambda("lambda*", lambda_star)?;
    check_overlap(g0, g_star, overlap)?;
    let violations: Vec<usize> = (0..g0.len())
        .filter(|&i| {
            let p_star = overlap
                .partner_of_g0(i)
                .map_or(0.0, |j| g_star.weights()[j]);
            (lambda_star - lambda) * g0.weights()[i] > lambda_star * p_star
        })
        .collect();
    Ok(ProportionSets {
        in_t: lambda > 0.0 && violations.is_empty(),
        violations,
    })
}

/// True when every `p0_i / p*_i` over `I_lambda` agrees (relative tolerance
/// 1e-9); a zero `p*_i` gives an infinite ratio, and infinite ratios agree
/// with each other.
pub fn is_ratio_independent(
    violations: &[usize],
    g0: &MixingMeasure,
    g_star: &MixingMeasure,
    overlap: &OverlapInfo,
) -> bool {
    if violations.len() <= 1 {
        return true;
    }
    let ratio = |i: usize| {
        let p_star = overlap
            .partner_of_g0(i)
            .map_or(0.0, |j| g_star.weights()[j]);
        if p_star == 0.0 {
            f64::INFINITY
        } else {
            g0.weights()[i] / p_star
        }
    };
    let first = ratio(violations[0]);
    violations[1..].iter().all(|&i| {
        let r = ratio(i);
        if first.is_infinite() || r.is_infinite() {
            first == r
        } else {
            (r - first).abs() <= RATIO_REL_TOL * first.abs().max(r.abs())
        }
    })
}

/// Positive part of the combined measure, renormalized by `s(lambda)`.
pub fn tilde_g(
    lambda: f64,
    lambda_star: f64,
    g0: &MixingMeasure,
    g_star: &MixingMeasure,
    overlap: &OverlapInfo,
    violations: &[usize],
) -> Result<(MixingMeasure, f64)> {
    check_lambda("lambda", lambda)?;
    check_lambda("lambda*", lambda_star)?;
    check_overlap(g0, g_star, overlap)?;
    let masses = combined_masses(lambda, lambda_star, g0, g_star, overlap);
    // position in `masses` of each violating g0 atom
    let dropped: Vec<usize> = violations
        .iter()
        .map(|&i| match overlap.partner_of_g0(i) {
            Some(j) => j,
            None => {
                g_star.len()
                    + (0..i)
                        .filter(|&q| overlap.partner_of_g0(q).is_none())
                        .count()
            }
        })
        .collect();
    let kept: Vec<(f64, Atom)> = masses
        .into_iter()
        .enumerate()
        .filter(|(pos, _)| !dropped.contains(pos))
        .map(|(_, m)| m)
        .collect();
    let s: f64 = kept.iter().map(|m| m.0).sum();
    if !(s > 0.0) {
        return Err(Error::DegenerateNormalizer(s));
    }
    let (weights, atoms): (Vec<f64>, Vec<Atom>) =
        kept.into_iter().map(|(m, a)| (m.max(0.0) / s, a)).unzip();
    Ok((MixingMeasure::normalized(weights, atoms)?, s))
}

fn same_measure(a: &MixingMeasure, b: &MixingMeasure, tol: f64) -> bool {
    a.len() == b.len()
        && a.atoms().iter().zip(b.weights()).all(|(atom, &w)| {
            a.atoms()
                .iter()
                .zip(a.weights())
                .any(|(x, &wx)| x == atom && (wx - w).abs() <= tol)
                && b.atoms()
                    .iter()
                    .zip(b.weights())
                    .any(|(y, &wy)| y.distance(atom) <= tol && (wy - w).abs() <= tol)
        })
        && b.iter().all(|(wb, ab)| {
            a.iter()
                .any(|(wa, aa)| aa.distance(ab) <= tol && (wa - wb).abs() <= tol)
        })
}

/// `D2`: `D1` unless the fit can represent the combined measure and
/// `lambda > lambda*`, in which case `D3(G, G_bar(lambda))`.
pub fn loss_d2(
    lambda: f64,
    g: &MixingMeasure,
    lambda_star: f64,
    g_star: &MixingMeasure,
    g0: &MixingMeasure,
    overlap: &OverlapInfo,
    rbar: &RBarTable,
) -> Result<LossReport> {
    let k_fit = g.len();
    let combined_size = g_star.len() + g0.len() - overlap.k_bar;
    let report = if k_fit < combined_size || lambda <= lambda_star {
        loss_d1(lambda, g, lambda_star, g_star, rbar)?
    } else {
        let bar = overline_g(lambda, lambda_star, g0, g_star, overlap)?;
        loss_d3(g, &bar, rbar)?.scaled(1.0, LossBranch::D3AgainstBar)
    };
    Ok(report.with_regime(overlap.regime))
}

/// `D4` for the full-overlap regime.
#[allow(clippy::too_many_arguments)]
pub fn loss_d4(
    lambda: f64,
    g: &MixingMeasure,
    lambda_star: f64,
    g_star: &MixingMeasure,
    g0: &MixingMeasure,
    overlap: &OverlapInfo,
    rbar: &RBarTable,
) -> Result<LossReport> {
    if same_measure(g_star, g0, overlap.tol) {
        return Err(Error::InvalidConfiguration(
            "the full-overlap loss needs G* different from G0".into(),
        ));
    }
    let sets = proportion_set_membership(lambda, lambda_star, g0, g_star, overlap)?;
    let mut report = if sets.in_t {
        let bar = overline_g(lambda, lambda_star, g0, g_star, overlap)?;
        loss_d3(g, &bar, rbar)?.scaled(1.0, LossBranch::D3AgainstBar)
    } else if is_ratio_independent(&sets.violations, g0, g_star, overlap) {
        let (tilde, s) = tilde_g(lambda, lambda_star, g0, g_star, overlap, &sets.violations)?;
        let mut r = loss_d3(g, &tilde, rbar)?.scaled(s, LossBranch::D3AgainstTilde);
        r.notes.push(format!("s(lambda) = {s}"));
        r
    } else {
        let masses = combined_masses(lambda, lambda_star, g0, g_star, overlap);
        let terms = sets
            .violations
            .iter()
            .map(|&i| {
                let pos = overlap.partner_of_g0(i).unwrap_or_else(|| {
                    g_star.len()
                        + (0..i)
                            .filter(|&q| overlap.partner_of_g0(q).is_none())
                            .count()
                });
                term(format!("negative_mass{i}"), -masses[pos].0)
            })
            .collect();
        LossReport::from_terms(LossBranch::NegativeMass, terms, vec![])
    };
    if lambda == 0.0 {
        report
            .notes
            .push("lambda = 0 is classified outside the admissible set T".into());
    }
    Ok(report.with_regime(overlap.regime))
}

/// Metrics for a vanishing true proportion (`lambda* = 0`): `lambda_hat`
/// when the truth is distinguishable from g0, otherwise
/// `lambda_hat * D3(G_hat, G0)`.
pub fn loss_vanishing(
    lambda_hat: f64,
    g_hat: Option<&MixingMeasure>,
    g0: Option<&MixingMeasure>,
    distinguishable: bool,
    rbar: &RBarTable,
) -> Result<LossReport> {
    check_lambda("lambda", lambda_hat)?;
    if distinguishable {
        return Ok(LossReport::from_terms(
            LossBranch::VanishingLambda,
            vec![term("lambda", lambda_hat)],
            vec![],
        ));
    }
    let g0 = g0.ok_or(Error::MissingReference("G0 is required for lambda * D3"))?;
    let g_hat = g_hat.ok_or(Error::MissingReference("a fitted measure is required"))?;
    Ok(loss_d3(g_hat, g0, rbar)?.scaled(lambda_hat, LossBranch::VanishingLambdaTimesD3))
}

/// Which loss a study or probe evaluates against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    D1,
    D2,
    D4,
}

/// The truth `(lambda*, G*, g0)` with everything the losses need precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossContext {
    pub lambda_star: f64,
    pub g_star: MixingMeasure,
    pub g0: MixingMeasure,
    pub overlap: OverlapInfo,
    pub rbar: RBarTable,
}

impl LossContext {
    pub fn new(
        lambda_star: f64,
        g_star: MixingMeasure,
        g0: MixingMeasure,
        match_tol: f64,
        rbar: RBarTable,
    ) -> Result<Self> {
        let overlap = classify_regime(&g_star, Some(&g0), match_tol)?;
        Ok(LossContext {
            lambda_star,
            g_star,
            g0,
            overlap,
            rbar,
        })
    }

    pub fn regime(&self) -> Regime {
        self.overlap.regime
    }

    /// Rejects a loss whose theory does not cover the truth's regime.
    pub fn check_kind(&self, kind: LossKind) -> Result<()> {
        let ok = match kind {
            LossKind::D1 => self.regime() == Regime::Distinguishable,
            LossKind::D2 => matches!(self.regime(), Regime::PartialOverlap(_)),
            LossKind::D4 => self.regime() == Regime::FullOverlap,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::RegimeMismatch {
                metric: format!("{kind:?}"),
                regime: self.regime().to_string(),
            })
        }
    }

    pub fn evaluate(&self, kind: LossKind, lambda: f64, g: &MixingMeasure) -> Result<LossReport> {
        match kind {
            LossKind::D1 => Ok(
                loss_d1(lambda, g, self.lambda_star, &self.g_star, &self.rbar)?
                    .with_regime(self.regime()),
            ),
            LossKind::D2 => loss_d2(
                lambda,
                g,
                self.lambda_star,
                &self.g_star,
                &self.g0,
                &self.overlap,
                &self.rbar,
            ),
            LossKind::D4 => loss_d4(
                lambda,
                g,
                self.lambda_star,
                &self.g_star,
                &self.g0,
                &self.overlap,
                &self.rbar,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(a: f64, b: f64, s: f64) -> Atom {
        Atom::scalar(a, b, s).unwrap()
    }

    fn measure(ws: &[f64], atoms: &[(f64, f64, f64)]) -> MixingMeasure {
        MixingMeasure::new(
            ws.to_vec(),
            atoms.iter().map(|&(a, b, s)| atom(a, b, s)).collect(),
        )
        .unwrap()
    }

    const THIRD: f64 = 1.0 / 3.0;

    fn nd_g0() -> MixingMeasure {
        measure(
            &[THIRD; 3],
            &[(0.2, 0.1, 0.01), (0.1, 0.1, 0.01), (0.21, 0.11, 0.01215)],
        )
    }

    fn nd_truth() -> MixingMeasure {
        measure(
            &[THIRD; 3],
            &[(0.2, 0.1, 0.01), (0.1, 0.4, 0.25), (1.1, 0.3, 0.25)],
        )
    }

    #[test]
    fn classify_simulation_settings() {
        let info = classify_regime(&nd_truth(), Some(&nd_g0()), DEFAULT_MATCH_TOL).unwrap();
        assert_eq!(info.k_bar, 1);
        assert_eq!(info.matching, vec![(0, 0)]);
        assert_eq!(info.regime, Regime::PartialOverlap(1));

        let full = classify_regime(&nd_g0(), Some(&nd_g0()), DEFAULT_MATCH_TOL).unwrap();
        assert_eq!(full.k_bar, 3);
        assert_eq!(full.regime, Regime::FullOverlap);

        let g0 = measure(&[0.5, 0.5], &[(0.2, 0.1, 0.01), (0.1, 0.0, 0.01)]);
        let truth = measure(&[1.0], &[(1.0, 1.0, 1.0)]);
        let dist = classify_regime(&truth, Some(&g0), DEFAULT_MATCH_TOL).unwrap();
        assert_eq!(dist.k_bar, 0);
        assert_eq!(dist.regime, Regime::Distinguishable);
        assert_eq!(
            classify_regime(&truth, None, 1e-9).unwrap().regime,
            Regime::Distinguishable
        );
        assert!(classify_regime(&truth, None, 0.0).is_err());
    }

    #[test]
    fn regime_string_form() {
        for r in [
            Regime::Distinguishable,
            Regime::PartialOverlap(2),
            Regime::FullOverlap,
        ] {
            let s = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<Regime>(&s).unwrap(), r);
        }
        assert_eq!(
            serde_json::to_string(&Regime::PartialOverlap(1)).unwrap(),
            "\"PartialOverlap(1)\""
        );
    }

    #[test]
    fn assign_cells_examples() {
        let g = measure(&[0.5, 0.5], &[(1.0, 5.0, 1.0), (-3.0, 0.0, 2.0)]);
        let one = assign_cells(&g, &[atom(0.0, 0.0, 1.0)]).unwrap();
        assert_eq!(one.cells, vec![vec![0, 1]]);

        let mid = measure(&[1.0], &[(0.0, 0.0, 1.0)]);
        let tie = assign_cells(&mid, &[atom(0.0, 1.0, 1.0), atom(0.0, -1.0, 1.0)]).unwrap();
        assert_eq!(tie.cell_of, vec![0]);

        let near = measure(&[0.5, 0.5], &[(1.02, 0.97, 1.01), (0.99, 1.04, 0.98)]);
        let cells = assign_cells(&near, &[atom(1.0, 1.0, 1.0)]).unwrap();
        assert_eq!(cells.cardinality(0), 2);
    }

    #[test]
    fn d1_examples() {
        let rbar = RBarTable::default();
        let truth = nd_truth();
        let zero = loss_d1(0.5, &truth, 0.5, &truth, &rbar).unwrap();
        assert_eq!(zero.value, 0.0);

        let star = measure(&[1.0], &[(0.3, -0.2, 0.7)]);
        let delta = 1e-2;
        let shifted = measure(&[1.0], &[(0.3 + delta, -0.2, 0.7)]);
        let r = loss_d1(1.0, &shifted, 1.0, &star, &rbar).unwrap();
        assert!((r.value - 2.0 * delta).abs() < 1e-15);

        let split = measure(
            &[0.5, 0.5],
            &[(0.3, -0.2 + delta, 0.7), (0.3, -0.2 - delta, 0.7)],
        );
        let r = loss_d1(1.0, &split, 1.0, &star, &rbar).unwrap();
        assert!((r.value - 2.0 * delta.powi(4)).abs() < 1e-20);
        assert_eq!(r.cell_sizes, vec![2]);
        let sum: f64 = r.terms.iter().map(|t| t.value).sum();
        assert_eq!(sum, r.value);
    }

    #[test]
    fn d1_rejects_unknown_exponent() {
        let star = measure(&[1.0], &[(0.0, 0.0, 1.0)]);
        let four = measure(
            &[0.25; 4],
            &[
                (0.0, 0.1, 1.0),
                (0.0, -0.1, 1.0),
                (0.1, 0.0, 1.0),
                (-0.1, 0.0, 1.0),
            ],
        );
        match loss_d1(1.0, &four, 1.0, &star, &RBarTable::default()) {
            Err(Error::UnsupportedCellSize { cardinality }) => assert_eq!(cardinality, 4),
            other => panic!("unexpected {other:?}"),
        }
        let with_fallback = RBarTable {
            fallback_exponent: Some(7),
        };
        assert!(loss_d1(1.0, &four, 1.0, &star, &with_fallback).is_ok());
    }

    #[test]
    fn d3_examples() {
        let rbar = RBarTable::default();
        let g = nd_truth();
        assert_eq!(loss_d3(&g, &g, &rbar).unwrap().value, 0.0);

        let delta = 0.03;
        let reference = measure(&[1.0], &[(0.5, 0.5, 1.0)]);
        let shifted = measure(&[1.0], &[(0.5, 0.5, 1.0 + delta)]);
        assert!((loss_d3(&shifted, &reference, &rbar).unwrap().value - delta).abs() < 1e-15);

        let three = measure(
            &[THIRD; 3],
            &[
                (0.5, 0.5 + delta, 1.0),
                (0.5, 0.5 - delta, 1.0),
                (0.5, 0.5, 1.0),
            ],
        );
        let r = loss_d3(&three, &reference, &rbar).unwrap();
        let expected = 2.0 * THIRD * delta.powi(6);
        assert!((r.value - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn overline_g_examples() {
        let g0 = nd_g0();
        let truth = nd_truth();
        let info = classify_regime(&truth, Some(&g0), DEFAULT_MATCH_TOL).unwrap();
        assert_eq!(overline_g(0.5, 0.5, &g0, &truth, &info).unwrap(), truth);

        let bar = overline_g(0.75, 0.5, &g0, &truth, &info).unwrap();
        assert_eq!(bar.len(), 5);
        let shared = THIRD * THIRD + 2.0 * THIRD * THIRD;
        assert!((bar.weights()[0] - shared).abs() < 1e-15);
        assert!((bar.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(bar.atoms()[0], truth.atoms()[0]);

        let full = classify_regime(&truth, Some(&truth), DEFAULT_MATCH_TOL).unwrap();
        let same = overline_g(1.0, 0.5, &truth, &truth, &full).unwrap();
        for (w, w0) in same.weights().iter().zip(truth.weights()) {
            assert!((w - w0).abs() < 1e-15);
        }
        assert!(matches!(
            overline_g(0.25, 0.5, &g0, &truth, &info),
            Err(Error::InvalidProportion { .. })
        ));
    }

    #[test]
    fn d2_branches() {
        let rbar = RBarTable::default();
        let g0 = nd_g0();
        let truth = nd_truth();
        let info = classify_regime(&truth, Some(&g0), DEFAULT_MATCH_TOL).unwrap();
        let four = measure(
            &[0.25; 4],
            &[
                (0.2, 0.1, 0.01),
                (0.1, 0.41, 0.25),
                (1.1, 0.3, 0.26),
                (1.05, 0.3, 0.25),
            ],
        );
        for &lambda in &[0.3, 0.5, 0.8] {
            let d2 = loss_d2(lambda, &four, 0.5, &truth, &g0, &info, &rbar).unwrap();
            let d1 = loss_d1(lambda, &four, 0.5, &truth, &rbar).unwrap();
            assert_eq!(d2.value, d1.value);
            assert_eq!(d2.branch, LossBranch::D1);
            assert_eq!(d2.regime, Some(Regime::PartialOverlap(1)));
        }

        let bar = overline_g(0.75, 0.5, &g0, &truth, &info).unwrap();
        let mut atoms = bar.atoms().to_vec();
        atoms[1].b += 0.01;
        let five = MixingMeasure::new(bar.weights().to_vec(), atoms).unwrap();
        let d2 = loss_d2(0.75, &five, 0.5, &truth, &g0, &info, &rbar).unwrap();
        assert_eq!(d2.branch, LossBranch::D3AgainstBar);
        let hand = bar.weights()[1] * 0.01;
        assert!((d2.value - hand).abs() < 1e-15);
        // at lambda = lambda* the indicator picks D1
        let at = loss_d2(0.5, &five, 0.5, &truth, &g0, &info, &rbar).unwrap();
        assert_eq!(at.branch, LossBranch::D1);
    }

    fn full_pair(p0: &[f64], p_star: &[f64]) -> (MixingMeasure, MixingMeasure, OverlapInfo) {
        let atoms: Vec<(f64, f64, f64)> = (0..p0.len())
            .map(|i| (0.1 * i as f64, 1.0 - 0.5 * i as f64, 0.5 + 0.1 * i as f64))
            .collect();
        let g0 = measure(p0, &atoms);
        let g_star = measure(p_star, &atoms);
        let info = classify_regime(&g_star, Some(&g0), DEFAULT_MATCH_TOL).unwrap();
        assert_eq!(info.regime, Regime::FullOverlap);
        (g0, g_star, info)
    }

    #[test]
    fn proportion_sets_examples() {
        let (g0, g_star, info) = full_pair(&[0.5, 0.5], &[0.1, 0.9]);
        for &lambda in &[0.5, 0.7, 1.0] {
            let s = proportion_set_membership(lambda, 0.5, &g0, &g_star, &info).unwrap();
            assert!(s.in_t);
            assert!(s.violations.is_empty());
        }
        let s = proportion_set_membership(0.3, 0.5, &g0, &g_star, &info).unwrap();
        assert!(!s.in_t);
        assert_eq!(s.violations, vec![0]);

        let zero = proportion_set_membership(0.0, 0.5, &g0, &g_star, &info).unwrap();
        assert!(!zero.in_t);
        assert_eq!(zero.violations, vec![0]);
    }

    #[test]
    fn ratio_independence_examples() {
        let (g0, g_star, info) = full_pair(&[0.4, 0.2, 0.4], &[0.2, 0.1, 0.7]);
        assert!(is_ratio_independent(&[1], &g0, &g_star, &info));
        assert!(is_ratio_independent(&[0, 1], &g0, &g_star, &info));
        let (g0, g_star, info) = full_pair(&[0.4, 0.2, 0.4], &[0.2, 0.15, 0.65]);
        assert!(!is_ratio_independent(&[0, 1], &g0, &g_star, &info));
    }

    #[test]
    fn infinite_ratios_compare_equal() {
        // g0 atoms without a truth partner have p* = 0
        let g0 = measure(
            &[0.5, 0.3, 0.2],
            &[(0.0, 0.0, 1.0), (0.0, 3.0, 1.0), (0.0, -3.0, 1.0)],
        );
        let g_star = measure(&[1.0], &[(0.0, 0.0, 1.0)]);
        let info = classify_regime(&g_star, Some(&g0), DEFAULT_MATCH_TOL).unwrap();
        assert!(is_ratio_independent(&[1, 2], &g0, &g_star, &info));
        assert!(!is_ratio_independent(&[0, 1], &g0, &g_star, &info));
    }

    #[test]
    fn tilde_g_examples() {
        let (g0, g_star, info) = full_pair(&[0.8, 0.2], &[0.1, 0.9]);
        let sets = proportion_set_membership(0.2, 0.5, &g0, &g_star, &info).unwrap();
        assert_eq!(sets.violations, vec![0]);
        let (tilde, s) = tilde_g(0.2, 0.5, &g0, &g_star, &info, &sets.violations).unwrap();
        assert!((s - 0.39).abs() < 1e-15);
        assert_eq!(tilde.len(), 1);
        assert_eq!(tilde.weights(), &[1.0]);
        assert_eq!(tilde.atoms()[0], g_star.atoms()[1]);

        let (tilde, s) = tilde_g(0.7, 0.5, &g0, &g_star, &info, &[]).unwrap();
        let bar = overline_g(0.7, 0.5, &g0, &g_star, &info).unwrap();
        assert!((s - 0.7).abs() < 1e-15);
        for (w, wb) in tilde.weights().iter().zip(bar.weights()) {
            assert!((w - wb).abs() < 1e-15);
        }
    }

    #[test]
    fn d4_branches() {
        let rbar = RBarTable::default();
        let (g0, g_star, info) = full_pair(&[0.8, 0.2], &[0.1, 0.9]);

        let bar = overline_g(0.7, 0.5, &g0, &g_star, &info).unwrap();
        let shifted = {
            let mut atoms = bar.atoms().to_vec();
            atoms[0].sigma += 0.02;
            MixingMeasure::new(bar.weights().to_vec(), atoms).unwrap()
        };
        let d4 = loss_d4(0.7, &shifted, 0.5, &g_star, &g0, &info, &rbar).unwrap();
        let d3 = loss_d3(&shifted, &bar, &rbar).unwrap();
        assert_eq!(d4.branch, LossBranch::D3AgainstBar);
        assert_eq!(d4.value, d3.value);

        let (tilde, _) = tilde_g(0.2, 0.5, &g0, &g_star, &info, &[0]).unwrap();
        let d4 = loss_d4(0.2, &tilde, 0.5, &g_star, &g0, &info, &rbar).unwrap();
        assert_eq!(d4.branch, LossBranch::D3AgainstTilde);
        assert_eq!(d4.value, 0.0);

        let (g0, g_star, info) = full_pair(&[0.4, 0.2, 0.4], &[0.2, 0.15, 0.65]);
        let sets = proportion_set_membership(0.1, 0.5, &g0, &g_star, &info).unwrap();
        assert_eq!(sets.violations, vec![0, 1]);
        let d4 = loss_d4(0.1, &g_star, 0.5, &g_star, &g0, &info, &rbar).unwrap();
        assert_eq!(d4.branch, LossBranch::NegativeMass);
        // -(0.5 * 0.2 - 0.4 * 0.4) - (0.5 * 0.15 - 0.4 * 0.2)
        assert!((d4.value - 0.065).abs() < 1e-15);

        assert!(matches!(
            loss_d4(0.5, &g0, 0.5, &g0, &g0, &info, &rbar),
            Err(Error::InvalidConfiguration(_))
        ));
        let at_zero = loss_d4(0.0, &g_star, 0.5, &g_star, &g0, &info, &rbar).unwrap();
        assert!(!at_zero.notes.is_empty());
    }

    #[test]
    fn vanishing_examples() {
        let rbar = RBarTable::default();
        let g0 = measure(&[1.0], &[(0.0, 0.0, 1.0)]);
        for dist in [true, false] {
            let r = loss_vanishing(0.0, Some(&g0), Some(&g0), dist, &rbar).unwrap();
            assert_eq!(r.value, 0.0);
        }
        let r = loss_vanishing(0.1, None, None, true, &rbar).unwrap();
        assert_eq!(r.value, 0.1);
        assert_eq!(r.branch, LossBranch::VanishingLambda);
        let delta = 0.04;
        let g_hat = measure(&[1.0], &[(0.0, 0.0, 1.0 + delta)]);
        let r = loss_vanishing(0.2, Some(&g_hat), Some(&g0), false, &rbar).unwrap();
        assert!((r.value - 0.2 * delta).abs() < 1e-15);
        assert_eq!(r.branch, LossBranch::VanishingLambdaTimesD3);
        assert!(matches!(
            loss_vanishing(0.2, Some(&g_hat), None, false, &rbar),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn report_json_uses_string_enums() {
        let truth = nd_truth();
        let r = loss_d2(
            0.5,
            &truth,
            0.5,
            &truth,
            &nd_g0(),
            &classify_regime(&truth, Some(&nd_g0()), 1e-9).unwrap(),
            &RBarTable::default(),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["branch"], "d1");
        assert_eq!(v["regime"], "PartialOverlap(1)");
    }
}
