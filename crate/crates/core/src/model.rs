//! Domain types and density evaluation for the deviated Gaussian mixture of
//! experts
//!
//! ```text
//! p(y | x) = (1 - lambda) g0(y | x) + lambda * sum_i p_i f(y | a_i' x + b_i, sigma_i)
//! ```
//!
//! where `f(. | mu, sigma)` is the univariate Gaussian density with mean `mu`
//! and **variance** `sigma`. The reference density `g0` is itself represented
//! as a Gaussian mixture of experts (a single atom with weight one covers the
//! plain-expert case).

use std::io::{Read, Write};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tolerance on `sum(weights) == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// One expert: mean `a' x + b`, variance `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub a: Vec<f64>,
    pub b: f64,
    pub sigma: f64,
}

impl Atom {
    pub fn new(a: Vec<f64>, b: f64, sigma: f64) -> Result<Self> {
        let atom = Atom { a, b, sigma };
        atom.validate()?;
        Ok(atom)
    }

    /// Convenience constructor for one-dimensional covariates.
    pub fn scalar(a: f64, b: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![a], b, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        for &v in &self.a {
            ensure_finite("atom slope", v)?;
        }
        ensure_finite("atom intercept", self.b)?;
        ensure_finite("atom variance", self.sigma)?;
        if self.sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "atom variance must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    #[inline]
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.b
    }

    /// Parameters flattened as `(a_1, .., a_d, b, sigma)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut v = self.a.clone();
        v.push(self.b);
        v.push(self.sigma);
        v
    }

    /// Euclidean distance between the concatenated `(a, b, sigma)` vectors.
    pub fn distance(&self, other: &Atom) -> f64 {
        let da: f64 = self
            .a
            .iter()
            .zip(&other.a)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let db = self.b - other.b;
        let ds = self.sigma - other.sigma;
        (da + db * db + ds * ds).sqrt()
    }

    #[inline]
    pub(crate) fn log_density_at_mean(&self, mu: f64, y: f64) -> f64 {
        gaussian_log_pdf(y, mu, self.sigma)
    }
}

#[inline]
pub(crate) fn gaussian_log_pdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let r = y - mu;
    -0.5 * (LN_2PI + sigma.ln()) - r * r / (2.0 * sigma)
}

#[inline]
pub(crate) fn gaussian_pdf(y: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_log_pdf(y, mu, sigma).exp()
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// A finite mixing measure `sum_i p_i delta_{(a_i, b_i, sigma_i)}`.
///
/// Weights are non-negative and sum to one; all atoms share the covariate
/// dimension. Zero weights are tolerated so that boundary cases of the
/// combined limit measures stay representable; estimation candidates are
/// additionally checked against a floor with [`MixingMeasure::check_floor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureDoc", into = "MixtureDoc")]
pub struct MixingMeasure {
    weights: Vec<f64>,
    atoms: Vec<Atom>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureDoc {
    weights: Vec<f64>,
    atoms: Vec<Atom>,
}

impl TryFrom<MixtureDoc> for MixingMeasure {
    type Error = Error;

    fn try_from(doc: MixtureDoc) -> Result<Self> {
        MixingMeasure::new(doc.weights, doc.atoms)
    }
}

impl From<MixingMeasure> for MixtureDoc {
    fn from(m: MixingMeasure) -> Self {
        MixtureDoc {
            weights: m.weights,
            atoms: m.atoms,
        }
    }
}

impl MixingMeasure {
    pub fn new(weights: Vec<f64>, atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput("mixing measure has no atoms".into()));
        }
        if weights.len() != atoms.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} atoms",
                weights.len(),
                atoms.len()
            )));
        }
        let d = atoms[0].dim();
        for atom in &atoms {
            atom.validate()?;
            if atom.dim() != d {
                return Err(Error::InvalidInput(format!(
                    "atoms have mixed covariate dimensions {} and {}",
                    d,
                    atom.dim()
                )));
            }
        }
        for &w in &weights {
            ensure_finite("weight", w)?;
            if w < 0.0 {
                return Err(Error::InvalidInput(format!("negative weight {w}")));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(MixingMeasure { weights, atoms })
    }

    /// Normalizes the given non-negative weights before construction.
    pub fn normalized(weights: Vec<f64>, atoms: Vec<Atom>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput(format!(
                "cannot normalize weights with total {total}"
            )));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect(), atoms)
    }

    pub fn single(atom: Atom) -> Result<Self> {
        Self::new(vec![1.0], vec![atom])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Atom)> {
        self.weights.iter().copied().zip(&self.atoms)
    }

    /// Reorders atoms (with their weights) so that position `i` holds the
    /// old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidInput("not a permutation".into()));
            }
        }
        Ok(MixingMeasure {
            weights: perm.iter().map(|&p| self.weights[p]).collect(),
            atoms: perm.iter().map(|&p| self.atoms[p].clone()).collect(),
        })
    }

    /// Checks membership in the constrained class with weight floor `xi`.
    pub fn check_floor(&self, xi: f64) -> Result<()> {
        match self.weights.iter().position(|&w| w < xi) {
            Some(i) => Err(Error::InvalidInput(format!(
                "weight {} of atom {} is below the floor {}",
                self.weights[i], i, xi
            ))),
            None => Ok(()),
        }
    }

    pub fn log_density(&self, x: &[f64], y: f64) -> f64 {
        let terms: Vec<f64> = self
            .iter()
            .map(|(w, atom)| w.ln() + atom.log_density_at_mean(atom.mean(x), y))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, x: &[f64], y: f64) -> f64 {
        self.iter()
            .map(|(w, atom)| w * gaussian_pdf(y, atom.mean(x), atom.sigma))
            .sum()
    }
}

/// `(1 - lambda) g0 + lambda * p_G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct DeviatedModel {
    lambda: f64,
    mixture: MixingMeasure,
    g0: MixingMeasure,
}

/// `g0` may be written either as a mixture document or as a bare atom.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ReferenceDoc {
    Mixture(MixingMeasure),
    Atom(Atom),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    lambda: f64,
    mixture: MixingMeasure,
    g0: ReferenceDoc,
}

impl TryFrom<ModelDoc> for DeviatedModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let g0 = match doc.g0 {
            ReferenceDoc::Mixture(m) => m,
            ReferenceDoc::Atom(a) => MixingMeasure::single(a)?,
        };
        DeviatedModel::new(doc.lambda, doc.mixture, g0)
    }
}

impl From<DeviatedModel> for ModelDoc {
    fn from(m: DeviatedModel) -> Self {
        ModelDoc {
            lambda: m.lambda,
            mixture: m.mixture,
            g0: ReferenceDoc::Mixture(m.g0),
        }
    }
}

impl DeviatedModel {
    pub fn new(lambda: f64, mixture: MixingMeasure, g0: MixingMeasure) -> Result<Self> {
        ensure_finite("lambda", lambda)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        if mixture.dim() != g0.dim() {
            return Err(Error::InvalidInput(format!(
                "mixture dimension {} differs from g0 dimension {}",
                mixture.dim(),
                g0.dim()
            )));
        }
        Ok(DeviatedModel {
            lambda,
            mixture,
            g0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mixture(&self) -> &MixingMeasure {
        &self.mixture
    }

    pub fn g0(&self) -> &MixingMeasure {
        &self.g0
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(lambda, self.mixture.clone(), self.g0.clone())
    }

    pub fn log_density(&self, x: &[f64], y: f64) -> f64 {
        let mut terms = Vec::with_capacity(2);
        if self.lambda < 1.0 {
            terms.push((1.0 - self.lambda).ln() + self.g0.log_density(x, y));
        }
        if self.lambda > 0.0 {
            terms.push(self.lambda.ln() + self.mixture.log_density(x, y));
        }
        log_sum_exp(&terms)
    }

    pub fn density(&self, x: &[f64], y: f64) -> f64 {
        (1.0 - self.lambda) * self.g0.density(x, y) + self.lambda * self.mixture.density(x, y)
    }

    /// `(weight, mean, variance)` of every component of `p(. | x)` with
    /// positive weight.
    pub fn conditional_components(&self, x: &[f64]) -> Vec<(f64, f64, f64)> {
        self.components()
            .filter(|c| c.0 > 0.0)
            .map(|(w, a)| (w, a.mean(x), a.sigma))
            .collect()
    }

    /// Components of the latent `(k0 + k)`-way mixture: all g0 atoms scaled by
    /// `1 - lambda` followed by the fitted atoms scaled by `lambda`.
    fn components(&self) -> impl Iterator<Item = (f64, &Atom)> {
        let l = self.lambda;
        self.g0
            .iter()
            .map(move |(w, a)| ((1.0 - l) * w, a))
            .chain(self.mixture.iter().map(move |(w, a)| (l * w, a)))
    }
}

fn check_point(x: &[f64], y: f64) -> Result<()> {
    for &v in x {
        ensure_finite("covariate", v)?;
    }
    ensure_finite("response", y)
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::InvalidInput(format!(
            "covariate has dimension {}, expected {}",
            x.len(),
            expected
        )));
    }
    Ok(())
}

/// `(2 pi sigma)^{-1/2} exp(-(y - a'x - b)^2 / (2 sigma))`.
pub fn expert_density(atom: &Atom, x: &[f64], y: f64) -> Result<f64> {
    atom.validate()?;
    check_point(x, y)?;
    check_dim(atom.dim(), x)?;
    Ok(gaussian_pdf(y, atom.mean(x), atom.sigma))
}

pub fn mixture_density(g: &MixingMeasure, x: &[f64], y: f64) -> Result<f64> {
    check_point(x, y)?;
    check_dim(g.dim(), x)?;
    Ok(g.density(x, y))
}

pub fn deviated_density(m: &DeviatedModel, x: &[f64], y: f64) -> Result<f64> {
    check_point(x, y)?;
    check_dim(m.dim(), x)?;
    Ok(m.density(x, y))
}

/// Covariate design; the default is the d-dimensional standard normal.
pub trait CovariateSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct StandardNormalCovariates {
    pub dim: usize,
}

impl CovariateSampler for StandardNormalCovariates {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }
}

/// `n` observations with `d` covariates each.
///
/// Covariates are stored column-major (`covariates[j * n + i]` is coordinate
/// `j` of observation `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    covariates: Vec<f64>,
    responses: Vec<f64>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn from_columns(dim: usize, covariates: Vec<f64>, responses: Vec<f64>) -> Result<Self> {
        let n = responses.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        if covariates.len() != n * dim {
            return Err(Error::InvalidInput(format!(
                "{} covariate values for {} rows of dimension {}",
                covariates.len(),
                n,
                dim
            )));
        }
        for &v in covariates.iter().chain(&responses) {
            ensure_finite("dataset entry", v)?;
        }
        Ok(Dataset {
            dim,
            covariates,
            responses,
            seed: None,
        })
    }

    pub fn from_rows(rows: &[(Vec<f64>, f64)]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        let dim = rows[0].0.len();
        let mut cov = vec![0.0; n * dim];
        for (i, (x, _)) in rows.iter().enumerate() {
            check_dim(dim, x)?;
            for (j, &v) in x.iter().enumerate() {
                cov[j * n + i] = v;
            }
        }
        Self::from_columns(dim, cov, rows.iter().map(|r| r.1).collect())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Column `j` of the covariate matrix.
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.len();
        &self.covariates[j * n..(j + 1) * n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.dim).map(|j| self.column(j)[i]).collect()
    }

    /// `a' x_i + b` for every row.
    pub fn means(&self, atom: &Atom) -> Vec<f64> {
        let mut mu = vec![atom.b; self.len()];
        for (j, &aj) in atom.a.iter().enumerate() {
            for (m, &x) in mu.iter_mut().zip(self.column(j)) {
                *m += aj * x;
            }
        }
        mu
    }

    /// Concatenates `other` below `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(Error::InvalidInput("dimension mismatch".into()));
        }
        let mut cov = Vec::with_capacity(self.covariates.len() + other.covariates.len());
        for j in 0..self.dim {
            cov.extend_from_slice(self.column(j));
            cov.extend_from_slice(other.column(j));
        }
        let mut resp = self.responses.clone();
        resp.extend_from_slice(&other.responses);
        Dataset::from_columns(self.dim, cov, resp)
    }

    /// CSV with header `x1,..,xd,y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = (0..self.dim)
                .map(|j| format!("{:?}", self.column(j)[i]))
                .collect();
            rec.push(format!("{:?}", self.responses[i]));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let ncol = headers.len();
        if ncol < 2 || &headers[ncol - 1] != "y" {
            return Err(Error::InvalidInput(
                "dataset CSV must have header x1,..,xd,y".into(),
            ));
        }
        for (j, h) in headers.iter().take(ncol - 1).enumerate() {
            if h != format!("x{}", j + 1) {
                return Err(Error::InvalidInput(format!(
                    "unexpected CSV column {h:?} at position {}",
                    j + 1
                )));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("bad CSV number {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            rows.push((vals[..ncol - 1].to_vec(), vals[ncol - 1]));
        }
        Self::from_rows(&rows)
    }
}

/// Draws `n` observations from `m` with covariates from `sampler`.
pub fn sample_dataset(
    m: &DeviatedModel,
    sampler: &dyn CovariateSampler,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let d = m.dim();
    if sampler.dim() != d {
        return Err(Error::InvalidInput(format!(
            "sampler dimension {} does not match model dimension {}",
            sampler.dim(),
            d
        )));
    }
    let mut rng = rng::stream(seed, 0);
    let components: Vec<(f64, &Atom)> = m.components().collect();
    let mut cov = vec![0.0; n * d];
    let mut resp = Vec::with_capacity(n);
    let mut x = vec![0.0; d];
    for i in 0..n {
        sampler.sample(&mut rng, &mut x);
        for (j, &v) in x.iter().enumerate() {
            cov[j * n + i] = v;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = components.last().map(|c| c.1).unwrap_or(components[0].1);
        for &(w, atom) in &components {
            acc += w;
            if u < acc {
                chosen = atom;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        resp.push(chosen.mean(&x) + chosen.sigma.sqrt() * z);
    }
    let mut data = Dataset::from_columns(d, cov, resp)?;
    data.seed = Some(seed);
    Ok(data)
}

/// Log-likelihood with the indices of points whose density is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    pub zero_density: Vec<usize>,
}

pub fn log_likelihood(m: &DeviatedModel, data: &Dataset) -> Result<LogLikelihood> {
    if data.dim() != m.dim() {
        return Err(Error::InvalidInput(format!(
            "dataset dimension {} does not match model dimension {}",
            data.dim(),
            m.dim()
        )));
    }
    let comps: Vec<(f64, &Atom)> = m.components().filter(|c| c.0 > 0.0).collect();
    let means: Vec<Vec<f64>> = comps.iter().map(|(_, a)| data.means(a)).collect();
    let mut value = 0.0;
    let mut zero_density = Vec::new();
    let mut terms = vec![0.0; comps.len()];
    for (i, &y) in data.responses().iter().enumerate() {
        for (c, ((w, atom), mu)) in comps.iter().zip(&means).enumerate() {
            terms[c] = w.ln() + atom.log_density_at_mean(mu[i], y);
        }
        let lp = log_sum_exp(&terms);
        if lp == f64::NEG_INFINITY {
            zero_density.push(i);
        }
        value += lp;
    }
    Ok(LogLikelihood {
        value,
        zero_density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g0_distinguishable() -> MixingMeasure {
        MixingMeasure::new(
            vec![0.5, 0.5],
            vec![
                Atom::scalar(0.2, 0.1, 0.01).unwrap(),
                Atom::scalar(0.1, 0.0, 0.01).unwrap(),
            ],
        )
        .unwrap()
    }

    fn truth() -> DeviatedModel {
        DeviatedModel::new(
            0.5,
            MixingMeasure::single(Atom::scalar(1.0, 1.0, 1.0).unwrap()).unwrap(),
            g0_distinguishable(),
        )
        .unwrap()
    }

    #[test]
    fn expert_density_examples() {
        let std = Atom::scalar(0.0, 0.0, 1.0).unwrap();
        let peak = expert_density(&std, &[0.0], 0.0).unwrap();
        assert!((peak - 0.398_942_280_401_432_7).abs() < 1e-15);
        let up = expert_density(&std, &[0.0], 3.0).unwrap();
        let down = expert_density(&std, &[0.0], -3.0).unwrap();
        assert_eq!(up, down);
        let atom = Atom::scalar(1.0, 1.0, 1.0).unwrap();
        let v = expert_density(&atom, &[0.5], 1.5).unwrap();
        assert!((v - peak).abs() < 1e-15);
    }

    #[test]
    fn expert_density_rejects_non_finite() {
        let std = Atom::scalar(0.0, 0.0, 1.0).unwrap();
        assert!(expert_density(&std, &[f64::NAN], 0.0).is_err());
        assert!(expert_density(&std, &[0.0], f64::INFINITY).is_err());
        assert!(Atom::scalar(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn mixture_density_examples() {
        let atom = Atom::scalar(0.3, -0.2, 0.7).unwrap();
        let single = MixingMeasure::single(atom.clone()).unwrap();
        let twice = MixingMeasure::new(vec![0.5, 0.5], vec![atom.clone(), atom.clone()]).unwrap();
        for &(x, y) in &[(0.0, 0.0), (1.3, -0.4), (-2.0, 1.0)] {
            let e = expert_density(&atom, &[x], y).unwrap();
            assert!((mixture_density(&single, &[x], y).unwrap() - e).abs() < 1e-15);
            assert!((mixture_density(&twice, &[x], y).unwrap() - e).abs() < 1e-15);
        }
        // two-term hand sum at x = 0, y = 0
        let c = 1.0 / (2.0 * std::f64::consts::PI * 0.01).sqrt();
        let hand = 0.5 * c * (-0.01f64 / 0.02).exp() + 0.5 * c;
        let v = mixture_density(&g0_distinguishable(), &[0.0], 0.0).unwrap();
        assert!((v - hand).abs() < 1e-12 * hand);
        assert!(MixingMeasure::new(vec![], vec![]).is_err());
    }

    #[test]
    fn deviated_density_endpoints_and_midpoint() {
        let m = truth();
        let x = [0.4];
        for &y in &[-0.5, 0.1, 1.4, 3.0] {
            let g0 = m.g0().density(&x, y);
            let pg = m.mixture().density(&x, y);
            let at0 = deviated_density(&m.with_lambda(0.0).unwrap(), &x, y).unwrap();
            let at1 = deviated_density(&m.with_lambda(1.0).unwrap(), &x, y).unwrap();
            let mid = deviated_density(&m, &x, y).unwrap();
            assert_eq!(at0, g0);
            assert_eq!(at1, pg);
            assert!((mid - 0.5 * (g0 + pg)).abs() < 1e-14 * (g0 + pg));
            assert!(mid >= g0.min(pg) && mid <= g0.max(pg));
        }
    }

    #[test]
    fn sample_dataset_is_deterministic_and_rejects_empty() {
        let m = truth();
        let s = StandardNormalCovariates { dim: 1 };
        let a = sample_dataset(&m, &s, 50, 7).unwrap();
        let b = sample_dataset(&m, &s, 50, 7).unwrap();
        let c = sample_dataset(&m, &s, 50, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.responses(), c.responses());
        assert!(sample_dataset(&m, &s, 0, 7).is_err());
    }

    #[test]
    fn standard_normal_sample_mean() {
        let m = DeviatedModel::new(
            1.0,
            MixingMeasure::single(Atom::scalar(0.0, 0.0, 1.0).unwrap()).unwrap(),
            g0_distinguishable(),
        )
        .unwrap();
        let data = sample_dataset(&m, &StandardNormalCovariates { dim: 1 }, 100_000, 3).unwrap();
        let n = data.len() as f64;
        let mean = data.responses().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * 10f64.powf(-2.5));
        let var = data
            .responses()
            .iter()
            .map(|y| (y - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn log_likelihood_examples() {
        let single = DeviatedModel::new(
            1.0,
            MixingMeasure::single(Atom::scalar(0.0, 0.0, 1.0).unwrap()).unwrap(),
            g0_distinguishable(),
        )
        .unwrap();
        let one = Dataset::from_rows(&[(vec![0.0], 0.0)]).unwrap();
        let ll = log_likelihood(&single, &one).unwrap();
        assert!((ll.value - (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-14);
        assert!(ll.zero_density.is_empty());

        let m = truth();
        let rows = vec![
            (vec![0.3], 0.15),
            (vec![-1.2], 0.9),
            (vec![2.0], 2.7),
            (vec![0.0], 0.02),
            (vec![-0.5], -0.1),
        ];
        let data = Dataset::from_rows(&rows).unwrap();
        let ll = log_likelihood(&m, &data).unwrap().value;
        // naive oracle: direct density sum, then log
        let naive: f64 = rows
            .iter()
            .map(|(x, y)| {
                let g0: f64 = [(0.2, 0.1), (0.1, 0.0)]
                    .iter()
                    .map(|&(a, b)| {
                        let mu = a * x[0] + b;
                        0.5 * (-(y - mu) * (y - mu) / 0.02).exp()
                            / (2.0 * std::f64::consts::PI * 0.01).sqrt()
                    })
                    .sum();
                let mu = x[0] + 1.0;
                let pg = (-(y - mu) * (y - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
                (0.5 * g0 + 0.5 * pg).ln()
            })
            .sum();
        assert!((ll - naive).abs() < 1e-12);

        let doubled = data.concat(&data).unwrap();
        let ll2 = log_likelihood(&m, &doubled).unwrap().value;
        assert!((ll2 - 2.0 * ll).abs() < 1e-12 * ll.abs());
    }

    #[test]
    fn json_round_trip_and_bare_atom_g0() {
        let m = truth();
        let s = serde_json::to_string(&m).unwrap();
        let back: DeviatedModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let doc = r#"{"lambda": 0.2,
            "mixture": {"weights": [1.0], "atoms": [{"a": [1.0], "b": 0.0, "sigma": 1.0}]},
            "g0": {"a": [0.0], "b": 0.0, "sigma": 2.0}}"#;
        let m: DeviatedModel = serde_json::from_str(doc).unwrap();
        assert_eq!(m.g0().len(), 1);
        let bad = r#"{"lambda": 1.5,
            "mixture": {"weights": [1.0], "atoms": [{"a": [1.0], "b": 0.0, "sigma": 1.0}]},
            "g0": {"a": [0.0], "b": 0.0, "sigma": 2.0}}"#;
        assert!(serde_json::from_str::<DeviatedModel>(bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let data = sample_dataset(&truth(), &StandardNormalCovariates { dim: 1 }, 20, 1).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x1,y\n"));
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.responses(), data.responses());
        assert_eq!(back.column(0), data.column(0));
    }
}
