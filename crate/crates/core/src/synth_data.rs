//! Labeled 2-D Gaussian mixtures standing in for concept-conditioned data.
//!
//! Concepts are angular positions and contexts are radii: the mode for
//! `(concept k, context c)` sits at `r_c (cos θ_k, sin θ_k)` with
//! `θ_k = 2πk/K` and `r_c = radius_base (1 + c/2)`. Every mode shares one
//! isotropic standard deviation, which keeps the Bayes posterior exact and
//! cheap to evaluate.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::util::{self, fmt_f64, log_sum_exp};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub n_concepts: usize,
    pub n_contexts: usize,
    /// Mode centers indexed by `concept * n_contexts + context`.
    pub centers: Vec<Point>,
    pub std: f64,
    /// Mode probabilities, same indexing as `centers`.
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// Build a spec from explicit parts, validating every invariant.
    pub fn from_parts(
        n_concepts: usize,
        n_contexts: usize,
        centers: Vec<Point>,
        std: f64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            n_concepts,
            n_contexts,
            centers,
            std,
            weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 || self.n_contexts == 0 {
            return Err(Error::invalid("mixture needs at least one concept and one context"));
        }
        let n_modes = self.n_modes();
        if self.centers.len() != n_modes || self.weights.len() != n_modes {
            return Err(Error::invalid(format!(
                "expected {n_modes} centers and weights, got {} and {}",
                self.centers.len(),
                self.weights.len()
            )));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::invalid(format!("mode std must be positive, got {}", self.std)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("mode weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mode weights sum to {total}, not 1")));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mode centers must be finite"));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.n_concepts * self.n_contexts
    }

    pub fn mode_index(&self, concept: usize, context: usize) -> usize {
        concept * self.n_contexts + context
    }

    pub fn center(&self, concept: usize, context: usize) -> Point {
        self.centers[self.mode_index(concept, context)]
    }

    /// `(concept, context)` labels of mode `index`.
    pub fn mode_labels(&self, index: usize) -> (usize, usize) {
        (index / self.n_contexts, index % self.n_contexts)
    }

    /// Log of `weight_m * N(x; center_m, std² I)` for every mode.
    fn mode_log_terms(&self, x: Point) -> impl Iterator<Item = f64> + '_ {
        let var = self.std * self.std;
        let log_norm = -(2.0 * PI * var).ln();
        self.centers.iter().zip(&self.weights).map(move |(c, w)| {
            let dx = x[0] - c[0];
            let dy = x[1] - c[1];
            w.ln() + log_norm - 0.5 * (dx * dx + dy * dy) / var
        })
    }

    /// Per-concept log joint density `log p(x, concept)`, marginalized over contexts.
    pub fn concept_log_joint(&self, x: Point) -> Vec<f64> {
        let terms: Vec<f64> = self.mode_log_terms(x).collect();
        terms
            .chunks(self.n_contexts)
            .map(|chunk| log_sum_exp(chunk.iter().copied()))
            .collect()
    }
}

/// Concept `k` sits at angle `2πk/K`; context `c` at radius `radius_base · (1 + c/2)`.
pub fn make_mixture(
    n_concepts: usize,
    n_contexts: usize,
    radius_base: f64,
    std: f64,
) -> Result<MixtureSpec> {
    make_mixture_spaced(n_concepts, n_contexts, radius_base, std, 0.5)
}

/// Like [`make_mixture`] with radius `radius_base · (1 + spacing · c)`.
pub fn make_mixture_spaced(
    n_concepts: usize,
    n_contexts: usize,
    radius_base: f64,
    std: f64,
    spacing: f64,
) -> Result<MixtureSpec> {
    if n_concepts < 2 {
        return Err(Error::invalid(format!("need at least 2 concepts, got {n_concepts}")));
    }
    if n_contexts < 1 {
        return Err(Error::invalid("need at least 1 context"));
    }
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("std must be positive, got {std}")));
    }
    if !(radius_base > 0.0) || !radius_base.is_finite() {
        return Err(Error::invalid(format!("radius_base must be positive, got {radius_base}")));
    }
    if !(spacing >= 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("context spacing must be nonnegative, got {spacing}")));
    }
    let mut centers = Vec::with_capacity(n_concepts * n_contexts);
    for k in 0..n_concepts {
        let theta = 2.0 * PI * k as f64 / n_concepts as f64;
        for c in 0..n_contexts {
            let r = radius_base * (1.0 + spacing * c as f64);
            centers.push([r * theta.cos(), r * theta.sin()]);
        }
    }
    let n_modes = centers.len();
    MixtureSpec::from_parts(
        n_concepts,
        n_contexts,
        centers,
        std,
        vec![1.0 / n_modes as f64; n_modes],
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub x: Point,
    pub concept: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub spec: MixtureSpec,
    pub seed: u64,
}

pub fn sample_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut cumulative = Vec::with_capacity(spec.n_modes());
    let mut acc = 0.0;
    for w in &spec.weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut rng = util::rng(seed);
    let points = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let mode = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(cumulative.len() - 1);
            let (concept, context) = spec.mode_labels(mode);
            let center = spec.centers[mode];
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            LabeledPoint {
                x: [center[0] + spec.std * nx, center[1] + spec.std * ny],
                concept,
                context,
            }
        })
        .collect();
    Ok(Dataset {
        points,
        spec: spec.clone(),
        seed,
    })
}

/// Bayes-optimal concept label: argmax of the posterior marginalized over
/// contexts. Ties go to the lowest concept id.
pub fn bayes_classify(spec: &MixtureSpec, x: Point) -> usize {
    let joint = spec.concept_log_joint(x);
    let mut best = 0;
    for (k, &v) in joint.iter().enumerate() {
        if v > joint[best] {
            best = k;
        }
    }
    best
}

/// Exact mixture log-density.
pub fn log_density(spec: &MixtureSpec, x: Point) -> f64 {
    log_sum_exp(spec.mode_log_terms(x))
}

impl Dataset {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,concept,context\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(p.x[0]),
                fmt_f64(p.x[1]),
                p.concept,
                p.context
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Parse points written by [`Dataset::to_csv`]. The spec and seed are not
    /// stored in the CSV and must be supplied.
    pub fn from_csv(text: &str, spec: MixtureSpec, seed: u64) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "x,y,concept,context")) => {}
            _ => return Err(Error::parse("dataset csv", 1, "expected header x,y,concept,context")),
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::parse("dataset csv", i + 1, "expected 4 fields"));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse("dataset csv", i + 1, e.to_string()))
            };
            let id = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::parse("dataset csv", i + 1, e.to_string()))
            };
            let p = LabeledPoint {
                x: [num(fields[0])?, num(fields[1])?],
                concept: id(fields[2])?,
                context: id(fields[3])?,
            };
            if p.concept >= spec.n_concepts || p.context >= spec.n_contexts {
                return Err(Error::parse("dataset csv", i + 1, "label outside vocabulary"));
            }
            points.push(p);
        }
        Ok(Self { points, spec, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_labels_match_direct_density() {
        let spec = make_mixture(5, 3, 1.0, 0.5).unwrap();
        let var = spec.std * spec.std;
        for i in 0..41 {
            for j in 0..41 {
                // offset keeps the grid off the symmetry axes, where labels tie exactly
                let x = [-3.9871 + 0.2 * i as f64, -4.0137 + 0.2 * j as f64];
                let mut per_concept = vec![0.0; spec.n_concepts];
                for k in 0..spec.n_concepts {
                    for c in 0..spec.n_contexts {
                        let m = spec.center(k, c);
                        let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                        per_concept[k] += (-0.5 * d2 / var).exp();
                    }
                }
                let mut best = 0;
                for k in 1..spec.n_concepts {
                    if per_concept[k] > per_concept[best] {
                        best = k;
                    }
                }
                assert_eq!(bayes_classify(&spec, x), best, "at {x:?}");
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let spec = make_mixture(4, 2, 1.0, 0.3).unwrap();
        let h = 0.02;
        let mut total = 0.0;
        for i in 0..400 {
            for j in 0..400 {
                let x = [-4.0 + h * (i as f64 + 0.5), -4.0 + h * (j as f64 + 0.5)];
                total += log_density(&spec, x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    fn close(a: Point, b: Point) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn centers_follow_angle_and_radius() {
        let spec = make_mixture(4, 1, 2.0, 0.1).unwrap();
        assert!(close(spec.center(0, 0), [2.0, 0.0]));
        assert!(close(spec.center(1, 0), [0.0, 2.0]));
        let spec = make_mixture(4, 3, 2.0, 0.1).unwrap();
        assert!(close(spec.center(0, 2), [4.0, 0.0]));
    }

    #[test]
    fn uniform_weights() {
        let spec = make_mixture(8, 3, 1.0, 0.05).unwrap();
        assert_eq!(spec.n_modes(), 24);
        assert!(spec.weights.iter().all(|&w| w == 1.0 / 24.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_mixture(1, 1, 2.0, 0.1).is_err());
        assert!(make_mixture(4, 0, 2.0, 0.1).is_err());
        assert!(make_mixture(4, 1, 2.0, 0.0).is_err());
        assert!(make_mixture(4, 1, -1.0, 0.1).is_err());
        let bad = MixtureSpec::from_parts(2, 1, vec![[0.0, 0.0], [1.0, 0.0]], 0.1, vec![0.7, 0.7]);
        assert!(bad.is_err());
    }

    #[test]
    fn vanishing_std_hits_centers() {
        let spec = make_mixture(4, 2, 2.0, 1e-300).unwrap();
        let data = sample_dataset(&spec, 200, 3).unwrap();
        for p in &data.points {
            let c = spec.center(p.concept, p.context);
            assert!((p.x[0] - c[0]).abs() < 1e-250 && (p.x[1] - c[1]).abs() < 1e-250);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = make_mixture(8, 3, 2.0, 0.1).unwrap();
        let a = sample_dataset(&spec, 500, 42).unwrap();
        let b = sample_dataset(&spec, 500, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&spec, 500, 43).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn concept_frequencies_are_uniform() {
        let spec = make_mixture(8, 2, 2.0, 0.1).unwrap();
        let data = sample_dataset(&spec, 10_000, 11).unwrap();
        let mut counts = [0usize; 8];
        for p in &data.points {
            counts[p.concept] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.125).abs() < 0.02, "{freq}");
        }
    }

    #[test]
    fn classify_mode_centers() {
        let spec = make_mixture(8, 3, 2.0, 0.1).unwrap();
        for k in 0..8 {
            for c in 0..3 {
                assert_eq!(bayes_classify(&spec, spec.center(k, c)), k);
            }
        }
    }

    #[test]
    fn ties_go_to_lowest_id() {
        // Concepts 1 and 3 are mirror images around the y axis; the others are far away.
        let centers = vec![[50.0, 50.0], [1.0, 0.0], [-50.0, 50.0], [-1.0, 0.0]];
        let spec = MixtureSpec::from_parts(4, 1, centers, 0.5, vec![0.25; 4]).unwrap();
        assert_eq!(bayes_classify(&spec, [0.0, 0.3]), 1);
    }

    #[test]
    fn single_mode_peak_density() {
        let spec = MixtureSpec::from_parts(1, 1, vec![[0.3, -0.2]], 0.1, vec![1.0]).unwrap();
        let expect = (1.0 / (2.0 * PI * 0.01)).ln();
        assert!((log_density(&spec, [0.3, -0.2]) - expect).abs() < 1e-12);
    }

    #[test]
    fn density_decays_far_away() {
        let spec = make_mixture(8, 2, 2.0, 0.1).unwrap();
        let far = log_density(&spec, [40.0, -40.0]);
        assert!(far.is_finite());
        for m in 0..spec.n_modes() {
            assert!(far < log_density(&spec, spec.centers[m]));
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = make_mixture(4, 2, 2.0, 0.1).unwrap();
        let data = sample_dataset(&spec, 50, 9).unwrap();
        let back = Dataset::from_csv(&data.to_csv(), spec, 9).unwrap();
        assert_eq!(back, data);
    }
}
