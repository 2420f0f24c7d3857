use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, SeededRng};
use crate::{DfaError, Result};

/// Parameters of the synthetic multi-domain benchmark.
///
/// Inputs are laid out as `[causal | style | spurious]`. Generation produces
/// `num_domains + 1` domains; the last one is the shifted held-out domain
/// whose spurious block is flipped or decorrelated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of source domains `k`.
    pub num_domains: usize,
    pub num_classes: usize,
    pub causal_dim: usize,
    pub style_dim: usize,
    pub spurious_dim: usize,
    pub samples_per_domain: usize,
    pub style_strength: f64,
    pub spurious_strength: f64,
    pub spurious_flip_in_target: bool,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_domains: 3,
            num_classes: 5,
            causal_dim: 8,
            style_dim: 8,
            spurious_dim: 8,
            samples_per_domain: 200,
            style_strength: 1.5,
            spurious_strength: 1.0,
            spurious_flip_in_target: true,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn input_dim(&self) -> usize {
        self.causal_dim + self.style_dim + self.spurious_dim
    }

    /// Total number of generated domains, sources plus the held-out one.
    pub fn total_domains(&self) -> usize {
        self.num_domains + 1
    }

    pub fn causal_range(&self) -> std::ops::Range<usize> {
        0..self.causal_dim
    }

    pub fn style_range(&self) -> std::ops::Range<usize> {
        self.causal_dim..self.causal_dim + self.style_dim
    }

    pub fn spurious_range(&self) -> std::ops::Range<usize> {
        self.causal_dim + self.style_dim..self.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DfaError::InvalidSpec(m.to_string()));
        if self.num_domains < 2 {
            return fail("at least two source domains are required");
        }
        if self.num_classes < 2 {
            return fail("at least two classes are required");
        }
        if self.input_dim() == 0 {
            return fail("input dimension is zero");
        }
        if self.samples_per_domain == 0 {
            return fail("samples_per_domain must be positive");
        }
        for (name, v) in [
            ("style_strength", self.style_strength),
            ("spurious_strength", self.spurious_strength),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DfaError::InvalidSpec(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    /// Domain id as generated (before any leave-one-out relabelling).
    pub origin: usize,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.x.as_slice()).collect();
        Matrix::from_rows(&rows).expect("samples share one input width")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.d).collect()
    }
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian rows.
fn random_rotation(n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for r in &rows {
            let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(r) {
                *a -= proj * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

fn gaussian_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Draws every domain of `spec`. Returns `k + 1` domains; index `k` is the
/// held-out shifted domain.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let mut structure_rng = SeededRng::with_stream(spec.seed, 0);
    let c = spec.num_classes;

    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian_vec(spec.causal_dim, &mut structure_rng))
        .collect();
    let patterns: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian_vec(spec.spurious_dim, &mut structure_rng))
        .collect();
    // Anisotropic latent scales so that a rotation changes the covariance.
    let style_scales: Vec<f64> = (0..spec.style_dim).map(|j| 1.0 / (1.0 + j as f64)).collect();
    let styles: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..spec.total_domains())
        .map(|_| {
            let rot = random_rotation(spec.style_dim, &mut structure_rng);
            let offset = gaussian_vec(spec.style_dim, &mut structure_rng);
            (rot, offset)
        })
        .collect();

    let target = spec.num_domains;
    let mut domains = Vec::with_capacity(spec.total_domains());
    for d in 0..spec.total_domains() {
        let mut rng = SeededRng::with_stream(spec.seed, 1 + d as u64);
        let (rot, offset) = &styles[d];
        let mut samples = Vec::with_capacity(spec.samples_per_domain);
        for i in 0..spec.samples_per_domain {
            let y = i % c;
            let mut x = Vec::with_capacity(spec.input_dim());

            for &mu in &prototypes[y] {
                x.push(mu + spec.noise_std * rng.normal());
            }

            let latent: Vec<f64> = style_scales.iter().map(|s| s * rng.normal()).collect();
            for (row, off) in rot.iter().zip(offset) {
                let rotated: f64 = row.iter().zip(&latent).map(|(a, b)| a * b).sum();
                x.push(spec.style_strength * (rotated + off) + spec.noise_std * rng.normal());
            }

            let pattern_class = if d != target {
                y
            } else if spec.spurious_flip_in_target {
                (y + 1) % c
            } else {
                rng.below(c)
            };
            for &v in &patterns[pattern_class] {
                x.push(spec.spurious_strength * v + spec.noise_std * rng.normal());
            }
            samples.push(Sample { x, y, d });
        }
        domains.push(DomainDataset { origin: d, samples });
    }
    Ok(domains)
}
