//! Per-token exit-depth distributions and the two depth-sampling schemes.
//!
//! Depths are 1-based throughout: `d` ranges over `1..=depth_max`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{gumbel01, uniform_open01};

/// Categorical distribution over exit depths `1..=D` with its CDF, plus the
/// conditional halting probabilities and survival masses when produced by the
/// online decider.
#[derive(Debug, Clone)]
pub struct ExitDepthDistribution {
    q: Vec<f64>,
    cdf: Vec<f64>,
    alphas: Option<Vec<f64>>,
    survival: Option<Vec<f64>>,
}

impl ExitDepthDistribution {
    /// Build from raw probabilities. Residual float error from upstream
    /// softmax is renormalized away; a materially non-normalized input is a
    /// contract violation.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("empty depth distribution"));
        }
        let sum: f64 = probs.iter().sum();
        if !(sum.is_finite() && (sum - 1.0).abs() < 1e-3) || probs.iter().any(|&p| p < -1e-9) {
            return Err(Error::contract(format!(
                "depth probabilities must be non-negative and sum to 1, got sum {sum}"
            )));
        }
        let q: Vec<f64> = probs.iter().map(|&p| p.max(0.0) / sum).collect();
        let mut cdf = Vec::with_capacity(q.len());
        let mut acc = 0.0;
        for &p in &q {
            acc += p;
            cdf.push(acc);
        }
        *cdf.last_mut().expect("non-empty") = 1.0;
        Ok(ExitDepthDistribution {
            q,
            cdf,
            alphas: None,
            survival: None,
        })
    }

    /// Survival recursion over conditional halting probabilities
    /// `alphas[d-1] = α^(d)` for `d = 1..D-1`; depth D absorbs the remaining
    /// mass. `D = alphas.len() + 1`.
    pub fn from_halting(alphas: &[f64]) -> Result<Self> {
        for &a in alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::contract(format!(
                    "halting probability {a} outside [0, 1]"
                )));
            }
        }
        let depth_max = alphas.len() + 1;
        let mut q = Vec::with_capacity(depth_max);
        let mut survival = Vec::with_capacity(depth_max);
        let mut r = 1.0; // r^(0)
        survival.push(r);
        for &a in alphas {
            q.push(r * a);
            r *= 1.0 - a;
            survival.push(r);
        }
        q.push(r); // q(D) = r^(D-1)
        let mut dist = Self::from_probs(&q)?;
        dist.alphas = Some(alphas.to_vec());
        dist.survival = Some(survival);
        Ok(dist)
    }

    pub fn depth_max(&self) -> usize {
        self.q.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.q
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn alphas(&self) -> Option<&[f64]> {
        self.alphas.as_deref()
    }

    pub fn survival(&self) -> Option<&[f64]> {
        self.survival.as_deref()
    }

    /// `min { d : F(d) >= u }`, clamped to D against float shortfall.
    pub fn inverse_cdf_sample(&self, u: f64) -> usize {
        for (i, &f) in self.cdf.iter().enumerate() {
            if f >= u {
                return i + 1;
            }
        }
        self.q.len()
    }

    /// Most probable depth; first index wins ties.
    pub fn modal_depth(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.q.iter().enumerate() {
            if p > self.q[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn expected_depth(&self) -> f64 {
        self.q
            .iter()
            .enumerate()
            .map(|(i, &p)| (i + 1) as f64 * p)
            .sum()
    }

    /// Shannon entropy in nats; 0 ln 0 = 0.
    pub fn entropy(&self) -> f64 {
        -self
            .q
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Check the structural invariants; used by the verification suites.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.q.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(format!("depth probs sum {sum} != 1")));
        }
        if self.q.iter().any(|&p| p < 0.0) {
            return Err(Error::numeric("negative depth probability"));
        }
        let mut prev = 0.0;
        for &f in &self.cdf {
            if f + 1e-12 < prev {
                return Err(Error::numeric("CDF not non-decreasing"));
            }
            prev = f;
        }
        if (self.cdf.last().copied().unwrap_or(0.0) - 1.0).abs() > 1e-9 {
            return Err(Error::numeric("CDF does not reach 1"));
        }
        if let Some(alphas) = &self.alphas {
            // q(d) = r^(d-1) α^(d) for d < D and q(D) = r^(D-1)
            let mut r = 1.0;
            for (d, &a) in alphas.iter().enumerate() {
                if (self.q[d] - r * a).abs() > 1e-9 {
                    return Err(Error::numeric("halting recursion violated"));
                }
                r *= 1.0 - a;
            }
            if (self.q[self.q.len() - 1] - r).abs() > 1e-9 {
                return Err(Error::numeric("terminal mass != survival"));
            }
        }
        Ok(())
    }
}

/// Straight-through Gumbel sample over depth logits.
///
/// Returns the 1-based hard depth (forward path) and the tempered softmax of
/// the perturbed logits (backward path).
pub fn gumbel_st_sample<R: Rng + ?Sized>(
    logits: &[f64],
    tau: f64,
    rng: &mut R,
) -> (usize, Vec<f64>) {
    let noise: Vec<f64> = logits.iter().map(|_| gumbel01(rng)).collect();
    gumbel_st_sample_with_noise(logits, tau, &noise)
}

/// Deterministic variant used by tests: the Gumbel noise is supplied.
pub fn gumbel_st_sample_with_noise(logits: &[f64], tau: f64, noise: &[f64]) -> (usize, Vec<f64>) {
    assert_eq!(logits.len(), noise.len());
    assert!(tau > 0.0, "gumbel temperature must be positive");
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(&s, &g)| (s + g) / tau)
        .collect();
    let mut best = 0;
    for (i, &v) in perturbed.iter().enumerate() {
        if v > perturbed[best] {
            best = i;
        }
    }
    let m = perturbed[best];
    let exps: Vec<f64> = perturbed.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (best + 1, exps.into_iter().map(|e| e / sum).collect())
}

/// Draw `u ~ Uniform(0,1)` for inverse-CDF depth sampling.
pub fn sample_uniform_threshold<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    uniform_open01(rng)
}

/// Per-token exit depths with the activity gates they induce.
#[derive(Debug, Clone)]
pub struct DepthAssignment {
    depths: Vec<usize>,
    depth_max: usize,
}

impl DepthAssignment {
    pub fn new(depths: Vec<usize>, depth_max: usize) -> Result<Self> {
        for &d in &depths {
            if d < 1 || d > depth_max {
                return Err(Error::contract(format!(
                    "exit depth {d} outside 1..={depth_max}"
                )));
            }
        }
        Ok(DepthAssignment { depths, depth_max })
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn depth_max(&self) -> usize {
        self.depth_max
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Activity gate `a_i^(d) = 1[d <= d_i*]`.
    pub fn active(&self, token: usize, d: usize) -> bool {
        d <= self.depths[token]
    }

    /// `|A_d|` — number of tokens active at iteration `d`.
    pub fn active_count(&self, d: usize) -> usize {
        self.depths.iter().filter(|&&dd| d <= dd).count()
    }

    /// `Σ_d |A_d|`, which equals `Σ_i d_i*`.
    pub fn cost_exec(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn mean_depth(&self) -> f64 {
        if self.depths.is_empty() {
            return 0.0;
        }
        self.cost_exec() as f64 / self.depths.len() as f64
    }
}
