use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::panel::Panel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// |Z| above this aborts the run.
pub const Z_LIMIT: f64 = 1e6;

/// Generator parameters. Serialized with exactly these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub k: usize,
    pub p: usize,
    pub gamma_a: f64,
    pub gamma_y: f64,
    #[serde(default = "default_noise")]
    pub sigma_eta: f64,
    #[serde(default = "default_noise")]
    pub sigma_eps: f64,
    #[serde(default = "default_lambda_scale")]
    pub lambda_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.001
}

fn default_lambda_scale() -> f64 {
    0.5
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            t: 5000,
            k: 5,
            p: 5,
            gamma_a: 0.5,
            gamma_y: 0.5,
            sigma_eta: default_noise(),
            sigma_eps: default_noise(),
            lambda_scale: default_lambda_scale(),
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::config("p", "must be >= 1"));
        }
        if self.t <= self.p {
            return Err(Error::config("T", format!("must exceed p = {}", self.p)));
        }
        if self.k < 1 {
            return Err(Error::config("k", "must be >= 1"));
        }
        for (name, g) in [("gamma_a", self.gamma_a), ("gamma_y", self.gamma_y)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        for (name, s) in [
            ("sigma_eta", self.sigma_eta),
            ("sigma_eps", self.sigma_eps),
            ("lambda_scale", self.lambda_scale),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(name, "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Per-run lag coefficients, drawn once before any step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCoefficients {
    /// λ_i ~ N(0, lambda_scale²), i = 1..p
    pub lambda: Vec<f64>,
    /// β_i ~ N(1 − i/p, (1/p)²), i = 1..p
    pub beta: Vec<f64>,
}

impl LagCoefficients {
    fn draw(cfg: &SimulationConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let p = cfg.p as f64;
        let lam = Normal::new(0.0, cfg.lambda_scale).map_err(|e| Error::config("lambda_scale", e.to_string()))?;
        let lambda = (0..cfg.p).map(|_| lam.sample(rng)).collect();
        let beta = (1..=cfg.p)
            .map(|i| {
                let d = Normal::new(1.0 - i as f64 / p, 1.0 / p).expect("positive scale");
                d.sample(rng)
            })
            .collect();
        Ok(LagCoefficients { lambda, beta })
    }

    /// The coefficients `simulate` would use for this config.
    pub fn for_config(cfg: &SimulationConfig) -> Result<Self> {
        cfg.validate()?;
        Self::draw(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub panel: Panel,
    pub coefficients: LagCoefficients,
}

/// Arithmetic mean; reduces a treatment vector to the scalar the Z
/// recursion consumes.
pub fn vector_to_scalar_reduce(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("cannot reduce an empty vector".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn simulate(cfg: &SimulationConfig) -> Result<Panel> {
    simulate_detailed(cfg).map(|s| s.panel)
}

/// Runs the generator:
///
/// ```text
/// Z_t     = (1/p) Σ_i (λ_i · mean(A_{t−i}) + β_i · Z_{t−i}) + ε_t
/// A_{t,j} = γ_A Z_t + (1 − γ_A) X_{t,j}
/// X_{t+1} = A_t + η_{t+1}
/// Y_{t+1} = γ_Y Z_t + (1 − γ_Y) mean(X_{t+1})
/// ```
///
/// `p` warm-up steps (Z = A = 0, X ~ N(0, σ_η²)) precede the `T` emitted rows.
pub fn simulate_detailed(cfg: &SimulationConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coefficients = LagCoefficients::draw(cfg, &mut rng)?;
    let (k, p) = (cfg.k, cfg.p);
    let total = p + cfg.t;
    let eta = Normal::new(0.0, cfg.sigma_eta).expect("validated");
    let eps = Normal::new(0.0, cfg.sigma_eps).expect("validated");

    let mut x = vec![0.0; total * k];
    let mut a = vec![0.0; total * k];
    let mut z = vec![0.0; total];
    let mut a_mean = vec![0.0; total];
    let mut y = vec![0.0; total];

    for v in x.iter_mut().take(p * k) {
        *v = eta.sample(&mut rng);
    }

    let inv_p = 1.0 / p as f64;
    for t in p..total {
        let mut acc = 0.0;
        for i in 1..=p {
            acc += coefficients.lambda[i - 1] * a_mean[t - i] + coefficients.beta[i - 1] * z[t - i];
        }
        let zt = inv_p * acc + eps.sample(&mut rng);
        if !zt.is_finite() || zt.abs() > Z_LIMIT {
            return Err(Error::Overflow {
                step: t - p,
                value: zt,
            });
        }
        z[t] = zt;

        for j in 0..k {
            x[t * k + j] = a[(t - 1) * k + j] + eta.sample(&mut rng);
        }
        for j in 0..k {
            a[t * k + j] = cfg.gamma_a * zt + (1.0 - cfg.gamma_a) * x[t * k + j];
        }
        a_mean[t] = vector_to_scalar_reduce(&a[t * k..(t + 1) * k])?;
        let x_mean = vector_to_scalar_reduce(&x[t * k..(t + 1) * k])?;
        y[t] = cfg.gamma_y * z[t - 1] + (1.0 - cfg.gamma_y) * x_mean;
    }

    let rows = cfg.t;
    let panel = Panel::new(
        Tensor::matrix(rows, k, x[p * k..].to_vec())?,
        Tensor::matrix(rows, k, a[p * k..].to_vec())?,
        y[p..].to_vec(),
        Some(z[p..].to_vec()),
    )?;
    Ok(Simulation { panel, coefficients })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(gamma_a: f64, gamma_y: f64) -> SimulationConfig {
        SimulationConfig {
            t: 400,
            k: 3,
            p: 4,
            gamma_a,
            gamma_y,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(vector_to_scalar_reduce(&[5.0]).unwrap(), 5.0);
        assert_eq!(vector_to_scalar_reduce(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(vector_to_scalar_reduce(&[-2.0, 0.0, 2.0]).unwrap(), 0.0);
        assert!(vector_to_scalar_reduce(&[]).is_err());
    }

    #[test]
    fn no_confounding_in_treatment_means_a_equals_x() {
        let p = simulate(&cfg(0.0, 0.5)).unwrap();
        assert_eq!(p.a(), p.x());
    }

    #[test]
    fn full_confounding_in_outcome() {
        let p = simulate(&cfg(0.5, 1.0)).unwrap();
        let z = p.z_true().unwrap();
        for t in 0..p.len() - 1 {
            assert_eq!(p.y()[t + 1], z[t]);
        }
    }

    #[test]
    fn full_confounding_in_treatment_collapses_columns() {
        let p = simulate(&cfg(1.0, 0.5)).unwrap();
        let z = p.z_true().unwrap();
        for t in 0..p.len() {
            for j in 0..3 {
                assert_eq!(p.a().get(t, j), z[t]);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate(&cfg(0.3, 0.3)).unwrap();
        let b = simulate(&cfg(0.3, 0.3)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(0.3, 0.3);
        other.seed = 12;
        assert_ne!(simulate(&other).unwrap(), a);
    }

    #[test]
    fn invalid_config_names_field() {
        let mut c = cfg(0.5, 0.5);
        c.gamma_a = 1.5;
        let err = simulate(&c).unwrap_err().to_string();
        assert!(err.contains("gamma_a"), "{err}");
        let mut c = cfg(0.5, 0.5);
        c.t = c.p;
        assert!(simulate(&c).unwrap_err().to_string().contains("`T`"));
    }

    #[test]
    fn explosive_recursion_reports_step() {
        // A huge lambda scale makes the recursion blow up quickly.
        let c = SimulationConfig {
            t: 5000,
            k: 2,
            p: 1,
            lambda_scale: 1e4,
            seed: 1,
            ..Default::default()
        };
        match simulate(&c) {
            Err(Error::Overflow { step, .. }) => assert!(step < 5000),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn config_json_uses_exact_field_names() {
        let json = serde_json::to_value(SimulationConfig::default()).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["T", "gamma_a", "gamma_y", "k", "lambda_scale", "p", "seed", "sigma_eps", "sigma_eta"]
        );
    }
}
