//! Synthetic multi-head workloads.
//!
//! Every head gets `prefill_tokens + decode_steps` rows of Q, K and V drawn
//! from `N(0, sigma)`. Designated outlier heads have a few query/key channels
//! scaled by `outlier_magnitude`.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tqt_core::io::{load_tensor, save_tensor, Tensor};
use tqt_core::{HeadInput, MatrixF32};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub seed: u64,
    /// Prefill tokens per head.
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub sigma: f32,
    pub outlier_heads: Vec<usize>,
    pub outlier_channels: usize,
    pub outlier_magnitude: f32,
    pub decode_steps: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 256,
            d: 64,
            heads: 8,
            sigma: 1.0,
            outlier_heads: Vec::new(),
            outlier_channels: 4,
            outlier_magnitude: 8.0,
            decode_steps: 16,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(CliError::validation("head dim and head count must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CliError::validation(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(&h) = self.outlier_heads.iter().find(|&&h| h >= self.heads) {
            return Err(CliError::validation(format!("outlier head {h} out of range for {} heads", self.heads)));
        }
        if !(self.outlier_magnitude >= 1.0 && self.outlier_magnitude.is_finite()) {
            return Err(CliError::validation(format!(
                "outlier magnitude must be at least 1, got {}",
                self.outlier_magnitude
            )));
        }
        if !self.outlier_heads.is_empty() && self.outlier_channels > self.d {
            return Err(CliError::validation(format!(
                "{} outlier channels exceed head dim {}",
                self.outlier_channels, self.d
            )));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.n + self.decode_steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub spec: WorkloadSpec,
    /// Full `(n + decode_steps) x d` tensors per head.
    pub heads: Vec<HeadInput>,
}

impl Workload {
    pub fn generate(spec: &WorkloadSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, spec.sigma).expect("sigma validated");
        let rows = spec.total_tokens();
        let mut heads = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let mut draw = || MatrixF32::from_fn(rows, spec.d, |_, _| normal.sample(&mut rng));
            let (mut q, mut k, v) = (draw(), draw(), draw());
            if spec.outlier_heads.contains(&h) {
                let channels = sample(&mut rng, spec.d, spec.outlier_channels);
                for c in channels.iter() {
                    for r in 0..rows {
                        q.set(r, c, q.get(r, c) * spec.outlier_magnitude);
                        k.set(r, c, k.get(r, c) * spec.outlier_magnitude);
                    }
                }
            }
            heads.push(HeadInput::new(q, k, v));
        }
        Ok(Self { spec: spec.clone(), heads })
    }

    /// The first `n` rows of every head.
    pub fn prefill(&self) -> Vec<HeadInput> {
        let n = self.spec.n;
        self.heads
            .iter()
            .map(|h| HeadInput::new(h.q.slice_rows(0, n), h.k.slice_rows(0, n), h.v.slice_rows(0, n)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut files = Vec::new();
        for (h, head) in self.heads.iter().enumerate() {
            for (name, m) in [("q", &head.q), ("k", &head.k), ("v", &head.v)] {
                let file = tensor_file(name, h);
                save_tensor(dir.join(&file), &Tensor::from(m.clone()))?;
                files.push(file);
            }
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            prefill_tokens: self.spec.n,
            decode_steps: self.spec.decode_steps,
            files,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.clone(), source })?;
        let spec = manifest.spec;
        spec.validate()?;
        if manifest.prefill_tokens != spec.n || manifest.decode_steps != spec.decode_steps {
            return Err(CliError::validation("manifest token counts disagree with its workload settings"));
        }
        let mut heads = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let load = |name: &str| -> Result<MatrixF32> {
                let m = load_tensor(dir.join(tensor_file(name, h)))?.into_f32()?;
                if m.shape() != (spec.total_tokens(), spec.d) {
                    return Err(CliError::validation(format!(
                        "{} has shape {:?}, manifest expects {:?}",
                        tensor_file(name, h),
                        m.shape(),
                        (spec.total_tokens(), spec.d)
                    )));
                }
                Ok(m)
            };
            heads.push(HeadInput::new(load("q")?, load("k")?, load("v")?));
        }
        Ok(Self { spec, heads })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: WorkloadSpec,
    prefill_tokens: usize,
    decode_steps: usize,
    files: Vec<String>,
}

fn tensor_file(name: &str, head: usize) -> String {
    format!("{name}_h{head}.tqt")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
