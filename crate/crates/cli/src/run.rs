//! One pipeline run: plan, prefill, decode, and errors against the oracle.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tqt_core::attention::decode_attend_rows;
use tqt_core::kv_cache::CacheBits;
use tqt_core::{
    error_metrics, reference_attention, turbo_decode, turbo_prefill_head, AttentionConfig, CacheSizeReport,
    ErrorMetrics, HeadInput, HeadPrecisionPlan, KvCacheHead, MatrixF32,
};

use crate::error::{CliError, Result};
use crate::selectors::{all_stats, select, Selector};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub block_rows: usize,
    pub block_cols: usize,
    pub buffer_size: usize,
    pub threshold: i32,
    /// 4: mixed plan with `heads2bit` heads at 2 bits. 2: every head at 2
    /// bits. 8: stage-one INT8 cache only.
    pub bits: u8,
    /// Defaults to half the heads.
    pub heads2bit: Option<usize>,
    pub selector: Selector,
    /// Seed for the random selector.
    pub selector_seed: u64,
    pub causal: bool,
    /// Replace every kernel output with the reference.
    pub oracle_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            block_rows: 64,
            block_cols: 64,
            buffer_size: 64,
            threshold: -6,
            bits: 4,
            heads2bit: None,
            selector: Selector::Priority,
            selector_seed: 0,
            causal: false,
            oracle_only: false,
        }
    }
}

impl RunConfig {
    pub fn attention(&self, head_dim: usize) -> Result<AttentionConfig> {
        let mut cfg = AttentionConfig::new(head_dim).with_blocks(self.block_rows, self.block_cols);
        cfg.buffer_size = self.buffer_size;
        cfg.threshold = self.threshold;
        cfg.causal = self.causal;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self, workload: &Workload, prefill: &[HeadInput]) -> Result<HeadPrecisionPlan> {
        let heads = workload.spec.heads;
        match self.bits {
            2 | 8 => Ok(HeadPrecisionPlan::uniform(heads, self.bits)),
            4 => {
                let n_h = self.heads2bit.unwrap_or(heads / 2);
                if n_h > heads {
                    return Err(CliError::validation(format!("--heads2bit {n_h} exceeds {heads} heads")));
                }
                select(self.selector, prefill, &all_stats(prefill)?, n_h, self.selector_seed)
            }
            b => Err(CliError::validation(format!("--bits must be 2, 4 or 8, got {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rel_frobenius: Option<f64>,
    pub max_abs: f64,
    pub mean_cosine: Option<f64>,
}

impl From<ErrorMetrics> for MetricSummary {
    fn from(m: ErrorMetrics) -> Self {
        Self { rel_frobenius: m.rel_frobenius, max_abs: m.max_abs, mean_cosine: m.mean_cosine() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: usize,
    pub gap: f32,
    pub std: f32,
    pub priority: f32,
    pub bits: u8,
}

/// Error of one decode step over all heads (outputs concatenated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Against the reference over the original FP32 keys and values.
    pub rel_frobenius: Option<f64>,
    pub max_abs: f64,
    /// Against the reference over the dequantized cache contents.
    pub kernel_rel_frobenius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prefill_ms: f64,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workload: crate::workload::WorkloadSpec,
    pub config: RunConfig,
    pub plan: HeadPrecisionPlan,
    pub heads: Vec<HeadReport>,
    /// Prefill output against the reference.
    pub prefill: MetricSummary,
    /// Every prefill query attending over the compressed cache, against the
    /// non-causal reference.
    pub readback: MetricSummary,
    pub decode: Vec<StepReport>,
    pub cache: Option<CacheSizeReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl RunReport {
    pub fn mean_decode_error(&self) -> Option<f64> {
        let errs: Vec<f64> = self.decode.iter().filter_map(|s| s.rel_frobenius).collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn steps_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.decode {
            w.serialize(s)?;
        }
        crate::error::csv_string(w)
    }
}

/// One decode step of one head: kernel output and both references.
struct StepOut {
    out: Vec<f32>,
    reference: Vec<f32>,
    kernel_ref: Vec<f32>,
}

struct HeadRun {
    prefill: MatrixF32,
    prefill_ref: MatrixF32,
    readback: MatrixF32,
    readback_ref: MatrixF32,
    steps: Vec<StepOut>,
    cache: Option<KvCacheHead>,
    prefill_ms: f64,
    decode_ms: f64,
}

fn run_head(full: &HeadInput, n: usize, steps: usize, bits: u8, cfg: &AttentionConfig, oracle_only: bool) -> Result<HeadRun> {
    let head = HeadInput::new(full.q.slice_rows(0, n), full.k.slice_rows(0, n), full.v.slice_rows(0, n));
    let prefill_ref = reference_attention(&head.q, &head.k, &head.v, cfg.causal)?.out;
    let readback_ref = if cfg.causal {
        reference_attention(&head.q, &head.k, &head.v, false)?.out
    } else {
        prefill_ref.clone()
    };
    let step_ref = |t: usize| -> Result<Vec<f32>> {
        let q = full.q.slice_rows(n + t, n + t + 1);
        Ok(reference_attention(&q, &full.k.slice_rows(0, n + t), &full.v.slice_rows(0, n + t), false)?.out.into_data())
    };

    if oracle_only {
        let steps = (0..steps)
            .map(|t| step_ref(t).map(|r| StepOut { out: r.clone(), reference: r.clone(), kernel_ref: r }))
            .collect::<Result<_>>()?;
        return Ok(HeadRun {
            prefill: prefill_ref.clone(),
            prefill_ref,
            readback: readback_ref.clone(),
            readback_ref,
            steps,
            cache: None,
            prefill_ms: 0.0,
            decode_ms: 0.0,
        });
    }

    let t0 = Instant::now();
    let (out, mut cache) = turbo_prefill_head(&head, cfg, CacheBits::from_bits(bits)?)?;
    let prefill_ms = t0.elapsed().as_secs_f64() * 1e3;
    let readback = if n > 0 { decode_attend_rows(&head.q, &cache, cfg)?.out } else { MatrixF32::zeros(0, cfg.head_dim) };

    let mut decode_ms = 0.0;
    let mut results = Vec::with_capacity(steps);
    for t in 0..steps {
        let r = n + t;
        let (ck, cv) = cache.dequantize();
        let q = full.q.slice_rows(r, r + 1);
        let kernel_ref = reference_attention(&q, &ck, &cv, false)?.out.into_data();
        let t0 = Instant::now();
        let o = turbo_decode(full.q.row(r), full.k.row(r), full.v.row(r), &mut cache, cfg)?;
        decode_ms += t0.elapsed().as_secs_f64() * 1e3;
        results.push(StepOut { out: o.out.into_data(), reference: step_ref(t)?, kernel_ref });
    }
    Ok(HeadRun { prefill: out.out, prefill_ref, readback, readback_ref, steps: results, cache: Some(cache), prefill_ms, decode_ms })
}

fn concat(parts: Vec<MatrixF32>) -> Result<MatrixF32> {
    Ok(MatrixF32::hstack(&parts)?)
}

fn row(data: Vec<f32>) -> MatrixF32 {
    let n = data.len();
    MatrixF32::new(1, n, data).expect("row shape")
}

pub fn run(workload: &Workload, config: &RunConfig) -> Result<RunReport> {
    let spec = &workload.spec;
    let cfg = config.attention(spec.d)?;
    let prefill = workload.prefill();
    if spec.n == 0 && spec.decode_steps > 0 {
        return Err(CliError::validation("decode needs at least one prefill token"));
    }
    let stats = all_stats(&prefill)?;
    let plan = config.plan(workload, &prefill)?;

    let runs: Vec<HeadRun> = workload
        .heads
        .par_iter()
        .zip(plan.bits.par_iter())
        .map(|(h, &b)| run_head(h, spec.n, spec.decode_steps, b, &cfg, config.oracle_only))
        .collect::<Result<_>>()?;

    let pick = |f: &dyn Fn(&HeadRun) -> MatrixF32| runs.iter().map(f).collect::<Vec<_>>();
    let prefill_m = error_metrics(&concat(pick(&|r| r.prefill.clone()))?, &concat(pick(&|r| r.prefill_ref.clone()))?)?;
    let readback_m = error_metrics(&concat(pick(&|r| r.readback.clone()))?, &concat(pick(&|r| r.readback_ref.clone()))?)?;

    let mut decode = Vec::with_capacity(spec.decode_steps);
    for t in 0..spec.decode_steps {
        let cat = |f: fn(&StepOut) -> &[f32]| row(runs.iter().flat_map(|r| f(&r.steps[t]).iter().copied()).collect());
        let (out, reference, kernel_ref) = (cat(|s| &s.out), cat(|s| &s.reference), cat(|s| &s.kernel_ref));
        let m = error_metrics(&out, &reference)?;
        decode.push(StepReport {
            step: t,
            rel_frobenius: m.rel_frobenius,
            max_abs: m.max_abs,
            kernel_rel_frobenius: error_metrics(&out, &kernel_ref)?.rel_frobenius,
        });
    }

    let caches: Option<Vec<KvCacheHead>> = runs.iter().map(|r| r.cache.clone()).collect();
    let heads = stats
        .iter()
        .zip(&plan.bits)
        .map(|(s, &bits)| HeadReport { head: s.head_index, gap: s.gap, std: s.std, priority: s.priority, bits })
        .collect();
    Ok(RunReport {
        workload: spec.clone(),
        config: config.clone(),
        plan,
        heads,
        prefill: prefill_m.into(),
        readback: readback_m.into(),
        decode,
        cache: caches.map(|c| CacheSizeReport::of(&c)),
        timings: Some(Timings {
            prefill_ms: runs.iter().map(|r| r.prefill_ms).sum(),
            decode_ms: runs.iter().map(|r| r.decode_ms).sum(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::WorkloadSpec;

    fn small() -> Workload {
        Workload::generate(&WorkloadSpec { n: 96, d: 16, heads: 4, decode_steps: 5, ..Default::default() }).unwrap()
    }

    #[test]
    fn oracle_only_has_zero_error() {
        let r = run(&small(), &RunConfig { oracle_only: true, ..Default::default() }).unwrap();
        assert_eq!(r.prefill.rel_frobenius, Some(0.0));
        assert_eq!(r.readback.rel_frobenius, Some(0.0));
        assert!(r.decode.iter().all(|s| s.rel_frobenius == Some(0.0)));
        assert!(r.cache.is_none());
    }

    #[test]
    fn stage_one_only_beats_four_bits() {
        let w = small();
        let r8 = run(&w, &RunConfig { bits: 8, ..Default::default() }).unwrap();
        let r4 = run(&w, &RunConfig { bits: 4, ..Default::default() }).unwrap();
        assert!(r8.readback.rel_frobenius < r4.readback.rel_frobenius);
        assert!(r8.mean_decode_error() < r4.mean_decode_error());
        assert_eq!(r8.plan.bits, vec![8; 4]);
        assert_eq!(r4.plan.bits.iter().filter(|&&b| b == 2).count(), 2);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = run(&small(), &RunConfig::default()).unwrap();
        let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.decode.len(), 5);
        assert_eq!(r.cache.as_ref().unwrap().fp16_equivalent_bytes, 4 * 101 * 16 * 4);
        let csv = r.steps_csv().unwrap();
        assert!(csv.starts_with("step,rel_frobenius,max_abs,kernel_rel_frobenius\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn bad_flags() {
        let w = small();
        assert_eq!(run(&w, &RunConfig { bits: 3, ..Default::default() }).unwrap_err().exit_code(), 2);
        assert_eq!(run(&w, &RunConfig { heads2bit: Some(5), ..Default::default() }).unwrap_err().exit_code(), 2);
        assert_eq!(run(&w, &RunConfig { block_rows: 0, ..Default::default() }).unwrap_err().exit_code(), 2);
        assert_eq!(run(&w, &RunConfig { threshold: 1, ..Default::default() }).unwrap_err().exit_code(), 2);
    }
}
