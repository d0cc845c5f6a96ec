use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchPlan, Vocab};
use crate::error::{Error, Result};
use crate::inference::{beam_search, DecodeConfig};
use crate::model::{loss_and_grads, ModelConfig, ModelParams, RunOptions};
use crate::tensor::{Adam, AdamConfig};
use crate::training::clip_grad_norm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    /// Untimed steps before measuring.
    pub warmup: usize,
    pub trials: usize,
    /// Total training steps, warmup included.
    pub steps: usize,
    /// Timed inference batches per trial.
    pub infer_batches: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 2,
            trials: 5,
            steps: 22,
            infer_batches: 1,
            decode: DecodeConfig {
                beam: 5,
                max_len: 16,
                alpha: crate::inference::LENGTH_ALPHA,
                whole_sentences: false,
            },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub ups: f64,
    pub tokens_per_sec: f64,
    pub infer_batches_per_sec: f64,
}

impl BenchRow {
    pub const HEADER: &'static str = "variant\tups\ttokens_per_sec\tinfer_batches_per_sec";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.1}\t{:.4}",
            self.variant, self.ups, self.tokens_per_sec, self.infer_batches_per_sec
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Times training updates (one batch each) and inference batches for every
/// config on the same batches. Reports the median over trials.
pub fn ups_benchmark(
    configs: &[ModelConfig],
    plans_for: &dyn Fn(&ModelConfig) -> Result<Vec<BatchPlan>>,
    vocab: &Vocab,
    bench: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if bench.trials == 0 || bench.steps < bench.warmup + bench.trials {
        return Err(Error::invalid(format!(
            "bench needs steps >= warmup + trials ({} < {} + {})",
            bench.steps, bench.warmup, bench.trials
        )));
    }
    let per_trial = (bench.steps - bench.warmup) / bench.trials;
    let mut rows = Vec::new();
    for cfg in configs {
        let plans = plans_for(cfg)?;
        if plans.is_empty() {
            return Err(Error::invalid("bench corpus produced no batches"));
        }
        let mut params = ModelParams::<f32>::init(cfg, bench.seed)?;
        let mut adam = Adam::new(AdamConfig::default());
        let mut step = 0usize;
        let mut train_step = |params: &mut ModelParams<f32>| -> Result<usize> {
            let plan = &plans[step % plans.len()];
            let mut run = RunOptions::train(ChaCha8Rng::seed_from_u64(step as u64));
            let (_, mut g) = loss_and_grads(cfg, params, plan, &mut run)?;
            clip_grad_norm(&mut g, 1.0);
            adam.step(&mut params.tensors, &g, 1e-4)?;
            step += 1;
            Ok(plan.source.lengths.iter().chain(&plan.target.lengths).sum())
        };
        for _ in 0..bench.warmup {
            train_step(&mut params)?;
        }
        let mut ups = Vec::new();
        let mut tps = Vec::new();
        for _ in 0..bench.trials {
            let t = Instant::now();
            let mut tokens = 0;
            for _ in 0..per_trial {
                tokens += train_step(&mut params)?;
            }
            let s = t.elapsed().as_secs_f64().max(1e-12);
            ups.push(per_trial as f64 / s);
            tps.push(tokens as f64 / s);
        }
        let mut ibs = Vec::new();
        for trial in 0..bench.trials {
            let t = Instant::now();
            for k in 0..bench.infer_batches {
                let plan = &plans[(trial * bench.infer_batches + k) % plans.len()];
                beam_search(cfg, &params, plan, vocab, &bench.decode)?;
            }
            ibs.push(bench.infer_batches as f64 / t.elapsed().as_secs_f64().max(1e-12));
        }
        rows.push(BenchRow {
            variant: cfg.variant.name().to_string(),
            ups: median(ups),
            tokens_per_sec: median(tps),
            infer_batches_per_sec: median(ibs),
        });
    }
    Ok(rows)
}
