//! Grid execution: one training run per `(model, seed)`, scored on the
//! held-out test set.

use std::time::Instant;

use rayon::prelude::*;

use hetgp::datasets::{gen_noisy_case, gen_park_case, normalize, MultiTaskData};
use hetgp::error::Result;
use hetgp::metrics::{smll, smse, PredictionSet};
use hetgp::models::{build_model, train, ModelConfig, ModelState, TrainConfig, Variant};

use crate::config::{CaseName, ExperimentConfig};
use crate::records::RunRecord;

fn generate(case: CaseName, seed: u64, cfg: &ExperimentConfig) -> Result<MultiTaskData> {
    let (n1, n2, n_test) = (cfg.n1(), cfg.sizes.n2, cfg.sizes.n_test);
    match case {
        CaseName::Noisy => gen_noisy_case(seed, n1, n2, n_test),
        CaseName::Park => gen_park_case(seed, n1, n2, n_test),
    }
}

fn model_config(variant: Variant, seed: u64, cfg: &ExperimentConfig) -> ModelConfig {
    let mut mc = ModelConfig::new(variant, seed);
    mc.latents = cfg.sizes.q;
    mc.inducing = cfg.sizes.m;
    mc.mapping_inducing = cfg.sizes.m_g;
    mc.lengthscale_init = cfg.lengthscale_init;
    mc
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn score_task(
    model: &ModelState,
    raw: &MultiTaskData,
    task: usize,
) -> Result<(f64, f64)> {
    let preds = model.predict_task_batch(task, &raw.tasks[task].x_test)?;
    let (train_mean, train_var) = population_stats(raw.tasks[task].y.as_slice());
    let set = PredictionSet {
        y_true: raw.tasks[task].y_test.iter().copied().collect(),
        mean: preds.iter().map(|p| p.0).collect(),
        var: preds.iter().map(|p| p.1).collect(),
        train_mean,
        train_var,
    };
    Ok((smse(&set)?, smll(&set)?))
}

/// Runs one `(model, seed)` cell: generate, build, train, predict, score.
/// Failures are captured in the record instead of propagating.
pub fn run_single(variant: Variant, seed: u64, cfg: &ExperimentConfig) -> Vec<RunRecord> {
    let start = Instant::now();
    let blank = |task: usize| RunRecord {
        case: cfg.case.name().to_string(),
        model: variant.name().to_string(),
        seed,
        task,
        smse: None,
        smll: None,
        final_elbo: None,
        wall_time_s: None,
        nu_g0: None,
        error: None,
    };

    let outcome = (|| -> Result<Vec<RunRecord>> {
        let raw = generate(cfg.case, seed, cfg)?;
        let data = normalize(&raw)?;
        let mut model = build_model(&model_config(variant, seed, cfg), &data)?;
        let trace = train(
            &mut model,
            &TrainConfig {
                learning_rate: cfg.optimizer.learning_rate,
                iterations: cfg.optimizer.iterations,
                batch_size: Some(cfg.optimizer.batch_size),
                trace_every: cfg.optimizer.trace_every,
            },
        )?;
        let wall = start.elapsed().as_secs_f64();

        let reported: Vec<usize> = if cfg.report_all_tasks {
            (0..model.num_tasks()).collect()
        } else {
            vec![0]
        };
        let mut out = Vec::new();
        for t in reported {
            let (s, l) = score_task(&model, &raw, t)?;
            let mut rec = blank(t + 1);
            rec.smse = Some(s);
            rec.smll = Some(l);
            rec.final_elbo = Some(trace.final_elbo);
            rec.wall_time_s = Some(wall);
            rec.nu_g0 = model.learned_prior_variance(t);
            out.push(rec);
        }
        Ok(out)
    })();

    match outcome {
        Ok(records) => records,
        Err(e) => {
            let mut rec = blank(1);
            rec.wall_time_s = Some(start.elapsed().as_secs_f64());
            rec.error = Some(e.to_string());
            vec![rec]
        }
    }
}

/// Runs the full `(model, seed)` grid. Cells execute in parallel, bounded by
/// `workers`; `on_finished` fires once per completed run (serialized by the
/// caller's sink). The returned records are in declaration order: models in
/// config order, seeds ascending, tasks ascending.
pub fn run_grid(
    cfg: &ExperimentConfig,
    workers: Option<usize>,
    on_finished: Option<&(dyn Fn(&[RunRecord]) + Sync)>,
) -> Result<Vec<RunRecord>> {
    let variants = cfg.variants()?;
    let seeds = cfg.seeds.resolve();
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| hetgp::error::Error::contract(format!("thread pool: {e}")))?;

    let nested: Vec<Vec<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, seed)| {
                let records = run_single(variant, seed, cfg);
                if let Some(cb) = on_finished {
                    cb(&records);
                }
                records
            })
            .collect()
    });
    Ok(nested.into_iter().flatten().collect())
}
