use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use super::{
    eval_instances, greedy_mean_length, save_checkpoint, Algorithm, ExperimentConfig, HarnessError, MetricLog, MetricRow,
};
use crate::algo::{
    collect_rollouts, compute_advantages, maybe_promote_baseline, ppo_update, reinforce_update, Actor, AlgoError,
    BaselineKind, UpdateStats,
};
use crate::env::VectorEnv;
use crate::model::AttentionModel;
use crate::nn::Adam;
use crate::problems::{generate_instance, ProblemInstance};
use crate::seeds::{derive_seed, SeedSplitter, EVAL_SEED_BASE};

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AttentionModel<f32>,
    pub collections: u64,
    pub env_steps: u64,
    /// Optimizer steps taken.
    pub global_step: u64,
    pub best_eval_length: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics: PathBuf,
}

pub fn checkpoint_path(dir: &Path, collection: u64) -> PathBuf {
    dir.join(format!("checkpoint-{collection:06}.ckpt"))
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_COPY: &str = "config.toml";

fn training_batch(cfg: &ExperimentConfig, seeds: &SeedSplitter, collection: u64) -> Result<Vec<Arc<ProblemInstance>>, HarnessError> {
    let m = cfg.num_instances as u64;
    (0..m)
        .map(|i| Ok(Arc::new(generate_instance(cfg.kind, cfg.n, seeds.train_instance_seed(collection * m + i))?)))
        .collect()
}

/// Collect → advantages → update until the env-step budget (or wall-clock limit) is spent.
///
/// Writes a copy of the config, `metrics.csv`, the initial checkpoint,
/// numbered checkpoints at the configured cadence plus the last collection,
/// and `best.ckpt` whenever the greedy evaluation length improves. A
/// non-finite loss aborts the run; checkpoints already on disk are kept.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    cfg.save(&out.join(CONFIG_COPY))?;

    let seeds = SeedSplitter::new(cfg.seed);
    let mut model = AttentionModel::<f32>::new(cfg.kind, cfg.model_config(), seeds.seed("model"))?;
    let eval = eval_instances(cfg.kind, cfg.n, cfg.eval_size, cfg.eval_seed)?;
    let mut sampler = seeds.rng("sampler");
    let mut shuffle = seeds.rng("shuffle");
    let mut opt = Adam::new(cfg.learning_rate);
    let ppo = cfg.ppo_config();
    let reinforce = cfg.reinforce_config();
    let spec = cfg.baseline_spec();
    let greedy_baseline = cfg.algorithm == Algorithm::Reinforce && cfg.baseline == BaselineKind::GreedyRollout;
    let mut baseline = greedy_baseline.then(|| model.clone());
    let baseline_set: Vec<Arc<ProblemInstance>> = if greedy_baseline {
        (0..cfg.eval_size as u64)
            .map(|i| Ok(Arc::new(generate_instance(cfg.kind, cfg.n, derive_seed(seeds.seed("baseline"), i) & !EVAL_SEED_BASE)?)))
            .collect::<Result<_, HarnessError>>()?
    } else {
        Vec::new()
    };

    let mut last_checkpoint = checkpoint_path(&out, 0);
    save_checkpoint(&last_checkpoint, &model, 0, 0)?;
    let metrics = out.join(METRICS_FILE);
    let mut log = MetricLog::create(&metrics)?;
    let spc = cfg.steps_per_collection();
    let start = Instant::now();
    let out_of_time = |start: &Instant| cfg.max_wall_time_s > 0.0 && start.elapsed().as_secs_f64() >= cfg.max_wall_time_s;
    let mut env_steps = 0u64;
    let mut collections = 0u64;
    let mut best: Option<f64> = None;
    let mut best_checkpoint = None;

    while env_steps + spc <= cfg.total_env_steps && !out_of_time(&start) {
        let instances = training_batch(cfg, &seeds, collections)?;
        collections += 1;
        let result: Result<UpdateStats, AlgoError> = match cfg.algorithm {
            Algorithm::Ppo => (|| {
                let mut env = VectorEnv::from_instances(instances, cfg.trajectories_per_instance, cfg.reward_mode)?;
                let mut buf = collect_rollouts(&mut env, &model, cfg.horizon(), Actor::Sample(&mut sampler))?;
                compute_advantages(&mut buf, cfg.discount, cfg.gae_lambda);
                ppo_update(&mut model, &buf, &ppo, &mut opt, &mut shuffle)
            })(),
            Algorithm::Reinforce => {
                reinforce_update(&mut model, &instances, &spec, baseline.as_ref(), &reinforce, &mut opt, &mut sampler)
            }
        };
        let stats = match result {
            Ok(s) => s,
            Err(e @ AlgoError::Divergence { .. }) => {
                return Err(HarnessError::Diverged { reason: e.to_string(), last_checkpoint });
            }
            Err(e) => return Err(e.into()),
        };
        env_steps += spc;

        let last = env_steps + spc > cfg.total_env_steps || out_of_time(&start);
        let mut eval_len = None;
        if collections % cfg.eval_every as u64 == 0 || last {
            let len = greedy_mean_length(&model, &eval)?;
            if !len.is_finite() {
                return Err(HarnessError::Diverged { reason: "non-finite evaluation length".into(), last_checkpoint });
            }
            if best.is_none_or(|b| len < b) {
                best = Some(len);
                let p = out.join(BEST_CHECKPOINT);
                save_checkpoint(&p, &model, opt.steps(), env_steps)?;
                best_checkpoint = Some(p);
            }
            if let Some(bl) = baseline.as_mut() {
                maybe_promote_baseline(&model, bl, &baseline_set, spec.significance)?;
            }
            eval_len = Some(len);
        }
        log.append(&MetricRow {
            update: collections,
            global_step: opt.steps(),
            env_steps,
            mean_episode_return: stats.mean_episode_return,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            eval_greedy_length: eval_len,
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
        if collections % cfg.checkpoint_every as u64 == 0 || last {
            last_checkpoint = checkpoint_path(&out, collections);
            save_checkpoint(&last_checkpoint, &model, opt.steps(), env_steps)?;
        }
    }

    Ok(TrainOutcome {
        model,
        collections,
        env_steps,
        global_step: opt.steps(),
        best_eval_length: best,
        final_checkpoint: last_checkpoint,
        best_checkpoint,
        metrics,
    })
}
