//! Multi-task training loop: temperature-sampled task draws, uniform
//! with-replacement batch draws, gradient clipping, Adam over the
//! sampled task's active parameter set, and JSONL run logging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, TaskBatch};
use crate::optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
use crate::rng::derived;
use crate::sampler::TaskSampler;
use crate::tensor::Tape;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    /// Task-sampling temperature exponent; 0 is uniform, 1 proportional.
    pub alpha: f64,
    pub seed: u64,
    /// Emit a train record every this many steps (0 logs only the last).
    pub log_every: u64,
    /// Run the eval suite every this many steps (0 evaluates only at the end).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup: 100,
            clip_norm: 1.0,
            alpha: 0.5,
            seed: 7,
            log_every: 50,
            eval_every: 0,
        }
    }
}

/// Per-task example splits, keyed by task name.
pub type Dataset = BTreeMap<String, TaskSplits>;

#[derive(Debug, Clone, Default)]
pub struct TaskSplits {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Line-oriented JSON run log; every record carries a `kind` field and
/// step-indexed content only, so identical runs produce identical logs.
pub struct RunLog {
    out: Option<Box<dyn Write>>,
}

impl RunLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(Box::new(std::io::BufWriter::new(file))),
        })
    }

    pub fn to_writer(w: Box<dyn Write>) -> Self {
        Self { out: Some(w) }
    }

    pub fn discard() -> Self {
        Self { out: None }
    }

    fn emit(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, &record)
                .map_err(|e| Error::Format(e.to_string()))?;
            out.write_all(b"\n")
                .map_err(|e| Error::Format(format!("run log: {e}")))?;
        }
        Ok(())
    }

    pub fn train(&mut self, step: u64, task: &str, loss: f64, lr: f64) -> Result<()> {
        self.emit(serde_json::json!({
            "kind": "train", "step": step, "task": task, "loss": loss, "lr": lr,
        }))
    }

    pub fn eval(&mut self, step: u64, task: &str, metric: &str, value: f64) -> Result<()> {
        self.emit(serde_json::json!({
            "kind": "eval", "step": step, "task": task, "metric": metric, "value": value,
        }))
    }

    pub fn note(&mut self, kind: &str, fields: serde_json::Value) -> Result<()> {
        let mut record = serde_json::json!({ "kind": kind });
        if let (Some(r), Some(f)) = (record.as_object_mut(), fields.as_object()) {
            for (k, v) in f {
                r.insert(k.clone(), v.clone());
            }
        }
        self.emit(record)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()
                .map_err(|e| Error::Format(format!("run log: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean loss per task over the final quarter of its draws.
    pub recent_loss: BTreeMap<String, f64>,
    /// How often each task was drawn.
    pub draws: BTreeMap<String, u64>,
    /// Final eval metric per task.
    pub eval: BTreeMap<String, f64>,
}

/// One optimization step on one task batch: forward, backward, clip,
/// Adam update restricted to `trainable` — every other parameter keeps
/// its value even though its gradient may be populated. Returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut MultiTaskModel,
    adam: &mut Adam,
    step: u64,
    task: &str,
    batch: &TaskBatch,
    lr: f64,
    clip_norm: f64,
    dropout_rng: Option<&mut ChaCha20Rng>,
    trainable: &[String],
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, task, batch, dropout_rng)?;
    let value = tape.data(loss)[0];
    if !value.is_finite() {
        return Err(Error::Diverged { step, value });
    }
    model.params.zero_grads();
    tape.backward(loss, &mut model.params)?;
    clip_global_norm(&mut model.params, trainable, clip_norm)?;
    adam.step(&mut model.params, trainable, lr)?;
    Ok(value)
}

/// Evaluate every task that has eval data; returns (task, metric value)
/// in task order.
pub fn evaluate_all(
    model: &MultiTaskModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for task in model.tasks() {
        if let Some(splits) = data.get(&task.name) {
            if !splits.eval.is_empty() {
                let value = model.evaluate(&task.name, &splits.eval, batch_size)?;
                out.push((task.name.clone(), value));
            }
        }
    }
    Ok(out)
}

fn metric_name(model: &MultiTaskModel, task: &str) -> String {
    model
        .task(task)
        .map(|t| format!("{:?}", t.metric).to_lowercase())
        .unwrap_or_else(|_| "metric".into())
}

/// Temperature-sampled multi-task training over every model task present
/// in `data`. Batches draw uniformly with replacement from the drawn
/// task's training split. Each task updates its own active parameters.
pub fn train_multitask(
    model: &mut MultiTaskModel,
    data: &Dataset,
    config: &TrainConfig,
    log: &mut RunLog,
) -> Result<TrainSummary> {
    let mut trainable = BTreeMap::new();
    for task in model.tasks() {
        if data.contains_key(&task.name) {
            trainable.insert(task.name.clone(), model.active_param_names(&task.name)?);
        }
    }
    train_with_trainable(model, data, config, log, &trainable)
}

/// The same loop with an explicit per-task trainable set, for runs that
/// freeze part of the network (adaptation, head-only probes).
pub fn train_with_trainable(
    model: &mut MultiTaskModel,
    data: &Dataset,
    config: &TrainConfig,
    log: &mut RunLog,
    trainable: &BTreeMap<String, Vec<String>>,
) -> Result<TrainSummary> {
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "training needs at least one step and a non-empty batch".into(),
        ));
    }
    let sizes: Vec<(String, usize)> = model
        .tasks()
        .iter()
        .filter_map(|t| {
            data.get(&t.name)
                .filter(|s| !s.train.is_empty())
                .map(|s| (t.name.clone(), s.train.len()))
        })
        .collect();
    if sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "no task has training examples".into(),
        ));
    }
    for (name, _) in &sizes {
        if !trainable.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "task {name} has training data but no trainable parameter list"
            )));
        }
    }
    let sampler = TaskSampler::new(&sizes, config.alpha)?;
    let schedule = LrSchedule::new(config.peak_lr, config.warmup, config.steps)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = derived(config.seed, "train-loop");

    let mut draws: BTreeMap<String, u64> = BTreeMap::new();
    let mut tail_losses: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let tail_from = config.steps - config.steps / 4;

    for step in 1..=config.steps {
        let task = sampler.draw_name(&mut rng).to_string();
        let train = &data[&task].train;
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let examples: Vec<Example> = indices.into_iter().map(|i| train[i].clone()).collect();
        let batch = model.encode_batch(&task, &examples)?;
        let lr = schedule.lr_at(step);
        let loss = train_step(
            model,
            &mut adam,
            step,
            &task,
            &batch,
            lr,
            config.clip_norm,
            None,
            &trainable[&task],
        )?;
        *draws.entry(task.clone()).or_default() += 1;
        if step >= tail_from {
            tail_losses.entry(task.clone()).or_default().push(loss);
        }
        if (config.log_every > 0 && step % config.log_every == 0) || step == config.steps {
            log.train(step, &task, loss, lr)?;
        }
        if config.eval_every > 0 && step % config.eval_every == 0 && step != config.steps {
            for (name, value) in evaluate_all(model, data, config.batch_size)? {
                let metric = metric_name(model, &name);
                log.eval(step, &name, &metric, value)?;
            }
        }
    }

    let mut eval = BTreeMap::new();
    for (name, value) in evaluate_all(model, data, config.batch_size)? {
        let metric = metric_name(model, &name);
        log.eval(config.steps, &name, &metric, value)?;
        eval.insert(name, value);
    }
    log.flush()?;

    let recent_loss = tail_losses
        .into_iter()
        .map(|(task, losses)| {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            (task, mean)
        })
        .collect();
    Ok(TrainSummary {
        steps: config.steps,
        recent_loss,
        draws,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_sentiment, gen_topic};
    use crate::encoder::EncoderConfig;
    use crate::data::vocab::Vocab;
    use crate::routing::{standard_tasks, SkillRegistry};

    fn tiny_model(seed: u64) -> MultiTaskModel {
        let mut c = EncoderConfig::desk_scale(Vocab::standard().len());
        c.hidden = 16;
        c.heads = 2;
        c.ffn_inner = 24;
        c.max_len = 32;
        MultiTaskModel::init(c, SkillRegistry::standard(), standard_tasks(), seed).unwrap()
    }

    fn sentiment_data(n_train: usize, n_eval: usize) -> Dataset {
        let mut rng = crate::rng::derived(5, "trainer-data");
        let mut data = Dataset::new();
        data.insert(
            "sentiment".into(),
            TaskSplits {
                train: gen_sentiment(&mut rng, n_train),
                eval: gen_sentiment(&mut rng, n_eval),
            },
        );
        data
    }

    #[test]
    fn loss_falls_below_coin_flipping_on_a_separable_task() {
        let mut model = tiny_model(1);
        let data = sentiment_data(400, 80);
        let config = TrainConfig {
            steps: 200,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup: 20,
            alpha: 0.5,
            seed: 2,
            log_every: 0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let summary =
            train_multitask(&mut model, &data, &config, &mut RunLog::discard()).unwrap();
        let loss = summary.recent_loss["sentiment"];
        assert!(
            loss < std::f64::consts::LN_2,
            "recent loss {loss} still at chance"
        );
        assert!(summary.eval["sentiment"] > 0.8);
    }

    #[test]
    fn identical_configs_produce_bit_identical_trajectories() {
        let run = || {
            let mut model = tiny_model(3);
            let data = sentiment_data(60, 12);
            let config = TrainConfig {
                steps: 25,
                batch_size: 4,
                peak_lr: 1e-3,
                warmup: 5,
                seed: 9,
                log_every: 1,
                eval_every: 0,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run.jsonl");
            let mut log = RunLog::to_file(&path).unwrap();
            train_multitask(&mut model, &data, &config, &mut log).unwrap();
            drop(log);
            let sink = std::fs::read(&path).unwrap();
            let values: Vec<Vec<u8>> = model
                .params
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_le_bytes().to_vec()))
                .collect();
            (sink, values)
        };
        let (log_a, params_a) = run();
        let (log_b, params_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(params_a, params_b);
        assert!(!log_a.is_empty());
    }

    #[test]
    fn run_log_lines_are_step_indexed_json_without_timestamps() {
        let mut model = tiny_model(4);
        let mut data = sentiment_data(40, 8);
        let mut rng = crate::rng::derived(6, "trainer-topic");
        data.insert(
            "topic".into(),
            TaskSplits {
                train: gen_topic(&mut rng, 40),
                eval: gen_topic(&mut rng, 8),
            },
        );
        let config = TrainConfig {
            steps: 12,
            batch_size: 4,
            warmup: 3,
            seed: 1,
            log_every: 4,
            eval_every: 6,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut log = RunLog::to_file(&path).unwrap();
        train_multitask(&mut model, &data, &config, &mut log).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut kinds = std::collections::BTreeSet::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let obj = v.as_object().unwrap();
            kinds.insert(obj["kind"].as_str().unwrap().to_string());
            assert!(obj.contains_key("step"));
            assert!(!obj.contains_key("time") && !obj.contains_key("timestamp"));
        }
        assert!(kinds.contains("train") && kinds.contains("eval"));
    }

    #[test]
    fn non_finite_losses_stop_the_run() {
        let mut model = tiny_model(5);
        for p in model.params.iter_mut() {
            if p.name() == "head.sentiment.cls.b" {
                p.value.data_mut()[0] = f64::NAN;
            }
        }
        let data = sentiment_data(20, 4);
        let config = TrainConfig {
            steps: 3,
            batch_size: 2,
            warmup: 1,
            seed: 1,
            log_every: 0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let err = train_multitask(&mut model, &data, &config, &mut RunLog::discard());
        assert!(matches!(err, Err(Error::Diverged { .. })));
    }

    #[test]
    fn every_listed_task_gets_drawn() {
        let mut model = tiny_model(6);
        let mut data = sentiment_data(50, 0);
        let mut rng = crate::rng::derived(8, "trainer-mix");
        data.insert(
            "topic".into(),
            TaskSplits {
                train: gen_topic(&mut rng, 50),
                eval: Vec::new(),
            },
        );
        let config = TrainConfig {
            steps: 40,
            batch_size: 2,
            warmup: 5,
            alpha: 0.0,
            seed: 3,
            log_every: 0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let summary =
            train_multitask(&mut model, &data, &config, &mut RunLog::discard()).unwrap();
        assert!(summary.draws["sentiment"] > 0);
        assert!(summary.draws["topic"] > 0);
        assert_eq!(summary.draws.values().sum::<u64>(), 40);
        assert!(summary.eval.is_empty());
    }
}
