//! From-scratch evaluation: a fresh decoder is trained on each budget
//! snapshot alone and scored on the held-out split.
//!
//! Sequence labeling is scored with token-level micro-F1 over every label
//! except 0, which is taken to be the outside tag.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::active::BudgetCheckpoint;
use crate::data::{parse_id_labels, Dataset, Label, Split, TaskKind};
use crate::decoder::{train_to_plateau, DecoderModel, Example, TrainConfig};
use crate::encoder::{EncodedSample, EncoderStack};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    TokenMicroF1,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Metric::Accuracy,
            TaskKind::Labeling => Metric::TokenMicroF1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::TokenMicroF1 => "token_micro_f1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub strategy: String,
    pub seed: u64,
    pub fraction: f64,
    pub size: usize,
    pub metric: Metric,
    pub value: f64,
}

/// Scores `decoder` on `split` under the identity adapter.
pub fn evaluate(decoder: &DecoderModel, split: &Split, task: TaskKind) -> Result<f64> {
    let stack = EncoderStack::new(&split.store);
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (id, gold) in split.gold.iter().enumerate() {
        let sample = stack.encode_rows(id as u32)?;
        let pred = decoder.predict_rows(&sample.rows)?;
        for (&p, &g) in pred.iter().zip(gold.targets()) {
            let p = p as u32;
            total += 1;
            correct += usize::from(p == g);
            if p == g {
                tp += usize::from(g != 0);
            } else {
                fp += usize::from(p != 0);
                fnn += usize::from(g != 0);
            }
        }
    }
    Ok(match task {
        TaskKind::Classification => correct as f64 / total.max(1) as f64,
        TaskKind::Labeling => {
            let denom = 2 * tp + fp + fnn;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        }
    })
}

/// Trains a fresh decoder on `labeled` only and scores it on the test split.
/// Returns `None` for an empty snapshot.
pub fn eval_from_scratch(
    dataset: &Dataset,
    labeled: &[(u32, Label)],
    train: &TrainConfig,
    seed: u64,
) -> Result<Option<f64>> {
    let test = dataset
        .test
        .as_ref()
        .ok_or_else(|| Error::Config(format!("dataset {:?} has no test split", dataset.name)))?;
    if labeled.is_empty() {
        warn!("empty snapshot skipped");
        return Ok(None);
    }
    let stack = EncoderStack::new(&dataset.train.store);
    let samples = labeled
        .iter()
        .map(|(id, _)| stack.encode_rows(*id))
        .collect::<Result<Vec<EncodedSample>>>()?;
    let batch: Vec<Example<'_>> = samples
        .iter()
        .zip(labeled)
        .map(|(s, (_, l))| Example {
            rows: &s.rows,
            targets: l.targets(),
        })
        .collect();
    let mut decoder =
        DecoderModel::random(train.architecture, dataset.dim(), dataset.num_labels, seed)?;
    train_to_plateau(&mut decoder, &batch, train)?;
    evaluate(&decoder, test, dataset.task).map(Some)
}

/// One row per checkpoint.
pub fn eval_checkpoints(
    dataset: &Dataset,
    checkpoints: &[BudgetCheckpoint],
    train: &TrainConfig,
    strategy: &str,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let metric = Metric::for_task(dataset.task);
    let mut rows = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        if let Some(value) = eval_from_scratch(dataset, &c.labeled, train, seed)? {
            rows.push(EvalRow {
                strategy: strategy.to_string(),
                seed,
                fraction: c.fraction,
                size: c.labeled.len(),
                metric,
                value,
            });
        }
    }
    Ok(rows)
}

/// Reads a checkpoint TSV written by a run.
pub fn read_checkpoint(path: &Path, task: TaskKind) -> Result<Vec<(u32, Label)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_id_labels(&text, task)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    if rows.iter().any(|r| r.metric == Metric::TokenMicroF1) {
        out.push_str("# token-level micro-F1 over labels other than 0; no span decoding\n");
    }
    out.push_str("strategy,seed,fraction,size,metric,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.strategy,
            r.seed,
            r.fraction,
            r.size,
            r.metric.name(),
            r.value
        ));
    }
    out
}

/// Mean value per (strategy, fraction), in first-seen order.
pub fn mean_by_budget(rows: &[EvalRow]) -> Vec<(String, f64, f64)> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(s, f)| *s == r.strategy && *f == r.fraction) {
            keys.push((r.strategy.clone(), r.fraction));
        }
    }
    keys.into_iter()
        .map(|(s, f)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == s && r.fraction == f)
                .map(|r| r.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (s, f, mean)
        })
        .collect()
}
