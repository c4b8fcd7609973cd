//! Per-sample export of intermediate representations as tab-separated text.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError};
use crate::autodiff::Graph;
use crate::data::{Batch, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DomainModule,
    TaskModule,
    Fused,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::DomainModule => "domain_module",
            Stage::TaskModule => "task_module",
            Stage::Fused => "fused",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "domain_module" => Ok(Stage::DomainModule),
            "task_module" => Ok(Stage::TaskModule),
            "fused" => Ok(Stage::Fused),
            other => Err(format!("unknown stage '{other}' (expected domain_module, task_module or fused)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("stage {stage} is not produced by variant {variant} for task {task}")]
    StageUnavailable {
        stage: Stage,
        variant: crate::variants::VariantKind,
        task: usize,
    },
    #[error("task {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },
    #[error("nothing to export: the slice is empty")]
    EmptySlice,
}

/// Writes one row per sample, in dataset order. Each row holds the stage
/// embedding for `task` followed by the sample's domain, the task and its labels.
/// Returns the number of rows written.
pub fn export_embeddings<W: Write>(model: &Model, ds: &Dataset, stage: Stage, task: usize, batch_size: usize, mut out: W) -> Result<usize, ExportError> {
    let tasks = ds.tasks();
    if task >= tasks {
        return Err(ExportError::TaskOutOfRange { task, tasks });
    }
    if ds.is_empty() {
        return Err(ExportError::EmptySlice);
    }
    let width = match stage {
        Stage::Fused => model.arch.fused_width(),
        _ => model.arch.dims().expert_dim,
    };
    let mut header: Vec<String> = (0..width).map(|i| format!("dim{i}")).collect();
    header.push("domain".into());
    header.push("task".into());
    header.extend((0..tasks).map(|t| format!("label_{t}")));
    writeln!(out, "{}", header.join("\t"))?;

    let samples = ds.samples();
    let batch_size = batch_size.max(1);
    let mut start = 0;
    while start < samples.len() {
        let domain = samples[start].domain;
        let mut end = start + 1;
        while end < samples.len() && end - start < batch_size && samples[end].domain == domain {
            end += 1;
        }
        let chunk = &samples[start..end];
        let batch = Batch::from_samples(domain as usize, ds.space().fields.len(), tasks, chunk);
        let mut g = Graph::<f32>::new();
        let bound = model.params.bind(&mut g);
        let fwd = model.arch.forward(&mut g, &bound, &batch)?;
        let var = match stage {
            Stage::DomainModule => fwd.trace.domain_module,
            Stage::TaskModule => fwd.trace.task_module[task],
            Stage::Fused => fwd.trace.fused[task],
        }
        .ok_or(ExportError::StageUnavailable {
            stage,
            variant: model.arch.kind(),
            task,
        })?;
        let value = g.value(var);
        for (r, s) in chunk.iter().enumerate() {
            let mut cells: Vec<String> = value.row(r).iter().map(|v| v.to_string()).collect();
            cells.push(s.domain.to_string());
            cells.push(task.to_string());
            cells.extend(s.labels.iter().map(|y| y.to_string()));
            writeln!(out, "{}", cells.join("\t"))?;
        }
        start = end;
    }
    out.flush()?;
    Ok(samples.len())
}
