//! Ablation runner: evaluate trained checkpoints per (variant label, seed),
//! average over seeds, and emit a comparison table with overall and
//! distractor-heavy blocks.

use crate::checkpoint::load_checkpoint;
use crate::config::TrackSettings;
use crate::error::{Error, Result};
use crate::metrics::{
    build_report, sequence_metrics, summary_tsv_header, summary_tsv_row, MetricReport,
    MetricSummary, SequenceMetrics,
};
use crate::model::Model;
use crate::synth::LoadedSequence;
use crate::track::track_sequence;
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Evaluate one model over a corpus; sequences run in parallel and assemble
/// in name order.
pub fn evaluate_model(
    model: &Model,
    corpus: &[LoadedSequence],
    settings: &TrackSettings,
    frame_size: usize,
) -> Result<MetricReport> {
    let seq_metrics: Vec<Result<SequenceMetrics>> = corpus
        .par_iter()
        .map(|seq| -> Result<SequenceMetrics> {
            let frames: Vec<_> = seq.frames.iter().map(|f| f.to_image()).collect();
            let rows = track_sequence(model, &frames, &seq.boxes[0], settings)?;
            sequence_metrics(&seq.name, &seq.tags, &rows, &seq.boxes, frame_size)
        })
        .collect();
    let mut out = Vec::with_capacity(seq_metrics.len());
    for m in seq_metrics {
        out.push(m?);
    }
    build_report(out)
}

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub label: String,
    pub seed: u64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub absent_seeds: Vec<u64>,
    pub overall: Option<MetricSummary>,
    pub distractor_heavy: Option<MetricSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mean_summaries(parts: &[MetricSummary]) -> Option<MetricSummary> {
    if parts.is_empty() {
        return None;
    }
    let n = parts.len() as f64;
    Some(MetricSummary {
        auc: parts.iter().map(|s| s.auc).sum::<f64>() / n,
        p_norm: parts.iter().map(|s| s.p_norm).sum::<f64>() / n,
        p: parts.iter().map(|s| s.p).sum::<f64>() / n,
        ao: parts.iter().map(|s| s.ao).sum::<f64>() / n,
        sr50: parts.iter().map(|s| s.sr50).sum::<f64>() / n,
        sr75: parts.iter().map(|s| s.sr75).sum::<f64>() / n,
        sequences: parts[0].sequences,
        frames: parts.iter().map(|s| s.frames).sum::<usize>() / parts.len(),
    })
}

/// Evaluate every entry; a missing checkpoint lists its seed as absent and
/// the run continues. Labels keep their first-seen order.
pub fn run_ablation(
    corpus: &[LoadedSequence],
    entries: &[AblationEntry],
    settings: &TrackSettings,
    frame_size: usize,
) -> Result<AblationReport> {
    let mut labels: Vec<String> = Vec::new();
    for e in entries {
        if !labels.contains(&e.label) {
            labels.push(e.label.clone());
        }
    }
    let mut rows = Vec::new();
    for label in labels {
        let mut seeds = Vec::new();
        let mut absent = Vec::new();
        let mut overalls = Vec::new();
        let mut heavies = Vec::new();
        for e in entries.iter().filter(|e| e.label == label) {
            if !e.checkpoint.exists() {
                absent.push(e.seed);
                continue;
            }
            let ckpt = load_checkpoint(&e.checkpoint)?;
            let report = evaluate_model(&ckpt.model, corpus, settings, frame_size)?;
            seeds.push(e.seed);
            overalls.push(report.overall);
            if let Some(h) = report.distractor_heavy {
                heavies.push(h);
            }
        }
        rows.push(AblationRow {
            label,
            seeds,
            absent_seeds: absent,
            overall: mean_summaries(&overalls),
            distractor_heavy: mean_summaries(&heavies),
        });
    }
    Ok(AblationReport { rows })
}

/// TSV table mirroring the comparison layout: one block of rows for the full
/// set, one for the distractor-heavy subset.
pub fn ablation_tsv(report: &AblationReport) -> String {
    let mut s = String::new();
    s.push_str(&summary_tsv_header());
    s.push('\n');
    for row in &report.rows {
        match &row.overall {
            Some(m) => {
                s.push_str(&summary_tsv_row(&format!("{} (overall)", row.label), m));
                s.push('\n');
            }
            None => {
                s.push_str(&format!("{} (overall)\tabsent\n", row.label));
            }
        }
    }
    for row in &report.rows {
        match &row.distractor_heavy {
            Some(m) => {
                s.push_str(&summary_tsv_row(
                    &format!("{} (distractor-heavy)", row.label),
                    m,
                ));
                s.push('\n');
            }
            None => {
                s.push_str(&format!("{} (distractor-heavy)\tabsent\n", row.label));
            }
        }
    }
    for row in &report.rows {
        if !row.absent_seeds.is_empty() {
            s.push_str(&format!(
                "# {}: absent checkpoints for seeds {:?}\n",
                row.label, row.absent_seeds
            ));
        }
    }
    s
}

pub fn write_ablation(path_tsv: &Path, report: &AblationReport) -> Result<()> {
    std::fs::write(path_tsv, ablation_tsv(report))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::contract(format!("ablation serialization: {e}")))?;
    std::fs::write(path_tsv.with_extension("json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{save_checkpoint, Checkpoint};
    use crate::config::RunConfig;
    use crate::model::ModelConfig;
    use crate::rng::RngHub;
    use crate::synth::{generate_sequence, Scenario, StoredFrame};

    fn tiny_corpus(n: usize) -> Vec<LoadedSequence> {
        (0..n)
            .map(|i| {
                let mut sc = Scenario::new(64, 4);
                sc.distractor_count = if i % 2 == 0 { 3 } else { 0 };
                let seq = generate_sequence(&sc, 400 + i as u64);
                LoadedSequence {
                    name: format!("seq_{i:04}"),
                    frames: seq.frames.iter().map(StoredFrame::from_image).collect(),
                    boxes: seq.boxes,
                    tags: seq.tags,
                }
            })
            .collect()
    }

    fn tiny_ckpt(dir: &Path, seed: u64) -> PathBuf {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            template_size: 16,
            search_size: 32,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: 1,
            head_channels: 16,
            ..ModelConfig::default()
        };
        cfg.seed = seed;
        let model = Model::init(cfg.model.clone(), &RngHub::new(seed)).unwrap();
        let p = dir.join(format!("m{seed}.romc"));
        save_checkpoint(&p, &Checkpoint::new(cfg, model, None, 0)).unwrap();
        p
    }

    #[test]
    fn same_checkpoint_evaluates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(2);
        let p = tiny_ckpt(dir.path(), 1);
        let entries = vec![
            AblationEntry { label: "a".into(), seed: 1, checkpoint: p.clone() },
            AblationEntry { label: "b".into(), seed: 1, checkpoint: p },
        ];
        let r = run_ablation(&corpus, &entries, &TrackSettings::default(), 64).unwrap();
        let a = r.rows[0].overall.as_ref().unwrap();
        let b = r.rows[1].overall.as_ref().unwrap();
        assert_eq!(a.ao, b.ao);
        assert_eq!(a.auc, b.auc);
    }

    #[test]
    fn missing_checkpoint_listed_absent() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(2);
        let good = tiny_ckpt(dir.path(), 2);
        let entries = vec![
            AblationEntry { label: "x".into(), seed: 2, checkpoint: good },
            AblationEntry {
                label: "x".into(),
                seed: 3,
                checkpoint: dir.path().join("missing.romc"),
            },
        ];
        let r = run_ablation(&corpus, &entries, &TrackSettings::default(), 64).unwrap();
        assert_eq!(r.rows[0].seeds, vec![2]);
        assert_eq!(r.rows[0].absent_seeds, vec![3]);
        let tsv = ablation_tsv(&r);
        assert!(tsv.contains("absent checkpoints for seeds [3]"));
    }

    #[test]
    fn report_has_both_blocks_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(4);
        let p = tiny_ckpt(dir.path(), 5);
        let entries = vec![AblationEntry { label: "only".into(), seed: 5, checkpoint: p }];
        let r = run_ablation(&corpus, &entries, &TrackSettings::default(), 64).unwrap();
        assert!(r.rows[0].distractor_heavy.is_some(), "heavy subset block");
        let tsv = ablation_tsv(&r);
        for col in ["AUC", "P_Norm", "P", "AO", "SR_0.5", "SR_0.75"] {
            assert!(tsv.contains(col), "missing column {col}");
        }
        assert!(tsv.contains("(distractor-heavy)"));
    }

    #[test]
    fn distractor_subset_equals_tagged_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(4);
        let p = tiny_ckpt(dir.path(), 7);
        let ckpt = load_checkpoint(&p).unwrap();
        let full = evaluate_model(&ckpt.model, &corpus, &TrackSettings::default(), 64).unwrap();
        let heavy_only: Vec<LoadedSequence> = corpus
            .iter()
            .filter(|s| s.tags.is_distractor_heavy())
            .cloned()
            .collect();
        let sub = evaluate_model(&ckpt.model, &heavy_only, &TrackSettings::default(), 64).unwrap();
        let a = full.distractor_heavy.unwrap();
        assert!((a.ao - sub.overall.ao).abs() < 1e-12);
        assert!((a.auc - sub.overall.auc).abs() < 1e-12);
    }
}
