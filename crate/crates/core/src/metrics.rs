//! Tracking metrics: success AUC, precision, normalized precision, and the
//! average-overlap family, plus report assembly and serialization.
//!
//! Success and SR use strict inequality (IoU > tau); precision and
//! normalized precision use <=. The precision threshold is 20 px scaled by
//! frame_size / 256.

use crate::error::{Error, Result};
use crate::geom::{iou, PixelBox};
use crate::synth::SequenceTags;
use serde::Serialize;
use std::path::Path;

pub fn precision_threshold_px(frame_size: usize) -> f64 {
    20.0 * frame_size as f64 / 256.0
}

/// Mean over tau in {0, 0.05, ..., 1} of fraction(IoU > tau).
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::contract("success_auc: empty series"));
    }
    let mut acc = 0.0;
    for k in 0..=20 {
        let tau = k as f64 * 0.05;
        let frac = ious.iter().filter(|&&v| v > tau).count() as f64 / ious.len() as f64;
        acc += frac;
    }
    Ok(acc / 21.0)
}

/// Fraction of frames whose center error does not exceed the threshold.
pub fn precision(center_err_px: &[f64], threshold: f64) -> Result<f64> {
    if center_err_px.is_empty() {
        return Err(Error::contract("precision: empty series"));
    }
    Ok(center_err_px.iter().filter(|&&e| e <= threshold).count() as f64
        / center_err_px.len() as f64)
}

/// Normalized area under fraction(err <= tau) for tau in [0, 0.5]; errors
/// are center distances divided by sqrt(gt_w * gt_h).
pub fn norm_precision(center_err_norm: &[f64]) -> Result<f64> {
    if center_err_norm.is_empty() {
        return Err(Error::contract("norm_precision: empty series"));
    }
    let mut acc = 0.0;
    for k in 0..=50 {
        let tau = k as f64 * 0.01;
        let frac = center_err_norm.iter().filter(|&&e| e <= tau).count() as f64
            / center_err_norm.len() as f64;
        acc += frac;
    }
    Ok(acc / 51.0)
}

/// (mean IoU, fraction > 0.5, fraction > 0.75)
pub fn ao_sr(ious: &[f64]) -> Result<(f64, f64, f64)> {
    if ious.is_empty() {
        return Err(Error::contract("ao_sr: empty series"));
    }
    let n = ious.len() as f64;
    let ao = ious.iter().sum::<f64>() / n;
    let sr50 = ious.iter().filter(|&&v| v > 0.5).count() as f64 / n;
    let sr75 = ious.iter().filter(|&&v| v > 0.75).count() as f64 / n;
    Ok((ao, sr50, sr75))
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricSummary {
    pub auc: f64,
    pub p_norm: f64,
    pub p: f64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub sequences: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub distractor_heavy: bool,
    pub ious: Vec<f64>,
    pub summary: MetricSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub per_sequence: Vec<SequenceMetrics>,
    pub overall: MetricSummary,
    pub distractor_heavy: Option<MetricSummary>,
}

/// Per-frame comparison of predictions against ground truth; frame 0 is the
/// init frame and is excluded.
pub fn sequence_metrics(
    name: &str,
    tags: &SequenceTags,
    preds: &[(usize, PixelBox, f64)],
    gts: &[PixelBox],
    frame_size: usize,
) -> Result<SequenceMetrics> {
    if preds.len() != gts.len() || preds.len() < 2 {
        return Err(Error::contract(format!(
            "sequence {name}: {} predictions vs {} gt frames",
            preds.len(),
            gts.len()
        )));
    }
    let mut ious = Vec::with_capacity(preds.len() - 1);
    let mut errs_px = Vec::with_capacity(preds.len() - 1);
    let mut errs_norm = Vec::with_capacity(preds.len() - 1);
    for ((_, p, _), g) in preds.iter().zip(gts).skip(1) {
        ious.push(iou(p, g));
        let (pcx, pcy) = p.center();
        let (gcx, gcy) = g.center();
        let dist = ((pcx - gcx).powi(2) + (pcy - gcy).powi(2)).sqrt();
        errs_px.push(dist);
        errs_norm.push(dist / (g.w * g.h).sqrt().max(1e-9));
    }
    let (ao, sr50, sr75) = ao_sr(&ious)?;
    let summary = MetricSummary {
        auc: success_auc(&ious)?,
        p_norm: norm_precision(&errs_norm)?,
        p: precision(&errs_px, precision_threshold_px(frame_size))?,
        ao,
        sr50,
        sr75,
        sequences: 1,
        frames: ious.len(),
    };
    Ok(SequenceMetrics {
        name: name.to_string(),
        distractor_heavy: tags.is_distractor_heavy(),
        ious,
        summary,
    })
}

fn aggregate(seqs: &[&SequenceMetrics]) -> Result<MetricSummary> {
    if seqs.is_empty() {
        return Err(Error::contract("aggregate: no sequences"));
    }
    let n = seqs.len() as f64;
    let mean = |f: &dyn Fn(&MetricSummary) -> f64| -> f64 {
        seqs.iter().map(|s| f(&s.summary)).sum::<f64>() / n
    };
    Ok(MetricSummary {
        auc: mean(&|s| s.auc),
        p_norm: mean(&|s| s.p_norm),
        p: mean(&|s| s.p),
        ao: mean(&|s| s.ao),
        sr50: mean(&|s| s.sr50),
        sr75: mean(&|s| s.sr75),
        sequences: seqs.len(),
        frames: seqs.iter().map(|s| s.summary.frames).sum(),
    })
}

/// Assemble the full report; the distractor-heavy block appears when any
/// tagged sequence exists.
pub fn build_report(seqs: Vec<SequenceMetrics>) -> Result<MetricReport> {
    let overall = aggregate(&seqs.iter().collect::<Vec<_>>())?;
    let heavy: Vec<&SequenceMetrics> = seqs.iter().filter(|s| s.distractor_heavy).collect();
    let distractor_heavy = if heavy.is_empty() {
        None
    } else {
        Some(aggregate(&heavy)?)
    };
    Ok(MetricReport {
        per_sequence: seqs,
        overall,
        distractor_heavy,
    })
}

pub fn summary_tsv_header() -> String {
    "block\tsequences\tframes\tAUC\tP_Norm\tP\tAO\tSR_0.5\tSR_0.75".to_string()
}

pub fn summary_tsv_row(label: &str, s: &MetricSummary) -> String {
    format!(
        "{label}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
        s.sequences, s.frames, s.auc, s.p_norm, s.p, s.ao, s.sr50, s.sr75
    )
}

/// Write the TSV table plus a JSON twin next to it.
pub fn write_report(path_tsv: &Path, report: &MetricReport) -> Result<()> {
    let mut tsv = String::new();
    tsv.push_str(&summary_tsv_header());
    tsv.push('\n');
    tsv.push_str(&summary_tsv_row("overall", &report.overall));
    tsv.push('\n');
    if let Some(h) = &report.distractor_heavy {
        tsv.push_str(&summary_tsv_row("distractor_heavy", h));
        tsv.push('\n');
    }
    for s in &report.per_sequence {
        tsv.push_str(&summary_tsv_row(&s.name, &s.summary));
        tsv.push('\n');
    }
    std::fs::write(path_tsv, tsv)?;
    let json_path = path_tsv.with_extension("json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::contract(format!("report serialization: {e}")))?;
    std::fs::write(json_path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_all_perfect_is_twenty_over_twentyone() {
        let auc = success_auc(&[1.0; 7]).unwrap();
        assert!((auc - 20.0 / 21.0).abs() < 1e-12, "strict > at tau=1: {auc}");
    }

    #[test]
    fn auc_mixed_grid_oracle() {
        // [1, 0.5, 0]: tau in {0..0.45}: 2/3 (ten values), {0.5..0.95}: 1/3, {1}: 0
        let auc = success_auc(&[1.0, 0.5, 0.0]).unwrap();
        let expect = (10.0 * (2.0 / 3.0) + 10.0 * (1.0 / 3.0)) / 21.0;
        assert!((auc - expect).abs() < 1e-12);
        assert!((auc - 10.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn auc_permutation_invariant() {
        let a = success_auc(&[0.9, 0.2, 0.7, 0.55]).unwrap();
        let b = success_auc(&[0.55, 0.9, 0.2, 0.7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn precision_families_at_zero_error() {
        assert_eq!(precision(&[0.0, 0.0], 5.0).unwrap(), 1.0);
        assert_eq!(norm_precision(&[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn precision_threshold_scales_with_frame() {
        assert_eq!(precision_threshold_px(256), 20.0);
        assert_eq!(precision_threshold_px(64), 5.0);
    }

    #[test]
    fn ao_sr_hand_values() {
        let (ao, sr50, sr75) = ao_sr(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((ao, sr50, sr75), (1.0, 1.0, 1.0));

        let (ao, sr50, sr75) = ao_sr(&[1.0, 0.5, 0.0]).unwrap();
        assert!((ao - 0.5).abs() < 1e-12);
        assert!((sr50 - 1.0 / 3.0).abs() < 1e-12, "strict >: 0.5 not counted");
        assert!((sr75 - 1.0 / 3.0).abs() < 1e-12);

        let (ao, sr50, sr75) = ao_sr(&[0.6, 0.8]).unwrap();
        assert!((ao - 0.7).abs() < 1e-12);
        assert_eq!(sr50, 1.0);
        assert_eq!(sr75, 0.5);
    }

    #[test]
    fn sr_monotone_nonincreasing_and_ao_is_mean() {
        let ious = [0.3, 0.9, 0.6, 0.75, 0.1];
        let (ao, sr50, sr75) = ao_sr(&ious).unwrap();
        assert!((ao - ious.iter().sum::<f64>() / 5.0).abs() < 1e-15);
        assert!(sr50 >= sr75);
    }

    #[test]
    fn empty_series_rejected() {
        assert!(success_auc(&[]).is_err());
        assert!(ao_sr(&[]).is_err());
        assert!(precision(&[], 1.0).is_err());
        assert!(norm_precision(&[]).is_err());
    }

    #[test]
    fn perfect_oracle_report() {
        let tags = SequenceTags {
            deformation_rate: 0.0,
            distractor_count: 3,
            drift_rate: 0.0,
            seed: 0,
        };
        let gts: Vec<PixelBox> = (0..5)
            .map(|i| PixelBox::new(10.0 + i as f64, 12.0, 8.0, 6.0))
            .collect();
        let preds: Vec<(usize, PixelBox, f64)> =
            gts.iter().enumerate().map(|(i, b)| (i, *b, 1.0)).collect();
        let m = sequence_metrics("s", &tags, &preds, &gts, 64).unwrap();
        assert_eq!(m.summary.ao, 1.0);
        assert_eq!(m.summary.p, 1.0);
        assert!(m.distractor_heavy);
        let report = build_report(vec![m]).unwrap();
        assert!(report.distractor_heavy.is_some());
        assert_eq!(report.overall.ao, 1.0);
    }

    #[test]
    fn report_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let tags = SequenceTags {
            deformation_rate: 0.0,
            distractor_count: 0,
            drift_rate: 0.0,
            seed: 0,
        };
        let gts: Vec<PixelBox> = (0..4).map(|i| PixelBox::new(5.0 * i as f64, 0.0, 4.0, 4.0)).collect();
        let preds: Vec<(usize, PixelBox, f64)> =
            gts.iter().enumerate().map(|(i, b)| (i, *b, 0.9)).collect();
        let m = sequence_metrics("roundtrip", &tags, &preds, &gts, 64).unwrap();
        let report = build_report(vec![m]).unwrap();
        let p = dir.path().join("report.tsv");
        write_report(&p, &report).unwrap();
        let tsv = std::fs::read_to_string(&p).unwrap();
        assert!(tsv.contains("AUC\tP_Norm"));
        let json = std::fs::read_to_string(p.with_extension("json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["overall"]["ao"].as_f64().unwrap() > 0.99);
    }
}
