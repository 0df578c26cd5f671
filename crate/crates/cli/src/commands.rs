use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use rayon::prelude::*;
use romtrack_core::ablate::{run_ablation, write_ablation, AblationEntry};
use romtrack_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use romtrack_core::complexity::{count_macs, count_params, vt_overhead_macs};
use romtrack_core::config::{parse_config, RunConfig};
use romtrack_core::encoder::correlation_blocks;
use romtrack_core::layout::{ModelVariant, Segment};
use romtrack_core::metrics::{build_report, sequence_metrics, write_report};
use romtrack_core::model::Model;
use romtrack_core::rng::RngHub;
use romtrack_core::synth::{
    corpus_stats, generate_sequence, load_corpus, load_stats, save_sequence, save_stats,
    scenario_for, LoadedSequence,
};
use romtrack_core::track::{init as tracker_init, track_frame, track_sequence, write_results};
use romtrack_core::train::{train_stage1, train_stage2};
use std::path::{Path, PathBuf};

pub fn resolve_config(
    config: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    deterministic: bool,
    workers: Option<usize>,
) -> Result<RunConfig> {
    let mut cfg = match (config, preset) {
        (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
        (Some(path), None) => parse_config(path).with_context(|| format!("reading {path:?}"))?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn init_thread_pool(cfg: &RunConfig) -> Result<()> {
    let mut n = if cfg.deterministic { 1 } else { cfg.workers };
    if let Ok(cap) = std::env::var("ROMTRACK_THREADS") {
        if let Ok(cap) = cap.parse::<usize>() {
            if cap > 0 {
                n = if n == 0 { cap } else { n.min(cap) };
            }
        }
    }
    if n > 0 {
        // a pool may already exist when called from tests; that is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// A corpus argument may point at the corpus root (with train/ and eval/
/// splits) or directly at a directory of sequences.
fn resolve_split(corpus: &Path, split: &str) -> PathBuf {
    let sub = corpus.join(split);
    if sub.is_dir() {
        sub
    } else {
        corpus.to_path_buf()
    }
}

fn stats_path_for(corpus: &Path) -> PathBuf {
    // stats live at the corpus root regardless of which split was passed
    if corpus.join("stats.txt").exists() {
        corpus.join("stats.txt")
    } else if let Some(parent) = corpus.parent() {
        parent.join("stats.txt")
    } else {
        corpus.join("stats.txt")
    }
}

pub fn gen_data(
    cfg: &RunConfig,
    out: &Path,
    sequences: Option<usize>,
    eval_sequences: Option<usize>,
    frames: Option<usize>,
) -> Result<()> {
    let n_train = sequences.unwrap_or(cfg.data.train_sequences);
    let n_eval = eval_sequences.unwrap_or(cfg.data.eval_sequences);
    let n_frames = frames.unwrap_or(cfg.data.frames);
    let hub = RngHub::new(cfg.seed);
    std::fs::create_dir_all(out)?;

    let render_split = |split: &str, count: usize| -> Result<Vec<LoadedSequence>> {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir)?;
        let indices: Vec<usize> = (0..count).collect();
        let seqs: Vec<Result<()>> = indices
            .par_iter()
            .map(|&i| -> Result<()> {
                let mut seed_rng = hub.stream_indexed(&format!("gen:{split}"), i as u64);
                let seed: u64 = seed_rng.gen();
                let sc = scenario_for(i, cfg.data.frame_size, n_frames);
                let seq = generate_sequence(&sc, seed);
                save_sequence(&dir.join(format!("seq_{i:04}")), &seq)?;
                Ok(())
            })
            .collect();
        for s in seqs {
            s?;
        }
        Ok(load_corpus(&dir)?)
    };

    let train_seqs = render_split("train", n_train)?;
    let _ = render_split("eval", n_eval)?;
    let stats = corpus_stats(&train_seqs);
    save_stats(&out.join("stats.txt"), &stats)?;
    println!(
        "corpus: {n_train} train + {n_eval} eval sequences of {n_frames} frames at {}px",
        cfg.data.frame_size
    );
    println!(
        "pixel stats: mean [{:.4} {:.4} {:.4}] std [{:.4} {:.4} {:.4}]",
        stats.mean[0], stats.mean[1], stats.mean[2], stats.std[0], stats.std[1], stats.std[2]
    );
    Ok(())
}

fn load_train_corpus(cfg: &RunConfig, corpus: &Path) -> Result<(Vec<LoadedSequence>, [f64; 3], [f64; 3])> {
    let split = resolve_split(corpus, "train");
    let seqs = load_corpus(&split)?;
    let stats_file = stats_path_for(&split);
    let (mean, std) = if stats_file.exists() {
        let s = load_stats(&stats_file)?;
        (s.mean, s.std)
    } else {
        let s = corpus_stats(&seqs);
        (s.mean, s.std)
    };
    let _ = cfg;
    Ok((seqs, mean, std))
}

pub fn train(
    cfg: &RunConfig,
    corpus: &Path,
    out: &Path,
    stage: u8,
    init_ckpt: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    let (seqs, mean, std) = load_train_corpus(cfg, corpus)?;
    let hub = RngHub::new(cfg.seed);

    let (model, _optim, prev_steps) = match init_ckpt {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            (ckpt.model, ckpt.optim, ckpt.step)
        }
        None => {
            if stage == 2 {
                bail!("stage 2 requires --init with a stage-1 checkpoint");
            }
            let mut mc = cfg.model.clone();
            mc.norm_mean = mean;
            mc.norm_std = std;
            (Model::init(mc, &hub)?, None, 0)
        }
    };

    let mut log = |step: usize, loss: f64| {
        if step % 200 == 0 {
            println!("stage {stage} step {step}: loss {loss:.5}");
        }
    };

    let outcome = match stage {
        1 => {
            let n = steps.unwrap_or(cfg.train.stage1_steps);
            let mut rng = hub.stream("data:stage1");
            train_stage1(model, &seqs, cfg, n, &mut rng, None, &mut log)?
        }
        2 => {
            let n = steps.unwrap_or(cfg.train.stage2_steps);
            let mut rng = hub.stream("data:stage2");
            train_stage2(
                model,
                &seqs,
                cfg,
                n,
                cfg.train.sampling,
                &mut rng,
                None,
                &mut log,
            )?
        }
        _ => unreachable!("clap bounds the stage"),
    };

    let trained_steps = prev_steps + outcome.trace.len() as u64;
    let mut snapshot = cfg.clone();
    snapshot.model = outcome.model.cfg.clone();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(
        out,
        &Checkpoint::new(snapshot, outcome.model, Some(outcome.optim), trained_steps),
    )?;
    let last = outcome.trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "stage {stage} finished: {} steps, final loss {last:.5}, checkpoint {out:?}",
        outcome.trace.len()
    );
    Ok(())
}

pub fn track(
    cfg: &RunConfig,
    corpus: &Path,
    checkpoint: &Path,
    out: &Path,
    no_window: bool,
    no_vt: bool,
) -> Result<()> {
    let split = resolve_split(corpus, "eval");
    let seqs = load_corpus(&split)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut model = ckpt.model;
    if no_vt {
        model.cfg.vt_enabled = false;
    }
    let mut settings = cfg.track.clone();
    if no_window {
        settings.window = false;
    }
    std::fs::create_dir_all(out)?;

    let results: Vec<Result<(String, usize)>> = seqs
        .par_iter()
        .map(|seq| -> Result<(String, usize)> {
            let frames: Vec<_> = seq.frames.iter().map(|f| f.to_image()).collect();
            let rows = track_sequence(&model, &frames, &seq.boxes[0], &settings)?;
            write_results(&out.join(format!("{}.txt", seq.name)), &rows)?;
            Ok((seq.name.clone(), rows.len()))
        })
        .collect();
    let mut total = 0;
    for r in results {
        let (_, n) = r?;
        total += n;
    }
    println!("tracked {} sequences ({total} frames) -> {out:?}", seqs.len());
    Ok(())
}

pub fn eval(cfg: &RunConfig, corpus: &Path, results: &Path, out: &Path) -> Result<()> {
    let split = resolve_split(corpus, "eval");
    let seqs = load_corpus(&split)?;
    let mut metrics = Vec::with_capacity(seqs.len());
    for seq in &seqs {
        let rows = romtrack_core::track::read_results(&results.join(format!("{}.txt", seq.name)))
            .with_context(|| format!("results for {}", seq.name))?;
        metrics.push(sequence_metrics(
            &seq.name,
            &seq.tags,
            &rows,
            &seq.boxes,
            cfg.data.frame_size,
        )?);
    }
    let report = build_report(metrics)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_report(out, &report)?;
    println!(
        "overall: AO {:.4}  AUC {:.4}  P {:.4}  ({} sequences)",
        report.overall.ao, report.overall.auc, report.overall.p, report.overall.sequences
    );
    if let Some(h) = &report.distractor_heavy {
        println!(
            "distractor-heavy: AO {:.4}  AUC {:.4}  ({} sequences)",
            h.ao, h.auc, h.sequences
        );
    }
    Ok(())
}

pub fn bench(
    cfg: &RunConfig,
    variant: Option<&str>,
    vt: bool,
    out: Option<&Path>,
) -> Result<()> {
    let variant = match variant {
        Some(v) => ModelVariant::parse(v)?,
        None => cfg.model.variant,
    };
    let macs = count_macs(&cfg.model, variant, vt)?;
    let params = count_params(&cfg.model)?;
    println!(
        "variant {variant}, variation tokens {}",
        if vt { "on" } else { "off" }
    );
    println!("MACs: {:.2} G", macs.total() as f64 / 1e9);
    for (name, v) in &macs.components {
        println!("  {name:<12} {:.3} G", *v as f64 / 1e9);
    }
    println!("Params: {:.2} M", params.total() as f64 / 1e6);
    for (name, v) in &params.components {
        println!("  {name:<12} {:.3} M", *v as f64 / 1e6);
    }
    if variant.supports_vt() {
        println!(
            "vt overhead: {:.3} G MACs",
            vt_overhead_macs(&cfg.model, variant)? as f64 / 1e9
        );
    }
    if let Some(p) = out {
        let doc = serde_json::json!({
            "variant": variant.to_string(),
            "vt": vt,
            "macs": { "total": macs.total(), "components": macs.components },
            "params": { "total": params.total(), "components": params.components },
        });
        std::fs::write(p, serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

/// Ablation labels: each maps to (variant, vt at eval, trains stage 2).
fn parse_label(label: &str) -> Result<(ModelVariant, bool, bool)> {
    match label {
        "stm" => Ok((ModelVariant::Stm, false, false)),
        "htm" => Ok((ModelVariant::Htm, false, false)),
        "rom-novt" => Ok((ModelVariant::Rom, false, false)),
        "rom-vt" => Ok((ModelVariant::Rom, true, true)),
        other => Err(anyhow!(
            "unknown ablation label '{other}' (expected stm|htm|rom-novt|rom-vt)"
        )),
    }
}

/// Train one ablation checkpoint if it does not exist yet. Aligned step
/// budgets: non-vt labels train stage 1 for s1+s2 steps; rom-vt trains
/// stage 1 for s1 then stage 2 for s2.
#[allow(clippy::too_many_arguments)]
pub fn train_ablation_checkpoint(
    cfg: &RunConfig,
    seqs: &[LoadedSequence],
    mean: [f64; 3],
    std: [f64; 3],
    label: &str,
    seed: u64,
    s1: usize,
    s2: usize,
    path: &Path,
) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    let (variant, vt_eval, wants_stage2) = parse_label(label)?;
    let hub = RngHub::new(seed);
    let mut mc = cfg.model.clone();
    mc.variant = variant;
    mc.vt_enabled = vt_eval;
    mc.norm_mean = mean;
    mc.norm_std = std;
    let model = Model::init(mc, &hub)?;
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    run_cfg.model = model.cfg.clone();

    let mut quiet = |_: usize, _: f64| {};
    let outcome = if wants_stage2 {
        let mut rng = hub.stream("data:stage1");
        let o1 = train_stage1(model, seqs, &run_cfg, s1, &mut rng, None, &mut quiet)?;
        let mut rng2 = hub.stream("data:stage2");
        train_stage2(
            o1.model,
            seqs,
            &run_cfg,
            s2,
            run_cfg.train.sampling,
            &mut rng2,
            None,
            &mut quiet,
        )?
    } else {
        let mut rng = hub.stream("data:stage1");
        train_stage1(model, seqs, &run_cfg, s1 + s2, &mut rng, None, &mut quiet)?
    };
    let steps = (s1 + s2) as u64;
    save_checkpoint(
        path,
        &Checkpoint::new(run_cfg, outcome.model, None, steps),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &RunConfig,
    corpus: &Path,
    out: &Path,
    variants: &str,
    seeds: &str,
    stage1_steps: Option<usize>,
    stage2_steps: Option<usize>,
) -> Result<()> {
    let labels: Vec<String> = variants.split(',').map(|s| s.trim().to_string()).collect();
    let seed_list: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| anyhow!("bad seed '{s}'")))
        .collect::<Result<_>>()?;
    let s1 = stage1_steps.unwrap_or(cfg.train.stage1_steps);
    let s2 = stage2_steps.unwrap_or(cfg.train.stage2_steps);
    std::fs::create_dir_all(out)?;

    let (train_seqs, mean, std) = load_train_corpus(cfg, corpus)?;
    let eval_split = resolve_split(corpus, "eval");
    let eval_seqs = load_corpus(&eval_split)?;

    let mut entries = Vec::new();
    for label in &labels {
        for &seed in &seed_list {
            let path = out.join(format!("ckpt_{label}_{seed}.romc"));
            println!("training {label} seed {seed} ({s1}+{s2} steps) ...");
            train_ablation_checkpoint(cfg, &train_seqs, mean, std, label, seed, s1, s2, &path)?;
            entries.push(AblationEntry {
                label: label.clone(),
                seed,
                checkpoint: path,
            });
        }
    }

    let report = run_ablation(&eval_seqs, &entries, &cfg.track, cfg.data.frame_size)?;
    let table = out.join("ablation.tsv");
    write_ablation(&table, &report)?;
    println!("{}", romtrack_core::ablate::ablation_tsv(&report));
    println!("table -> {table:?}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn inspect_attn(
    cfg: &RunConfig,
    corpus: &Path,
    checkpoint: &Path,
    sequence: &str,
    frame: usize,
    layer: usize,
    out: &Path,
) -> Result<()> {
    let split = resolve_split(corpus, "eval");
    let seq_dir = split.join(sequence);
    let seq = romtrack_core::synth::load_sequence(&seq_dir)
        .with_context(|| format!("loading sequence {seq_dir:?}"))?;
    if frame == 0 || frame >= seq.len() {
        bail!(
            "frame {frame} out of range 1..{} for sequence {sequence}",
            seq.len() - 1
        );
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model;
    if layer >= model.cfg.depth {
        bail!("layer {layer} out of range 0..{}", model.cfg.depth - 1);
    }
    let frames: Vec<_> = seq.frames.iter().map(|f| f.to_image()).collect();
    let mut state = tracker_init(&model, &frames[0], &seq.boxes[0], &cfg.track)?;
    let mut captured = None;
    for t in 1..=frame {
        let r = track_frame(&model, &mut state, &frames[t], &cfg.track, t == frame)?;
        if t == frame {
            captured = r.trace;
        }
    }
    let trace = captured.ok_or_else(|| anyhow!("frame {frame} produced no trace (lost crop)"))?;
    let (q, k, layout) = &trace.layers[layer];
    let blocks = correlation_blocks(q, k, model.cfg.heads, *layout)?;

    let mut heads_json = Vec::new();
    for h in 0..model.cfg.heads {
        let mut block_map = serde_json::Map::new();
        for qseg in [Segment::Ht, Segment::Sr] {
            if layout.count(qseg) == 0 {
                continue;
            }
            for kseg in Segment::ORDER {
                if layout.count(kseg) == 0 {
                    continue;
                }
                let b = blocks.block(h, qseg, kseg)?;
                let rows: Vec<Vec<f64>> = (0..b.shape()[0])
                    .map(|i| b.data()[i * b.shape()[1]..(i + 1) * b.shape()[1]].to_vec())
                    .collect();
                block_map.insert(
                    format!("{},{}", qseg.name(), kseg.name()),
                    serde_json::json!(rows),
                );
            }
        }
        heads_json.push(serde_json::Value::Object(block_map));
    }
    let doc = serde_json::json!({
        "sequence": sequence,
        "frame": frame,
        "layer": layer,
        "layout": {
            "n_vt": layout.n_vt,
            "n_it": layout.n_it,
            "n_ht": layout.n_ht,
            "n_sr": layout.n_sr,
        },
        "heads": heads_json,
    });
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(&doc)?)?;
    println!("attention blocks for {sequence} frame {frame} layer {layer} -> {out:?}");
    Ok(())
}
