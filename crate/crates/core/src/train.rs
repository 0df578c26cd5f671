//! Two-stage optimization: stage 1 trains backbone and head without
//! variation tokens; stage 2 runs paired passes over consecutive search
//! regions, feeding the first pass's hybrid-template activations to the
//! second pass as constants (no gradient flows between frames).

use crate::config::{RunConfig, SamplingMode};
use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::head::{gaussian_target, total_loss_t, LossWeights};
use crate::model::{BatchTokens, Model, StagedModel};
use crate::optim::{adamw_step, clip_global_norm, OptimState};
use crate::sampler::{sample_stage1, sample_stage2, Stage1Sample};
use crate::synth::LoadedSequence;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Step-function schedule: drop by 10x after `decay_point` of the run.
pub fn lr_at(step: usize, total_steps: usize, init: f64, decay_point: f64) -> f64 {
    let cut = (total_steps as f64 * decay_point).floor() as usize;
    if step >= cut {
        init / 10.0
    } else {
        init
    }
}

/// Abort when the loss exceeds 10x its initial value for this many
/// consecutive steps.
const DIVERGENCE_PATIENCE: usize = 100;
const DIVERGENCE_FACTOR: f64 = 10.0;

pub struct TrainOutcome {
    pub model: Model,
    pub optim: OptimState,
    pub trace: Vec<f64>,
}

fn batch_inputs(
    model: &Model,
    samples: &[Stage1Sample],
) -> Result<(BatchTokens, Tensor, Vec<BBox>)> {
    let cfg = &model.cfg;
    let grid = cfg.grid_sr();
    let mut it_parts = Vec::with_capacity(samples.len());
    let mut ht_parts = Vec::with_capacity(samples.len());
    let mut sr_parts = Vec::with_capacity(samples.len());
    let mut chat = Vec::with_capacity(samples.len() * cfg.n_sr());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        if cfg.variant.has_inherent() {
            it_parts.push(model.patch_tokens(&s.it_img, true)?);
        }
        if cfg.variant.has_hybrid() {
            ht_parts.push(model.patch_tokens(&s.ht_img, true)?);
        }
        sr_parts.push(model.patch_tokens(&s.sr_img, false)?);
        let cx_cell = ((s.gt.cx * grid as f64) as usize).min(grid - 1);
        let cy_cell = ((s.gt.cy * grid as f64) as usize).min(grid - 1);
        let target = gaussian_target(
            (cx_cell, cy_cell),
            (s.gt.w * grid as f64, s.gt.h * grid as f64),
            grid,
            cfg.sigma_floor,
            cfg.sigma_divisor,
        )?;
        chat.extend_from_slice(target.data());
        gts.push(s.gt);
    }
    let tokens = BatchTokens {
        it: if it_parts.is_empty() {
            None
        } else {
            Some(Model::stack_batch(&it_parts)?)
        },
        ht: if ht_parts.is_empty() {
            None
        } else {
            Some(Model::stack_batch(&ht_parts)?)
        },
        sr: Model::stack_batch(&sr_parts)?,
    };
    let chat = Tensor::new(vec![samples.len(), cfg.n_sr()], chat)?;
    Ok((tokens, chat, gts))
}

fn collect_grads(tape: &Tape, staged: &StagedModel) -> Vec<Tensor> {
    staged
        .trainable
        .iter()
        .map(|(_, var)| match tape.grad(*var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(*var).shape().to_vec()),
        })
        .collect()
}

fn add_grads(acc: &mut [Tensor], extra: &[Tensor]) {
    for (a, e) in acc.iter_mut().zip(extra) {
        for (x, y) in a.data_mut().iter_mut().zip(e.data()) {
            *x += y;
        }
    }
}

struct DivergenceWatch {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceWatch {
    fn new() -> Self {
        DivergenceWatch {
            initial: None,
            streak: 0,
        }
    }

    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {loss} at step {step}"
            )));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged(format!(
                    "loss {loss:.4} > {DIVERGENCE_FACTOR}x initial {initial:.4} for \
                     {DIVERGENCE_PATIENCE} consecutive steps (step {step})"
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Stage 1: no variation tokens anywhere.
pub fn train_stage1(
    mut model: Model,
    corpus: &[LoadedSequence],
    cfg: &RunConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
    mut optim: Option<OptimState>,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let weights = LossWeights::default();
    let shapes: Vec<Vec<usize>> = model
        .params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.tensor.shape().to_vec())
        .collect();
    let mut state = optim
        .take()
        .unwrap_or_else(|| OptimState::new(&shapes, t.lr, t.weight_decay));
    let mut trace = Vec::with_capacity(steps);
    let mut watch = DivergenceWatch::new();

    for step in 0..steps {
        state.lr = lr_at(step, steps, t.lr, t.decay_point);
        let samples: Vec<Stage1Sample> = (0..t.batch)
            .map(|_| {
                sample_stage1(
                    corpus,
                    rng,
                    model.cfg.template_size,
                    model.cfg.search_size,
                    cfg.track.template_factor,
                    cfg.track.search_factor,
                    t,
                )
            })
            .collect::<Result<_>>()?;
        let (tokens, chat, gts) = batch_inputs(&model, &samples)?;

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, true)?;
        let out = model.forward(&mut tape, &staged, &tokens, None, true)?;
        let loss = total_loss_t(&mut tape, &out.heads, &chat, &gts, &weights)?;
        let loss_val = tape.value(loss).scalar_value()?;
        watch.observe(step, loss_val)?;
        tape.backward(loss)?;

        let mut grads = collect_grads(&tape, &staged);
        clip_global_norm(&mut grads, t.clip_norm);
        apply_step(&mut model, &grads, &mut state)?;
        model.apply_bn_updates(&out.bn_updates)?;

        trace.push(loss_val);
        on_step(step, loss_val);
    }
    Ok(TrainOutcome {
        model,
        optim: state,
        trace,
    })
}

/// Stage 2: per step, pass A runs without variation tokens and its per-layer
/// hybrid-template outputs (as constants) feed pass B; the losses add.
pub fn train_stage2(
    mut model: Model,
    corpus: &[LoadedSequence],
    cfg: &RunConfig,
    steps: usize,
    sampling: SamplingMode,
    rng: &mut ChaCha8Rng,
    mut optim: Option<OptimState>,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if !model.cfg.variant.supports_vt() {
        return Err(Error::contract(format!(
            "variant {} cannot train with variation tokens",
            model.cfg.variant
        )));
    }
    let t = &cfg.train;
    let lr_init = t.stage2_lr();
    let weights = LossWeights::default();
    let shapes: Vec<Vec<usize>> = model
        .params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.tensor.shape().to_vec())
        .collect();
    let mut state = optim
        .take()
        .unwrap_or_else(|| OptimState::new(&shapes, lr_init, t.weight_decay));
    let mut trace = Vec::with_capacity(steps);
    let mut watch = DivergenceWatch::new();

    for step in 0..steps {
        state.lr = lr_at(step, steps, lr_init, t.decay_point);
        let pairs: Vec<_> = (0..t.batch)
            .map(|_| {
                sample_stage2(
                    corpus,
                    rng,
                    sampling,
                    model.cfg.template_size,
                    model.cfg.search_size,
                    cfg.track.template_factor,
                    cfg.track.search_factor,
                    t,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let firsts: Vec<Stage1Sample> = pairs.iter().map(|p| p.first.clone()).collect();
        let seconds: Vec<Stage1Sample> = pairs.iter().map(|p| p.second.clone()).collect();

        // pass A: no vt; reserve per-layer ht outputs as constants
        let (tokens_a, chat_a, gts_a) = batch_inputs(&model, &firsts)?;
        let mut tape_a = Tape::new();
        let staged_a = model.stage(&mut tape_a, true)?;
        let out_a = model.forward(&mut tape_a, &staged_a, &tokens_a, None, true)?;
        let loss_a = total_loss_t(&mut tape_a, &out_a.heads, &chat_a, &gts_a, &weights)?;
        let loss_a_val = tape_a.value(loss_a).scalar_value()?;
        let cache = out_a.backbone.new_cache.clone();
        tape_a.backward(loss_a)?;
        let mut grads = collect_grads(&tape_a, &staged_a);

        // pass B: consume the cache as variation tokens
        let (tokens_b, chat_b, gts_b) = batch_inputs(&model, &seconds)?;
        let mut tape_b = Tape::new();
        let staged_b = model.stage(&mut tape_b, true)?;
        let out_b = model.forward(&mut tape_b, &staged_b, &tokens_b, Some(&cache), true)?;
        let loss_b = total_loss_t(&mut tape_b, &out_b.heads, &chat_b, &gts_b, &weights)?;
        let loss_b_val = tape_b.value(loss_b).scalar_value()?;
        tape_b.backward(loss_b)?;
        let grads_b = collect_grads(&tape_b, &staged_b);
        add_grads(&mut grads, &grads_b);

        let loss_val = loss_a_val + loss_b_val;
        watch.observe(step, loss_val)?;
        clip_global_norm(&mut grads, t.clip_norm);
        apply_step(&mut model, &grads, &mut state)?;
        model.apply_bn_updates(&out_a.bn_updates)?;
        model.apply_bn_updates(&out_b.bn_updates)?;

        trace.push(loss_val);
        on_step(step, loss_val);
    }
    Ok(TrainOutcome {
        model,
        optim: state,
        trace,
    })
}

fn apply_step(model: &mut Model, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    let mut params: Vec<Tensor> = model
        .params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.tensor.clone())
        .collect();
    adamw_step(&mut params, grads, state)?;
    let mut it = params.into_iter();
    for e in model.params.entries_mut() {
        if e.trainable {
            e.tensor = it.next().expect("aligned params");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RngHub;
    use crate::synth::{generate_sequence, Scenario, StoredFrame};
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_corpus(n: usize, frames: usize) -> Vec<LoadedSequence> {
        (0..n)
            .map(|i| {
                let sc = Scenario::new(64, frames);
                let seq = generate_sequence(&sc, 1000 + i as u64);
                LoadedSequence {
                    name: format!("seq_{i:04}"),
                    frames: seq.frames.iter().map(StoredFrame::from_image).collect(),
                    boxes: seq.boxes,
                    tags: seq.tags,
                }
            })
            .collect()
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            template_size: 16,
            search_size: 32,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: 2,
            head_channels: 16,
            ..ModelConfig::default()
        };
        cfg.train.batch = 4;
        cfg
    }

    #[test]
    fn lr_schedule_decays_by_ten() {
        assert_eq!(lr_at(0, 1000, 4e-4, 0.8), 4e-4);
        assert_eq!(lr_at(799, 1000, 4e-4, 0.8), 4e-4);
        assert_eq!(lr_at(800, 1000, 4e-4, 0.8), 4e-5);
        assert_eq!(lr_at(999, 1000, 4e-4, 0.8), 4e-5);
    }

    #[test]
    fn stage1_runs_and_loss_trace_is_finite() {
        let corpus = tiny_corpus(3, 6);
        let cfg = tiny_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = train_stage1(model, &corpus, &cfg, 5, &mut rng, None, &mut |_, _| {}).unwrap();
        assert_eq!(out.trace.len(), 5);
        assert!(out.trace.iter().all(|l| l.is_finite()));
        assert_eq!(out.optim.step, 5);
    }

    #[test]
    fn fixed_seed_gives_identical_trace() {
        let corpus = tiny_corpus(2, 6);
        let cfg = tiny_cfg();
        let run = || {
            let model = Model::init(cfg.model.clone(), &RngHub::new(2)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            train_stage1(model, &corpus, &cfg, 4, &mut rng, None, &mut |_, _| {})
                .unwrap()
                .trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_clip_holds_during_training() {
        // directly exercise the clip contract on synthetic gradients
        let mut grads = vec![Tensor::filled(vec![64], 1.0)];
        let pre = clip_global_norm(&mut grads, 0.1);
        assert!(pre > 0.1);
        let norm: f64 = grads[0].data().iter().map(|x| x * x).sum::<f64>();
        assert!(norm.sqrt() <= 0.1 + 1e-9);
    }

    #[test]
    fn stage2_protocol_cache_is_constant() {
        let corpus = tiny_corpus(2, 6);
        let cfg = tiny_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = train_stage2(
            model,
            &corpus,
            &cfg,
            3,
            SamplingMode::Consecutive,
            &mut rng,
            None,
            &mut |_, _| {},
        )
        .unwrap();
        assert_eq!(out.trace.len(), 3);
        assert!(out.trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn stage2_rejects_stm() {
        let corpus = tiny_corpus(1, 6);
        let mut cfg = tiny_cfg();
        cfg.model.variant = crate::layout::ModelVariant::Stm;
        cfg.model.vt_enabled = false;
        let model = Model::init(cfg.model.clone(), &RngHub::new(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = train_stage2(
            model,
            &corpus,
            &cfg,
            1,
            SamplingMode::Consecutive,
            &mut rng,
            None,
            &mut |_, _| {},
        );
        assert!(r.is_err());
    }

    #[test]
    fn divergence_watch_aborts_after_patience() {
        let mut w = DivergenceWatch::new();
        w.observe(0, 1.0).unwrap();
        for step in 1..DIVERGENCE_PATIENCE {
            w.observe(step, 15.0).unwrap();
        }
        let err = w.observe(DIVERGENCE_PATIENCE, 15.0).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "got {err:?}");

        // recovery resets the streak
        let mut w2 = DivergenceWatch::new();
        w2.observe(0, 1.0).unwrap();
        for step in 1..=200 {
            let loss = if step % 2 == 0 { 15.0 } else { 2.0 };
            w2.observe(step, loss).unwrap();
        }
        // non-finite losses abort immediately
        let mut w3 = DivergenceWatch::new();
        assert!(matches!(w3.observe(0, f64::NAN), Err(Error::Numeric(_))));
    }

    #[test]
    fn smoke_loss_decreases_in_moving_average() {
        let corpus = tiny_corpus(4, 8);
        let cfg = tiny_cfg();
        let model = Model::init(cfg.model.clone(), &RngHub::new(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let steps = 300;
        let out =
            train_stage1(model, &corpus, &cfg, steps, &mut rng, None, &mut |_, _| {}).unwrap();
        let head = out.trace[..50].iter().sum::<f64>() / 50.0;
        let tail = out.trace[steps - 50..].iter().sum::<f64>() / 50.0;
        assert!(
            tail < head,
            "loss should fall: first-50 avg {head:.4}, last-50 avg {tail:.4}"
        );
    }
}
