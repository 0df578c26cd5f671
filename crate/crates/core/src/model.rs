//! Model assembly: geometry/config, the named parameter census, seeded
//! initialization, and the end-to-end forward pass (tokens -> encoder ->
//! head maps).

use crate::encoder::{forward_backbone, BackboneOut, LayerVars, AttnVars};
use crate::error::{Error, Result};
use crate::head::{head_forward, BnUpdate, BranchVars, ConvBn, HeadVars, HeadVarsSet};
use crate::image::Image;
use crate::layout::ModelVariant;
use crate::patch::patchify;
use crate::rng::RngHub;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub head_channels: usize,
    pub variant: ModelVariant,
    pub vt_enabled: bool,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub sigma_floor: f64,
    pub sigma_divisor: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            template_size: 32,
            search_size: 64,
            patch: 8,
            dim: 64,
            heads: 2,
            depth: 4,
            head_channels: 32,
            variant: ModelVariant::Rom,
            vt_enabled: true,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            sigma_floor: 0.75,
            sigma_divisor: 6.0,
            norm_mean: [0.5; 3],
            norm_std: [0.25; 3],
        }
    }
}

impl ModelConfig {
    /// Full-scale geometry matching the published 128/256 configuration.
    pub fn paper_256() -> Self {
        ModelConfig {
            template_size: 128,
            search_size: 256,
            patch: 16,
            dim: 768,
            heads: 12,
            depth: 12,
            head_channels: 256,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let constraint = |ok: bool, name: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("constraint violated: {name}")))
            }
        };
        constraint(self.patch > 0, "patch > 0")?;
        constraint(
            self.template_size % self.patch == 0,
            "template_size divisible by patch",
        )?;
        constraint(
            self.search_size % self.patch == 0,
            "search_size divisible by patch",
        )?;
        constraint(self.dim % self.heads == 0, "dim divisible by heads")?;
        constraint(self.depth >= 1, "depth >= 1")?;
        constraint(
            self.head_channels >= 8 && self.head_channels % 8 == 0,
            "head_channels >= 8 and divisible by 8",
        )?;
        constraint(
            !self.vt_enabled || self.variant.supports_vt(),
            "vt requires a hybrid-template variant (htm|rom)",
        )?;
        constraint(self.norm_std.iter().all(|s| *s > 0.0), "norm_std positive")?;
        Ok(())
    }

    pub fn grid_t(&self) -> usize {
        self.template_size / self.patch
    }

    pub fn grid_sr(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn n_t(&self) -> usize {
        self.grid_t() * self.grid_t()
    }

    pub fn n_sr(&self) -> usize {
        self.grid_sr() * self.grid_sr()
    }

    pub fn patch_cols(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    /// Conv tower widths: head_channels halving, four conv layers.
    pub fn head_widths(&self) -> [usize; 5] {
        let c = self.head_channels;
        [self.dim, c, c / 2, c / 4, c / 8]
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, named parameter set. Construction order is the census order used
/// by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::checkpoint(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::checkpoint(format!("unknown parameter '{name}'")))?;
        Ok(&mut self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

fn init_weight(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| trunc_normal(rng, std)).collect();
    Tensor::new(shape, data).expect("init shape")
}

fn xavier_uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl Model {
    /// Deterministic seeded initialization; the construction order fixes the
    /// parameter census.
    pub fn init(cfg: ModelConfig, hub: &RngHub) -> Result<Model> {
        cfg.validate()?;
        let mut rng = hub.stream("init");
        let mut p = ParamSet::default();
        let d = cfg.dim;

        p.insert(
            "embed.proj",
            init_weight(&mut rng, vec![cfg.patch_cols(), d], 0.02),
            true,
        );
        p.insert(
            "embed.pos_template",
            init_weight(&mut rng, vec![cfg.n_t(), d], 0.02),
            true,
        );
        p.insert(
            "embed.pos_search",
            init_weight(&mut rng, vec![cfg.n_sr(), d], 0.02),
            true,
        );
        for k in 0..cfg.depth {
            let pre = format!("enc.{k}");
            p.insert(format!("{pre}.ln1.g"), Tensor::filled(vec![d], 1.0), true);
            p.insert(format!("{pre}.ln1.b"), Tensor::zeros(vec![d]), true);
            for nm in ["wq", "wk", "wv", "wo"] {
                p.insert(
                    format!("{pre}.attn.{nm}"),
                    init_weight(&mut rng, vec![d, d], 0.02),
                    true,
                );
                p.insert(
                    format!("{pre}.attn.{}", nm.replace('w', "b")),
                    Tensor::zeros(vec![d]),
                    true,
                );
            }
            p.insert(format!("{pre}.ln2.g"), Tensor::filled(vec![d], 1.0), true);
            p.insert(format!("{pre}.ln2.b"), Tensor::zeros(vec![d]), true);
            p.insert(
                format!("{pre}.ffn.w1"),
                init_weight(&mut rng, vec![d, cfg.ffn_dim()], 0.02),
                true,
            );
            p.insert(format!("{pre}.ffn.b1"), Tensor::zeros(vec![cfg.ffn_dim()]), true);
            p.insert(
                format!("{pre}.ffn.w2"),
                init_weight(&mut rng, vec![cfg.ffn_dim(), d], 0.02),
                true,
            );
            p.insert(format!("{pre}.ffn.b2"), Tensor::zeros(vec![d]), true);
        }
        p.insert("final_ln.g", Tensor::filled(vec![d], 1.0), true);
        p.insert("final_ln.b", Tensor::zeros(vec![d]), true);

        let widths = cfg.head_widths();
        for branch in ["cls", "off", "size"] {
            for i in 0..4 {
                let (cin, cout) = (widths[i], widths[i + 1]);
                let pre = format!("head.{branch}.conv{i}");
                p.insert(
                    format!("{pre}.w"),
                    xavier_uniform(&mut rng, vec![9 * cin, cout], 9 * cin, 9 * cout),
                    true,
                );
                p.insert(format!("{pre}.bn.g"), Tensor::filled(vec![cout], 1.0), true);
                p.insert(format!("{pre}.bn.b"), Tensor::zeros(vec![cout]), true);
                p.insert(format!("{pre}.bn.m"), Tensor::zeros(vec![cout]), false);
                p.insert(format!("{pre}.bn.v"), Tensor::filled(vec![cout], 1.0), false);
            }
            let out_ch = if branch == "cls" { 1 } else { 2 };
            let cin = widths[4];
            p.insert(
                format!("head.{branch}.out.w"),
                xavier_uniform(&mut rng, vec![cin, out_ch], cin, out_ch),
                true,
            );
            // classification starts biased low so early maps are sparse
            let bias = if branch == "cls" { -(9.0f64).ln() } else { 0.0 };
            p.insert(
                format!("head.{branch}.out.b"),
                Tensor::filled(vec![out_ch], bias),
                true,
            );
        }

        Ok(Model { cfg, params: p })
    }

    /// Normalize pixels with the corpus statistics and flatten into patch
    /// vectors [N, 3 P^2].
    pub fn patch_tokens(&self, img: &Image, is_template: bool) -> Result<Tensor> {
        let want = if is_template {
            self.cfg.template_size
        } else {
            self.cfg.search_size
        };
        if img.height() != want || img.width() != want {
            return Err(Error::geometry(format!(
                "expected {want}x{want} input, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        let patches = patchify(img, self.cfg.patch)?;
        let mut t = patches.data;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let c = i % 3;
            *v = (*v - self.cfg.norm_mean[c]) / self.cfg.norm_std[c];
        }
        Ok(t)
    }
}

/// Tape handles for every staged parameter, in census order.
pub struct StagedModel {
    pub proj: Var,
    pub pos_t: Var,
    pub pos_s: Var,
    pub layers: Vec<LayerVars>,
    pub final_g: Var,
    pub final_b: Var,
    pub head: HeadVarsSet,
    /// trainable (name, var) pairs in census order, for gradient collection
    pub trainable: Vec<(String, Var)>,
}

impl Model {
    pub fn stage(&self, tape: &mut Tape, with_grad: bool) -> Result<StagedModel> {
        let mut vars: HashMap<&str, Var> = HashMap::new();
        let mut trainable = Vec::new();
        for e in self.params.entries() {
            let v = tape.leaf(e.tensor.clone(), with_grad && e.trainable);
            vars.insert(e.name.as_str(), v);
            if e.trainable {
                trainable.push((e.name.clone(), v));
            }
        }
        let v = |name: &str| -> Var { *vars.get(name).expect("staged param") };

        let layers = (0..self.cfg.depth)
            .map(|k| {
                let pre = format!("enc.{k}");
                LayerVars {
                    attn: AttnVars {
                        wq: v(&format!("{pre}.attn.wq")),
                        bq: v(&format!("{pre}.attn.bq")),
                        wk: v(&format!("{pre}.attn.wk")),
                        bk: v(&format!("{pre}.attn.bk")),
                        wv: v(&format!("{pre}.attn.wv")),
                        bv: v(&format!("{pre}.attn.bv")),
                        wo: v(&format!("{pre}.attn.wo")),
                        bo: v(&format!("{pre}.attn.bo")),
                    },
                    ln1_g: v(&format!("{pre}.ln1.g")),
                    ln1_b: v(&format!("{pre}.ln1.b")),
                    ln2_g: v(&format!("{pre}.ln2.g")),
                    ln2_b: v(&format!("{pre}.ln2.b")),
                    ffn_w1: v(&format!("{pre}.ffn.w1")),
                    ffn_b1: v(&format!("{pre}.ffn.b1")),
                    ffn_w2: v(&format!("{pre}.ffn.w2")),
                    ffn_b2: v(&format!("{pre}.ffn.b2")),
                }
            })
            .collect();

        let mk_branch = |branch: &str| -> Result<BranchVars> {
            let mut convs = Vec::new();
            for i in 0..4 {
                let pre = format!("head.{branch}.conv{i}");
                convs.push(ConvBn {
                    w: v(&format!("{pre}.w")),
                    gamma: v(&format!("{pre}.bn.g")),
                    beta: v(&format!("{pre}.bn.b")),
                    running_mean: self.params.get(&format!("{pre}.bn.m"))?.data().to_vec(),
                    running_var: self.params.get(&format!("{pre}.bn.v"))?.data().to_vec(),
                    buffer_prefix: pre,
                });
            }
            Ok(BranchVars {
                convs,
                out_w: v(&format!("head.{branch}.out.w")),
                out_b: v(&format!("head.{branch}.out.b")),
            })
        };

        let head = HeadVarsSet {
            cls: mk_branch("cls")?,
            off: mk_branch("off")?,
            size: mk_branch("size")?,
        };
        Ok(StagedModel {
            proj: v("embed.proj"),
            pos_t: v("embed.pos_template"),
            pos_s: v("embed.pos_search"),
            layers,
            final_g: v("final_ln.g"),
            final_b: v("final_ln.b"),
            head,
            trainable,
        })
    }
}

/// Everything a forward pass produces.
pub struct ForwardOut {
    pub heads: HeadVars,
    pub bn_updates: Vec<BnUpdate>,
    pub backbone: BackboneOut,
    /// final-normalized search features [B, N_sr, D]
    pub sr_feat: Var,
}

/// Patch-vector inputs for one forward pass, already stacked per batch:
/// [B, N, 3 P^2] each. Absent streams per variant are None.
pub struct BatchTokens {
    pub it: Option<Tensor>,
    pub ht: Option<Tensor>,
    pub sr: Tensor,
}

impl Model {
    /// Stack per-sample patch tensors ([N, C]) into one [B, N, C] constant.
    pub fn stack_batch(samples: &[Tensor]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let shape = samples[0].shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
        for s in samples {
            if s.shape() != shape {
                return Err(Error::dim("ragged batch"));
            }
            data.extend_from_slice(s.data());
        }
        Tensor::new(vec![samples.len(), shape[0], shape[1]], data)
    }

    /// Run tokens through embedding, encoder stack, and head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        tokens: &BatchTokens,
        cache: Option<&[Tensor]>,
        train_head: bool,
    ) -> Result<ForwardOut> {
        let embed_stream = |tape: &mut Tape, patches: &Tensor, pos: Var| -> Result<Var> {
            let cvar = tape.constant(patches.clone());
            let t = tape.matmul(cvar, staged.proj)?;
            tape.add_bcast0(t, pos)
        };

        let it_tok = match (&tokens.it, self.cfg.variant.has_inherent()) {
            (Some(p), true) => Some(embed_stream(tape, p, staged.pos_t)?),
            (None, false) => None,
            _ => {
                return Err(Error::contract(format!(
                    "variant {} expects inherent input: {}",
                    self.cfg.variant,
                    self.cfg.variant.has_inherent()
                )))
            }
        };
        let ht_tok = match (&tokens.ht, self.cfg.variant.has_hybrid()) {
            (Some(p), true) => Some(embed_stream(tape, p, staged.pos_t)?),
            (None, false) => None,
            _ => {
                return Err(Error::contract(format!(
                    "variant {} expects hybrid input: {}",
                    self.cfg.variant,
                    self.cfg.variant.has_hybrid()
                )))
            }
        };
        let sr_tok = embed_stream(tape, &tokens.sr, staged.pos_s)?;

        let backbone = forward_backbone(
            tape,
            it_tok,
            ht_tok,
            sr_tok,
            cache,
            &staged.layers,
            self.cfg.variant,
            self.cfg.heads,
            self.cfg.ln_eps,
        )?;

        let n_ht = if self.cfg.variant.has_hybrid() {
            self.cfg.n_t()
        } else {
            0
        };
        let sr_slice = tape.slice_tokens(backbone.streams.hs, n_ht, self.cfg.n_sr())?;
        let sr_feat = tape.layer_norm(sr_slice, staged.final_g, staged.final_b, self.cfg.ln_eps)?;
        let (heads, bn_updates) =
            head_forward(tape, &staged.head, sr_feat, train_head, self.cfg.bn_eps)?;
        Ok(ForwardOut {
            heads,
            bn_updates,
            backbone,
            sr_feat,
        })
    }

    /// Fold batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        let mom = self.cfg.bn_momentum;
        for u in updates {
            let m = self.params.get_mut(&format!("{}.bn.m", u.buffer_prefix))?;
            for (r, b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            let v = self.params.get_mut(&format!("{}.bn.v", u.buffer_prefix))?;
            for (r, b) in v.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_sized() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_t(), 16);
        assert_eq!(cfg.n_sr(), 64);
        assert_eq!(cfg.grid_sr(), 8);
    }

    #[test]
    fn paper_preset_token_counts() {
        let cfg = ModelConfig::paper_256();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_t(), 64);
        assert_eq!(cfg.n_sr(), 256);
        assert_eq!(cfg.dim, 768);
    }

    #[test]
    fn invalid_geometry_rejected_with_constraint_name() {
        let cfg = ModelConfig {
            template_size: 30,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("template_size divisible by patch")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let a = Model::init(cfg.clone(), &RngHub::new(5)).unwrap();
        let b = Model::init(cfg.clone(), &RngHub::new(5)).unwrap();
        let c = Model::init(cfg, &RngHub::new(6)).unwrap();
        for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor, eb.tensor);
        }
        assert_ne!(
            a.params.get("embed.proj").unwrap(),
            c.params.get("embed.proj").unwrap()
        );
    }

    #[test]
    fn forward_shapes_all_variants() {
        for (variant, vt) in [
            (ModelVariant::Rom, true),
            (ModelVariant::Rom, false),
            (ModelVariant::Htm, false),
            (ModelVariant::Stm, false),
        ] {
            let cfg = ModelConfig {
                template_size: 16,
                search_size: 32,
                patch: 8,
                dim: 16,
                heads: 2,
                depth: 2,
                head_channels: 16,
                variant,
                vt_enabled: vt,
                ..ModelConfig::default()
            };
            let model = Model::init(cfg.clone(), &RngHub::new(1)).unwrap();
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, false).unwrap();
            let mk = |n: usize, seed: usize| {
                Tensor::new(
                    vec![2, n, cfg.patch_cols()],
                    (0..2 * n * cfg.patch_cols())
                        .map(|i| ((i * 31 + seed) % 17) as f64 / 17.0 - 0.5)
                        .collect(),
                )
                .unwrap()
            };
            let tokens = BatchTokens {
                it: variant.has_inherent().then(|| mk(cfg.n_t(), 1)),
                ht: variant.has_hybrid().then(|| mk(cfg.n_t(), 2)),
                sr: mk(cfg.n_sr(), 3),
            };
            let out = model.forward(&mut tape, &staged, &tokens, None, false).unwrap();
            assert_eq!(tape.value(out.heads.c).shape(), &[2, cfg.n_sr(), 1]);
            assert_eq!(tape.value(out.heads.o).shape(), &[2, cfg.n_sr(), 2]);
            assert_eq!(tape.value(out.heads.s).shape(), &[2, cfg.n_sr(), 2]);
            // maps are sigmoid-bounded
            for v in tape.value(out.heads.c).data() {
                assert!(*v > 0.0 && *v < 1.0);
            }
            if variant.has_hybrid() {
                assert_eq!(out.backbone.new_cache.len(), cfg.depth);
                assert_eq!(out.backbone.new_cache[0].shape(), &[2, cfg.n_t(), 16]);
            } else {
                assert!(out.backbone.new_cache.is_empty());
            }
        }
    }

    #[test]
    fn census_total_matches_structure() {
        let cfg = ModelConfig::default();
        let model = Model::init(cfg.clone(), &RngHub::new(2)).unwrap();
        let d = cfg.dim;
        let per_layer = 2 * d // ln1
            + 4 * (d * d + d) // attn
            + 2 * d // ln2
            + d * 4 * d + 4 * d + 4 * d * d + d; // ffn
        let widths = cfg.head_widths();
        let mut head = 0;
        for branch in 0..3 {
            for i in 0..4 {
                head += 9 * widths[i] * widths[i + 1] + 4 * widths[i + 1];
            }
            let out_ch = if branch == 0 { 1 } else { 2 };
            head += widths[4] * out_ch + out_ch;
        }
        let expect = cfg.patch_cols() * d // proj
            + cfg.n_t() * d + cfg.n_sr() * d // pos tables
            + cfg.depth * per_layer
            + 2 * d // final ln
            + head;
        assert_eq!(model.params.total_elements(), expect);
    }
}
