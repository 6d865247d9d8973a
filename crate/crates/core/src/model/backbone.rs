use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::model::config::ModelConfig;
use crate::model::image::{batch_patches, Image, ModalityTag};
use crate::numerics::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = dist.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, std: f64, rng: &mut R) -> Result<Self> {
        let weight = store.insert(format!("{}.weight", name), trunc_normal(&[din, dout], std, rng))?;
        let bias = store.insert(format!("{}.bias", name), Tensor::zeros([dout]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let y = tape.matmul(x, pv[self.weight])?;
        tape.add(y, pv[self.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert(format!("{}.gamma", name), Tensor::full([dim], T::one()))?;
        let beta = store.insert(format!("{}.beta", name), Tensor::zeros([dim]))?;
        Ok(Affine { gamma, beta })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let y = tape.mul(x, pv[self.gamma])?;
        tape.add(y, pv[self.beta])
    }

    /// Layer norm over the last axis followed by the affine map.
    pub fn layer_norm<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, eps: f64) -> Result<Var> {
        let n = tape.layer_norm_last(x, T::of(eps))?;
        self.apply(tape, pv, n)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingIds {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    /// `(visible, infrared)` when modality embeddings are enabled.
    pub modality: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: Affine,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: Affine,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Whether batch statistics or running statistics drive the BN neck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeckMode {
    Train,
    Inference,
}

/// Per-dimension batch mean and biased variance seen by the neck.
#[derive(Debug, Clone)]
pub struct NeckStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Input tokens `[B, N+1, D]`.
    pub tokens: Var,
    /// Backbone class-token vectors `v`, `[B, D]`.
    pub v: Var,
    /// BN-neck features `f`, `[B, D]`.
    pub f: Var,
    /// Main classifier logits, `[B, num_ids]`.
    pub logits: Var,
    pub neck_stats: Option<NeckStats<T>>,
}

/// Vision-transformer backbone with modality embeddings, BN neck and
/// identity classifier. Parameters live in an external [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Cmtr<T: Scalar = f64> {
    cfg: ModelConfig,
    pub embed: EmbeddingIds,
    pub blocks: Vec<BlockIds>,
    pub norm: Option<Affine>,
    pub neck: Affine,
    pub head: Linear,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> Cmtr<T> {
    /// Registers all backbone parameters in `store` and initialises them.
    pub fn new<R: Rng>(cfg: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        let std = cfg.init_std;
        let n = cfg.num_patches();
        let proj = Linear::new(store, "embed.proj", cfg.patch_dim(), d, std, rng)?;
        let cls = store.insert("embed.cls", trunc_normal(&[d], std, rng))?;
        let pos = store.insert("embed.pos", trunc_normal(&[n + 1, d], std, rng))?;
        let modality = if cfg.modality_embedding {
            let vis = store.insert("embed.me_vis", Tensor::zeros([d]))?;
            let ir = store.insert("embed.me_ir", Tensor::zeros([d]))?;
            Some((vis, ir))
        } else {
            None
        };
        let hidden = d * cfg.mlp_ratio;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = |s: &str| format!("blocks.{}.{}", l, s);
            blocks.push(BlockIds {
                ln1: Affine::new(store, &name("ln1"), d)?,
                qkv: Linear::new(store, &name("attn.qkv"), d, 3 * d, std, rng)?,
                attn_out: Linear::new(store, &name("attn.out"), d, d, std, rng)?,
                ln2: Affine::new(store, &name("ln2"), d)?,
                fc1: Linear::new(store, &name("mlp.fc1"), d, hidden, std, rng)?,
                fc2: Linear::new(store, &name("mlp.fc2"), hidden, d, std, rng)?,
            });
        }
        let norm = if cfg.depth > 0 { Some(Affine::new(store, "norm", d)?) } else { None };
        let neck = Affine::new(store, "neck", d)?;
        let head = Linear::new(store, "head", d, cfg.num_ids, std, rng)?;
        Ok(Cmtr {
            cfg,
            embed: EmbeddingIds { proj, cls, pos, modality },
            blocks,
            norm,
            neck,
            head,
            running_mean: vec![T::zero(); d],
            running_var: vec![T::one(); d],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Token sequences `[B, N+1, D]` from patches `[B, N, C*P*P]`.
    ///
    /// Patch row `i` is `LP(x_i) + pos_i + e^m`; row 0 is `cls + pos_0`
    /// (plus `e^m` when `me_on_class_token`).
    pub fn embed_input(&self, tape: &mut Tape<T>, pv: &ParamVars, patches: Var, modalities: &[ModalityTag]) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        let d = self.cfg.embed_dim();
        let n_pos = tape.shape(pv[self.embed.pos])[0];
        ensure!(shape.len() == 3, "embed_input: patches must be [B, N, C*P*P], got {:?}", shape);
        let (b, n) = (shape[0], shape[1]);
        ensure!(n + 1 == n_pos, "embed_input: {} patches but {} position rows", n, n_pos);
        ensure!(modalities.len() == b, "embed_input: {} modality tags for {} images", modalities.len(), b);

        let mut tokens = self.embed.proj.forward(tape, pv, patches)?;
        let me_rows = match self.embed.modality {
            Some((vis, ir)) => {
                let table = tape.concat(&[pv[vis], pv[ir]], 0)?;
                let table = tape.reshape(table, &[2, d])?;
                let idx: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
                let rows = tape.index_select(table, &idx)?;
                let rows = tape.reshape(rows, &[b, 1, d])?;
                tokens = tape.add(tokens, rows)?;
                Some(rows)
            }
            None => None,
        };
        let cls = tape.reshape(pv[self.embed.cls], &[1, 1, d])?;
        let mut cls = tape.broadcast_to(cls, &[b, 1, d])?;
        if self.cfg.me_on_class_token {
            if let Some(rows) = me_rows {
                cls = tape.add(cls, rows)?;
            }
        }
        let seq = tape.concat(&[cls, tokens], 1)?;
        tape.add(seq, pv[self.embed.pos])
    }

    fn attention(&self, tape: &mut Tape<T>, pv: &ParamVars, blk: &BlockIds, x: Var) -> Result<Var> {
        let qkv = blk.qkv.forward(tape, pv, x)?;
        let out = tape.multi_head_attention(qkv, self.cfg.heads)?;
        blk.attn_out.forward(tape, pv, out)
    }

    /// Pre-norm transformer blocks followed by a final layer norm.
    pub fn encoder_forward(&self, tape: &mut Tape<T>, pv: &ParamVars, tokens: Var) -> Result<Var> {
        let eps = self.cfg.ln_eps;
        let mut x = tokens;
        for blk in &self.blocks {
            let h = blk.ln1.layer_norm(tape, pv, x, eps)?;
            let a = self.attention(tape, pv, blk, h)?;
            x = tape.add(x, a)?;
            let h = blk.ln2.layer_norm(tape, pv, x, eps)?;
            let h = blk.fc1.forward(tape, pv, h)?;
            let h = tape.gelu(h);
            let h = blk.fc2.forward(tape, pv, h)?;
            x = tape.add(x, h)?;
        }
        match &self.norm {
            Some(norm) => norm.layer_norm(tape, pv, x, eps),
            None => Ok(x),
        }
    }

    /// Row 0 of every sequence, `[B, D]`.
    pub fn class_feature(&self, tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        ensure!(shape.len() == 3, "class_feature: tokens must be [B, T, D]");
        let cls = tape.slice(tokens, 1, 0, 1)?;
        tape.reshape(cls, &[shape[0], shape[2]])
    }

    /// Batch normalisation of `[B, D]` vectors followed by scale and shift.
    pub fn bn_neck(&self, tape: &mut Tape<T>, pv: &ParamVars, v: Var, mode: NeckMode) -> Result<(Var, Option<NeckStats<T>>)> {
        let b = tape.shape(v)[0];
        let eps = T::of(self.cfg.bn_eps);
        match mode {
            NeckMode::Train => {
                ensure!(b >= 2, "bn_neck: training mode needs a batch of at least 2, got {}", b);
                let mean = tape.mean_axis(v, 0)?;
                let centered = tape.sub(v, mean)?;
                let sq = tape.square(centered);
                let var = tape.mean_axis(sq, 0)?;
                let stats = NeckStats { mean: tape.data(mean).to_vec(), var: tape.data(var).to_vec() };
                let var_eps = tape.add_scalar(var, eps);
                let std = tape.sqrt(var_eps)?;
                let norm = tape.div(centered, std)?;
                Ok((self.neck.apply(tape, pv, norm)?, Some(stats)))
            }
            NeckMode::Inference => {
                let d = self.running_mean.len();
                let mean = tape.constant(Tensor::new([d], self.running_mean.clone())?);
                let std = tape.constant(Tensor::new([d], self.running_var.iter().map(|&v| (v + eps).sqrt()).collect())?);
                let centered = tape.sub(v, mean)?;
                let norm = tape.div(centered, std)?;
                Ok((self.neck.apply(tape, pv, norm)?, None))
            }
        }
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_running_stats(&mut self, stats: &NeckStats<T>) {
        let m = T::of(self.cfg.bn_momentum);
        for (r, &s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * s;
        }
        for (r, &s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * s;
        }
    }

    /// Affine classifier over neck features; no softmax.
    pub fn id_logits(&self, tape: &mut Tape<T>, pv: &ParamVars, f: Var) -> Result<Var> {
        self.head.forward(tape, pv, f)
    }

    /// Full forward pass for a batch of images.
    pub fn forward(&self, tape: &mut Tape<T>, pv: &ParamVars, images: &[&Image], mode: NeckMode) -> Result<ForwardOutput<T>> {
        for img in images {
            ensure!(
                img.height == self.cfg.img_h && img.width == self.cfg.img_w,
                "image {}x{} does not match model input {}x{}",
                img.height,
                img.width,
                self.cfg.img_h,
                self.cfg.img_w
            );
        }
        let patches = tape.constant(batch_patches(images, &self.cfg.patch)?);
        let modalities: Vec<ModalityTag> = images.iter().map(|i| i.modality).collect();
        let tokens = self.embed_input(tape, pv, patches, &modalities)?;
        let encoded = self.encoder_forward(tape, pv, tokens)?;
        let v = self.class_feature(tape, encoded)?;
        let (f, neck_stats) = self.bn_neck(tape, pv, v, mode)?;
        let logits = self.id_logits(tape, pv, f)?;
        Ok(ForwardOutput { tokens, v, f, logits, neck_stats })
    }
}
