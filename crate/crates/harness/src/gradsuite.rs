//! Finite-difference verification of every differentiable op and every
//! loss, the latter end to end through a tiny model.

use cmtr::losses::*;
use cmtr::model::{Cmtr, Image, ModalityTag, ModelConfig, NeckMode, PatchConfig};
use cmtr::numerics::{grad_check_many, CoordSelection, ParamStore, ParamVars, Tape, Tensor, Var};
use cmtr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub group: &'static str,
    pub name: String,
    pub instances: u64,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n: usize = t.shape(y).iter().product();
    let w = Tensor::new(t.shape(y).to_vec(), (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Input domain of an op case.
#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Values bounded away from zero, for kinked ops.
    AwayFromZero,
}

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Domain)>,
    f: OpFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(), f: Box::new(f) }
}

fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    vec![
        case("add", &[(&[3, 4], Any), (&[4], Any)], |t, v| t.add(v[0], v[1])),
        case("sub", &[(&[2, 1, 3], Any), (&[2, 3], Any)], |t, v| t.sub(v[0], v[1])),
        case("mul", &[(&[3, 1], Any), (&[3, 4], Any)], |t, v| t.mul(v[0], v[1])),
        case("div", &[(&[3, 4], Any), (&[3, 4], Positive)], |t, v| t.div(v[0], v[1])),
        case("neg", &[(&[5], Any)], |t, v| Ok(t.neg(v[0]))),
        case("scale", &[(&[5], Any)], |t, v| Ok(t.scale(v[0], -2.5))),
        case("add_scalar", &[(&[5], Any)], |t, v| Ok(t.add_scalar(v[0], 0.75))),
        case("exp", &[(&[5], Any)], |t, v| Ok(t.exp(v[0]))),
        case("log", &[(&[5], Positive)], |t, v| t.log(v[0])),
        case("sqrt", &[(&[5], Positive)], |t, v| t.sqrt(v[0])),
        case("square", &[(&[5], Any)], |t, v| Ok(t.square(v[0]))),
        case("abs", &[(&[6], AwayFromZero)], |t, v| Ok(t.abs(v[0]))),
        case("relu", &[(&[6], AwayFromZero)], |t, v| Ok(t.relu(v[0]))),
        case("clamp_min", &[(&[6], AwayFromZero)], |t, v| Ok(t.clamp_min(v[0], 0.0))),
        case("gelu", &[(&[2, 5], Any)], |t, v| Ok(t.gelu(v[0]))),
        case("softplus", &[(&[6], Any)], |t, v| Ok(t.softplus(v[0]))),
        case("smooth_l1", &[(&[7], AwayFromZero)], |t, v| t.smooth_l1(v[0], 1.0)),
        case("matmul", &[(&[2, 3, 4], Any), (&[4, 5], Any)], |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[(&[2, 3, 4], Any), (&[2, 4, 2], Any)], |t, v| t.bmm(v[0], v[1], false)),
        case("bmm_transposed", &[(&[2, 3, 4], Any), (&[2, 5, 4], Any)], |t, v| t.bmm(v[0], v[1], true)),
        case("reshape", &[(&[2, 6], Any)], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", &[(&[2, 3, 4, 2], Any)], |t, v| t.permute(v[0], &[0, 2, 1, 3])),
        case("transpose", &[(&[2, 3, 4], Any)], |t, v| t.transpose(v[0])),
        case("concat", &[(&[2, 3, 2], Any), (&[2, 1, 2], Any)], |t, v| t.concat(&[v[0], v[1], v[0]], 1)),
        case("slice", &[(&[3, 5, 2], Any)], |t, v| t.slice(v[0], 1, 1, 3)),
        case("index_select", &[(&[4, 3], Any)], |t, v| t.index_select(v[0], &[3, 0, 3, 1])),
        case("broadcast_to", &[(&[3, 1], Any)], |t, v| t.broadcast_to(v[0], &[2, 3, 4])),
        case("sum", &[(&[3, 4], Any)], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[(&[3, 4], Any)], |t, v| t.mean(v[0])),
        case("sum_axis", &[(&[3, 4, 2], Any)], |t, v| t.sum_axis(v[0], 1)),
        case("mean_axis", &[(&[3, 4], Any)], |t, v| t.mean_axis(v[0], 0)),
        case("softmax", &[(&[2, 4, 3], Any)], |t, v| t.softmax(v[0], 1)),
        case("softmax_last", &[(&[3, 4], Any)], |t, v| t.softmax_last(v[0])),
        case("log_softmax", &[(&[3, 4], Any)], |t, v| t.log_softmax(v[0], 1)),
        case("masked_softmax", &[(&[3, 4], Any)], move |t, v| t.masked_softmax(v[0], &mask)),
        case("layer_norm", &[(&[2, 5, 3], Any)], |t, v| t.layer_norm(v[0], 1, 1e-5)),
        case("layer_norm_last", &[(&[3, 6], Any)], |t, v| t.layer_norm_last(v[0], 1e-5)),
        case("cosine_similarity_rows", &[(&[4, 5], Any), (&[4, 5], Any)], |t, v| t.cosine_similarity_rows(v[0], v[1])),
        case("multi_head_attention", &[(&[2, 5, 12], Any)], |t, v| t.multi_head_attention(v[0], 2)),
    ]
}

fn sample_input(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    match domain {
        Domain::Any => random(shape, -1.5, 1.5, rng),
        Domain::Positive => random(shape, 0.3, 2.0, rng),
        Domain::AwayFromZero => {
            let mut t = random(shape, 0.1, 1.5, rng);
            t.data_mut().iter_mut().for_each(|x| if rng.gen::<bool>() { *x = -*x });
            t
        }
    }
}

/// Checks every tape op on `seeds` random inputs, all coordinates.
pub fn check_ops(seeds: u64) -> Result<Vec<CaseResult>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor<f64>> = c.inputs.iter().map(|(s, d)| sample_input(s, *d, &mut rng)).collect();
                let f = &c.f;
                let report = grad_check_many(|t, v| { let y = f(t, v)?; probe(t, y) }, &inputs, EPS, CoordSelection::All)?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(CaseResult { group: "op", name: c.name.to_string(), instances: seeds, max_rel_error: worst })
        })
        .collect()
}

/// Tiny model (D = 16, two layers) with every loss head registered and all
/// parameters, modality embeddings included, at random non-trivial values.
struct LossFixture {
    store: ParamStore<f64>,
    model: Cmtr<f64>,
    heads: LossHeads,
    images: Vec<Image>,
    batch: BatchLabels,
}

fn loss_fixture(seed: u64, phi_mode: PhiMode) -> Result<LossFixture> {
    let mcfg = ModelConfig {
        img_h: 16,
        img_w: 16,
        patch: PatchConfig { patch_size: 8, stride: 4, embed_dim: 16 },
        depth: 2,
        heads: 2,
        num_ids: 3,
        ..ModelConfig::default()
    };
    let lcfg = LossConfig { baseline: Baseline::Center, phi_mode, ..LossConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Cmtr::new(mcfg, &mut store, &mut rng)?;
    let heads = LossHeads::new(&mut store, &lcfg, 16, 3, 0.05, &mut rng)?;
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with("bias") || name.contains(".me_") || name == "centers" {
            let t = random(store.get(id).shape(), -0.3, 0.3, &mut rng);
            store.assign(id, t.data())?;
        }
    }
    let mut ids = Vec::new();
    let mut modalities = Vec::new();
    let mut images = Vec::new();
    for id in 0..3 {
        for k in 0..4 {
            let m = if k % 2 == 0 { ModalityTag::Visible } else { ModalityTag::Infrared };
            ids.push(id);
            modalities.push(m);
            images.push(Image::new(16, 16, (0..3 * 256).map(|_| rng.gen()).collect(), m, id)?);
        }
    }
    Ok(LossFixture { store, model, heads, images, batch: BatchLabels { ids, modalities } })
}

type LossFn = fn(&mut Tape<f64>, &ParamVars, &LossFixture, &cmtr::model::ForwardOutput<f64>) -> Result<Var>;

fn removed(t: &mut Tape<f64>, pv: &ParamVars, fx: &LossFixture, out: &cmtr::model::ForwardOutput<f64>) -> Result<Var> {
    modality_removal(t, pv, out.f, &fx.batch.modalities, fx.model.embed.modality, &fx.heads.phi)
}

fn loss_cases() -> Vec<(&'static str, PhiMode, LossFn)> {
    let mac: LossFn = |t, pv, fx, out| {
        let r = removed(t, pv, fx, out)?;
        mac_loss(t, r, &fx.batch, DistanceMetric::Cosine, false)
    };
    let maid: LossFn = |t, pv, fx, out| {
        let r = removed(t, pv, fx, out)?;
        maid_loss(t, pv, fx.heads.aux.as_ref().expect("maid head"), r, &fx.batch.ids)
    };
    let mae: LossFn = |t, pv, fx, out| {
        let r = removed(t, pv, fx, out)?;
        let a = mac_loss(t, r, &fx.batch, DistanceMetric::Cosine, false)?;
        let b = maid_loss(t, pv, fx.heads.aux.as_ref().expect("maid head"), r, &fx.batch.ids)?;
        t.add(a, b)
    };
    vec![
        ("id", PhiMode::FullyConnected, |t, _, fx, out| id_loss(t, out.logits, &fx.batch.ids)),
        ("wrt", PhiMode::FullyConnected, |t, _, fx, out| wrt_loss(t, out.v, &fx.batch.ids)),
        ("mac", PhiMode::FullyConnected, mac),
        ("mac_identity_phi", PhiMode::Identity, mac),
        ("maid", PhiMode::FullyConnected, maid),
        ("mae", PhiMode::FullyConnected, mae),
        ("center", PhiMode::FullyConnected, |t, pv, fx, out| {
            center_loss(t, out.f, pv[fx.heads.centers.expect("centers")], &fx.batch.ids)
        }),
        ("hc", PhiMode::FullyConnected, |t, _, fx, out| hc_loss(t, out.f, &fx.batch)),
        ("overall", PhiMode::FullyConnected, |t, pv, fx, out| {
            let cfg = LossConfig::default();
            Ok(overall_loss(t, pv, &fx.model, &fx.heads, out, &fx.batch, &cfg)?.0)
        }),
    ]
}

/// Checks every loss end to end through the tiny model on `seeds`
/// instances, sampling `per_tensor` coordinates of every parameter.
pub fn check_losses(seeds: u64, per_tensor: usize) -> Result<Vec<CaseResult>> {
    loss_cases()
        .into_iter()
        .map(|(name, phi_mode, loss)| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let fx = loss_fixture(seed, phi_mode)?;
                let refs: Vec<&Image> = fx.images.iter().collect();
                let report = grad_check_many(
                    |t, vars| {
                        let pv = ParamVars::from_vars(vars.to_vec());
                        let out = fx.model.forward(t, &pv, &refs, NeckMode::Train)?;
                        loss(t, &pv, &fx, &out)
                    },
                    fx.store.tensors(),
                    EPS,
                    CoordSelection::Sample { per_tensor, seed },
                )?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(CaseResult { group: "loss", name: name.to_string(), instances: seeds, max_rel_error: worst })
        })
        .collect()
}

/// The full suite: ops, then losses.
pub fn run_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = check_ops(seeds)?;
    out.extend(check_losses(seeds, 3)?);
    Ok(out)
}

pub fn format_results(results: &[CaseResult]) -> String {
    let mut s = format!("{:<6} {:<24} {:>9} {:>12}  result\n", "group", "case", "instances", "max rel err");
    for r in results {
        s += &format!(
            "{:<6} {:<24} {:>9} {:>12.3e}  {}\n",
            r.group,
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}
