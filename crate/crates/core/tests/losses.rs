use cmtr::losses::*;
use cmtr::model::*;
use cmtr::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ModalityTag::{Infrared as Ir, Visible as Vis};

const LN2: f64 = std::f64::consts::LN_2;

/// `q` identities with `k` images each, alternating visible/infrared.
fn qk_labels(q: usize, k: usize) -> BatchLabels {
    let mut ids = Vec::new();
    let mut modalities = Vec::new();
    for id in 0..q {
        for j in 0..k {
            ids.push(id);
            modalities.push(if j % 2 == 0 { Vis } else { Ir });
        }
    }
    BatchLabels { ids, modalities }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn softplus_ref(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Loss-side parameters registered in their own store.
struct Fixture {
    store: ParamStore<f64>,
    me: (ParamId, ParamId),
    phi: Phi,
    aux: Linear,
    centers: ParamId,
}

fn fixture(d: usize, c: usize, phi_mode: PhiMode, shared_phi: bool, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let vis = store.insert("me_vis", random_tensor(&[d], 0.5, &mut rng)).unwrap();
    let ir = store.insert("me_ir", random_tensor(&[d], 0.5, &mut rng)).unwrap();
    let phi = Phi::new(&mut store, phi_mode, shared_phi, d, 0.3, &mut rng).unwrap();
    let aux = Linear::new(&mut store, "aux", d, c, 0.3, &mut rng).unwrap();
    let centers = store.insert("centers", random_tensor(&[c, d], 0.5, &mut rng)).unwrap();
    // non-zero biases so every parameter is exercised
    for id in store.iter().map(|(id, _, _)| id).collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            let t = random_tensor(store.get(id).shape(), 0.2, &mut rng);
            store.assign(id, t.data()).unwrap();
        }
    }
    Fixture { store, me: (vis, ir), phi, aux, centers }
}

fn mac_value(removed: Vec<f64>, d: usize, batch: &BatchLabels, metric: DistanceMetric, shared: bool) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([batch.len(), d], removed).unwrap());
    let l = mac_loss(&mut tape, x, batch, metric, shared).unwrap();
    tape.item(l)
}

#[test]
fn mac_identical_features_give_qk_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (q, k) in [(2, 2), (3, 4), (8, 8), (4, 6)] {
        let batch = qk_labels(q, k);
        let d = 7;
        let protos: Vec<Vec<f64>> = (0..q).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x: Vec<f64> = batch.ids.iter().flat_map(|&id| protos[id].clone()).collect();
        for shared in [false, true] {
            let v = mac_value(x.clone(), d, &batch, DistanceMetric::Cosine, shared);
            assert!((v - (q * k) as f64 * LN2).abs() < 1e-9, "q={} k={} shared={}: {}", q, k, shared, v);
        }
    }
}

#[test]
fn mac_cosine_lower_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let batch = qk_labels(3, 4);
        let x = random_tensor(&[12, 5], 1.0, &mut rng);
        for shared in [false, true] {
            let v = mac_value(x.data().to_vec(), 5, &batch, DistanceMetric::Cosine, shared);
            assert!(v >= 12.0 * LN2 - 1e-12);
        }
    }
}

#[test]
fn mac_opposite_pair_against_zero_center() {
    // one identity, f~ = a (visible) and -a (infrared): the shared center is
    // the zero vector, whose norm is floored, so cosine similarity is 0
    let a = [0.3, -1.2, 0.5];
    let batch = BatchLabels { ids: vec![0, 0], modalities: vec![Vis, Ir] };
    let x: Vec<f64> = a.iter().copied().chain(a.iter().map(|v| -v)).collect();
    let got = mac_value(x.clone(), 3, &batch, DistanceMetric::Cosine, true);
    // brute-force oracle with plain scalar arithmetic
    let center: Vec<f64> = (0..3).map(|j| (x[j] + x[3 + j]) / 2.0).collect();
    let mut want = 0.0;
    for i in 0..2 {
        let row = &x[i * 3..i * 3 + 3];
        let dot: f64 = row.iter().zip(&center).map(|(p, q)| p * q).sum();
        let nr = row.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
        let nc = center.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
        want += softplus_ref(1.0 - dot / (nr * nc));
    }
    assert!((want - 2.0 * softplus_ref(1.0)).abs() < 1e-15);
    assert!((got - want).abs() < 1e-12);
    // per-modality centers are the features themselves
    let sep = mac_value(x, 3, &batch, DistanceMetric::Cosine, false);
    assert!((sep - 2.0 * LN2).abs() < 1e-12);
}

#[test]
fn mac_matches_scalar_oracle_for_all_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = qk_labels(3, 4);
    let d = 4;
    let x = random_tensor(&[12, d], 1.0, &mut rng);
    for metric in DistanceMetric::ALL {
        for shared in [false, true] {
            let got = mac_value(x.data().to_vec(), d, &batch, metric, shared);
            let mut want = 0.0;
            for i in 0..12 {
                let members: Vec<usize> = (0..12)
                    .filter(|&j| batch.ids[j] == batch.ids[i] && (shared || batch.modalities[j] == batch.modalities[i]))
                    .collect();
                let center: Vec<f64> =
                    (0..d).map(|c| members.iter().map(|&j| x.row(j)[c]).sum::<f64>() / members.len() as f64).collect();
                want += softplus_ref(metric.eval(x.row(i), &center));
            }
            assert!((got - want).abs() < 1e-10, "{} shared={}: {} vs {}", metric, shared, got, want);
        }
    }
}

#[test]
fn uniform_logits_give_log_classes() {
    for c in [2usize, 7, 20] {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full([6, c], 0.25));
        let labels = [0, 1, 2 % c, 0, 1, c - 1];
        let l = id_loss(&mut tape, logits, &labels).unwrap();
        assert!((tape.item(l) - (c as f64).ln()).abs() < 1e-9);

        // aux head with zero weights and constant bias yields uniform logits
        let fx = fixture(5, c, PhiMode::Identity, false, 4);
        let mut store = fx.store.clone();
        store.assign(fx.aux.weight, &vec![0.0; 5 * c]).unwrap();
        store.assign(fx.aux.bias, &vec![0.7; c]).unwrap();
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::full([6, 5], 0.3));
        let m = maid_loss(&mut tape, &pv, &fx.aux, f, &labels).unwrap();
        assert!((tape.item(m) - 6.0 * (c as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn wrt_symmetric_configuration_gives_ln2() {
    // regular tetrahedron: every pairwise distance is equal
    let pts = vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new([4, 3], pts).unwrap());
    let l = wrt_loss(&mut tape, v, &[0, 0, 1, 1]).unwrap();
    assert!((tape.item(l) - LN2).abs() < 1e-9);
}

#[test]
fn wrt_separated_clusters() {
    let (x, y) = ([0.5, -2.0], [6.5, 6.0]);
    let pts: Vec<f64> = [x, x, x, y, y, y].concat();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new([6, 2], pts).unwrap());
    let l = wrt_loss(&mut tape, v, &[0, 0, 0, 1, 1, 1]).unwrap();
    assert!((tape.item(l) - softplus_ref(-10.0)).abs() < 1e-15);
    assert!((tape.item(l) - 4.54e-5).abs() < 1e-7);
}

#[test]
fn wrt_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = qk_labels(3, 4);
    let v = random_tensor(&[12, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let l = wrt_loss(&mut tape, x, &batch.ids).unwrap();
    let got = tape.item(l);
    let dist = |i: usize, j: usize| v.row(i).iter().zip(v.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut want = 0.0;
    for i in 0..12 {
        let pos: Vec<f64> = (0..12).filter(|&j| j != i && batch.ids[j] == batch.ids[i]).map(|j| dist(i, j)).collect();
        let neg: Vec<f64> = (0..12).filter(|&j| batch.ids[j] != batch.ids[i]).map(|j| dist(i, j)).collect();
        let zp: f64 = pos.iter().map(|d| d.exp()).sum();
        let zn: f64 = neg.iter().map(|d| (-d).exp()).sum();
        let fp: f64 = pos.iter().map(|d| d * d.exp() / zp).sum();
        let cn: f64 = neg.iter().map(|d| d * (-d).exp() / zn).sum();
        want += softplus_ref(fp - cn) / 12.0;
    }
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn modality_removal_examples() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = random_tensor(&[2, d], 1.0, &mut rng);
    let run = |store: &ParamStore<f64>, phi: &Phi, me: (ParamId, ParamId), f: &Tensor<f64>| {
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let x = tape.constant(f.clone());
        let r = modality_removal(&mut tape, &pv, x, &[Vis, Ir], Some(me), phi).unwrap();
        tape.data(r).to_vec()
    };

    // zero embeddings, identity mapping
    let mut fx = fixture(d, 3, PhiMode::Identity, false, 6);
    fx.store.assign(fx.me.0, &[0.0; 4]).unwrap();
    fx.store.assign(fx.me.1, &[0.0; 4]).unwrap();
    assert_eq!(run(&fx.store, &fx.phi, fx.me, &f), f.data());

    // f equal to its own embedding
    let fx = fixture(d, 3, PhiMode::Identity, false, 7);
    let own: Vec<f64> = [fx.store.get(fx.me.0).data(), fx.store.get(fx.me.1).data()].concat();
    let r = run(&fx.store, &fx.phi, fx.me, &Tensor::new([2, d], own).unwrap());
    assert!(r.iter().all(|&v| v == 0.0));

    // fully connected with zero weights subtracts the bias
    for shared in [false, true] {
        let mut fx = fixture(d, 3, PhiMode::FullyConnected, shared, 8);
        let maps = fx.phi.maps.unwrap();
        let b = [0.25, -0.5, 1.0, 0.0];
        for m in maps {
            fx.store.assign(m.weight, &[0.0; 16]).unwrap();
            fx.store.assign(m.bias, &b).unwrap();
        }
        let r = run(&fx.store, &fx.phi, fx.me, &f);
        for i in 0..2 {
            for j in 0..d {
                assert_eq!(r[i * d + j], f.row(i)[j] - b[j]);
            }
        }
    }
}

#[test]
fn maid_equals_batch_times_id_loss_with_copied_head() {
    let (d, c) = (5, 4);
    let mut fx = fixture(d, c, PhiMode::Identity, false, 9);
    fx.store.assign(fx.me.0, &[0.0; 5]).unwrap();
    fx.store.assign(fx.me.1, &[0.0; 5]).unwrap();
    let batch = qk_labels(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random_tensor(&[8, d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let pv = fx.store.bind_frozen(&mut tape);
    let x = tape.constant(f);
    let removed = modality_removal(&mut tape, &pv, x, &batch.modalities, Some(fx.me), &fx.phi).unwrap();
    let maid = maid_loss(&mut tape, &pv, &fx.aux, removed, &batch.ids).unwrap();
    // the main head is a separate copy of the same weights
    let w = tape.constant(fx.store.get(fx.aux.weight).clone());
    let b = tape.constant(fx.store.get(fx.aux.bias).clone());
    let logits = tape.matmul(x, w).unwrap();
    let logits = tape.add(logits, b).unwrap();
    let id = id_loss(&mut tape, logits, &batch.ids).unwrap();
    assert!((tape.item(maid) - 8.0 * tape.item(id)).abs() < 1e-12);
}

#[test]
fn maid_invariant_to_common_logit_shift() {
    let (d, c) = (5, 4);
    let fx = fixture(d, c, PhiMode::FullyConnected, false, 10);
    let batch = qk_labels(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f = random_tensor(&[8, d], 1.0, &mut rng);
    let value = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let x = tape.constant(f.clone());
        let r = modality_removal(&mut tape, &pv, x, &batch.modalities, Some(fx.me), &fx.phi).unwrap();
        let m = maid_loss(&mut tape, &pv, &fx.aux, r, &batch.ids).unwrap();
        tape.item(m)
    };
    let base = value(&fx.store);
    for shift in [-3.0, 0.5, 10.0] {
        let mut store = fx.store.clone();
        let b: Vec<f64> = store.get(fx.aux.bias).data().iter().map(|v| v + shift).collect();
        store.assign(fx.aux.bias, &b).unwrap();
        assert!((value(&store) - base).abs() < 1e-12);
    }
}

#[test]
fn swapping_modalities_and_their_parameters_is_bit_identical() {
    let (d, c) = (6, 4);
    for shared_center in [false, true] {
        let fx = fixture(d, c, PhiMode::FullyConnected, false, 11);
        let batch = qk_labels(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_tensor(&[12, d], 1.0, &mut rng);
        let eval = |store: &ParamStore<f64>, batch: &BatchLabels| {
            let mut tape = Tape::new();
            let pv = store.bind_frozen(&mut tape);
            let x = tape.constant(f.clone());
            let r = modality_removal(&mut tape, &pv, x, &batch.modalities, Some(fx.me), &fx.phi).unwrap();
            let mac = mac_loss(&mut tape, r, batch, DistanceMetric::Cosine, shared_center).unwrap();
            let maid = maid_loss(&mut tape, &pv, &fx.aux, r, &batch.ids).unwrap();
            (tape.item(mac).to_bits(), tape.item(maid).to_bits())
        };
        let before = eval(&fx.store, &batch);

        let mut swapped = fx.store.clone();
        let [pv_map, pi_map] = fx.phi.maps.unwrap();
        let pairs = [(fx.me.0, fx.me.1), (pv_map.weight, pi_map.weight), (pv_map.bias, pi_map.bias)];
        for (a, b) in pairs {
            let (ta, tb) = (fx.store.get(a).data().to_vec(), fx.store.get(b).data().to_vec());
            swapped.assign(a, &tb).unwrap();
            swapped.assign(b, &ta).unwrap();
        }
        let flipped = BatchLabels { ids: batch.ids.clone(), modalities: batch.modalities.iter().map(|m| m.other()).collect() };
        assert_eq!(eval(&swapped, &flipped), before);
    }
}

#[test]
fn center_and_hc_examples() {
    let mut tape = Tape::new();
    let centers = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap());
    let f = tape.constant(Tensor::new([3, 2], vec![-3.0, 0.5, 1.0, 2.0, 1.0, 2.0]).unwrap());
    let l = center_loss(&mut tape, f, centers, &[1, 0, 0]).unwrap();
    assert_eq!(tape.item(l), 0.0);
    let f2 = tape.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
    let l2 = center_loss(&mut tape, f2, centers, &[0]).unwrap();
    assert_eq!(tape.item(l2), 2.5);

    let batch = BatchLabels { ids: vec![0, 0], modalities: vec![Vis, Ir] };
    let f = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let hc = hc_loss(&mut tape, f, &batch).unwrap();
    assert_eq!(tape.item(hc), 2.0);

    let batch = qk_labels(2, 4);
    let same: Vec<f64> = batch.ids.iter().flat_map(|&i| vec![i as f64, 1.0 - i as f64]).collect();
    let f = tape.constant(Tensor::new([8, 2], same).unwrap());
    let hc = hc_loss(&mut tape, f, &batch).unwrap();
    assert_eq!(tape.item(hc), 0.0);

    let bad = BatchLabels { ids: vec![0, 0, 1, 1], modalities: vec![Vis, Ir, Vis, Vis] };
    let f = tape.constant(Tensor::zeros([4, 2]));
    assert!(hc_loss(&mut tape, f, &bad).is_err());
}

/// Runs `loss` over features plus every fixture parameter and checks the
/// gradient of all of them.
fn check_all_inputs<F>(name: &str, seeds: u64, phi_mode: PhiMode, shared_phi: bool, loss: F)
where
    F: Fn(&mut Tape<f64>, &ParamVars, &Fixture, Var, &BatchLabels) -> cmtr::Result<Var>,
{
    let (d, c) = (6, 5);
    for seed in 0..seeds {
        let fx = fixture(d, c, phi_mode, shared_phi, 1000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = qk_labels(3, 4);
        let mut inputs = vec![random_tensor(&[12, d], 1.0, &mut rng)];
        inputs.extend(fx.store.tensors().iter().cloned());
        let report = grad_check_many(
            |tape, vars| {
                let pv = ParamVars::from_vars(vars[1..].to_vec());
                loss(tape, &pv, &fx, vars[0], &batch)
            },
            &inputs,
            1e-6,
            CoordSelection::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{} seed {}: {:?}", name, seed, report);
    }
}

#[test]
fn gradients_of_classification_losses() {
    check_all_inputs("id", 20, PhiMode::Identity, false, |tape, pv, fx, f, batch| {
        let logits = fx.aux.forward(tape, pv, f)?;
        id_loss(tape, logits, &batch.ids)
    });
    check_all_inputs("wrt", 20, PhiMode::Identity, false, |tape, _, _, f, batch| wrt_loss(tape, f, &batch.ids));
}

#[test]
fn gradients_of_modality_losses() {
    for (phi_mode, shared_phi) in [(PhiMode::FullyConnected, false), (PhiMode::FullyConnected, true), (PhiMode::Identity, false)] {
        check_all_inputs("maid", 20, phi_mode, shared_phi, |tape, pv, fx, f, batch| {
            let r = modality_removal(tape, pv, f, &batch.modalities, Some(fx.me), &fx.phi)?;
            maid_loss(tape, pv, &fx.aux, r, &batch.ids)
        });
        check_all_inputs("mae", 20, phi_mode, shared_phi, |tape, pv, fx, f, batch| {
            let r = modality_removal(tape, pv, f, &batch.modalities, Some(fx.me), &fx.phi)?;
            let mac = mac_loss(tape, r, batch, DistanceMetric::Cosine, false)?;
            let maid = maid_loss(tape, pv, &fx.aux, r, &batch.ids)?;
            tape.add(mac, maid)
        });
    }
    for metric in DistanceMetric::ALL {
        for shared_center in [false, true] {
            check_all_inputs("mac", 20, PhiMode::FullyConnected, false, |tape, pv, fx, f, batch| {
                let r = modality_removal(tape, pv, f, &batch.modalities, Some(fx.me), &fx.phi)?;
                mac_loss(tape, r, batch, metric, shared_center)
            });
        }
    }
}

#[test]
fn gradients_of_baselines() {
    check_all_inputs("center", 20, PhiMode::Identity, false, |tape, pv, fx, f, batch| {
        center_loss(tape, f, pv[fx.centers], &batch.ids)
    });
    check_all_inputs("hc", 20, PhiMode::Identity, false, |tape, _, _, f, batch| hc_loss(tape, f, batch));
}

#[test]
fn modality_embeddings_receive_gradient_from_mae() {
    let fx = fixture(6, 5, PhiMode::FullyConnected, false, 12);
    let batch = qk_labels(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = random_tensor(&[12, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let pv = fx.store.bind(&mut tape);
    let x = tape.constant(f);
    let r = modality_removal(&mut tape, &pv, x, &batch.modalities, Some(fx.me), &fx.phi).unwrap();
    let mac = mac_loss(&mut tape, r, &batch, DistanceMetric::Cosine, false).unwrap();
    let maid = maid_loss(&mut tape, &pv, &fx.aux, r, &batch.ids).unwrap();
    let mae = tape.add(mac, maid).unwrap();
    let grads = tape.backward(mae).unwrap();
    for id in [fx.me.0, fx.me.1] {
        let g = grads.dense(pv[id], 6);
        assert!(g.iter().map(|v| v * v).sum::<f64>() > 1e-12);
    }
}

mod overall {
    use super::*;

    fn setup(cfg: &LossConfig, seed: u64) -> (ParamStore<f64>, Cmtr<f64>, LossHeads, Vec<Image>, BatchLabels) {
        let mcfg = ModelConfig {
            img_h: 16,
            img_w: 16,
            patch: PatchConfig { patch_size: 8, stride: 4, embed_dim: 16 },
            depth: 2,
            heads: 2,
            num_ids: 3,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Cmtr::new(mcfg.clone(), &mut store, &mut rng).unwrap();
        let heads = LossHeads::new(&mut store, cfg, 16, 3, 0.02, &mut rng).unwrap();
        let (vis, ir) = model.embed.modality.unwrap();
        store.assign(vis, random_tensor(&[16], 0.3, &mut rng).data()).unwrap();
        store.assign(ir, random_tensor(&[16], 0.3, &mut rng).data()).unwrap();
        let batch = qk_labels(3, 2);
        let imgs = batch
            .ids
            .iter()
            .zip(&batch.modalities)
            .map(|(&id, &m)| {
                let px = (0..3 * 256).map(|_| rng.gen()).collect();
                Image::new(16, 16, px, m, id).unwrap()
            })
            .collect();
        (store, model, heads, imgs, batch)
    }

    fn evaluate(cfg: &LossConfig, seed: u64) -> LossBreakdown {
        let (store, model, heads, imgs, batch) = setup(cfg, seed);
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let out = model.forward(&mut tape, &pv, &refs, NeckMode::Train).unwrap();
        overall_loss(&mut tape, &pv, &model, &heads, &out, &batch, cfg).unwrap().1
    }

    #[test]
    fn lambda_zero_is_exactly_id_plus_wrt() {
        let parts = evaluate(&LossConfig { lambda: 0.0, ..LossConfig::default() }, 1);
        assert!(parts.mac > 0.0 && parts.maid > 0.0);
        assert_eq!(parts.total, parts.id + parts.wrt);
    }

    #[test]
    fn total_combines_components() {
        let cfg = LossConfig::default();
        let p = evaluate(&cfg, 2);
        assert!((p.total - combine(p.id, p.wrt, p.mac + p.maid, 4.0)).abs() < 1e-12);
        assert!(p.mac >= 6.0 * LN2 - 1e-12);
        for set in [LossSet::Center, LossSet::Hc] {
            let mut cfg = LossConfig::default();
            set.apply(&mut cfg);
            let p = evaluate(&cfg, 3);
            let w = if set == LossSet::Center { cfg.center_weight } else { cfg.hc_weight };
            assert_eq!((p.mac, p.maid), (0.0, 0.0));
            assert!(p.aux > 0.0);
            assert!((p.total - (p.id + p.wrt + w * p.aux)).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_gradient_through_overall_loss() {
        for (seed, set) in [(0, LossSet::Mae), (1, LossSet::Center), (2, LossSet::Hc)] {
            let mut cfg = LossConfig::default();
            set.apply(&mut cfg);
            let (store, model, heads, imgs, batch) = setup(&cfg, seed);
            let refs: Vec<&Image> = imgs.iter().collect();
            let report = grad_check_many(
                |tape, vars| {
                    let pv = ParamVars::from_vars(vars.to_vec());
                    let out = model.forward(tape, &pv, &refs, NeckMode::Train)?;
                    Ok(overall_loss(tape, &pv, &model, &heads, &out, &batch, &cfg)?.0)
                },
                store.tensors(),
                1e-6,
                CoordSelection::Sample { per_tensor: 4, seed },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{}: {:?}", set, report);
        }
    }
}
