use cmtr::data::{Benchmark, BenchmarkConfig};
use cmtr::eval::*;
use cmtr::model::{Cmtr, Image, ModalityTag, ModelConfig, PatchConfig};
use cmtr::numerics::ParamStore;
use cmtr::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent reference: positions come from pairwise comparison counts,
/// metrics from explicit counting at every relevant position.
mod oracle {
    pub fn positions(d: &[f64]) -> Vec<usize> {
        (0..d.len())
            .map(|i| 1 + (0..d.len()).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count())
            .collect()
    }

    /// Relevance bits laid out by position.
    pub fn relevance(d: &[f64], rel: &[bool]) -> Vec<bool> {
        let pos = positions(d);
        let mut out = vec![false; d.len()];
        for i in 0..d.len() {
            out[pos[i] - 1] = rel[i];
        }
        out
    }

    pub fn rank_k(lists: &[Vec<bool>], k: usize) -> f64 {
        let hits = lists.iter().filter(|l| l[..k.min(l.len())].iter().any(|&r| r)).count();
        hits as f64 / lists.len() as f64
    }

    pub fn ap(l: &[bool]) -> f64 {
        let n = l.iter().filter(|&&r| r).count();
        let mut s = 0.0;
        for p in 1..=l.len() {
            if l[p - 1] {
                s += l[..p].iter().filter(|&&r| r).count() as f64 / p as f64;
            }
        }
        s / n as f64
    }

    pub fn inp(l: &[bool]) -> f64 {
        let n = l.iter().filter(|&&r| r).count();
        let last = (1..=l.len()).filter(|&p| l[p - 1]).max().unwrap();
        n as f64 / last as f64
    }
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..1000 {
        let queries = rng.gen_range(1..=4);
        let mut rankings = Vec::new();
        let mut lists = Vec::new();
        for _ in 0..queries {
            let n = rng.gen_range(1..=8);
            let dim = 3;
            // Coarse integer features make distance ties common.
            let feat = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1..=2) as f64).collect::<Vec<f64>>();
            let q = loop {
                let f = feat(&mut rng);
                if f.iter().any(|&x| x != 0.0) {
                    break f;
                }
            };
            let g: Vec<Vec<f64>> = (0..n).map(|_| feat(&mut rng)).collect();
            let mut ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let forced = rng.gen_range(0..n);
            ids[forced] = 7;
            for id in ids.iter_mut() {
                if *id == 1 {
                    *id = 7;
                }
            }
            let r = rank_gallery(&q, &g, 7, &ids).unwrap().unwrap();
            let d: Vec<f64> = g.iter().map(|x| cmtr::numerics::cosine_distance(&q, x)).collect();
            let rel: Vec<bool> = ids.iter().map(|&i| i == 7).collect();
            let expected = oracle::relevance(&d, &rel);
            assert_eq!(r.relevant, expected, "instance {instance}");
            let pos = oracle::positions(&d);
            for (p, &g_idx) in r.order.iter().enumerate() {
                assert_eq!(pos[g_idx], p + 1);
            }
            rankings.push(r);
            lists.push(expected);
        }
        let ks = [1, 2, 3, 5, 8];
        let got = cmc(&rankings, &ks).unwrap();
        for (k, g) in ks.iter().zip(got) {
            assert_eq!(g, oracle::rank_k(&lists, *k), "instance {instance} R{k}");
        }
        let map = lists.iter().map(|l| oracle::ap(l)).sum::<f64>() / lists.len() as f64;
        let minp = lists.iter().map(|l| oracle::inp(l)).sum::<f64>() / lists.len() as f64;
        assert_eq!(mean_ap(&rankings).unwrap(), map, "instance {instance}");
        assert_eq!(mean_inp(&rankings).unwrap(), minp, "instance {instance}");
    }
}

#[test]
fn hand_cases() {
    assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
    assert!((inverse_negative_penalty(&[true, false, true]) - 2.0 / 3.0).abs() < 1e-15);
}

fn random_pool(rng: &mut ChaCha8Rng, ids: usize, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<ModalityTag>) {
    let mut f = Vec::new();
    let mut l = Vec::new();
    let mut m = Vec::new();
    for id in 0..ids {
        for modality in ModalityTag::ALL {
            for _ in 0..per {
                f.push((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
                l.push(id);
                m.push(modality);
            }
        }
    }
    (f, l, m)
}

#[test]
fn scaling_features_leaves_report_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (f, ids, mods) = random_pool(&mut rng, 6, 6, 8);
    let protocol = EvalProtocol { trials: 4, ..EvalProtocol::default() };
    let (base, base_dump) = evaluate_features(&f, &ids, &mods, &protocol, "x", true).unwrap();
    for c in [0.5, 3.7, 1e3, 1e-3, 2.0f64.powi(40)] {
        let scaled: Vec<Vec<f64>> = f.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
        let (r, dump) = evaluate_features(&scaled, &ids, &mods, &protocol, "x", true).unwrap();
        assert_eq!(r, base, "scale {c}");
        let orders: Vec<_> = dump.iter().map(|d| &d.gallery).collect();
        assert_eq!(orders, base_dump.iter().map(|d| &d.gallery).collect::<Vec<_>>());
    }
}

#[test]
fn mean_row_is_trial_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (f, ids, mods) = random_pool(&mut rng, 5, 6, 4);
    let protocol = EvalProtocol { trials: 10, seed: 3, ..EvalProtocol::default() };
    let (r, _) = evaluate_features(&f, &ids, &mods, &protocol, "x", false).unwrap();
    assert_eq!(r.trials.len(), 10);
    let avg = |g: fn(&TrialMetrics) -> f64| r.trials.iter().map(g).sum::<f64>() / 10.0;
    assert_eq!(r.mean.rank1, avg(|t| t.rank1));
    assert_eq!(r.mean.map, avg(|t| t.map));
    assert_eq!(r.mean.minp, avg(|t| t.minp));
    for t in r.trials.iter().chain([&r.mean]) {
        assert!(t.rank1 <= t.rank10 && t.rank10 <= t.rank20);
        for v in [t.rank1, t.rank10, t.rank20, t.map, t.minp] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 12);
    assert!(lines[0].starts_with("trial,rank1,rank10,rank20,map,minp"));
    assert!(lines[11].starts_with("MEAN,"));
    assert!(r.summary().contains("mAP"));
}

#[test]
fn gallery_sizes_follow_protocol() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (f, ids, mods) = random_pool(&mut rng, 4, 12, 4);
    let size = |p: EvalProtocol| {
        let (_, d) = evaluate_features(&f, &ids, &mods, &p, "x", true).unwrap();
        assert!(d.iter().all(|x| x.gallery.len() == d[0].gallery.len()));
        d[0].gallery.len()
    };
    assert_eq!(size(EvalProtocol { trials: 2, ..EvalProtocol::default() }), 4 * 2);
    assert_eq!(size(EvalProtocol { mode: GalleryMode::MultiShot, multi_shots: 4, trials: 2, ..EvalProtocol::default() }), 4 * 2 * 4);
    assert_eq!(size(EvalProtocol { mode: GalleryMode::MultiShot, multi_shots: 10, ..EvalProtocol::default() }), 4 * 12);
    assert_eq!(size(EvalProtocol::full_gallery()), 4 * 12);
}

#[test]
fn single_shot_galleries_change_between_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (f, ids, mods) = random_pool(&mut rng, 4, 12, 4);
    let (_, d) = evaluate_features(&f, &ids, &mods, &EvalProtocol { trials: 3, ..EvalProtocol::default() }, "x", true).unwrap();
    let first_of = |t: usize| {
        let mut g = d.iter().find(|x| x.trial == t).unwrap().gallery.clone();
        g.sort();
        g
    };
    assert!(first_of(0) != first_of(1) || first_of(1) != first_of(2));
}

#[test]
fn direction_swaps_roles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (f, ids, mods) = random_pool(&mut rng, 3, 4, 4);
    for dir in [Direction::InfraredToVisible, Direction::VisibleToInfrared] {
        let p = EvalProtocol { direction: dir, ..EvalProtocol::full_gallery() };
        let (_, d) = evaluate_features(&f, &ids, &mods, &p, "x", true).unwrap();
        assert_eq!(d.len(), 12);
        for x in &d {
            assert_eq!(mods[x.query], dir.query_modality());
            assert!(x.gallery.iter().all(|&g| mods[g] == dir.query_modality().other()));
        }
    }
}

#[test]
fn identity_without_gallery_is_rejected() {
    let f = vec![vec![1.0, 0.0]; 3];
    let ids = vec![0, 0, 1];
    let mods = vec![ModalityTag::Infrared, ModalityTag::Visible, ModalityTag::Infrared];
    assert!(evaluate_features(&f, &ids, &mods, &EvalProtocol::full_gallery(), "x", false).is_err());
    assert!(evaluate_features(&f, &ids, &mods, &EvalProtocol { trials: 0, ..EvalProtocol::default() }, "x", false).is_err());
}

struct RandomFeatures {
    seed: u64,
}

impl FeatureExtractor for RandomFeatures {
    fn extract(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(images.iter().map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
    }
}

#[test]
fn random_features_score_at_chance() {
    let bench = Benchmark::generate(&BenchmarkConfig::default()).unwrap();
    let test = bench.test_images();
    let seeds = 5;
    let mut r1 = 0.0;
    let mut n = 0;
    for seed in 0..seeds {
        let (r, _) = run_protocol(&RandomFeatures { seed }, &test, &EvalProtocol::full_gallery(), false).unwrap();
        r1 += r.mean.rank1 * r.mean.queries as f64;
        n += r.mean.queries;
    }
    let p = 0.1;
    let observed = r1 / n as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((observed - p).abs() <= 3.0 * sigma, "R1 {observed} vs chance {p} (sigma {sigma})");
}

fn tiny_model(seed: u64) -> (ParamStore<f64>, Cmtr<f64>) {
    let cfg = ModelConfig {
        img_h: 16,
        img_w: 16,
        patch: PatchConfig { patch_size: 8, stride: 4, embed_dim: 16 },
        depth: 1,
        heads: 2,
        num_ids: 4,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Cmtr::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, model)
}

#[test]
fn model_evaluation_is_deterministic_across_jobs() {
    let bench =
        Benchmark::generate(&BenchmarkConfig { train_ids: 2, test_ids: 4, per_modality: 6, img_h: 16, img_w: 16, seed: 1 }).unwrap();
    let test = bench.test_images();
    let (store, model) = tiny_model(3);
    let protocol = EvalProtocol { trials: 3, ..EvalProtocol::default() };
    let mut ex = ModelExtractor::new(&model, &store);
    ex.batch_size = 5;
    let (a, _) = run_protocol(&ex, &test, &protocol, false).unwrap();
    let (b, _) = run_protocol(&ex, &test, &protocol, false).unwrap();
    ex.jobs = 3;
    let (c, _) = run_protocol(&ex, &test, &protocol, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.checkpoint, "model");
}

#[test]
fn ranking_dump_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (f, ids, mods) = random_pool(&mut rng, 3, 2, 4);
    let (_, d) = evaluate_features(&f, &ids, &mods, &EvalProtocol::full_gallery(), "x", true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rankings.jsonl");
    write_rankings(&path, &d).unwrap();
    let back: Vec<RankingDump> =
        std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, d);
    for x in &d {
        assert!(x.distances.windows(2).all(|w| w[0] <= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_is_sorted_permutation(d in prop::collection::vec(0.0f64..2.0, 1..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rel: Vec<bool> = (0..d.len()).map(|_| rng.gen_bool(0.4)).collect();
        let r = RankingList::from_distances(&d, &rel);
        let mut seen = r.order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
        prop_assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
        for (p, &i) in r.order.iter().enumerate() {
            prop_assert_eq!(r.relevant[p], rel[i]);
        }
    }

    #[test]
    fn rank_k_is_monotone(hits in prop::collection::vec(1usize..30, 1..20)) {
        let rankings: Vec<RankingList> = hits
            .iter()
            .map(|&h| {
                let rel: Vec<bool> = (1..=30).map(|p| p == h).collect();
                let d: Vec<f64> = (0..30).map(|i| i as f64).collect();
                RankingList::from_distances(&d, &rel)
            })
            .collect();
        let r = cmc(&rankings, &[1, 10, 20]).unwrap();
        prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
