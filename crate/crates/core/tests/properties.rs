use npt_core::data::{batch_indices, gen_synthetic, SyntheticSpec};
use npt_core::diagnostics::{
    check_prop2_condition, check_properties, class_means, dn_dk, gamma_and_variance,
};
use npt_core::evaluation::{embed_all, rank1_identification, roc_from_scores, verification_roc};
use npt_core::training::{train, TrainConfig};
use npt_core::{normalize_to_sphere, Bank, Model, Sgd, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn unit_rows(raw: &[f64], dim: usize, r: f64) -> Vec<Vec<f64>> {
    raw.chunks(dim)
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n * r).collect()
        })
        .collect()
}

/// Negatives of `y` ordered by squared distance, ties by index.
fn ranked_negatives(z: &[f64], y: usize, w: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..w.len())
        .filter(|&j| j != y)
        .map(|j| (j, sq(z, &w[j])))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all
}

struct Snapshot {
    emb: Vec<Vector>,
    labels: Vec<usize>,
    bank: Bank,
}

fn snapshot(epochs: usize, seed: u64) -> Snapshot {
    let ds = gen_synthetic::<f64>(&SyntheticSpec {
        class_count: 5,
        input_dim: 8,
        samples_per_class: 25,
        noise_sigma: 0.3,
        seed,
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        hidden: vec![16],
        embedding_dim: 4,
        seed,
        ..TrainConfig::default()
    };
    let (model, bank) = if epochs == 0 {
        npt_core::training::initialize(&cfg, 8, 5).unwrap()
    } else {
        let out = train(&cfg, &ds).unwrap();
        (out.model, out.bank)
    };
    Snapshot {
        emb: embed_all(&model, &ds.inputs, 1.0).unwrap(),
        labels: ds.labels,
        bank,
    }
}

fn brute_dn_dk(s: &Snapshot) -> (f64, f64) {
    let r = s.bank.radius();
    let w = unit_rows(s.bank.raw().as_slice(), s.bank.dim(), r);
    let classes = w.len();
    let mut per_class = vec![(0.0, 0.0, 0usize); classes];
    for (z, &y) in s.emb.iter().zip(&s.labels) {
        let ranked = ranked_negatives(z.components(), y, &w);
        let mean_to = |c: usize| {
            let members: Vec<f64> = s
                .emb
                .iter()
                .zip(&s.labels)
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| sq(z.components(), x.components()))
                .collect();
            members.iter().sum::<f64>() / members.len() as f64
        };
        per_class[y].0 += mean_to(ranked[0].0);
        per_class[y].1 += mean_to(ranked[1].0);
        per_class[y].2 += 1;
    }
    let used: Vec<_> = per_class.into_iter().filter(|c| c.2 > 0).collect();
    let n = used.len() as f64;
    (
        used.iter().map(|c| c.0 / c.2 as f64).sum::<f64>() / n,
        used.iter().map(|c| c.1 / c.2 as f64).sum::<f64>() / n,
    )
}

#[test]
fn dn_dk_matches_full_pairwise_average() {
    for (epochs, seed) in [(0, 1), (6, 2), (6, 3)] {
        let s = snapshot(epochs, seed);
        let (dn, dk) = dn_dk(&s.emb, &s.labels, &s.bank).unwrap();
        let (bn, bk) = brute_dn_dk(&s);
        assert!(
            (dn - bn).abs() < 1e-9 && (dk - bk).abs() < 1e-9,
            "{dn} {bn} {dk} {bk}"
        );
        assert!((0.0..=4.0).contains(&dn) && (0.0..=4.0).contains(&dk));
        if epochs > 0 {
            assert!(dn < dk, "trained snapshot should have D_n < D_k");
        }
    }
}

#[test]
fn prop2_fraction_and_property1_match_recount() {
    for (epochs, seed) in [(0, 4), (6, 5)] {
        let s = snapshot(epochs, seed);
        let r = s.bank.radius();
        let w = unit_rows(s.bank.raw().as_slice(), s.bank.dim(), r);
        let means = class_means(&s.emb, &s.labels, 1).unwrap();
        let tilde: Vec<Vec<f64>> = (0..w.len())
            .map(|c| {
                let m = &means.get(c).unwrap().mean;
                let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                m.iter().map(|v| v / n * r).collect()
            })
            .collect();
        let (mut hits, mut violations) = (0, 0);
        let delta = 0.5;
        for (z, &y) in s.emb.iter().zip(&s.labels) {
            let z = z.components();
            let ranked = ranked_negatives(z, y, &w);
            let (j, k) = (ranked[0].0, ranked[1].0);
            let alpha = sq(z, &w[k]).sqrt() - sq(z, &w[j]).sqrt();
            if sq(&w[j], &tilde[j]).sqrt() + sq(&w[k], &tilde[k]).sqrt() < alpha {
                hits += 1;
            }
            let loss = (sq(z, &w[y]) - ranked[0].1 + delta).max(0.0);
            let nearest = (0..w.len())
                .min_by(|&a, &b| sq(z, &w[a]).total_cmp(&sq(z, &w[b])))
                .unwrap();
            if loss < delta && nearest != y {
                violations += 1;
            }
        }
        let fraction = check_prop2_condition(&s.emb, &s.labels, &s.bank, &means).unwrap();
        assert_eq!(fraction, hits as f64 / s.labels.len() as f64);
        let (got, min_dist) = check_properties(&s.emb, &s.labels, &s.bank, delta).unwrap();
        assert_eq!(got, violations);
        let pairs = (0..w.len()).flat_map(|a| ((a + 1)..w.len()).map(move |b| (a, b)));
        let brute_min = pairs
            .map(|(a, b)| sq(&w[a], &w[b]))
            .fold(f64::MAX, f64::min);
        assert!((min_dist - brute_min).abs() < 1e-12);
    }
}

#[test]
fn gamma_is_one_only_for_point_masses() {
    let s = snapshot(0, 6);
    let means = class_means(&s.emb, &s.labels, 1).unwrap();
    let (g, _) = gamma_and_variance(&means, 1.0).unwrap();
    assert!(g > 0.0 && g < 1.0);
    let collapsed: Vec<Vector> = s.labels.iter().map(|&l| s.bank.proxy(l).unwrap()).collect();
    let means = class_means(&collapsed, &s.labels, 1).unwrap();
    let (g, var) = gamma_and_variance(&means, 1.0).unwrap();
    assert!((g - 1.0).abs() < 1e-12 && var < 1e-24);
}

#[test]
fn embed_all_is_forward_then_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::new(&[5, 7, 3], &mut rng).unwrap();
    let x = npt_core::data::random_unit_inputs::<f64>(12, 5, 3);
    let raw = model.embed(&x).unwrap();
    let manual: Vec<Vector> = raw
        .iter_rows()
        .map(|r| normalize_to_sphere(r, 2.0).unwrap())
        .collect();
    assert_eq!(embed_all(&model, &x, 2.0).unwrap(), manual);
    assert_eq!(
        embed_all(&model, &x, 2.0).unwrap(),
        embed_all(&model, &x, 2.0).unwrap()
    );
}

fn random_set(seed: u64, n: usize, dim: usize, ids: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n)
        .map(|i| if i < ids { i } else { rng.random_range(0..ids) })
        .collect();
    let centers: Vec<Vec<f64>> = (0..ids)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let rows = labels
        .iter()
        .map(|&l| {
            centers[l]
                .iter()
                .map(|c| c + rng.random_range(-0.6..0.6))
                .collect()
        })
        .collect();
    (rows, labels)
}

fn on_sphere(rows: &[Vec<f64>], r: f64) -> Vec<Vector> {
    rows.iter()
        .map(|x| normalize_to_sphere(x, r).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn metrics_ignore_the_common_radius(seed in 0u64..1000, r in prop::sample::select(vec![0.5, 2.0, 4.0])) {
        let (rows, labels) = random_set(seed, 30, 4, 5);
        let (a, b) = (on_sphere(&rows, 1.0), on_sphere(&rows, r));
        let ra = verification_roc(&a, &labels, seed, 100).unwrap();
        let rb = verification_roc(&b, &labels, seed, 100).unwrap();
        prop_assert_eq!(&ra.roc, &rb.roc);
        prop_assert_eq!(ra.auc, rb.auc);
        let split = |e: &[Vector]| npt_core::evaluation::gallery_split(e, &labels, seed);
        let ((ga, pa), (gb, pb)) = (split(&a), split(&b));
        prop_assert_eq!(rank1_identification(&ga, &pa, &[]).unwrap(), rank1_identification(&gb, &pb, &[]).unwrap());
    }

    #[test]
    fn more_distractors_never_help(seed in 0u64..1000, extra in 1usize..30) {
        let (rows, labels) = random_set(seed, 30, 3, 6);
        let e = on_sphere(&rows, 1.0);
        let (g, p) = npt_core::evaluation::gallery_split(&e, &labels, seed);
        let d = npt_core::evaluation::random_sphere_embeddings::<f64>(40, 3, 1.0, seed);
        let fewer = rank1_identification(&g, &p, &d[..40 - extra]).unwrap();
        let more = rank1_identification(&g, &p, &d).unwrap();
        prop_assert!(more <= fewer);
        prop_assert!((0.0..=1.0).contains(&more));
    }

    #[test]
    fn auc_is_the_pairwise_win_rate(
        genuine in prop::collection::vec(0u8..20, 1..15),
        impostor in prop::collection::vec(0u8..20, 1..15),
    ) {
        // coarse integer scores force plenty of ties
        let g: Vec<f64> = genuine.iter().map(|&v| v as f64 / 20.0).collect();
        let i: Vec<f64> = impostor.iter().map(|&v| v as f64 / 20.0).collect();
        let wins: f64 = g.iter().flat_map(|a| i.iter().map(move |b| {
            if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 }
        })).sum();
        let expected = wins / (g.len() * i.len()) as f64;
        let roc = roc_from_scores(&g, &i).unwrap();
        prop_assert!((roc.auc - expected).abs() < 1e-12);
        prop_assert!(roc.roc.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn batches_partition_every_epoch(n in 1usize..200, size in 1usize..40, seed in any::<u64>(), epoch in 1usize..50) {
        let mut all: Vec<usize> = batch_indices(n, size, seed, epoch).unwrap().concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn learning_rate_never_increases(
        decay in prop::collection::vec(1usize..60, 0..4),
        factor in 0.01f64..=1.0,
    ) {
        let sgd = Sgd::new(0.1, 0.9, 1e-4, decay, factor).unwrap();
        prop_assert!((1..80).all(|e| sgd.lr(e + 1) <= sgd.lr(e)));
    }

    #[test]
    fn zero_gradient_without_decay_is_identity(p in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut sgd = Sgd::new(0.1, 0.9, 0.0, vec![], 1.0).unwrap();
        let mut q = p.clone();
        let g = vec![0.0; p.len()];
        sgd.step(&mut [&mut q[..]], &[&g[..]], 1).unwrap();
        prop_assert_eq!(q, p);
    }
}
