use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stcm_core::intentions::{assign_labels, cluster_trajectories, hausdorff, IntentionSet, Trajectory, WeightMode};

fn brute_hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut best = 0.0f64;
    for p in a {
        let mut m = f64::INFINITY;
        for q in b {
            m = m.min(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
        }
        best = best.max(m);
    }
    for q in b {
        let mut m = f64::INFINITY;
        for p in a {
            m = m.min(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
        }
        best = best.max(m);
    }
    best
}

fn random_set(rng: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))).collect()
}

/// Straight, left-curving and right-curving prototypes of length `t`.
fn planted_modes(t: usize) -> Vec<Trajectory> {
    let straight = (1..=t).map(|k| (2.0 * k as f64, 0.0)).collect();
    let left = (1..=t).map(|k| (2.0 * k as f64, 0.08 * (k * k) as f64)).collect();
    let right = (1..=t).map(|k| (2.0 * k as f64, -0.08 * (k * k) as f64)).collect();
    vec![straight, left, right]
}

fn jittered(base: &Trajectory, sigma: f64, rng: &mut impl Rng) -> Trajectory {
    let n = Normal::new(0.0, sigma).unwrap();
    base.iter().map(|p| (p.0 + n.sample(rng), p.1 + n.sample(rng))).collect()
}

#[test]
fn hausdorff_simple_cases() {
    let a = vec![(0.0, 0.0), (1.0, 2.0)];
    assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    assert_eq!(hausdorff(&[(0.0, 0.0)], &[(3.0, 4.0)]).unwrap(), 5.0);
    assert!(hausdorff(&a, &[]).is_err());
}

#[test]
fn hausdorff_matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (na, nb) = (rng.random_range(1..12), rng.random_range(1..12));
        let a = random_set(&mut rng, na);
        let b = random_set(&mut rng, nb);
        assert!((hausdorff(&a, &b).unwrap() - brute_hausdorff(&a, &b)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn hausdorff_is_a_pseudometric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_set(&mut rng, 5);
        let b = random_set(&mut rng, 5);
        let c = random_set(&mut rng, 5);
        let (ab, ba) = (hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        let (bc, ac) = (hausdorff(&b, &c).unwrap(), hausdorff(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn cluster_means_translate_with_members(dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let modes = planted_modes(6);
        let trajs: Vec<Trajectory> = (0..30).map(|i| jittered(&modes[i % 3], 0.1, &mut rng)).collect();
        let moved: Vec<Trajectory> = trajs.iter().map(|t| t.iter().map(|p| (p.0 + dx, p.1 + dy)).collect()).collect();
        let a = cluster_trajectories(&trajs, 1.0, 3).unwrap();
        let b = cluster_trajectories(&moved, 1.0, 3).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (ma, mb) in a.means.iter().zip(&b.means) {
            for (p, q) in ma.iter().zip(mb) {
                prop_assert!((p.0 + dx - q.0).abs() < 1e-9 && (p.1 + dy - q.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weights_are_normalized_and_labels_nonempty(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = IntentionSet {
            means: (0..4).map(|_| random_set(&mut rng, 5)).collect(),
            member_counts: vec![1; 4],
            eps: 2.0,
            min_pts: 1,
            membership_eps: 2.0,
        };
        let s = random_set(&mut rng, 5);
        for mode in [WeightMode::Distance, WeightMode::InverseDistance] {
            let (labels, weights) = assign_labels(&s, &set, mode).unwrap();
            prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(labels.iter().any(|l| *l == 1.0));
        }
    }
}

#[test]
fn repeated_trajectory_gives_one_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = planted_modes(10).remove(1);
    let trajs: Vec<Trajectory> = (0..30)
        .map(|_| base.iter().map(|p| (p.0 + rng.random_range(-0.1..0.1), p.1 + rng.random_range(-0.1..0.1))).collect())
        .collect();
    let set = cluster_trajectories(&trajs, 0.5, 3).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.member_counts, vec![30]);
}

#[test]
fn two_bundles_ten_meters_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Trajectory = (1..=8).map(|k| (k as f64, 0.0)).collect();
    let b: Trajectory = a.iter().map(|p| (p.0, p.1 + 10.0)).collect();
    let trajs: Vec<Trajectory> = (0..40).map(|i| jittered(if i % 2 == 0 { &a } else { &b }, 0.05, &mut rng)).collect();
    let set = cluster_trajectories(&trajs, 1.0, 3).unwrap();
    assert_eq!(set.len(), 2);
    for mean in &set.means {
        let centre = if mean[0].1 < 5.0 { &a } else { &b };
        for (p, q) in mean.iter().zip(centre.iter()) {
            assert!((p.0 - q.0).hypot(p.1 - q.1) < 0.2);
        }
    }
    assert!((set.means[0][0].1 < 5.0) != (set.means[1][0].1 < 5.0));
}

#[test]
fn planted_modes_are_recovered_with_high_purity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let modes = planted_modes(10);
    let truth: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let trajs: Vec<Trajectory> = truth.iter().map(|&m| jittered(&modes[m], 0.3, &mut rng)).collect();
    let set = cluster_trajectories(&trajs, 1.5, 5).unwrap();
    assert_eq!(set.len(), 3);
    let mut correct = 0;
    let mut confusion = [[0usize; 3]; 3];
    for (t, &m) in trajs.iter().zip(&truth) {
        confusion[set.nearest(t).unwrap()][m] += 1;
    }
    for row in confusion {
        correct += row.iter().max().unwrap();
    }
    assert!(correct as f64 / 300.0 >= 0.95, "{confusion:?}");
}

#[test]
fn clustering_is_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let modes = planted_modes(8);
    let trajs: Vec<Trajectory> = (0..60).map(|i| jittered(&modes[i % 3], 0.2, &mut rng)).collect();
    let mut shuffled = trajs.clone();
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    let a = cluster_trajectories(&trajs, 1.5, 4).unwrap();
    let b = cluster_trajectories(&shuffled, 1.5, 4).unwrap();
    assert_eq!(a.member_counts, b.member_counts);
    for (ma, mb) in a.means.iter().zip(&b.means) {
        for (p, q) in ma.iter().zip(mb) {
            assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
        }
    }
}

#[test]
fn unusable_parameters_are_reported() {
    let trajs: Vec<Trajectory> = (0..5).map(|i| vec![(10.0 * i as f64, 0.0)]).collect();
    assert!(matches!(cluster_trajectories(&trajs, 1.0, 2), Err(stcm_core::CoreError::Config(_))));
    assert!(cluster_trajectories(&[], 1.0, 2).is_err());
    assert!(cluster_trajectories(&trajs, 0.0, 2).is_err());
}

fn hand_set() -> IntentionSet {
    IntentionSet {
        means: vec![vec![(0.0, 0.0), (1.0, 0.0)], vec![(0.0, 3.0), (1.0, 3.0)], vec![(0.0, -1.0), (1.0, -1.0)]],
        member_counts: vec![1, 1, 1],
        eps: 1.5,
        min_pts: 1,
        membership_eps: 1.5,
    }
}

#[test]
fn labels_and_weights_from_hand_distances() {
    let set = hand_set();
    let s = vec![(0.0, 0.5), (1.0, 0.5)];
    // Distances to the three means: 0.5, 2.5, 1.5.
    let (labels, w) = assign_labels(&s, &set, WeightMode::Distance).unwrap();
    assert_eq!(labels, vec![1.0, 0.0, 1.0]);
    let want = [0.5 / 4.5, 2.5 / 4.5, 1.5 / 4.5];
    for (a, b) in w.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    let (_, w) = assign_labels(&s, &set, WeightMode::InverseDistance).unwrap();
    let inv = [2.0, 0.4, 1.0 / 1.5];
    let z: f64 = inv.iter().sum();
    for (a, b) in w.iter().zip(inv) {
        assert!((a - b / z).abs() < 1e-15);
    }
}

#[test]
fn exact_mean_gives_one_hot_inverse_weights() {
    let set = hand_set();
    let (labels, w) = assign_labels(&set.means[2], &set, WeightMode::InverseDistance).unwrap();
    assert_eq!(labels[2], 1.0);
    assert_eq!(w, vec![0.0, 0.0, 1.0]);
}

#[test]
fn far_trajectory_falls_back_to_nearest() {
    let set = hand_set();
    let (labels, _) = assign_labels(&[(0.0, 20.0), (1.0, 20.0)], &set, WeightMode::Distance).unwrap();
    assert_eq!(labels, vec![0.0, 1.0, 0.0]);
}

#[test]
fn equidistant_trajectory_gets_uniform_weights() {
    let set = IntentionSet {
        means: vec![vec![(1.0, 0.0)], vec![(-1.0, 0.0)], vec![(0.0, 1.0)]],
        member_counts: vec![1; 3],
        eps: 1.0,
        min_pts: 1,
        membership_eps: 1.0,
    };
    for mode in [WeightMode::Distance, WeightMode::InverseDistance] {
        let (_, w) = assign_labels(&[(0.0, 0.0)], &set, mode).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
    let empty = IntentionSet { means: vec![], member_counts: vec![], ..set };
    assert!(assign_labels(&[(0.0, 0.0)], &empty, WeightMode::Distance).is_err());
}
