use caetc_core::sim::rng::stream;
use caetc_core::theory::*;
use proptest::prelude::*;

fn d(p: &[f64]) -> DiscreteDist {
    DiscreteDist::new(p.to_vec()).unwrap()
}

#[test]
fn total_variation_examples() {
    let p = d(&[0.1, 0.4, 0.5]);
    assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
    assert_eq!(total_variation(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 1.0);
    assert!(total_variation(&p, &d(&[0.5, 0.5])).is_err());
}

#[test]
fn jsd_rejects_off_simplex_weights() {
    assert!(DiscreteDist::new(vec![0.3, 0.3]).is_err());
    let w = d(&[0.5, 0.5]);
    assert!(generalized_jsd(&w, &[d(&[1.0])]).is_err());
}

#[test]
fn identical_representations_give_prior_balancer() {
    let pa = d(&[0.2, 0.3, 0.5]);
    let r = d(&[0.1, 0.6, 0.3]);
    let table = optimal_balancer(&pa, &[r.clone(), r.clone(), r]).unwrap();
    for (j, row) in table.iter().enumerate() {
        for &f in row {
            assert!((f - pa.probs()[j]).abs() < 1e-15);
        }
    }
}

#[test]
fn disjoint_representations_give_indicator_balancer() {
    let pa = d(&[0.5, 0.5]);
    let table = optimal_balancer(&pa, &[d(&[1.0, 0.0]), d(&[0.0, 1.0])]).unwrap();
    assert_eq!(table, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
}

#[test]
fn zero_mixture_mass_is_an_error() {
    let pa = d(&[0.5, 0.5]);
    assert!(optimal_balancer(&pa, &[d(&[1.0, 0.0]), d(&[1.0, 0.0])]).is_err());
}

#[test]
fn closed_form_balancer_beats_grid() {
    let mut rng = stream(3, "test", 0);
    for _ in 0..50 {
        let pa = DiscreteDist::random(&mut rng, 3);
        let repr: Vec<_> = (0..3).map(|_| DiscreteDist::random(&mut rng, 3)).collect();
        let closed = classifier_objective(&pa, &repr, &optimal_balancer(&pa, &repr).unwrap()).unwrap();
        let grid = grid_search_balancer(&pa, &repr, 0.01).unwrap();
        assert!(closed <= grid + 1e-12);
    }
}

#[test]
fn equilibrium_at_identical_representations() {
    let pa = d(&[0.25, 0.75]);
    let r = d(&[0.3, 0.7]);
    let eq = verify_equilibrium_objective(&pa, &[r.clone(), r.clone()]).unwrap();
    assert!(eq.gjsd.abs() < 1e-15);
    assert!((eq.game_value - eq.constant).abs() < 1e-15);
    let eq = verify_equilibrium_objective(&pa, &[r, d(&[0.31, 0.69])]).unwrap();
    assert!(eq.gjsd > 0.0);
    assert!(eq.gap() < 1e-12);
}

#[test]
fn balanced_groups_make_bound_tight() {
    // Treatment independent of history, so both groups see the same states.
    let spec = DiscreteJointSpec {
        joint: vec![[0.15, 0.15], [0.35, 0.35]],
        outcome_values: vec![-1.0, 1.0],
        outcome_probs: vec![[vec![0.5, 0.5], vec![0.2, 0.8]], [vec![0.9, 0.1], vec![0.5, 0.5]]],
        pi0: 0.5,
    };
    let b = verify_error_bound(&spec, &[[0.0, 0.3], [-0.5, 0.1]], &[1, 0], |p, y| (p - y).powi(2)).unwrap();
    assert!(b.holds);
    assert!((b.rhs - b.lhs).abs() < 1e-12);
}

#[test]
fn non_invertible_representation_is_rejected() {
    let mut rng = stream(1, "test", 0);
    let spec = DiscreteJointSpec::random(&mut rng, 3, 2);
    let h = [[0.0, 0.0]; 3];
    assert!(verify_error_bound(&spec, &h, &[0, 0, 1], |p, y| (p - y).abs()).is_err());
}

#[test]
fn bound_scales_with_losses() {
    let mut rng = stream(2, "test", 0);
    let spec = DiscreteJointSpec::random(&mut rng, 4, 3);
    let h = [[0.1, -0.2], [0.4, 0.0], [-1.0, 1.0], [0.3, 0.3]];
    let phi = [2, 0, 3, 1];
    let a = verify_error_bound(&spec, &h, &phi, |p, y| (p - y).powi(2)).unwrap();
    let b = verify_error_bound(&spec, &h, &phi, |p, y| 3.5 * (p - y).powi(2)).unwrap();
    assert!((b.lhs - 3.5 * a.lhs).abs() < 1e-12);
    assert!((b.rhs - 3.5 * a.rhs).abs() < 1e-12);
}

#[test]
fn suite_passes_and_is_deterministic() {
    let a = suite(200, 11).unwrap();
    assert!(a.iter().all(|c| c.passed()), "{a:#?}");
    assert_eq!(a, suite(200, 11).unwrap());
    assert!(suite(200, 12).unwrap().iter().all(|c| c.passed()));
}

fn dist(n: usize) -> impl Strategy<Value = DiscreteDist> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|m| DiscreteDist::from_masses(&m).unwrap())
}

proptest! {
    #[test]
    fn jsd_is_permutation_invariant(w in dist(3), a in dist(4), b in dist(4), c in dist(4)) {
        let base = generalized_jsd(&w, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let p = w.probs();
        let w2 = DiscreteDist::new(vec![p[2], p[0], p[1]]).unwrap();
        let swapped = generalized_jsd(&w2, &[c, a, b]).unwrap();
        prop_assert!((base - swapped).abs() < 1e-12);
    }

    #[test]
    fn jsd_zero_iff_identical(w in dist(2), a in dist(3), b in dist(3)) {
        prop_assert!(generalized_jsd(&w, &[a.clone(), a.clone()]).unwrap().abs() < 1e-12);
        let g = generalized_jsd(&w, &[a.clone(), b.clone()]).unwrap();
        if total_variation(&a, &b).unwrap() > 1e-6 {
            prop_assert!(g > 0.0);
        }
    }

    #[test]
    fn balancer_is_relabel_equivariant(pa in dist(2), a in dist(3), b in dist(3)) {
        let perm = [2, 0, 1];
        let t = optimal_balancer(&pa, &[a.clone(), b.clone()]).unwrap();
        let tp = optimal_balancer(&pa, &[a.permuted(&perm).unwrap(), b.permuted(&perm).unwrap()]).unwrap();
        for j in 0..2 {
            for (i, &k) in perm.iter().enumerate() {
                prop_assert!((t[j][i] - tp[j][k]).abs() < 1e-14);
            }
            let col: f64 = (0..2).map(|j| t[j][0]).sum();
            prop_assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_bound_is_tight_at_equality(pi in 0.01f64..0.99, p in dist(4)) {
        prop_assert!(gjsd_tv_bound(pi, &p, &p).unwrap().abs() < 1e-7);
        prop_assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
    }
}

