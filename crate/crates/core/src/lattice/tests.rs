use super::*;
use crate::ndgrad::{gradcheck, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn hmm_single_state_is_sum_of_emissions() {
    let mut r = rng(1);
    let p = HmmPotentials::random(5, 1, &mut r);
    let expect: f64 = p.emit.data().iter().sum();
    assert!((hmm_forward(&p).unwrap() - expect).abs() < 1e-12);
    let post = hmm_posteriors(&p).unwrap();
    assert!(post.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn hmm_single_step() {
    let mut r = rng(2);
    let p = HmmPotentials::random(1, 4, &mut r);
    let terms: Vec<f64> = (0..4).map(|i| p.init.data()[i] + p.em(0, i)).collect();
    assert!((hmm_forward(&p).unwrap() - logsumexp_slice(&terms)).abs() < 1e-12);
}

#[test]
fn hmm_matches_enumeration_and_autodiff() {
    let mut r = rng(3);
    for _ in 0..50 {
        let t = r.random_range(1..=6);
        let k = r.random_range(1..=5);
        let p = HmmPotentials::random(t, k, &mut r);
        p.validate().unwrap();
        let dp = hmm_forward(&p).unwrap();
        assert!((dp - brute_force_hmm_log_marginal(&p).unwrap()).abs() < 1e-9);

        let post = hmm_posteriors(&p).unwrap();
        for s in 0..t {
            let row: f64 = post.data()[s * k..(s + 1) * k].iter().sum();
            assert!((row - 1.0).abs() < 1e-9);
        }
        let brute = brute_force_alignment_posteriors(&p).unwrap();
        assert!(post.max_abs_diff(&brute) < 1e-9);

        let emit = Value::param(p.emit.clone());
        let v = hmm_forward_value(&Value::constant(p.init.clone()), &Value::constant(p.trans.clone()), &emit);
        assert!((v.item() - dp).abs() < 1e-9);
        v.backward();
        assert!(emit.grad().max_abs_diff(&post) < 1e-8);

        let pair = hmm_pair_posteriors(&p).unwrap();
        for s in 1..t {
            let slice: f64 = pair.data()[s * k * k..(s + 1) * k * k].iter().sum();
            assert!((slice - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn alignment_enumeration_sizes() {
    assert_eq!(enumerate_alignments(4, 1).unwrap().len(), 1);
    assert_eq!(enumerate_alignments(2, 2).unwrap().len(), 4);
    assert!(enumerate_alignments(20, 5).is_err());
    assert!(HmmPotentials::new(Tensor::vector(vec![0.0]), Tensor::zeros(&[2, 1, 1]), Tensor::zeros(&[3, 1])).is_err());
}

#[test]
fn segmentation_counts_match_recurrence() {
    assert_eq!(enumerate_segmentations(1, 1, 1).unwrap().len(), 2);
    for (m, k, l) in [(2, 1, 2), (3, 2, 2), (5, 3, 3), (7, 2, 4), (1, 0, 1)] {
        let paths = enumerate_segmentations(m, k, l).unwrap();
        assert_eq!(paths.len() as u128, count_segmentations(m, k, l), "{m} {k} {l}");
        assert!(paths.iter().all(|p| p.is_valid(m, l)));
    }
    assert!(enumerate_segmentations(11, 1, 2).is_err());
}

#[test]
fn semimarkov_single_token() {
    let mut r = rng(4);
    let s = SegmentalPotentials::random(1, 3, 2, &mut r);
    let terms: Vec<f64> = (0..4).map(|j| s.init_trans.data()[j] + s.g(0, 0, j)).collect();
    assert!((semimarkov_forward(&s).unwrap() - logsumexp_slice(&terms)).abs() < 1e-12);
}

#[test]
fn semimarkov_two_tokens_hand_expanded() {
    let mut r = rng(5);
    let s = SegmentalPotentials::random(2, 1, 1, &mut r);
    // labels (c1, c2) ∈ {0,1}² minus (1,1)
    let mut terms = vec![];
    for c1 in 0..2 {
        for c2 in 0..2 {
            if c1 == 1 && c2 == 1 {
                continue;
            }
            terms.push(s.init_trans.data()[c1] + s.g(0, 0, c1) + s.tr(1, c2, c1) + s.g(1, 0, c2));
        }
    }
    assert!((semimarkov_forward(&s).unwrap() - logsumexp_slice(&terms)).abs() < 1e-12);
    assert!((semimarkov_expected_segments(&s).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn forced_single_path_counts_exactly() {
    let mut r = rng(6);
    let s = SegmentalPotentials::random(2, 0, 1, &mut r);
    assert_eq!(enumerate_segmentations(2, 0, 1).unwrap().len(), 1);
    assert_eq!(semimarkov_expected_segments(&s).unwrap(), 2.0);
    let (path, score) = semimarkov_map(&s).unwrap();
    assert_eq!(path.labels, vec![0, 0]);
    assert_eq!(path.cuts, vec![0, 1, 2]);
    assert!((score - path_score(&s, &path)).abs() < 1e-12);
}

#[test]
fn semimarkov_matches_enumeration() {
    let mut r = rng(7);
    for _ in 0..100 {
        let m = r.random_range(1..=8);
        let k = r.random_range(0..=3);
        let l = r.random_range(1..=3);
        let s = SegmentalPotentials::random(m, k, l, &mut r);
        s.validate().unwrap();
        let dp = semimarkov_forward(&s).unwrap();
        assert!((dp - brute_force_semimarkov(&s).unwrap()).abs() < 1e-9);
        assert!((dp - semimarkov_forward_direct(&s).unwrap()).abs() < 1e-9);

        let marg = semimarkov_marginals(&s).unwrap();
        let brute = brute_force_segment_posteriors(&s).unwrap();
        assert!(marg.gen.max_abs_diff(&brute.gen) < 1e-9);
        assert!(marg.trans.max_abs_diff(&brute.trans) < 1e-9);
        assert!(marg.init.max_abs_diff(&brute.init) < 1e-9);

        let e = semimarkov_expected_segments(&s).unwrap();
        assert!((e - brute_force_expected_segments(&s).unwrap()).abs() < 1e-8);
        assert!((e - marg.expected_segments()).abs() < 1e-9);

        let (path, score) = semimarkov_map(&s).unwrap();
        let paths = enumerate_segmentations(m, k, l).unwrap();
        let best = paths.iter().map(|p| path_score(&s, p)).fold(f64::NEG_INFINITY, f64::max);
        assert!((score - best).abs() < 1e-12);
        assert!((path_score(&s, &path) - score).abs() < 1e-12);
        assert!(path.is_valid(m, l));
    }
}

#[test]
fn map_beats_random_paths() {
    let mut r = rng(8);
    let s = SegmentalPotentials::random(10, 3, 3, &mut r);
    let (_, best) = semimarkov_map(&s).unwrap();
    let paths = enumerate_segmentations(10, 3, 3).unwrap();
    for _ in 0..1000 {
        let p = &paths[r.random_range(0..paths.len())];
        assert!(path_score(&s, p) <= best + 1e-12);
    }
}

#[test]
fn differentiable_forward_and_expectation_agree() {
    let mut r = rng(9);
    for _ in 0..30 {
        let m = r.random_range(1..=6);
        let k = r.random_range(0..=3);
        let l = r.random_range(1..=3);
        let s = SegmentalPotentials::random(m, k, l, &mut r);
        let gen = Value::param(s.gen.clone());
        let sv = SegmentalValues::from_tables(
            &gen,
            &Value::constant(s.trans.clone()),
            &Value::constant(s.init_trans.clone()),
        );
        assert_eq!(sv.to_potentials(), s);
        let (lz, e) = diff::semimarkov_forward_and_expected(&sv, true);
        assert!((lz.item() - semimarkov_forward(&s).unwrap()).abs() < 1e-9);
        assert!((e.unwrap().item() - semimarkov_expected_segments(&s).unwrap()).abs() < 1e-9);
        lz.backward();
        let brute = brute_force_segment_posteriors(&s).unwrap();
        assert!(gen.grad().max_abs_diff(&brute.gen) < 1e-8);
    }
}

#[test]
fn lattice_gradchecks() {
    let mut r = rng(10);
    let s = SegmentalPotentials::random(5, 2, 3, &mut r);
    let (trans, init) = (s.trans.clone(), s.init_trans.clone());
    let shape = s.gen.shape().to_vec();
    let f = |with_e: bool| {
        let (trans, init, shape) = (trans.clone(), init.clone(), shape.clone());
        move |x: &Value| {
            let sv = SegmentalValues::from_tables(
                &x.reshape(&shape),
                &Value::constant(trans.clone()),
                &Value::constant(init.clone()),
            );
            let (lz, e) = diff::semimarkov_forward_and_expected(&sv, with_e);
            if with_e {
                e.unwrap()
            } else {
                lz
            }
        }
    };
    let x0 = s.gen.clone().reshaped(&[s.gen.len()]);
    assert!(gradcheck(f(false), &x0, 1e-6).unwrap() <= 1e-6);
    assert!(gradcheck(f(true), &x0, 1e-6).unwrap() <= 1e-6);

    // gradient with respect to unnormalized transition scores as well
    let gen = s.gen.clone();
    let k1 = s.labels();
    let t0 = Tensor::from_fn(&[5 * k1 * k1], |_| r.random_range(-1.0..1.0));
    let err = gradcheck(
        |x| {
            let tr = x.reshape(&[5, k1, k1]);
            let sv = SegmentalValues::from_tables(&Value::constant(gen.clone()), &tr, &Value::constant(init.clone()));
            let (lz, e) = diff::semimarkov_forward_and_expected(&sv, true);
            lz.add(&e.unwrap())
        },
        &t0,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn widening_length_cap_never_decreases_marginal() {
    let mut r = rng(11);
    for _ in 0..50 {
        let m = r.random_range(2..=8);
        let s = SegmentalPotentials::random(m, 2, 2, &mut r);
        let wide_raw = SegmentalPotentials::random(m, 2, 4, &mut r);
        // keep old entries, add real mass for the new lengths
        let mut wide = s.with_max_len(4);
        for idx in 0..wide.gen.len() {
            if wide.gen.data()[idx] == f64::NEG_INFINITY {
                wide.gen.data_mut()[idx] = wide_raw.gen.data()[idx];
            }
        }
        let base = semimarkov_forward(&s).unwrap();
        assert!((semimarkov_forward(&s.with_max_len(4)).unwrap() - base).abs() < 1e-12);
        assert!(semimarkov_forward(&wide).unwrap() >= base);
    }
}

#[test]
fn record_relabeling_is_invariant() {
    let mut r = rng(12);
    for _ in 0..20 {
        let s = SegmentalPotentials::random(6, 3, 3, &mut r);
        let perm = [0, 3, 1, 2];
        let sp = s.permute_records(&perm);
        sp.validate().unwrap();
        let a = semimarkov_forward(&s).unwrap();
        assert!((a - semimarkov_forward(&sp).unwrap()).abs() < 1e-12);
        let ea = semimarkov_expected_segments(&s).unwrap();
        assert!((ea - semimarkov_expected_segments(&sp).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn invalid_tables_rejected() {
    let mut r = rng(13);
    let s = SegmentalPotentials::random(3, 2, 2, &mut r);
    let mut bad = s.trans.clone();
    let k1 = 3;
    bad.data_mut()[(k1 + 1) * k1 + 1] = -0.5; // self-transition of record 1 at p = 1
    assert!(SegmentalPotentials::new(s.gen.clone(), bad, s.init_trans.clone()).is_err());
    assert!(SegmentalPotentials::new(Tensor::zeros(&[0, 2, 3]), Tensor::zeros(&[0, 3, 3]), s.init_trans.clone()).is_err());
    assert!(SegmentalPotentials::new(Tensor::zeros(&[3, 0, 3]), s.trans.clone(), s.init_trans.clone()).is_err());
    assert!(SegmentalPotentials::new(s.gen.clone(), s.trans.clone(), s.init_trans.clone()).is_ok());
}

#[test]
fn oracle_suite_passes_small() {
    let cfg = OracleSuiteConfig { n_marginal: 50, n_micro: 20, seed: 3 };
    let checks = oracle_suite(&cfg).unwrap();
    assert_eq!(checks.len(), 9);
    for c in &checks {
        assert!(c.passed, "{c:?}");
    }
    assert_eq!(oracle_suite(&cfg).unwrap(), checks);
}
