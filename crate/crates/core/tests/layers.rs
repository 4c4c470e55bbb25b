use std::collections::BTreeMap;

use muchgcn::layers::{
    build_multiset, compute_assignment, diffpool, filter_apply, inter_adjacency, message_pass_inter,
    message_pass_intra, ChannelFilter, Multiset,
};
use muchgcn::nn::{BatchNorm, Linear, Mlp, NormContext};
use muchgcn::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn norms(tape: &mut Tape, width: usize, steps: usize) -> Vec<BatchNorm<Var>> {
    (0..steps)
        .map(|k| BatchNorm::init(width, k).map("bn", &mut |_, x| tape.param(x)))
        .collect()
}

fn row_normalized(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(move |v| if n > 0.0 { v / n } else { 0.0 }).collect::<Vec<_>>()
        })
        .collect()
}

fn path4() -> Tensor {
    let mut a = Tensor::zeros(&[4, 4]);
    for (i, j) in [(0, 1), (1, 2), (2, 3)] {
        a.data_mut()[i * 4 + j] = 1.0;
        a.data_mut()[j * 4 + i] = 1.0;
    }
    a
}

fn hard(clusters: &[usize], k: usize) -> Tensor {
    let mut s = Tensor::zeros(&[clusters.len(), k]);
    for (i, &c) in clusters.iter().enumerate() {
        s.data_mut()[i * k + c] = 1.0;
    }
    s
}

#[test]
fn no_neighbors_and_identity_weights_normalize_the_input() {
    let mut tape = Tape::new();
    let x = t(&[1, 3, 3], &[1.0, 2.0, 2.0, 0.0, 3.0, 4.0, 0.5, 0.0, 0.0]);
    let xv = tape.constant(x.clone());
    let a = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let w: Vec<Var> = (0..3).map(|_| tape.param(&Tensor::eye(3))).collect();
    let bn = norms(&mut tape, 3, 3);
    let mut ctx = NormContext::new(false);
    let h = message_pass_intra(&mut tape, &mut ctx, xv, a, &w, &bn, &[1.0; 3]).unwrap();
    let expect = row_normalized(x.data(), 3);
    for hk in h {
        assert!(close(tape.value(hk).data(), &expect, 1e-12));
    }
}

#[test]
fn single_node_scalar_pass() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1], &[1.0]));
    let a = tape.constant(t(&[1, 1, 1], &[0.0]));
    let w = [tape.param(&t(&[1, 1], &[1.0]))];
    let bn = norms(&mut tape, 1, 1);
    let h = message_pass_intra(&mut tape, &mut NormContext::new(false), x, a, &w, &bn, &[1.0]).unwrap();
    assert!(close(tape.value(h[0]).data(), &[1.0], 1e-12));
}

#[test]
fn two_node_path_aggregates_both_endpoints() {
    // relu(X + A·X) = all ones, so each row normalizes to 1/√2
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let w = [tape.param(&Tensor::eye(2))];
    let bn = norms(&mut tape, 2, 1);
    let h = message_pass_intra(&mut tape, &mut NormContext::new(false), x, a, &w, &bn, &[1.0; 2]).unwrap();
    let r = 0.5f64.sqrt();
    assert!(close(tape.value(h[0]).data(), &[r; 4], 1e-12));
}

#[test]
fn decoupled_inter_pass_equals_isolated_intra_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let xi = tape.constant(random(&[1, 4, 3], &mut rng));
    let xc = tape.constant(random(&[1, 4, 3], &mut rng));
    let zero = tape.constant(Tensor::zeros(&[1, 4, 4]));
    let w: Vec<Var> = (0..2).map(|_| tape.param(&random(&[3, 3], &mut rng))).collect();
    let bn = norms(&mut tape, 3, 2);
    let mask = [1.0; 4];
    let mut ctx = NormContext::new(true);
    let hc = message_pass_intra(&mut tape, &mut ctx, xc, zero, &w, &bn, &mask).unwrap();
    let inter = message_pass_inter(&mut tape, &mut ctx, xi, zero, &[xc, hc[0]], &w, &bn, &mask).unwrap();
    let intra = message_pass_intra(&mut tape, &mut ctx, xi, zero, &w, &bn, &mask).unwrap();
    for (p, q) in inter.iter().zip(&intra) {
        assert!(tape.value(*p).max_abs_diff(tape.value(*q)) <= 1e-12);
    }
}

#[test]
fn identity_coupling_from_a_zero_channel_sees_only_the_neighbor() {
    let mut tape = Tape::new();
    let xc = t(&[1, 3, 2], &[1.0, 2.0, 0.0, 1.0, 3.0, 0.5]);
    let xi = tape.constant(Tensor::zeros(&[1, 3, 2]));
    let xcv = tape.constant(xc.clone());
    let eye = tape.constant(t(&[1, 3, 3], Tensor::eye(3).data()));
    let w = [tape.param(&Tensor::eye(2))];
    let bn = norms(&mut tape, 2, 1);
    let h = message_pass_inter(&mut tape, &mut NormContext::new(false), xi, eye, &[xcv], &w, &bn, &[1.0; 3]).unwrap();
    assert!(close(tape.value(h[0]).data(), &row_normalized(xc.data(), 2), 1e-12));
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn multiset_for(channels: usize, k: usize) -> (Tape, Multiset) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let d = 3;
    let w: Vec<Var> = (0..k).map(|_| tape.param(&random(&[d, d], &mut rng))).collect();
    let bn = norms(&mut tape, d, k);
    let xs: Vec<Var> = (0..channels).map(|_| tape.constant(random(&[1, 4, d], &mut rng))).collect();
    let a = tape.constant(t(&[1, 4, 4], path4().data()));
    let mask = [1.0; 4];
    let mut ctx = NormContext::new(true);
    let intra: Vec<Vec<Var>> = xs
        .iter()
        .map(|&x| message_pass_intra(&mut tape, &mut ctx, x, a, &w, &bn, &mask).unwrap())
        .collect();
    let mut inter = BTreeMap::new();
    for c in 1..channels {
        let mut nb = vec![xs[c]];
        nb.extend_from_slice(&intra[c][..k - 1]);
        inter.insert(c, message_pass_inter(&mut tape, &mut ctx, xs[0], a, &nb, &w, &bn, &mask).unwrap());
    }
    let ms = build_multiset(&tape, xs[0], &intra[0], &inter, 0, channels).unwrap();
    (tape, ms)
}

#[test]
fn multiset_length_is_one_plus_k_times_channels() {
    assert_eq!(multiset_for(1, 3).1.len(), 4);
    assert_eq!(multiset_for(2, 3).1.len(), 7);
    assert_eq!(multiset_for(4, 3).1.len(), 13);
    let (tape, ms) = multiset_for(1, 1);
    assert_eq!(ms.len(), 2);
    assert!(ms.entries.iter().all(|&e| tape.shape(e) == [1, 4, 3]));
}

#[test]
fn multiset_rejects_missing_neighbor_channels() {
    let (mut tape, ms) = multiset_for(1, 2);
    let x = ms.entries[0];
    let h = ms.entries[1..].to_vec();
    let err = build_multiset(&tape, x, &h, &BTreeMap::new(), 0, 2).unwrap_err();
    assert!(err.to_string().contains("need [1]"));
    let extra = tape.constant(Tensor::zeros(&[1, 4, 3]));
    let inter = BTreeMap::from([(1, vec![extra])]);
    assert!(build_multiset(&tape, x, &h, &inter, 0, 2).is_err());
}

fn filter(tape: &mut Tape, theta: &[f64], bias: f64, phi: Mlp<Tensor>) -> ChannelFilter<Var> {
    ChannelFilter {
        theta: t(&[theta.len()], theta),
        bias: Tensor::scalar(bias),
        phi,
    }
    .map("f", &mut |_, x| tape.param(x))
}

#[test]
fn filter_examples() {
    let mut tape = Tape::new();
    let m1 = t(&[1, 2, 2], &[1.0, -2.0, 0.5, 3.0]);
    let m2 = t(&[1, 2, 2], &[0.0, 4.0, -1.0, 1.0]);
    let e1 = tape.constant(m1.clone());
    let e2 = tape.constant(m2.clone());
    let mask = [1.0; 2];

    let single = Multiset { entries: vec![e1] };
    let f = filter(&mut tape, &[1.0], 0.0, Mlp::identity());
    let z = filter_apply(&mut tape, &single, &f, &mask).unwrap();
    assert_eq!(tape.value(z), &m1);

    let pair = Multiset { entries: vec![e1, e2] };
    let f = filter(&mut tape, &[2.0, -1.0], 0.5, Mlp::identity());
    let z = filter_apply(&mut tape, &pair, &f, &mask).unwrap();
    let expect: Vec<f64> = m1.data().iter().zip(m2.data()).map(|(a, b)| 2.0 * a - b + 0.5).collect();
    assert!(close(tape.value(z).data(), &expect, 1e-15));

    // θ = 0: every row is φ(b·1) whatever the multiset holds
    let phi = Mlp {
        layers: vec![Linear {
            weight: t(&[2, 3], &[1.0, -1.0, 2.0, 0.5, 0.0, 1.0]),
            bias: t(&[3], &[0.1, 0.2, 0.3]),
        }],
    };
    let f = filter(&mut tape, &[0.0, 0.0], 0.7, phi);
    let z = filter_apply(&mut tape, &pair, &f, &mask).unwrap();
    let row = [0.7 * 1.5 + 0.1, -0.7 + 0.2, 0.7 * 3.0 + 0.3];
    assert!(close(tape.value(z).data(), &[row, row].concat(), 1e-15));

    let wrong = filter(&mut tape, &[1.0, 1.0, 1.0], 0.0, Mlp::identity());
    assert!(filter_apply(&mut tape, &pair, &wrong, &mask).is_err());
}

fn zero_head(width: usize, out: usize) -> Mlp<Tensor> {
    Mlp {
        layers: vec![Linear {
            weight: Tensor::zeros(&[width, out]),
            bias: Tensor::zeros(&[out]),
        }],
    }
}

#[test]
fn assignment_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let e = tape.constant(random(&[1, 3, 2], &mut rng));
    let ms = Multiset { entries: vec![e] };
    let mask = [1.0; 3];

    let f = filter(&mut tape, &[1.0], 0.0, Mlp::init(&[2, 2, 1], &mut rng));
    let s = compute_assignment(&mut tape, &ms, &f, 1, &mask).unwrap();
    assert!(close(tape.value(s).data(), &[1.0; 3], 1e-15));

    let f = filter(&mut tape, &[1.0], 0.0, zero_head(2, 2));
    let s = compute_assignment(&mut tape, &ms, &f, 2, &mask).unwrap();
    assert!(close(tape.value(s).data(), &[0.5; 6], 1e-15));

    assert!(compute_assignment(&mut tape, &ms, &f, 3, &mask).is_err());
}

fn pool(s: &Tensor, z: &Tensor, a: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let (s, z, a) = (tape.constant(s.clone()), tape.constant(z.clone()), tape.constant(a.clone()));
    let (x, a) = diffpool(&mut tape, z, s, a).unwrap();
    (tape.value(x).clone(), tape.value(a).clone())
}

#[test]
fn diffpool_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random(&[4, 3], &mut rng);
    let a = path4();
    let (x, an) = pool(&Tensor::eye(4), &z, &a);
    assert_eq!((x, an), (z.clone(), a.clone()));

    let (_, an) = pool(&hard(&[0, 0, 1, 1], 2), &z, &a);
    assert_eq!(an.data(), &[2.0, 1.0, 1.0, 2.0]);

    let (x, an) = pool(&Tensor::ones(&[4, 1]), &z, &a);
    assert_eq!(an.data(), &[6.0]);
    let col_sums: Vec<f64> = (0..3).map(|c| (0..4).map(|r| z.get2(r, c)).sum()).collect();
    assert!(close(x.data(), &col_sums, 1e-15));
}

fn inter(si: &Tensor, sc: &Tensor, a: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (si, sc, a) = (tape.constant(si.clone()), tape.constant(sc.clone()), tape.constant(a.clone()));
    let v = inter_adjacency(&mut tape, si, sc, a).unwrap();
    tape.value(v).clone()
}

#[test]
fn inter_adjacency_examples() {
    let a = path4();
    let eye = Tensor::eye(4);
    assert_eq!(inter(&eye, &eye, &a), a);
    let si = hard(&[0, 0, 1, 1], 2);
    let sc = hard(&[0, 1, 1, 0], 2);
    assert_eq!(inter(&si, &sc, &Tensor::zeros(&[4, 4])).data(), &[0.0; 4]);
    // A·S_c has rows [0,1], [1,1], [1,1], [0,1]; S_iᵀ sums rows {0,1} and {2,3}
    assert_eq!(inter(&si, &sc, &a).data(), &[1.0, 2.0, 1.0, 2.0]);
}

fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                a.data_mut()[i * n + j] = 1.0;
                a.data_mut()[j * n + i] = 1.0;
            }
        }
    }
    a
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let m = x.row_len();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.row_softmax(v, None).unwrap();
    assert_eq!(tape.value(s).row_len(), m);
    tape.value(s).clone()
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.row_len();
    let data: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p * d..(p + 1) * d].to_vec()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn permute_square(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut out = Tensor::zeros(a.shape());
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = a.data()[perm[i] * n + perm[j]];
        }
    }
    out
}

fn intra_pass(x: &Tensor, a: &Tensor, w: &[Tensor], train: bool) -> Vec<Tensor> {
    let n = a.shape()[0];
    let d = w[0].shape()[1];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(vec![1, n, x.row_len()]).unwrap());
    let av = tape.constant(a.clone().reshape(vec![1, n, n]).unwrap());
    let wv: Vec<Var> = w.iter().map(|m| tape.param(m)).collect();
    let bn = norms(&mut tape, d, w.len());
    let h = message_pass_intra(&mut tape, &mut NormContext::new(train), xv, av, &wv, &bn, &vec![1.0; n]).unwrap();
    h.iter().map(|&v| tape.value(v).clone()).collect()
}

fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn intra_pass_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9, train in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, 3], &mut rng);
        let a = random_graph(n, 0.4, &mut rng);
        let w = vec![random(&[3, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4, 4], &mut rng)];
        let perm = permutation(n, &mut rng);
        let base = intra_pass(&x, &a, &w, train);
        let moved = intra_pass(&permute_rows(&x, &perm), &permute_square(&a, &perm), &w, train);
        for (h, hp) in base.iter().zip(&moved) {
            prop_assert!(permute_rows(h, &perm).max_abs_diff(hp) <= 1e-9);
        }
    }

    #[test]
    fn diffpool_preserves_grand_sums(seed in any::<u64>(), n in 1usize..10, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_graph(n, 0.5, &mut rng);
        let z = random(&[n, 3], &mut rng);
        let s = softmax_rows(&random(&[n, k], &mut rng));
        let (x, an) = pool(&s, &z, &a);
        prop_assert!((an.sum() - a.sum()).abs() <= 1e-9);
        prop_assert!((x.sum() - z.sum()).abs() <= 1e-9);
    }

    #[test]
    fn inter_adjacency_is_transposed_when_roles_swap(seed in any::<u64>(), n in 1usize..9, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_graph(n, 0.5, &mut rng);
        let si = softmax_rows(&random(&[n, k], &mut rng));
        let sc = softmax_rows(&random(&[n, k], &mut rng));
        let ic = inter(&si, &sc, &a);
        let ci = inter(&sc, &si, &a);
        for i in 0..k {
            for j in 0..k {
                prop_assert!((ic.get2(i, j) - ci.get2(j, i)).abs() <= 1e-9);
            }
        }
    }
}
