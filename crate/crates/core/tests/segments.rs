use rfa::attention::SequenceBatch;
use rfa::gradients::{backward, backward_with_state, forward, random_instance, KernelInstance, KernelKind};
use rfa::numerics::{max_abs_diff, mix_seed, seeded_normal_matrix, Matrix, RngState};

const TOL: f64 = 1e-9;

fn segment(inst: &KernelInstance, start: usize, end: usize) -> KernelInstance {
    let b = &inst.batch;
    let batch = SequenceBatch::new(
        b.queries.slice_rows(start, end),
        b.keys.slice_rows(start, end),
        b.values.slice_rows(start, end),
        b.raw_inputs.as_ref().map(|r| r.slice_rows(start, end)),
    )
    .unwrap();
    KernelInstance { batch, ..inst.clone() }
}

fn sum_opt(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> Option<Vec<f64>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x + y).collect()),
        (None, None) => None,
        _ => panic!("segments disagree on which parameters have gradients"),
    }
}

fn opt_diff(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => max_abs_diff(a, b),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

fn check_split(kind: KernelKind, seed: u64, n: usize, cut: usize) {
    let inst = random_instance(kind, seed, n, 4, 8, 3).unwrap();
    let whole = forward(&inst).unwrap();
    let mut rng = RngState::new(seed, 99);
    let upstream = seeded_normal_matrix(&mut rng, n, whole.outputs().cols()).unwrap();
    let g = backward(kind, &whole, &upstream).unwrap();

    let first = segment(&inst, 0, cut);
    let c1 = forward(&first).unwrap();
    let mut second = segment(&inst, cut, n);
    second.init = c1.final_state().cloned();
    let c2 = forward(&second).unwrap();
    let joined = Matrix::vstack(&[c1.outputs().clone(), c2.outputs().clone()]).unwrap();
    assert!(joined.max_abs_diff(whole.outputs()) <= TOL, "{kind} forward seed {seed}");

    let g2 = backward(kind, &c2, &upstream.slice_rows(cut, n)).unwrap();
    let g1 = backward_with_state(kind, &c1, &upstream.slice_rows(0, cut), g2.init_state.as_ref()).unwrap();

    let stack = |a: &Matrix, b: &Matrix| Matrix::vstack(&[a.clone(), b.clone()]).unwrap();
    let diffs = [
        stack(&g1.queries, &g2.queries).max_abs_diff(&g.queries),
        stack(&g1.keys, &g2.keys).max_abs_diff(&g.keys),
        stack(&g1.values, &g2.values).max_abs_diff(&g.values),
        opt_diff(&sum_opt(&g1.gate_w, &g2.gate_w), &g.gate_w),
        opt_diff(&g1.gate_b.zip(g2.gate_b).map(|(a, b)| vec![a + b]), &g.gate_b.map(|b| vec![b])),
        opt_diff(&sum_opt(&g1.sigma, &g2.sigma), &g.sigma),
    ];
    for (i, d) in diffs.iter().enumerate() {
        assert!(*d <= TOL, "{kind} seed {seed} cut {cut}: gradient group {i} differs by {d:e}");
    }
    if let (Some(a), Some(b)) = (&g1.init_state, &g.init_state) {
        assert!(a.s.max_abs_diff(&b.s) <= TOL && max_abs_diff(&a.z, &b.z) <= TOL);
    }
    if let (Some(a), Some(b)) = (&g1.raw_inputs, &g.raw_inputs) {
        assert!(stack(a, g2.raw_inputs.as_ref().unwrap()).max_abs_diff(b) <= TOL);
    }
}

#[test]
fn two_segment_backward_matches_unsegmented() {
    for kind in [KernelKind::RfaCausal, KernelKind::RfaGated] {
        for s in 0..10 {
            check_split(kind, mix_seed(7, s), 9, 1 + (s as usize % 7));
        }
    }
}

#[test]
fn backward_is_deterministic() {
    for kind in KernelKind::ALL {
        let inst = random_instance(kind, 11, 6, 4, 8, 3).unwrap();
        let cache = forward(&inst).unwrap();
        let upstream = Matrix::new(6, cache.outputs().cols(), vec![1.0; 6 * cache.outputs().cols()]).unwrap();
        assert_eq!(backward(kind, &cache, &upstream).unwrap(), backward(kind, &forward(&inst).unwrap(), &upstream).unwrap());
    }
}
