mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use spectral_merge::merge::merge_dare_keyed;
use spectral_merge::{
    assemble_weights, merge_average, merge_dare, merge_store, merge_sum, merge_ties, DareBase,
    DeltaStore, DeltaTensor, Matrix, MergeMethod, MergedDelta, Tensor, TensorData, TensorStore,
};

fn ties_reference(tasks: &[Matrix], trim: f64) -> Matrix {
    let (m, n) = tasks[0].shape();
    let len = m * n;
    let keep = ((trim * len as f64).ceil() as usize).clamp(1, len);
    let trimmed: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| {
            let mut mags: Vec<f64> = t.as_slice().iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cut = mags[keep - 1];
            t.as_slice()
                .iter()
                .map(|&x| if x.abs() >= cut { x } else { 0.0 })
                .collect()
        })
        .collect();
    let mut out = Matrix::zeros(m, n);
    for e in 0..len {
        let total: f64 = trimmed.iter().map(|t| t[e]).sum();
        if total == 0.0 {
            continue;
        }
        let agree: Vec<f64> = trimmed
            .iter()
            .map(|t| t[e])
            .filter(|&x| x != 0.0 && (x > 0.0) == (total > 0.0))
            .collect();
        if !agree.is_empty() {
            out.as_mut_slice()[e] = agree.iter().sum::<f64>() / agree.len() as f64;
        }
    }
    out
}

#[test]
fn sum_and_average_match_loops() {
    let mut rng = rng(41);
    let tasks: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 4)).collect();
    let sum = merge_sum(&tasks).unwrap();
    let avg = merge_average(&tasks).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for t in &tasks {
                acc += t.get(i, j);
            }
            assert_eq!(sum.get(i, j), acc);
            assert_eq!(avg.get(i, j), acc / 3.0);
        }
    }
}

#[test]
fn small_hand_cases() {
    let one = Matrix::from_rows(&[[1.0]]);
    let neg = Matrix::from_rows(&[[-1.0]]);
    assert_eq!(
        merge_sum(&[one.clone(), neg]).unwrap(),
        Matrix::from_rows(&[[0.0]])
    );
    let pair = [Matrix::from_rows(&[[2.0]]), Matrix::from_rows(&[[4.0]])];
    assert_eq!(merge_average(&pair).unwrap(), Matrix::from_rows(&[[3.0]]));
    let tie = [Matrix::from_rows(&[[2.0]]), Matrix::from_rows(&[[-2.0]])];
    assert_eq!(merge_ties(&tie, 1.0).unwrap(), Matrix::from_rows(&[[0.0]]));
    assert_eq!(merge_ties(std::slice::from_ref(&one), 1.0).unwrap(), one);
}

#[test]
fn ties_matches_reference() {
    let mut rng = rng(42);
    for _ in 0..200 {
        let tasks: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 3, 3)).collect();
        for trim in [0.2, 0.5, 1.0] {
            let got = merge_ties(&tasks, trim).unwrap();
            let want = ties_reference(&tasks, trim);
            assert!(frob_diff(&got, &want) <= 1e-15, "trim {trim}");
        }
    }
}

#[test]
fn dare_expectation() {
    let delta = Matrix::from_rows(&[[0.5, -0.3], [0.2, 0.4]]);
    let mut mean = [0.0f64; 4];
    let runs = 10_000;
    for seed in 0..runs {
        let out = merge_dare(std::slice::from_ref(&delta), 0.5, DareBase::Sum, seed).unwrap();
        for (m, x) in mean.iter_mut().zip(out.as_slice()) {
            *m += x / runs as f64;
        }
    }
    for (m, d) in mean.iter().zip(delta.as_slice()) {
        assert!((m - d).abs() <= 0.02, "{m} vs {d}");
    }
}

#[test]
fn dare_edge_cases() {
    let mut rng = rng(43);
    let tasks: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 5, 4)).collect();
    assert_eq!(
        merge_dare(&tasks, 0.0, DareBase::Sum, 9).unwrap(),
        merge_sum(&tasks).unwrap()
    );
    assert_eq!(
        merge_dare(&tasks, 0.0, DareBase::Average, 9).unwrap(),
        merge_average(&tasks).unwrap()
    );
    let a = merge_dare(&tasks, 0.7, DareBase::Sum, 1234).unwrap();
    let b = merge_dare(&tasks, 0.7, DareBase::Sum, 1234).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, merge_dare(&tasks, 0.7, DareBase::Sum, 1235).unwrap());
    assert!(merge_dare(&tasks, 1.0, DareBase::Sum, 0).is_err());
}

#[test]
fn assemble_matches_loop() {
    let mut pre = TensorStore::new();
    pre.insert(
        "a",
        Tensor::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    )
    .unwrap();
    pre.insert("b", Tensor::f64(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
        .unwrap();
    let mut entries = BTreeMap::new();
    entries.insert(
        "a".to_string(),
        DeltaTensor::new(vec![2, 2], vec![0.5, -1.0, 0.25, 2.0]).unwrap(),
    );
    entries.insert(
        "b".to_string(),
        DeltaTensor::new(vec![3], vec![1.0, 1.0, -1.0]).unwrap(),
    );
    let delta = MergedDelta::new(entries, MergeMethod::Sum, 1).unwrap();

    let out = assemble_weights(&pre, &delta, 0.5).unwrap();
    let TensorData::F32(a) = out.get("a").unwrap().data() else {
        panic!("dtype changed")
    };
    let want: Vec<f32> = [1.0f64, 2.0, 3.0, 4.0]
        .iter()
        .zip([0.5, -1.0, 0.25, 2.0])
        .map(|(p, d)| (p + 0.5 * d) as f32)
        .collect();
    assert_eq!(a, &want);
    let TensorData::F64(b) = out.get("b").unwrap().data() else {
        panic!("dtype changed")
    };
    assert_eq!(b, &vec![0.1 + 0.5, 0.2 + 0.5, 0.3 - 0.5]);

    assert_eq!(assemble_weights(&pre, &delta, 0.0).unwrap(), pre);
}

proptest! {
    #[test]
    fn clones_merge_exactly(k in 1usize..6, data in proptest::collection::vec(-4.0f64..4.0, 6)) {
        let a = Matrix::new(2, 3, data).unwrap();
        let tasks = vec![a.clone(); k];
        prop_assert_eq!(merge_average(&tasks).unwrap(), a.clone());
        let sum = merge_sum(&tasks).unwrap();
        prop_assert_eq!(sum, a.scaled(k as f64));
    }

    #[test]
    fn average_is_sum_over_k(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = rng(seed);
        let tasks: Vec<Matrix> = (0..k).map(|_| random_matrix(&mut rng, 3, 4)).collect();
        let sum = merge_sum(&tasks).unwrap();
        let avg = merge_average(&tasks).unwrap();
        for (a, s) in avg.as_slice().iter().zip(sum.as_slice()) {
            prop_assert_eq!(*a, s / k as f64);
        }
    }

    #[test]
    fn permutation_invariance(seed in any::<u64>(), shift in 1usize..4) {
        let mut rng = rng(seed);
        let tasks: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 3, 5)).collect();
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let permuted: Vec<Matrix> = perm.iter().map(|&i| tasks[i].clone()).collect();
        let close = |a: &Matrix, b: &Matrix| frob_diff(a, b) <= 1e-12;
        prop_assert!(close(&merge_sum(&tasks).unwrap(), &merge_sum(&permuted).unwrap()));
        prop_assert!(close(&merge_ties(&tasks, 0.3).unwrap(), &merge_ties(&permuted, 0.3).unwrap()));

        let ids: Vec<u64> = vec![10, 20, 30, 40];
        let pids: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
        let a = merge_dare_keyed(&tasks, &ids, "layer", 0.6, DareBase::Average, seed).unwrap();
        let b = merge_dare_keyed(&permuted, &pids, "layer", 0.6, DareBase::Average, seed).unwrap();
        prop_assert!(close(&a, &b));
    }
}

#[test]
fn store_level_dare_depends_on_parameter_name() {
    let values = vec![1.0; 16];
    let stores: Vec<DeltaStore> = (0..2)
        .map(|_| {
            [("x", &values), ("y", &values)]
                .iter()
                .map(|(n, v)| {
                    (
                        n.to_string(),
                        DeltaTensor::new(vec![4, 4], v.to_vec()).unwrap(),
                    )
                })
                .collect()
        })
        .collect();
    let method = MergeMethod::Dare {
        drop_rate: 0.5,
        base: DareBase::Sum,
        seed: 5,
    };
    let out = merge_store(&stores, &method).unwrap();
    assert_ne!(
        out.get("x").unwrap().values(),
        out.get("y").unwrap().values()
    );
    assert_eq!(out, merge_store(&stores, &method).unwrap());
}
