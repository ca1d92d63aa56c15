use aqvq_core::pool::{gumbel_softmax, temperature, Phase};
use aqvq_core::rng::{normal_tensor, stream, Stream};
use aqvq_core::vq::{nearest_indices, quantize, Codebook, EmaForm};
use aqvq_core::{Graph, Tensor};
use proptest::prelude::*;

/// Lowest index among the minimal squared distances, by exhaustive search.
fn brute_force(z: &[f64], table: &[f64], d: usize) -> usize {
    let dists: Vec<f64> = table.chunks(d).map(|c| c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&v| v == min).unwrap()
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=64, 1usize..=16, 1usize..=8, any::<bool>()).prop_flat_map(|(n, d, t, coarse)| {
        // Coarse values on a small grid produce many exact ties.
        let value = if coarse { (-2i32..=2).prop_map(|v| v as f64 * 0.5).boxed() } else { (-3.0f64..3.0).boxed() };
        (Just(n), Just(d), Just(t), prop::collection::vec(value.clone(), n * d), prop::collection::vec(value, t * d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nearest_matches_brute_force((n, d, t, table, queries) in instance()) {
        let emb = Tensor::new(&[n, d], table.clone()).unwrap();
        let cb = Codebook::from_embeddings(emb.clone(), 0.99).unwrap();
        let z = Tensor::new(&[t, d], queries.clone()).unwrap();
        let got = nearest_indices(&z, &cb).unwrap();
        let want: Vec<usize> = queries.chunks(d).map(|q| brute_force(q, &table, d)).collect();
        prop_assert_eq!(&got, &want);

        let mut g = Graph::new();
        let zi = g.leaf(z, true);
        let ti = g.constant(emb);
        let q = quantize(&mut g, zi, ti, 0.25, 1.0).unwrap();
        prop_assert_eq!(&q.indices, &want);
        let zq = g.value(q.z_q);
        for (row, &j) in want.iter().enumerate() {
            let a: Vec<u64> = zq.row(row).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = table[j * d..(j + 1) * d].iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
        // The straight-through output carries the codewords' values exactly.
        prop_assert!(g.value(q.output).bit_eq(zq));
    }
}

/// Stationary clusters of unequal size around distinct means.
fn clustered(sizes: &[usize], d: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<Vec<f64>>) {
    let mut rng = stream(seed, Stream::Data);
    let mut rows = Vec::new();
    let mut idx = Vec::new();
    let mut means = Vec::new();
    for (j, &s) in sizes.iter().enumerate() {
        let centre = normal_tensor(&mut rng, &[d], 1.0);
        let pts = normal_tensor(&mut rng, &[s, d], 0.3);
        let mut mean = vec![0.0; d];
        for r in 0..s {
            for (k, acc) in mean.iter_mut().enumerate() {
                let v = centre.data()[k] + pts.at(&[r, k]);
                rows.push(v);
                *acc += v / s as f64;
            }
            idx.push(j);
        }
        means.push(mean);
    }
    (Tensor::new(&[idx.len(), d], rows).unwrap(), idx, means)
}

#[test]
fn conventional_ema_converges_to_cluster_means() {
    let (z, idx, means) = clustered(&[8, 12, 10, 10], 3, 4);
    let init = normal_tensor(&mut stream(9, Stream::Init), &[4, 3], 1.0);
    let mut cb = Codebook::from_embeddings(init, 0.99).unwrap();
    for _ in 0..5000 {
        cb.ema_update(&z, &idx, EmaForm::Conventional).unwrap();
    }
    for (j, mean) in means.iter().enumerate() {
        for (c, m) in cb.embeddings().row(j).iter().zip(mean) {
            assert!((c - m).abs() < 1e-6, "codeword {j}: {c} vs {m}");
        }
    }
}

#[test]
fn unassigned_codeword_drifts_only_by_smoothing() {
    let z = Tensor::from_rows(&[&[1.0, 1.0], &[1.2, 0.8]]).unwrap();
    let init = Tensor::from_rows(&[&[0.0, 0.0], &[5.0, -5.0]]).unwrap();
    let mut cb = Codebook::from_embeddings(init, 0.99).unwrap();
    cb.ema_update(&z, &[0, 0], EmaForm::Conventional).unwrap();
    // Row 1's running mean is still (5, −5); only the smoothed size moved.
    let row = cb.embeddings().row(1);
    assert!((row[0] / row[1] + 1.0).abs() < 1e-12);
    let sum = cb.ema_embed_sum();
    let size = cb.ema_cluster_size();
    assert!((sum[2] / size[1] - 5.0).abs() < 1e-12);
}

#[test]
fn direct_form_moves_toward_assigned_vector() {
    let init = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
    let mut cb = Codebook::from_embeddings(init, 0.99).unwrap();
    let z = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
    cb.ema_update(&z, &[0], EmaForm::Direct).unwrap();
    assert!((cb.embeddings().row(0)[0] - 0.99).abs() < 1e-15);
    assert!((cb.embeddings().row(0)[1] - 1.98).abs() < 1e-15);
}

#[test]
fn gumbel_hard_frequency() {
    let draws = 100_000;
    let p = 0.75;
    let mut rng = stream(2024, Stream::Gumbel);
    let mut ones = 0usize;
    // A thousand draws per graph.
    for _ in 0..draws / 1000 {
        let mut g = Graph::new();
        let row = [1.0f64.ln(), 3.0f64.ln()];
        let logits = g.constant(Tensor::new(&[1000, 2], row.repeat(1000)).unwrap());
        let out = gumbel_softmax(&mut g, logits, 1.0, true, Some(&mut rng)).unwrap();
        ones += out.selections.iter().filter(|&&s| s == 1).count();
        let scores = g.value(out.scores);
        for (t, &s) in out.selections.iter().enumerate() {
            assert_eq!(scores.row(t)[s], 1.0);
            assert_eq!(scores.row(t)[1 - s], 0.0);
        }
    }
    let freq = ones as f64 / draws as f64;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    assert!((freq - p).abs() <= 3.0 * se, "frequency {freq}, expected {p} ± {}", 3.0 * se);
}

#[test]
fn noise_off_hard_mode_is_argmax() {
    let mut rng = stream(5, Stream::Data);
    for trial in 0..200 {
        let m = 1 + trial % 7;
        let logits = normal_tensor(&mut rng, &[4, m], 2.0);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let out = gumbel_softmax(&mut g, l, 0.5 + trial as f64, true, None).unwrap();
        for t in 0..4 {
            let row = logits.row(t);
            let best = (0..m).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(out.selections[t], best);
        }
    }
}

#[test]
fn temperature_schedule_endpoints() {
    for iterations in [1u64, 10, 2000] {
        assert_eq!(temperature(iterations, 0, Phase::Training).value, iterations as f64 + 1.0);
        assert_eq!(temperature(iterations, iterations, Phase::Training).value, 1.0);
        assert_eq!(temperature(iterations, 3, Phase::Validation).value, 1.0);
    }
    let past = temperature(10, 11, Phase::Training);
    assert!(past.clamped && past.value == 1.0);
}
