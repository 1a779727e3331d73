use dmtj_core::aggregation::{build_aggregated_context, build_dense_targets, cross_attend, HeadKind};
use dmtj_core::gradcheck::{finite_difference_grad, relative_error};
use dmtj_core::masking::{block_extent, sample_mask_plan, MaskSamplerConfig};
use dmtj_core::neighbors::{neighborhood, select_for, select_topk, NeighborhoodSpec, Window};
use dmtj_core::tape::GeluKind;
use dmtj_core::{Rng, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(3, 5)) {
        let s = x.softmax(1).unwrap();
        for r in 0..3 {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn matmul_is_associative(a in tensor(2, 3), b in tensor(3, 4), c in tensor(4, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(relative_error(left.data(), right.data()) < 1e-12);
    }

    #[test]
    fn cross_attention_stays_in_convex_hull(q in tensor(1, 4), kv in tensor(5, 4)) {
        let out = cross_attend(&q, &kv).unwrap();
        for d in 0..4 {
            let col: Vec<f64> = (0..5).map(|r| kv.row(r)[d]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data()[d] >= lo - 1e-12 && out.data()[d] <= hi + 1e-12);
        }
    }
}

/// Backward of `build(x)` summed against a fixed random weighting, checked
/// against central differences.
fn check_op(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
    let mut rng = Rng::seed_from_u64(99);
    let probe = |t: &Tensor, w: Option<&Tensor>| {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), true);
        let y = build(&mut tape, v);
        let shape = tape.value(y).shape().to_vec();
        (tape, v, y, shape, w.cloned())
    };
    let (_, _, _, shape, _) = probe(x, None);
    let w = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let loss_of = |t: &Tensor| {
        let (mut tape, _, y, _, _) = probe(t, None);
        let wv = tape.constant(w.clone());
        let m = tape.mul(y, wv)?;
        let l = tape.sum(m)?;
        Ok(tape.value(l).data()[0])
    };
    let (mut tape, v, y, _, _) = probe(x, None);
    let wv = tape.constant(w.clone());
    let m = tape.mul(y, wv).unwrap();
    let l = tape.sum(m).unwrap();
    let analytic = tape.backward(l).unwrap().get(v).unwrap();
    let numeric = finite_difference_grad(loss_of, x, 1e-5).unwrap();
    let err = relative_error(analytic.data(), numeric.data());
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = random(&mut rng, 3, 4);
        let other = random(&mut rng, 4, 2);
        let other_nt = random(&mut rng, 5, 4);
        let same = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        check_op(&x, |t, v| {
            let b = t.constant(other.clone());
            t.matmul(v, b).unwrap()
        });
        check_op(&x, |t, v| {
            let b = t.constant(other_nt.clone());
            t.matmul_nt(v, b).unwrap()
        });
        check_op(&x, |t, v| {
            let b = t.constant(other_nt.clone());
            t.matmul_nt(b, v).unwrap()
        });
        check_op(&x, |t, v| t.matmul_nt(v, v).unwrap());
        check_op(&x, |t, v| {
            let b = t.constant(same.clone());
            let s = t.sub(v, b).unwrap();
            let a = t.add(s, v).unwrap();
            t.mul(a, v).unwrap()
        });
        check_op(&x, |t, v| {
            let b = t.constant(row.clone());
            t.add_row(v, b).unwrap()
        });
        check_op(&row, |t, v| {
            let b = t.constant(x.clone());
            t.add_row(b, v).unwrap()
        });
        check_op(&x, |t, v| t.scale(v, -1.7).unwrap());
        check_op(&x, |t, v| t.transpose(v).unwrap());
        check_op(&x, |t, v| t.softmax_rows(v).unwrap());
        check_op(&x, |t, v| {
            let g = t.constant(row.clone());
            let b = t.constant(same.gather_rows(&[0]).unwrap());
            t.layernorm(v, g, b, 1e-6).unwrap()
        });
        check_op(&row, |t, v| {
            let xs = t.constant(x.clone());
            let b = t.constant(Tensor::zeros(&[1, 4]));
            t.layernorm(xs, v, b, 1e-6).unwrap()
        });
        check_op(&x, |t, v| t.gelu(v, GeluKind::Exact).unwrap());
        check_op(&x, |t, v| t.gelu(v, GeluKind::Tanh).unwrap());
        check_op(&x, |t, v| t.gather_rows(v, &[2, 0, 2]).unwrap());
        check_op(&x, |t, v| {
            let b = t.constant(same.clone());
            t.concat_rows(&[v, b, v]).unwrap()
        });
        check_op(&x, |t, v| t.slice_cols(v, 1, 3).unwrap());
        check_op(&x, |t, v| {
            let a = t.slice_cols(v, 0, 2).unwrap();
            let b = t.slice_cols(v, 2, 4).unwrap();
            t.concat_cols(&[b, a]).unwrap()
        });
        check_op(&x, |t, v| t.mean_rows(v).unwrap());
        check_op(&x, |t, v| t.max_rows(v).unwrap());
        check_op(&x, |t, v| t.sum_squares(v).unwrap());
        check_op(&x, |t, v| t.l2_normalize_rows(v).unwrap());
    }
}

fn full_sort_oracle(i: usize, feats: &Tensor, rows: usize, cols: usize, spec: &NeighborhoodSpec) -> Vec<usize> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = feats.row(i);
    let mut all: Vec<(f64, usize)> = (0..rows * cols)
        .filter(|&j| j != i || spec.include_self)
        .filter(|&j| match spec.window {
            Window::All => true,
            Window::Size(n) => {
                let h = (n / 2) as i64;
                let (r, c) = ((i / cols) as i64, (i % cols) as i64);
                let (rj, cj) = ((j / cols) as i64, (j % cols) as i64);
                (r - rj).abs() <= h && (c - cj).abs() <= h
            }
        })
        .map(|j| {
            let f = feats.row(j);
            let dot: f64 = q.iter().zip(f).map(|(a, b)| a * b).sum();
            ((dot / (norm(q) * norm(f))).clamp(-1.0, 1.0), j)
        })
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(spec.k).map(|(_, j)| j).collect()
}

#[test]
fn top_k_matches_full_sort_on_random_grids() {
    let mut rng = Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let rows = rng.random_range(2..6);
        let cols = rng.random_range(2..6);
        let d = rng.random_range(2..5);
        // Coarse values produce exact ties between distinct patches.
        let coarse = trial % 3 == 0;
        let data: Vec<f64> = (0..rows * cols * d)
            .map(|_| {
                if coarse {
                    rng.random_range(1..3) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let feats = Tensor::new(vec![rows * cols, d], data).unwrap();
        let spec = NeighborhoodSpec {
            window: if trial % 4 == 0 { Window::All } else { Window::Size([3, 5][trial % 2]) },
            include_self: trial % 5 == 0,
            k: rng.random_range(1..7),
        };
        let i = rng.random_range(0..rows * cols);
        let got = select_topk(i, &feats, rows, cols, &spec).unwrap();
        assert_eq!(got.indices, full_sort_oracle(i, &feats, rows, cols, &spec), "trial {trial}");
        assert!(got.indices.iter().all(|j| neighborhood(i, rows, cols, &spec).contains(j)));
    }
}

#[test]
fn selection_is_invariant_to_positive_scaling() {
    let mut rng = Rng::seed_from_u64(8);
    let spec = NeighborhoodSpec::default();
    for _ in 0..100 {
        let feats = random(&mut rng, 16, 6);
        let c = rng.random_range(0.01..100.0);
        let scaled = feats.map(|v| v * c);
        let masked: Vec<usize> = (0..16).collect();
        let a = select_for(&masked, &feats, 4, 4, &spec).unwrap();
        let b = select_for(&masked, &scaled, 4, 4, &spec).unwrap();
        for i in masked {
            assert_eq!(a.get(i).unwrap().indices, b.get(i).unwrap().indices);
        }
    }
}

fn softmax_combination(q: &[f64], kv: &Tensor) -> Vec<f64> {
    let (n, d) = kv.dims2().unwrap();
    let logits: Vec<f64> = (0..n)
        .map(|r| q.iter().zip(kv.row(r)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    (0..d).map(|c| (0..n).map(|r| e[r] / z * kv.row(r)[c]).sum()).collect()
}

#[test]
fn cross_attend_matches_brute_force() {
    let mut rng = Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = rng.random_range(1..8);
        let d = rng.random_range(1..6);
        let q = random(&mut rng, 1, d);
        let kv = random(&mut rng, n, d);
        let out = cross_attend(&q, &kv).unwrap();
        let want = softmax_combination(q.data(), &kv);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        if n == 1 {
            assert_eq!(out.data(), kv.data());
        }
    }
}

#[test]
fn dense_targets_match_brute_force() {
    let mut rng = Rng::seed_from_u64(10);
    let spec = NeighborhoodSpec::default();
    for _ in 0..50 {
        let feats = random(&mut rng, 16, 4);
        let masked = vec![0, 5, 6, 15];
        let sel = select_for(&masked, &feats, 4, 4, &spec).unwrap();
        let t = build_dense_targets(&feats, &sel, &masked, HeadKind::CrossAttention).unwrap();
        let xt = feats.mean_rows().unwrap();
        for (row, &j) in masked.iter().enumerate() {
            let set = feats.gather_rows(&sel.get(j).unwrap().indices).unwrap();
            let want = softmax_combination(xt.data(), &set);
            for (a, b) in t.row(row).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let avg = build_dense_targets(&feats, &sel, &masked, HeadKind::AveragePool).unwrap();
        assert_ne!(avg, t);
        let ctx = random(&mut rng, 3, 4);
        let s = build_aggregated_context(&ctx).unwrap();
        let want = softmax_combination(ctx.mean_rows().unwrap().data(), &ctx);
        for (a, b) in s.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Every block a (scale, aspect) draw can produce on a 4×4 grid, found by
/// sweeping both ranges on a fine lattice and rounding independently.
fn enumerated_block_areas(cfg: &MaskSamplerConfig) -> Vec<usize> {
    let mut areas = Vec::new();
    for i in 0..=400 {
        for j in 0..=400 {
            let s = cfg.target_scale.0 + (cfg.target_scale.1 - cfg.target_scale.0) * i as f64 / 400.0;
            let a = cfg.target_aspect.0 + (cfg.target_aspect.1 - cfg.target_aspect.0) * j as f64 / 400.0;
            let h = ((s * 16.0 * a).sqrt().round() as usize).clamp(1, 4);
            let w = ((s * 16.0 / a).sqrt().round() as usize).clamp(1, 4);
            areas.push(h * w);
        }
    }
    areas.sort_unstable();
    areas.dedup();
    areas
}

#[test]
fn block_sizes_on_a_four_by_four_grid() {
    let cfg = MaskSamplerConfig::default();
    let oracle = enumerated_block_areas(&cfg);
    assert_eq!(oracle, vec![2, 4]);
    let (h, w) = block_extent(0.15, 0.75, 4, 4);
    assert_eq!((h, w), (1, 2));
    let mut rng = Rng::seed_from_u64(11);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..2000 {
        for block in sample_mask_plan(4, 4, &cfg, &mut rng).unwrap().targets {
            seen.insert(block.len());
        }
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), oracle);
}

#[test]
fn ten_thousand_plans_cover_and_overlap() {
    let cfg = MaskSamplerConfig::default();
    let mut rng = Rng::seed_from_u64(12);
    let (rows, cols) = (8, 8);
    let n = (rows * cols) as f64;
    let (mut coverage, mut overlapping) = (0.0, 0usize);
    let trials = 10_000;
    for _ in 0..trials {
        let plan = sample_mask_plan(rows, cols, &cfg, &mut rng).unwrap();
        let masked = plan.masked();
        assert!(plan.context.iter().all(|c| masked.binary_search(c).is_err()));
        for (b, r) in plan.targets.iter().zip(&plan.target_rects) {
            assert_eq!(b, &r.indices(cols));
            coverage += b.len() as f64 / n / plan.num_targets() as f64;
        }
        let total: usize = plan.targets.iter().map(Vec::len).sum();
        overlapping += (total > masked.len()) as usize;
    }
    let mean = coverage / trials as f64;
    // Integer side lengths on an 8×8 grid move the area by up to one row or
    // column around the nominal scale.
    let (lo, hi) = (cfg.target_scale.0, cfg.target_scale.1);
    let slack = 2.0 * (hi * n).sqrt() / n;
    assert!(mean >= lo - slack && mean <= hi + slack, "mean coverage {mean}");
    assert!(overlapping > trials / 10, "overlaps {overlapping}");
}
