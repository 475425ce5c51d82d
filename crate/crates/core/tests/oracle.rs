use ssattn::neighborhood::{kernel_forward, neighborhood_aggregate, neighborhood_scores, softmax_rows, NeighborhoodSpec};
use ssattn::oracle::{aoi_set, oracle_anchor_only, oracle_s3a, qkv_affines, rwin_set};
use ssattn::s3a::s3a_forward;
use ssattn::{Rng, S3AConfig, S3AParams, StridePolicy, Tensor};

#[test]
fn set_cardinality_is_constant_and_members_legal() {
    let mut rng = Rng::seed(1);
    for _ in 0..200 {
        let (h, w) = (rng.range(1, 30), rng.range(1, 30));
        let anchors = (*rng.choose(&[1, 3, 5, 7]), *rng.choose(&[1, 3, 5, 7]));
        let stride = (rng.range(1, 5), rng.range(1, 5));
        let window = (*rng.choose(&[1, 3, 5]), *rng.choose(&[1, 3, 5]));
        let first = aoi_set(0, 0, h, w, anchors, stride).len();
        let first_r = rwin_set(0, 0, h, w, window).len();
        for i in 0..h {
            for j in 0..w {
                let a = aoi_set(i, j, h, w, anchors, stride);
                assert_eq!(a.len(), first);
                assert!(a.members.iter().all(|&(m, n)| m < h && n < w));
                let mut dedup = a.members.clone();
                dedup.sort();
                dedup.dedup();
                assert_eq!(dedup.len(), a.len());
                assert_eq!(rwin_set(i, j, h, w, window).len(), first_r);
            }
        }
    }
}

#[test]
fn unit_stride_anchors_equal_window() {
    for (h, w) in [(9, 9), (4, 11), (1, 6)] {
        for k in [1, 3, 5, 7] {
            for i in 0..h {
                for j in 0..w {
                    assert_eq!(aoi_set(i, j, h, w, (k, k), (1, 1)).members, rwin_set(i, j, h, w, (k, k)).members);
                }
            }
        }
    }
}

/// Kernel scores and aggregation on a random 4×4 map against sums over the
/// oracle's materialized window.
#[test]
fn kernel_matches_set_based_computation() {
    let mut rng = Rng::seed(0);
    let (h, w, dh) = (4, 4, 2);
    let q = Tensor::<f64>::randn(&[1, h, w, dh], &mut rng, 1.0);
    let k = Tensor::<f64>::randn(&[1, h, w, dh], &mut rng, 1.0);
    let v = Tensor::<f64>::randn(&[1, h, w, dh], &mut rng, 1.0);
    let spec = NeighborhoodSpec::square(3, 1).unwrap();
    let scale = 0.7;
    let scores = neighborhood_scores(&q, &k, &spec, scale).unwrap();
    let attn = softmax_rows(&scores).unwrap();
    let out = neighborhood_aggregate(&attn, &v, &spec).unwrap();
    let at = |t: &Tensor<f64>, i: usize, j: usize| t.data()[(i * w + j) * dh..(i * w + j + 1) * dh].to_vec();
    for i in 0..h {
        for j in 0..w {
            let set = rwin_set(i, j, h, w, (3, 3));
            let s: Vec<f64> = set
                .members
                .iter()
                .map(|&(m, n)| at(&q, i, j).iter().zip(at(&k, m, n)).map(|(a, b)| a * b * scale).sum())
                .collect();
            let row = &scores.data()[(i * w + j) * 9..(i * w + j + 1) * 9];
            for (a, b) in row.iter().zip(&s) {
                assert!((a - b).abs() < 1e-6);
            }
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            let mut want = vec![0.0; dh];
            for (sc, &(m, n)) in s.iter().zip(&set.members) {
                for d in 0..dh {
                    want[d] += sc.exp() / z * at(&v, m, n)[d];
                }
            }
            for (a, b) in at(&out, i, j).iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

/// With a 1×1 window the oracle's anchor-only path, the full oracle and the
/// library's dilated kernel applied once all agree.
#[test]
fn unit_window_triangulation() {
    let mut rng = Rng::seed(2);
    for _ in 0..20 {
        let mut cfg = S3AConfig::new(4, 2);
        cfg.window = (1, 1);
        cfg.anchors = (*rng.choose(&[3, 5, 7]), *rng.choose(&[1, 3, 5]));
        cfg.stride = if rng.range(0, 1) == 0 { StridePolicy::Auto } else { StridePolicy::Fixed(2, 1) };
        cfg.lce = false;
        let (h, w) = (rng.range(1, 11), rng.range(1, 11));
        let p = S3AParams::<f64>::random(&cfg, &mut rng, 0.5, 0.2);
        let x = Tensor::<f64>::randn(&[4, h, w], &mut rng, 1.0);
        let single = oracle_anchor_only(&x, &cfg, &p).unwrap();
        assert!(single.max_abs_diff(&oracle_s3a(&x, &cfg, &p).unwrap()).unwrap() < 1e-12);

        // one kernel call over projected, head-split tensors
        let [aq, ak, av] = qkv_affines(&p);
        let n = h * w;
        let proj = |a: &ssattn::oracle::Affine, scale: f64| {
            let mut t = Tensor::<f64>::zeros(&[2, h, w, 2]);
            for s in 0..n {
                for o in 0..4 {
                    let mut acc = a.bias.data()[o];
                    for c in 0..4 {
                        acc += a.weight.data()[o * 4 + c] * x.data()[c * n + s];
                    }
                    t.data_mut()[((o / 2) * n + s) * 2 + o % 2] = acc * scale;
                }
            }
            t
        };
        let spec = cfg.anchor_spec(h, w).unwrap();
        let (attn_out, _) = kernel_forward(&proj(&aq, 1.0), &proj(&ak, cfg.scale()), &proj(&av, 1.0), &spec, 1.0).unwrap();
        let (layer, _) = s3a_forward(&x, &cfg, &p).unwrap();
        for o in 0..4 {
            for s in 0..n {
                let mut want = p.b_out.data()[o];
                for c in 0..4 {
                    want += p.w_out.data()[o * 4 + c] * attn_out.data()[((c / 2) * n + s) * 2 + c % 2];
                }
                assert!((layer.data()[o * n + s] - want).abs() < 1e-6);
                assert!((single.data()[o * n + s] - want).abs() < 1e-6);
            }
        }
    }
}
