//! Independently coded reference computations for the kernel, the basis
//! algebra and the knowledge discovery pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use renorm_core::algebra::{
    align_cascade, bases_from_cascade, combine, factors_from_strengths, strengths_from_factors,
};
use renorm_core::autodiff::eval;
use renorm_core::connections::{self, ADAPTIVE_POOLING_MATRIX};
use renorm_core::kdn::{self, orsp, project_region, BBox, FactorSet, ObjectAnnotation, Region, SalientStack};
use renorm_core::{Factors, FeatureCascade, Graph, Strengths, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Scalar bilinear sample (align-corners=false) written from the definition.
fn bilinear_scalar(img: &[Vec<f64>], out_h: usize, out_w: usize, oy: usize, ox: usize) -> f64 {
    let (h, w) = (img.len(), img[0].len());
    let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).max(0.0);
    let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).max(0.0);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let fy = if y1 == y0 { 0.0 } else { fy };
    let fx = if x1 == x0 { 0.0 } else { fx };
    img[y0][x0] * (1.0 - fy) * (1.0 - fx)
        + img[y0][x1] * (1.0 - fy) * fx
        + img[y1][x0] * fy * (1.0 - fx)
        + img[y1][x1] * fy * fx
}

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = eval::bilinear_resize(&x, 4, 4).unwrap();
    let img = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
    for oy in 0..4 {
        for ox in 0..4 {
            let expect = bilinear_scalar(&img, 4, 4, oy, ox);
            assert!((y.at(&[0, oy, ox]) - expect).abs() < 1e-15, "({oy},{ox})");
        }
    }
    // corners clamp, centre cells interpolate
    assert_eq!(y.at(&[0, 0, 0]), 0.0);
    assert_eq!(y.at(&[0, 3, 3]), 3.0);
    assert!((y.at(&[0, 1, 1]) - 0.75).abs() < 1e-15);
    assert!((y.at(&[0, 2, 2]) - 2.25).abs() < 1e-15);
}

#[test]
fn bilinear_random_against_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w, oh, ow) in [(5, 3, 9, 11), (8, 8, 3, 5), (1, 4, 2, 2)] {
        let x = random(&mut rng, &[1, h, w]);
        let img: Vec<Vec<f64>> = (0..h).map(|r| (0..w).map(|c| x.at(&[0, r, c])).collect()).collect();
        let y = eval::bilinear_resize(&x, oh, ow).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                assert!((y.at(&[0, oy, ox]) - bilinear_scalar(&img, oh, ow, oy, ox)).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn channel_max_against_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shape in [[8, 6, 6], [1, 3, 2], [5, 1, 7]] {
        let x = random(&mut rng, &shape);
        let y = eval::channel_max(&x).unwrap();
        assert_eq!(y.shape(), &[1, shape[1], shape[2]]);
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let mut best = f64::NEG_INFINITY;
                for c in 0..shape[0] {
                    best = best.max(x.at(&[c, h, w]));
                }
                assert_eq!(y.at(&[0, h, w]), best);
            }
        }
    }
}

#[test]
fn conv_against_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 6, 5]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let (stride, pad) = (2, 1);
    let y = eval::conv2d(&x, &w, None, stride, pad).unwrap();
    let (oh, ow) = ((6 + 2 - 3) / 2 + 1, (5 + 2 - 3) / 2 + 1);
    assert_eq!(y.shape(), &[3, oh, ow]);
    for o in 0..3 {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for ic in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (ir, jc) = ((r * stride + ki) as isize - 1, (c * stride + kj) as isize - 1);
                            if (0..6).contains(&ir) && (0..5).contains(&jc) {
                                acc += w.at(&[o, ic, ki, kj]) * x.at(&[ic, ir as usize, jc as usize]);
                            }
                        }
                    }
                }
                assert!((y.at(&[o, r, c]) - acc).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn softmax_is_normalized_and_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let s = eval::softmax(&Tensor::vector(&v).unwrap()).unwrap();
        assert!((s.sum() - 1.0).abs() <= 1e-12);
        let mut rev = v.clone();
        rev.reverse();
        let sr = eval::softmax(&Tensor::vector(&rev).unwrap()).unwrap();
        for i in 0..6 {
            assert!((s.data()[i] - sr.data()[5 - i]).abs() <= 1e-15);
        }
    }
}

/// Cramer's rule on the coefficient-matching system, independent of the solver.
fn strengths_oracle(l: [f64; 3]) -> [f64; 3] {
    // Σλ F = Σ c B with B1=F1, B2=F2−F1, B3=F3−F2−F1:
    //   F1: c1 − c2 − c3 = λ1;  F2: c2 − c3 = λ2;  F3: c3 = λ3
    let a = [[1.0, -1.0, -1.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]];
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][col] = l[r];
        }
        *o = det(m) / d;
    }
    out
}

#[test]
fn strengths_match_cramer_oracle() {
    assert_eq!(strengths_oracle([2.0, 1.0, 1.0]), [5.0, 2.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let l = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let c = strengths_from_factors(&Factors(l.to_vec())).unwrap();
        for (a, b) in c.values().iter().zip(strengths_oracle(l)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn round_trip_and_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let l: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let back = factors_from_strengths(&strengths_from_factors(&Factors(l.clone())).unwrap());
        for (a, b) in back.values().iter().zip(&l) {
            assert!((a - b).abs() <= 1e-12);
        }
        let m: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (al, be) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix: Vec<f64> = l.iter().zip(&m).map(|(a, b)| al * a + be * b).collect();
        let lhs = strengths_from_factors(&Factors(mix)).unwrap();
        let sl = strengths_from_factors(&Factors(l)).unwrap();
        let sm = strengths_from_factors(&Factors(m)).unwrap();
        for i in 0..3 {
            let rhs = al * sl.values()[i] + be * sm.values()[i];
            assert!((lhs.values()[i] - rhs).abs() <= 1e-10);
        }
    }
}

fn random_cascade(rng: &mut ChaCha8Rng) -> FeatureCascade {
    let c = rng.gen_range(1..4);
    FeatureCascade::new(
        vec![
            random(rng, &[c, 8, 8]),
            random(rng, &[c, 4, 4]),
            random(rng, &[c, 2, 2]),
        ],
        vec![4, 8, 16],
    )
    .unwrap()
}

#[test]
fn random_cascade_reconstruction_and_duality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let cascade = random_cascade(&mut rng);
        let aligned = align_cascade(&cascade, 0).unwrap();
        assert_eq!(aligned[0], cascade.levels()[0]);
        let bases = bases_from_cascade(&aligned).unwrap();
        let b = bases.bases();
        // F2 = B1 + B2; F3 = 2B1 + B2 + B3, both sides recomputed elementwise
        for i in 0..aligned[0].len() {
            let (b1, b2, b3) = (b[0].data()[i], b[1].data()[i], b[2].data()[i]);
            assert!((aligned[1].data()[i] - (b1 + b2)).abs() <= 1e-12);
            assert!((aligned[2].data()[i] - (2.0 * b1 + b2 + b3)).abs() <= 1e-12);
        }
        let rebuilt = bases.reconstruct().unwrap();
        for (r, a) in rebuilt.iter().zip(&aligned) {
            assert!(r.max_abs_diff(a).unwrap() <= 1e-12);
        }

        let l: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let via_bases = combine(&bases, &strengths_from_factors(&Factors(l.clone())).unwrap()).unwrap();
        for i in 0..via_bases.len() {
            let raw: f64 = (0..3).map(|k| l[k] * aligned[k].data()[i]).sum();
            assert!((via_bases.data()[i] - raw).abs() <= 1e-10 * (1.0 + raw.abs()));
        }
        let sum421 = combine(&bases, &Strengths::n21(4.0)).unwrap();
        for i in 0..sum421.len() {
            let plain = aligned[0].data()[i] + aligned[1].data()[i] + aligned[2].data()[i];
            assert!((sum421.data()[i] - plain).abs() <= 1e-12);
        }
    }
}

#[test]
fn projection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let stride = [1usize, 2, 4, 8, 16][rng.gen_range(0..5)];
        let (x, y) = (rng.gen_range(0.0..90.0), rng.gen_range(0.0..90.0));
        let (w, h) = (rng.gen_range(1.0..30.0), rng.gen_range(1.0..30.0));
        let (mh, mw) = (96 / stride, 96 / stride);
        let r = project_region(&BBox::new(x, y, w, h), stride, mh, mw).unwrap();
        // every cell whose pixel span intersects the box, clipped
        let cells = |lo: f64, len: f64, limit: usize| -> (usize, usize) {
            let hit: Vec<usize> = (0..limit)
                .filter(|&c| {
                    let (a, b) = ((c * stride) as f64, ((c + 1) * stride) as f64);
                    a < lo + len && b > lo
                })
                .collect();
            (hit[0], hit.len())
        };
        assert_eq!((r.x, r.w), cells(x, w, mw), "x {x} w {w} s {stride}");
        assert_eq!((r.y, r.h), cells(y, h, mh));
    }
}

#[test]
fn orsp_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let m = random(&mut rng, &[1, 7, 9]);
        let (x, y) = (rng.gen_range(0..9), rng.gen_range(0..7));
        let (w, h) = (rng.gen_range(1..=9 - x), rng.gen_range(1..=7 - y));
        let mut best = f64::NEG_INFINITY;
        for r in y..y + h {
            for c in x..x + w {
                best = best.max(m.at(&[0, r, c]));
            }
        }
        assert_eq!(orsp(&m, &Region { x, y, w, h }).unwrap(), best);
    }
}

#[test]
fn streaming_mean_matches_list_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut stack = SalientStack::new(3);
    let mut all: Vec<Vec<f64>> = Vec::new();
    for _ in 0..1000 {
        let f: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..3.0)).collect();
        stack.update(&Factors(f.clone())).unwrap();
        all.push(f);
    }
    let fs = stack.finalize().unwrap();
    assert_eq!(fs.count, 1000);
    for l in 0..3 {
        let mean = all.iter().map(|f| f[l]).sum::<f64>() / all.len() as f64;
        assert!((fs.lambda_infer.values()[l] - mean).abs() <= 1e-12);
        assert_eq!(fs.relevance[l], fs.lambda_infer.values()[l] >= 1.0);
    }
}

#[test]
fn image_factors_against_manual_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cascade = FeatureCascade::new(
        vec![
            random(&mut rng, &[3, 16, 16]),
            random(&mut rng, &[4, 8, 8]),
            random(&mut rng, &[2, 4, 4]),
        ],
        vec![4, 8, 16],
    )
    .unwrap();
    let objects: Vec<ObjectAnnotation> = (0..4)
        .map(|_| ObjectAnnotation {
            bbox: BBox::new(
                rng.gen_range(0.0..56.0),
                rng.gen_range(0.0..56.0),
                rng.gen_range(2.0..8.0),
                5.0,
            ),
            class_id: 0,
        })
        .collect();
    let got = kdn::image_factors(&cascade, &objects).unwrap().unwrap();
    let mut expect = Vec::new();
    for (lvl, &s) in cascade.levels().iter().zip(cascade.strides()) {
        let [_, c, h, w] = lvl.nchw().unwrap();
        let mut total = 0.0;
        for o in &objects {
            let b = o.bbox;
            let mut best = f64::NEG_INFINITY;
            for r in 0..h {
                for col in 0..w {
                    let inside = ((col * s) as f64) < b.x + b.w
                        && (((col + 1) * s) as f64) > b.x
                        && ((r * s) as f64) < b.y + b.h
                        && (((r + 1) * s) as f64) > b.y;
                    if inside {
                        for ch in 0..c {
                            best = best.max(lvl.at(&[ch, r, col]));
                        }
                    }
                }
            }
            total += best;
        }
        expect.push(total / objects.len() as f64);
    }
    let z: f64 = expect.iter().map(|v| v.exp()).sum();
    for (g, e) in got.values().iter().zip(&expect) {
        assert!((g - 3.0 * e.exp() / z).abs() < 1e-12);
    }
    assert!((got.values().iter().sum::<f64>() - 3.0).abs() <= 1e-12);

    let mut reversed = objects.clone();
    reversed.reverse();
    let again = kdn::image_factors(&cascade, &reversed).unwrap().unwrap();
    for (a, b) in got.values().iter().zip(again.values()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

fn constant_levels(g: &mut Graph, rng: &mut ChaCha8Rng) -> Vec<Var> {
    [(8, 8), (4, 4), (2, 2)]
        .iter()
        .map(|&(h, w)| g.constant(random(rng, &[2, h, w])))
        .collect()
}

#[test]
fn fuse_train_is_compositional_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph::new();
    let levels = constant_levels(&mut g, &mut rng);
    let tensors: Vec<Tensor> = levels.iter().map(|&v| g.value(v).clone()).collect();
    let aligned = align_cascade(&FeatureCascade::new(tensors, vec![4, 8, 16]).unwrap(), 0).unwrap();
    let l = Factors(vec![1.3, 0.2, 1.5]);
    let m = Factors(vec![-0.4, 0.9, 0.1]);
    let fl = kdn::fuse_train(&mut g, &levels, None, &l).unwrap();
    let manual = eval::linear_combination(&[(&aligned[0], 1.3), (&aligned[1], 0.2), (&aligned[2], 1.5)]).unwrap();
    assert!(g.value(fl).max_abs_diff(&manual).unwrap() < 1e-14);

    let fm = kdn::fuse_train(&mut g, &levels, None, &m).unwrap();
    let mix = Factors(vec![2.0 * 1.3 - 0.4, 2.0 * 0.2 + 0.9, 2.0 * 1.5 + 0.1]);
    let fmix = kdn::fuse_train(&mut g, &levels, None, &mix).unwrap();
    let lin = eval::linear_combination(&[(g.value(fl), 2.0), (g.value(fm), 1.0)]).unwrap();
    assert!(g.value(fmix).max_abs_diff(&lin).unwrap() < 1e-12);
}

#[test]
fn fuse_infer_against_masked_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let levels = constant_levels(&mut g, &mut rng);
    let tensors: Vec<Tensor> = levels.iter().map(|&v| g.value(v).clone()).collect();
    let aligned = align_cascade(&FeatureCascade::new(tensors, vec![4, 8, 16]).unwrap(), 0).unwrap();
    for _ in 0..50 {
        let l: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
        let fs = FactorSet::new(Factors(l.clone()), 7);
        let got = kdn::fuse_infer(&mut g, &levels, None, &fs);
        if l.iter().all(|&v| v < 1.0) {
            assert!(got.is_err());
            continue;
        }
        let got = g.value(got.unwrap()).clone();
        for i in 0..got.len() {
            let expect: f64 = (0..3)
                .filter(|&k| l[k] >= 1.0)
                .map(|k| l[k] * aligned[k].data()[i])
                .sum();
            assert!((got.data()[i] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn uniform_kdn_equals_421_basis_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut g = Graph::new();
    let levels = constant_levels(&mut g, &mut rng);
    let fs = FactorSet::new(Factors::uniform(3), 10);
    let kdn_out = kdn::fuse_infer(&mut g, &levels, None, &fs).unwrap();
    let rc = connections::economical(&mut g, &levels, &Strengths::n21(4.0)).unwrap();
    assert!(g.value(kdn_out).max_abs_diff(g.value(rc)).unwrap() <= 1e-12);
}

#[test]
fn complete_against_loop_and_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut g = Graph::new();
    let tensors: Vec<Tensor> = (0..4).map(|i| random(&mut rng, &[2, 8 >> i, 8 >> i])).collect();
    let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
    let out = connections::complete(&mut g, &vars, &ADAPTIVE_POOLING_MATRIX).unwrap();
    for j in 0..4 {
        let s = 8 >> j;
        let mut acc = Tensor::zeros(&[2, s, s]);
        for (i, t) in tensors.iter().enumerate() {
            let r = eval::bilinear_resize(t, s, s).unwrap();
            acc = eval::linear_combination(&[(&acc, 1.0), (&r, ADAPTIVE_POOLING_MATRIX[j][i])]).unwrap();
        }
        assert!(g.value(out[j]).max_abs_diff(&acc).unwrap() < 1e-14);
    }
}

#[test]
fn economical_421_is_plain_sum_on_random_pyramids() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let mut g = Graph::new();
        let levels = constant_levels(&mut g, &mut rng);
        let out = connections::economical(&mut g, &levels, &Strengths::n21(4.0)).unwrap();
        let up: Vec<Tensor> = levels
            .iter()
            .map(|&v| eval::bilinear_resize(g.value(v), 8, 8).unwrap())
            .collect();
        for i in 0..up[0].len() {
            let plain = up[0].data()[i] + up[1].data()[i] + up[2].data()[i];
            assert!((g.value(out).data()[i] - plain).abs() <= 1e-10 * (1.0 + plain.abs()));
        }
    }
}

#[test]
fn variant_uniform_pair_and_symmetry() {
    let k = 0.8;
    let mut g = Graph::new();
    let p3 = g.constant(Tensor::full(&[2, 8, 8], k));
    let p4 = g.constant(Tensor::full(&[2, 4, 4], k));
    let p5 = g.constant(Tensor::full(&[2, 2, 2], 5.0));
    // two-level elimination: λ1F1 + λ2F2 = c1B1 + c2B2 → c2 = λ2, c1 = λ1 + λ2
    let uniform = Strengths(vec![2.0, 1.0]);
    let out = connections::variant(&mut g, &[p3, p4, p5], connections::VariantPair::SmallMedium, &uniform).unwrap();
    assert!(g.value(out).data().iter().all(|v| (v - 2.0 * k).abs() < 1e-14));

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random(&mut rng, &[2, 8, 8]);
    let b = random(&mut rng, &[2, 4, 4]);
    let pa = g.constant(a);
    let pb = g.constant(b.clone());
    let pb2 = g.constant(b);
    let sm = connections::variant(
        &mut g,
        &[pa, pb, pb2],
        connections::VariantPair::SmallMedium,
        &Strengths(vec![4.0, 2.0]),
    )
    .unwrap();
    let sl = connections::variant(
        &mut g,
        &[pa, pb, pb2],
        connections::VariantPair::SmallLarge,
        &Strengths(vec![4.0, 2.0]),
    )
    .unwrap();
    assert_eq!(g.value(sm), g.value(sl));
}
