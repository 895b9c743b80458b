use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spliceradar::data::Image;
use spliceradar::localizer::*;
use spliceradar::network::ModelParams;

fn two_clusters(n_each: usize, sigma: f64, seed: u64) -> (Features, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (label, centre) in [(0usize, 0.0), (1, 10.0)] {
        for _ in 0..n_each {
            rows.push(vec![centre + noise.sample(&mut rng)]);
            truth.push(label);
        }
    }
    (Features::from_rows(&rows).unwrap(), truth)
}

#[test]
fn tiling_examples() {
    let g = PatchGrid::new(72, 72, 48).unwrap();
    assert_eq!(g.positions().collect::<Vec<_>>(), vec![(0, 0)]);
    let g = PatchGrid::new(120, 120, 48).unwrap();
    assert_eq!(g.xs, vec![0, 48]);
    assert_eq!(g.len(), 4);
    let g = PatchGrid::new(100, 100, 48).unwrap();
    assert_eq!(g.xs, vec![0, 28]);
    assert_eq!(g.ys, vec![0, 28]);
    let g = PatchGrid::new(120, 120, 24).unwrap();
    assert_eq!(g.xs, vec![0, 24, 48]);
    assert!(PatchGrid::new(71, 100, 48).is_err());
    assert!(PatchGrid::new(100, 100, 0).is_err());
    assert!(PatchGrid::new(100, 100, 73).is_err());
}

#[test]
fn tiling_positions_fit_and_increase() {
    for dim in 72..300 {
        for step in [1, 7, 24, 36, 48, 60, 72] {
            let p = axis_positions(dim, step);
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            assert!(p.iter().all(|&x| x + PATCH <= dim));
            assert_eq!(*p.last().unwrap() + PATCH, dim, "dim {dim} step {step}");
        }
    }
}

#[test]
fn tile_image_copies_patch_pixels() {
    let (w, h) = (100, 90);
    let data: Vec<f32> = (0..w * h * 3).map(|i| (i % 251) as f32 / 251.0).collect();
    let img = Image::new(w, h, 3, data.clone()).unwrap();
    let (grid, patches) = tile_image(&img, 48).unwrap();
    assert_eq!(patches.shape(), &[4, 72, 72, 3]);
    let (x, y) = grid.positions().nth(3).unwrap();
    assert_eq!((x, y), (28, 18));
    let p = &patches.data()[3 * 72 * 72 * 3..];
    assert_eq!(p[0], data[(y * w + x) * 3]);
    let (r, c, ch) = (71, 71, 2);
    assert_eq!(
        p[(r * 72 + c) * 3 + ch],
        data[((y + r) * w + x + c) * 3 + ch]
    );
    let gray = Image::filled(100, 100, 1, 0.5).unwrap();
    assert!(tile_image(&gray, 48).is_err());
}

#[test]
fn features_are_batch_invariant_and_deterministic() {
    let params = ModelParams::<f32>::build(4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut data: Vec<f32> = (0..72 * 120 * 3).map(|_| rng.gen()).collect();
    // Make the two left patches identical by copying columns.
    for y in 0..72 {
        for x in 0..72 {
            for c in 0..3 {
                data[(y * 120 + x + 48) * 3 + c] = data[(y * 120 + x) * 3 + c];
            }
        }
    }
    let img = Image::new(120, 72, 3, data).unwrap();
    let (_, patches) = tile_image(&img, 48).unwrap();
    let batched = extract_features(&patches, &params, 8).unwrap();
    let single = extract_features(&patches, &params, 1).unwrap();
    assert_eq!((batched.rows(), batched.dim()), (2, 100));
    for i in 0..2 {
        for (a, b) in batched.row(i).iter().zip(single.row(i)) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }
    assert_eq!(batched.row(0), batched.row(1));
}

#[test]
fn recovers_two_separated_clusters() {
    let (x, truth) = two_clusters(100, 0.1, 11);
    let cfg = EmConfig {
        restarts: 20,
        seed: 1,
        ..Default::default()
    };
    let m = gmm_em_fit(&x, &cfg).unwrap();
    let (lo, hi) = if m.means[0][0] < m.means[1][0] {
        (0, 1)
    } else {
        (1, 0)
    };
    assert!(m.means[lo][0].abs() < 0.1);
    assert!((m.means[hi][0] - 10.0).abs() < 0.1);
    assert!((m.weights[0] - 0.5).abs() < 0.05);
    let (resp, _) = e_step(&m, &x);
    let correct = resp
        .iter()
        .zip(&truth)
        .filter(|(r, &t)| (if r[hi] > 0.5 { 1 } else { 0 }) == t)
        .count();
    assert!(correct as f64 / truth.len() as f64 >= 0.99);
    for r in &resp {
        assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn identical_features_collapse() {
    let x = Features::from_rows(&vec![vec![3.0, -1.0]; 10]).unwrap();
    let m = gmm_em_fit(
        &x,
        &EmConfig {
            restarts: 3,
            ..Default::default()
        },
    )
    .unwrap();
    for k in 0..2 {
        assert_eq!(m.means[k], vec![3.0, -1.0]);
        assert!(m.variances[k].iter().all(|&v| v == VARIANCE_FLOOR));
        assert!((m.weights[k] - 0.5).abs() < 1e-12);
    }
    let (resp, _) = e_step(&m, &x);
    assert!(resp
        .iter()
        .all(|r| (r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12));
}

#[test]
fn too_few_patches_is_an_error() {
    let x = Features::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
    let err = gmm_em_fit(&x, &EmConfig::default()).unwrap_err();
    assert!(err.to_string().contains("image too small for segmentation"));
}

/// Plain 1-D EM written without the library's helpers.
fn reference_em(
    x: &[f64],
    mut w: [f64; 2],
    mut mu: [f64; 2],
    mut var: [f64; 2],
    tol: f64,
    max_iter: usize,
) -> f64 {
    let dens = |v: f64, m: f64, s: f64| {
        (-(v - m).powi(2) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt()
    };
    let ll_of = |w: &[f64; 2], mu: &[f64; 2], var: &[f64; 2]| -> f64 {
        x.iter()
            .map(|&v| (w[0] * dens(v, mu[0], var[0]) + w[1] * dens(v, mu[1], var[1])).ln())
            .sum()
    };
    let mut ll = ll_of(&w, &mu, &var);
    for _ in 0..max_iter {
        let g: Vec<f64> = x
            .iter()
            .map(|&v| {
                let a = w[0] * dens(v, mu[0], var[0]);
                a / (a + w[1] * dens(v, mu[1], var[1]))
            })
            .collect();
        for k in 0..2 {
            let r: Vec<f64> = g
                .iter()
                .map(|&p| if k == 0 { p } else { 1.0 - p })
                .collect();
            let nk: f64 = r.iter().sum();
            mu[k] = r.iter().zip(x).map(|(r, v)| r * v).sum::<f64>() / nk;
            var[k] = (r
                .iter()
                .zip(x)
                .map(|(r, v)| r * (v - mu[k]).powi(2))
                .sum::<f64>()
                / nk)
                .max(1e-6);
            w[k] = nk / x.len() as f64;
        }
        let new = ll_of(&w, &mu, &var);
        let done = (new - ll).abs() <= tol * ll.abs();
        ll = new;
        if done {
            break;
        }
    }
    ll
}

#[test]
fn matches_reference_em() {
    let xs = [0.3, -1.2, 0.8, 2.5, 3.1, 2.9, 0.1, 4.0, -0.5, 3.6, 1.7, 2.2];
    let x = Features::from_rows(&xs.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
    let init = GmmModel {
        weights: [0.5, 0.5],
        means: [vec![0.3], vec![3.1]],
        variances: [vec![2.0], vec![2.0]],
        log_likelihood: f64::NEG_INFINITY,
        iterations: 0,
    };
    let (m, _) = em_from(init, &x, 1e-10, 500);
    let r = reference_em(&xs, [0.5, 0.5], [0.3, 3.1], [2.0, 2.0], 1e-10, 500);
    assert!(
        (m.log_likelihood - r).abs() < 1e-6,
        "{} vs {r}",
        m.log_likelihood
    );
}

#[test]
fn log_likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let n = rng.gen_range(4..40);
        let d = rng.gen_range(1..6);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = Features::new(n, d, data).unwrap();
        let cfg = EmConfig {
            restarts: 10,
            seed: rng.gen(),
            ..Default::default()
        };
        let (best, hist) = gmm_em_fit_traced(&x, &cfg).unwrap();
        for h in &hist {
            assert!(h.windows(2).all(|w| w[1] - w[0] >= -1e-9));
            assert!(best.log_likelihood >= *h.last().unwrap());
        }
        assert!((best.weights[0] + best.weights[1] - 1.0).abs() < 1e-9);
        assert!(best
            .variances
            .iter()
            .flatten()
            .all(|&v| v >= VARIANCE_FLOOR));
    }
}

#[test]
fn fit_is_deterministic_per_seed() {
    let (x, _) = two_clusters(30, 1.0, 2);
    let cfg = EmConfig {
        restarts: 8,
        seed: 42,
        ..Default::default()
    };
    assert_eq!(gmm_em_fit(&x, &cfg).unwrap(), gmm_em_fit(&x, &cfg).unwrap());
}

fn model_with_weights(w: [f64; 2]) -> GmmModel {
    GmmModel {
        weights: w,
        means: [vec![0.0], vec![1.0]],
        variances: [vec![1.0], vec![1.0]],
        log_likelihood: 0.0,
        iterations: 0,
    }
}

#[test]
fn tampered_component_rules() {
    assert_eq!(tampered_component(&model_with_weights([0.9, 0.1]), &[]), 1);
    assert_eq!(tampered_component(&model_with_weights([0.1, 0.9]), &[]), 0);
    let eq = model_with_weights([0.5, 0.5]);
    assert_eq!(tampered_component(&eq, &[[0.7, 0.3], [0.6, 0.4]]), 1);
    assert_eq!(tampered_component(&eq, &[[0.3, 0.7], [0.4, 0.6]]), 0);
    assert_eq!(tampered_component(&eq, &[[0.5, 0.5]]), 0);
}

#[test]
fn responsibility_map_has_grid_shape() {
    let grid = PatchGrid::new(168, 120, 48).unwrap();
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| vec![if i == 2 { 1.0 } else { 0.0 }])
        .collect();
    let x = Features::from_rows(&rows).unwrap();
    let m = GmmModel {
        weights: [0.8, 0.2],
        means: [vec![0.0], vec![1.0]],
        variances: [vec![0.01], vec![0.01]],
        log_likelihood: 0.0,
        iterations: 0,
    };
    let map = responsibilities_to_map(&m, &x, &grid).unwrap();
    assert_eq!((map.rows, map.cols), (grid.rows(), grid.cols()));
    assert!(map.get(0, 2) > 0.99);
    assert!(map.get(1, 0) < 0.01);
}

fn grid(rows: usize, cols: usize, values: Vec<f64>) -> GridMap {
    GridMap::new(rows, cols, values).unwrap()
}

#[test]
fn opening_examples() {
    let c = grid(4, 5, vec![0.3; 20]);
    assert_eq!(clean_map(&c, 2, Morphology::Opening), c);
    let mut v = vec![0.1; 49];
    v[24] = 0.9;
    let spike = grid(7, 7, v);
    assert_eq!(
        clean_map(&spike, 2, Morphology::Opening).values,
        vec![0.1; 49]
    );
    assert_eq!(clean_map(&spike, 2, Morphology::None), spike);
}

#[test]
fn opening_idempotent_and_anti_extensive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let m = grid(r, c, (0..r * c).map(|_| rng.gen()).collect());
        let o = clean_map(&m, 2, Morphology::Opening);
        assert!(o.values.iter().zip(&m.values).all(|(a, b)| a <= b));
        assert_eq!(clean_map(&o, 2, Morphology::Opening), o);
        let cl = clean_map(&m, 2, Morphology::Closing);
        assert!(cl.values.iter().zip(&m.values).all(|(a, b)| a >= b));
    }
}

#[test]
fn upsampling_examples() {
    let c = grid(2, 3, vec![0.4; 6]);
    assert!(upsample_map(&c, 7, 9)
        .unwrap()
        .iter()
        .all(|&v| (v - 0.4).abs() < 1e-15));
    let m = grid(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    assert_eq!(upsample_map(&m, 2, 3).unwrap(), m.values);
    assert!(upsample_map(&m, 1, 3).is_err());

    // Cell centres of a 2x2 map on a 4x4 target sit at pixel 0.5 and 2.5.
    let m = grid(2, 2, vec![0.0, 1.0, 0.5, 0.25]);
    let out = upsample_map(&m, 4, 4).unwrap();
    let axis = |p: f64| -> (usize, usize, f64) {
        let q = ((p - 0.5) / 2.0).clamp(0.0, 1.0);
        (0, 1, q)
    };
    for y in 0..4 {
        for x in 0..4 {
            let (_, _, ty) = axis(y as f64);
            let (_, _, tx) = axis(x as f64);
            let want =
                (1.0 - ty) * ((1.0 - tx) * 0.0 + tx * 1.0) + ty * ((1.0 - tx) * 0.5 + tx * 0.25);
            assert!((out[y * 4 + x] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn raw_map_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.srmap");
    write_raw_map(&p, 3, 2, &[0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..6], b"SRMAP1");
    assert_eq!(&bytes[6..14], &[3, 0, 0, 0, 2, 0, 0, 0]);
    let (w, h, v) = read_raw_map(&p).unwrap();
    assert_eq!((w, h), (3, 2));
    assert_eq!(v, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
    std::fs::write(&p, &bytes[..20]).unwrap();
    assert!(read_raw_map(&p).is_err());
}

#[test]
fn localize_is_deterministic_and_image_sized() {
    let params = ModelParams::<f32>::build(4, 1).unwrap();
    let data = spliceradar::data::procedural_image(150, 130, 4).unwrap();
    let cfg = LocalizeConfig {
        em: EmConfig {
            restarts: 5,
            seed: 7,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = localize(&data, &params, &cfg).unwrap();
    let b = localize(&data, &params, &cfg).unwrap();
    assert_eq!(a.map, b.map);
    assert_eq!(a.map.pixels.len(), 150 * 130);
    assert!(a.map.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(cfg.step, 48);
}
