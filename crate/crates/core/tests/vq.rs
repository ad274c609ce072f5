use natgen_core::data::{Split, SyntheticDataset};
use natgen_core::image::Image;
use natgen_core::vq::{
    detokenize, extract_patches, fit_codebook, kmeans_plus_plus_init, lloyd,
    mean_quantization_error, tokenize, Codebook, FitOptions, TokenMap,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn corpus_patches(count: usize) -> Vec<Vec<f32>> {
    let ds = SyntheticDataset::default();
    ds.images(Split::Train, count)
        .unwrap()
        .iter()
        .flat_map(|(img, _)| extract_patches(img, 4).unwrap())
        .collect()
}

fn codebook() -> &'static Codebook {
    static CB: OnceLock<Codebook> = OnceLock::new();
    CB.get_or_init(|| {
        SyntheticDataset::default()
            .fit_codebook(512, &FitOptions::default())
            .unwrap()
    })
}

/// Textbook Lloyd iterations in f64, with the same empty-cluster rule.
fn lloyd_oracle(patches: &[Vec<f32>], init: &[Vec<f32>], iterations: usize) -> Vec<Vec<f64>> {
    let sq = |a: &[f32], c: &[f64]| {
        a.iter()
            .zip(c)
            .map(|(&x, y)| (x as f64 - y).powi(2))
            .sum::<f64>()
    };
    let mut cents: Vec<Vec<f64>> = init
        .iter()
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    for _ in 0..iterations {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cents.len()];
        let mut dist = vec![0.0; patches.len()];
        for (i, p) in patches.iter().enumerate() {
            let (mut bj, mut bd) = (0, f64::INFINITY);
            for (j, c) in cents.iter().enumerate() {
                let d = sq(p, c);
                if d < bd {
                    (bj, bd) = (j, d);
                }
            }
            members[bj].push(i);
            dist[i] = bd;
        }
        let mut used = Vec::new();
        for (j, m) in members.iter().enumerate() {
            if m.is_empty() {
                let far = (0..patches.len())
                    .filter(|i| !used.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap();
                used.push(far);
                dist[far] = 0.0;
                cents[j] = patches[far].iter().map(|&v| v as f64).collect();
            } else {
                let dim = cents[j].len();
                cents[j] = (0..dim)
                    .map(|c| m.iter().map(|&i| patches[i][c] as f64).sum::<f64>() / m.len() as f64)
                    .collect();
            }
        }
    }
    cents
}

fn oracle_error(patches: &[Vec<f32>], cents: &[Vec<f64>]) -> f64 {
    patches
        .iter()
        .map(|p| {
            cents
                .iter()
                .map(|c| {
                    p.iter()
                        .zip(c)
                        .map(|(&x, y)| (x as f64 - y).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / patches.len() as f64
}

#[test]
fn kmeans_matches_reference_lloyd() {
    let patches = corpus_patches(200);
    for (k, iters) in [(64, 20), (16, 10)] {
        let init = kmeans_plus_plus_init(&patches, k, 0).unwrap();
        let ours = mean_quantization_error(&patches, &lloyd(&patches, init.clone(), iters));
        let reference = oracle_error(&patches, &lloyd_oracle(&patches, &init, iters));
        assert!(
            (ours - reference).abs() <= 1e-6 * reference.max(1.0),
            "K={k}: {ours} vs {reference}"
        );
        if k == 64 {
            assert_eq!(ours, 0.0);
        }
    }
}

#[test]
fn reconstruction_error_is_bounded_by_fit_distance() {
    let opts = FitOptions {
        k: 24,
        ..FitOptions::default()
    };
    let ds = SyntheticDataset::default();
    let fit: Vec<Image> = ds
        .images(Split::Train, 128)
        .unwrap()
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    let cb = fit_codebook(&fit, &opts).unwrap();
    let bound = fit
        .iter()
        .flat_map(|img| extract_patches(img, 4).unwrap())
        .map(|p| cb.nearest(&p).1.sqrt())
        .fold(0.0, f64::max);
    assert!(bound > 0.0);
    for img in &fit {
        let back = detokenize(&tokenize(img, &cb, None).unwrap(), &cb).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!(((a - b).abs() as f64) <= bound + 1e-3);
        }
    }
}

#[test]
fn uniform_image_maps_to_its_nearest_entry_everywhere() {
    let cb = codebook();
    let target = cb.entry(7);
    let mut img = Image::new(32, 32);
    for y in 0..32 {
        for x in 0..32 {
            img.set_pixel(x, y, [target[0], target[1], target[2]]);
        }
    }
    let brute = (0..cb.len())
        .min_by(|&a, &b| {
            let d = |i: usize| {
                cb.entry(i)
                    .chunks(3)
                    .map(|c| {
                        (c[0] - target[0]).powi(2)
                            + (c[1] - target[1]).powi(2)
                            + (c[2] - target[2]).powi(2)
                    })
                    .sum::<f32>()
            };
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        })
        .unwrap();
    let t = tokenize(&img, cb, None).unwrap();
    assert!(t.grid.iter().all(|&i| i == brute));
}

#[test]
fn noisy_image_error_is_bounded_by_its_patch_distance() {
    let cb = codebook();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut img = Image::new(32, 32);
    img.data
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(0.0..255.0));
    let back = detokenize(&tokenize(&img, cb, None).unwrap(), cb).unwrap();
    let a = extract_patches(&img, 4).unwrap();
    let b = extract_patches(&back, 4).unwrap();
    for (pa, pb) in a.iter().zip(&b) {
        let d = cb.nearest(pa).1.sqrt();
        for (x, y) in pa.iter().zip(pb) {
            assert!(((x - y).abs() as f64) <= d + 1e-3);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_grids_round_trip(grid in proptest::collection::vec(0usize..64, 64)) {
        let cb = codebook();
        let t = TokenMap::new(8, 8, grid, Some(1)).unwrap();
        let img = detokenize(&t, cb).unwrap();
        prop_assert_eq!(tokenize(&img, cb, Some(1)).unwrap(), t);
    }
}
