//! Patch-wise vector quantizer: k-means codebook fitting, tokenization and
//! detokenization by lookup.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"NGCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// Fixed dictionary of patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    patch_size: usize,
    dim: usize,
    entries: Vec<f32>,
}

/// Grid of codebook indices for one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenMap {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<usize>,
    pub class_label: Option<usize>,
}

impl TokenMap {
    pub fn new(
        height: usize,
        width: usize,
        grid: Vec<usize>,
        class_label: Option<usize>,
    ) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::Tokenize(format!(
                "grid of {} tokens does not fill {height}x{width}",
                grid.len()
            )));
        }
        Ok(Self {
            height,
            width,
            grid,
            class_label,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        match self.grid.iter().position(|&t| t >= k) {
            Some(p) => Err(Error::Tokenize(format!(
                "token {} at position {p} out of range for codebook of {k}",
                self.grid[p]
            ))),
            None => Ok(()),
        }
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

impl Codebook {
    pub fn new(patch_size: usize, entries: Vec<Vec<f32>>) -> Result<Self> {
        let dim = patch_size * patch_size * Image::CHANNELS;
        if entries.is_empty() {
            return Err(Error::Fit("codebook needs at least one entry".into()));
        }
        let mut flat = Vec::with_capacity(entries.len() * dim);
        for (i, e) in entries.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::Fit(format!(
                    "entry {i} has dimension {} (expected {dim})",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Fit(format!("entry {i} is not finite")));
            }
            flat.extend_from_slice(e);
        }
        let cb = Self {
            patch_size,
            dim,
            entries: flat,
        };
        let mut seen = HashSet::new();
        for i in 0..cb.len() {
            let key: Vec<u32> = cb.entry(i).iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::Fit(format!("entry {i} duplicates an earlier entry")));
            }
        }
        Ok(cb)
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.len() {
            let d = squared_distance(patch, self.entry(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        for v in [
            CODEBOOK_VERSION,
            self.len() as u32,
            self.dim as u32,
            self.patch_size as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.entries {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file (bad magic)".into()));
        }
        let mut u32s = [0u32; 4];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, k, dim, patch] = u32s;
        if version != CODEBOOK_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CODEBOOK_VERSION,
            });
        }
        let (k, dim, patch) = (k as usize, dim as usize, patch as usize);
        if dim != patch * patch * Image::CHANNELS {
            return Err(Error::Format(format!(
                "codebook dim {dim} inconsistent with patch size {patch}"
            )));
        }
        let mut entries = Vec::with_capacity(k);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..k {
            r.read_exact(&mut buf)?;
            entries.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Self::new(patch, entries)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Flattened `patch × patch × 3` vectors in grid order.
pub fn extract_patches(image: &Image, patch: usize) -> Result<Vec<Vec<f32>>> {
    if patch == 0 || image.width % patch != 0 || image.height % patch != 0 {
        return Err(Error::Tokenize(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            image.width, image.height
        )));
    }
    let (gw, gh) = (image.width / patch, image.height / patch);
    let mut out = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut p = Vec::with_capacity(patch * patch * 3);
            for y in 0..patch {
                let start = ((gy * patch + y) * image.width + gx * patch) * 3;
                p.extend_from_slice(&image.data[start..start + patch * 3]);
            }
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub k: usize,
    pub patch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k: 64,
            patch_size: 4,
            iterations: 20,
            seed: 0,
        }
    }
}

fn distinct_patches(patches: &[Vec<f32>]) -> Vec<&[f32]> {
    let mut seen = HashSet::new();
    patches
        .iter()
        .filter(|p| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .map(|p| p.as_slice())
        .collect()
}

/// k-means++ seeding over the distinct patches of the corpus.
pub fn kmeans_plus_plus_init(patches: &[Vec<f32>], k: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    let distinct = distinct_patches(patches);
    if distinct.len() < k {
        return Err(Error::Fit(format!(
            "corpus has {} distinct patches, fewer than K = {k}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f32>> = vec![distinct[rng.gen_range(0..distinct.len())].to_vec()];
    let mut dist: Vec<f64> = distinct
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = dist.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            return Err(Error::Fit(
                "could not find a new distinct seed patch".into(),
            ));
        };
        let c = distinct[pick].to_vec();
        for (d, p) in dist.iter_mut().zip(&distinct) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Lloyd iterations from the given initial centroids. Empty clusters are
/// re-seeded from the patch farthest from its assigned centroid.
pub fn lloyd(
    patches: &[Vec<f32>],
    mut centroids: Vec<Vec<f32>>,
    iterations: usize,
) -> Vec<Vec<f32>> {
    let dim = centroids[0].len();
    let k = centroids.len();
    let mut assign = vec![0usize; patches.len()];
    let mut dists = vec![0f64; patches.len()];
    for _ in 0..iterations {
        for (i, p) in patches.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = squared_distance(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assign[i] = best.0;
            dists[i] = best.1;
        }
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in patches.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j]
                    .iter()
                    .map(|&s| (s / counts[j] as f64) as f32)
                    .collect();
            } else {
                // farthest patch not already used for another empty cluster
                let far = (0..patches.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.insert(far);
                dists[far] = 0.0;
                centroids[j] = patches[far].clone();
            }
        }
    }
    centroids
}

/// Mean of the squared distance from each patch to its nearest centroid.
pub fn mean_quantization_error(patches: &[Vec<f32>], centroids: &[Vec<f32>]) -> f64 {
    let total: f64 = patches
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| squared_distance(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / patches.len().max(1) as f64
}

pub fn fit_codebook(images: &[Image], opts: &FitOptions) -> Result<Codebook> {
    let mut patches = Vec::new();
    for img in images {
        patches.extend(extract_patches(img, opts.patch_size)?);
    }
    let init = kmeans_plus_plus_init(&patches, opts.k, opts.seed)?;
    let centroids = lloyd(&patches, init, opts.iterations);
    Codebook::new(opts.patch_size, centroids)
}

pub fn tokenize(
    image: &Image,
    codebook: &Codebook,
    class_label: Option<usize>,
) -> Result<TokenMap> {
    let p = codebook.patch_size();
    let grid = extract_patches(image, p)?
        .iter()
        .map(|patch| codebook.nearest(patch).0)
        .collect();
    TokenMap::new(image.height / p, image.width / p, grid, class_label)
}

pub fn detokenize(tokens: &TokenMap, codebook: &Codebook) -> Result<Image> {
    tokens.validate(codebook.len())?;
    let p = codebook.patch_size();
    let mut img = Image::new(tokens.width * p, tokens.height * p);
    for gy in 0..tokens.height {
        for gx in 0..tokens.width {
            let e = codebook.entry(tokens.grid[gy * tokens.width + gx]);
            for y in 0..p {
                let start = ((gy * p + y) * img.width + gx * p) * 3;
                img.data[start..start + p * 3].copy_from_slice(&e[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_patch_image(colors: &[[f32; 3]], grid_w: usize, patch: usize) -> Image {
        let grid_h = colors.len().div_ceil(grid_w);
        let mut img = Image::new(grid_w * patch, grid_h * patch);
        for (i, c) in colors.iter().enumerate() {
            let (gx, gy) = (i % grid_w, i / grid_w);
            for y in 0..patch {
                for x in 0..patch {
                    img.set_pixel(gx * patch + x, gy * patch + y, *c);
                }
            }
        }
        img
    }

    fn palette(k: usize) -> Vec<[f32; 3]> {
        (0..k)
            .map(|i| [(i * 37 % 256) as f32, (i * 91 % 256) as f32, (i * 7) as f32])
            .collect()
    }

    #[test]
    fn exact_k_distinct_patches_are_recovered() {
        let colors = palette(8);
        let img = constant_patch_image(&colors, 4, 2);
        let cb = fit_codebook(
            &[img.clone()],
            &FitOptions {
                k: 8,
                patch_size: 2,
                iterations: 5,
                seed: 9,
            },
        )
        .unwrap();
        let mut got: Vec<Vec<u32>> = (0..8)
            .map(|i| cb.entry(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut want: Vec<Vec<u32>> = extract_patches(&img, 2)
            .unwrap()
            .iter()
            .map(|p| p.iter().map(|v| v.to_bits()).collect())
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        let patches = extract_patches(&img, 2).unwrap();
        let cents: Vec<Vec<f32>> = (0..8).map(|i| cb.entry(i).to_vec()).collect();
        assert_eq!(mean_quantization_error(&patches, &cents), 0.0);
    }

    #[test]
    fn single_centroid_is_mean_patch() {
        let colors = palette(6);
        let img = constant_patch_image(&colors, 3, 2);
        let cb = fit_codebook(
            &[img.clone()],
            &FitOptions {
                k: 1,
                patch_size: 2,
                iterations: 3,
                seed: 0,
            },
        )
        .unwrap();
        let patches = extract_patches(&img, 2).unwrap();
        for d in 0..cb.dim() {
            let mean = patches.iter().map(|p| p[d] as f64).sum::<f64>() / patches.len() as f64;
            assert!((cb.entry(0)[d] as f64 - mean).abs() < 1e-4);
        }
    }

    #[test]
    fn too_few_distinct_patches_is_a_fit_error() {
        let img = constant_patch_image(&[[1.0, 2.0, 3.0]; 4], 2, 2);
        let err = fit_codebook(
            &[img],
            &FitOptions {
                k: 2,
                patch_size: 2,
                iterations: 1,
                seed: 0,
            },
        );
        assert!(matches!(err, Err(Error::Fit(_))));
    }

    #[test]
    fn uniform_image_maps_to_nearest_entry() {
        let colors = palette(10);
        let entries: Vec<Vec<f32>> = colors.iter().map(|c| c.repeat(4)).collect();
        let cb = Codebook::new(2, entries).unwrap();
        // a color closest to entry 7 by brute-force search
        let target = [colors[7][0] + 3.0, colors[7][1] - 2.0, colors[7][2] + 1.0];
        let img = constant_patch_image(&[target; 4], 2, 2);
        let brute = (0..10)
            .min_by(|&a, &b| {
                squared_distance(&target.repeat(4), cb.entry(a))
                    .total_cmp(&squared_distance(&target.repeat(4), cb.entry(b)))
            })
            .unwrap();
        assert_eq!(brute, 7);
        let tm = tokenize(&img, &cb, None).unwrap();
        assert!(tm.grid.iter().all(|&t| t == 7));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::new(1, vec![vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(cb.nearest(&[1.0, 1.0, 1.0]).0, 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cb = Codebook::new(4, vec![vec![0.0; 48]]).unwrap();
        assert!(tokenize(&Image::new(6, 8), &cb, None).is_err());
    }

    #[test]
    fn zero_grid_tiles_entry_zero_and_bad_index_errors() {
        let cb = Codebook::new(2, vec![vec![5.0; 12], vec![9.0; 12]]).unwrap();
        let tm = TokenMap::new(2, 3, vec![0; 6], None).unwrap();
        let img = detokenize(&tm, &cb).unwrap();
        assert!(img.data.iter().all(|&v| v == 5.0));
        let bad = TokenMap::new(1, 1, vec![2], None).unwrap();
        assert!(detokenize(&bad, &cb).is_err());
    }

    #[test]
    fn codebook_file_round_trip_and_version_check() {
        let cb = Codebook::new(2, vec![vec![0.25; 12], vec![-1.5; 12]]).unwrap();
        let mut buf = Vec::new();
        cb.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], CODEBOOK_MAGIC);
        assert_eq!(Codebook::read(&buf[..]).unwrap(), cb);
        buf[4] = 9;
        assert!(matches!(
            Codebook::read(&buf[..]),
            Err(Error::Version { found: 9, .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn detokenize_tokenize_is_identity(grid in proptest::collection::vec(0usize..12, 16)) {
                let entries: Vec<Vec<f32>> = (0..12).map(|i| (0..12).map(|j| ((i * 31 + j * 7) % 97) as f32 + 0.5 * i as f32).collect()).collect();
                let cb = Codebook::new(2, entries).unwrap();
                let tm = TokenMap::new(4, 4, grid, Some(1)).unwrap();
                let img = detokenize(&tm, &cb).unwrap();
                prop_assert_eq!(tokenize(&img, &cb, Some(1)).unwrap(), tm);
            }

            #[test]
            fn chosen_entry_is_optimal(patch in proptest::collection::vec(0.0f32..255.0, 12)) {
                let entries: Vec<Vec<f32>> = (0..9).map(|i| vec![(i * 29) as f32; 12]).collect();
                let cb = Codebook::new(2, entries).unwrap();
                let (best, d) = cb.nearest(&patch);
                for j in 0..cb.len() {
                    prop_assert!(d <= squared_distance(&patch, cb.entry(j)));
                }
                prop_assert!(best < cb.len());
            }
        }
    }
}
