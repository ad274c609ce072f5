//! Seeded synthetic image corpus: one solid-colored shape per image on a
//! solid background, drawn on the patch grid so every patch is a single
//! palette color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::vq::{tokenize, Codebook, FitOptions, TokenMap};

pub const SHAPE_FAMILIES: usize = 10;
pub const PALETTE_SIZE: usize = 64;

/// The 4×4×4 RGB cube at levels {0, 85, 170, 255}.
pub fn palette() -> Vec<[f32; 3]> {
    let levels = [0.0, 85.0, 170.0, 255.0];
    let mut out = Vec::with_capacity(PALETTE_SIZE);
    for &r in &levels {
        for &g in &levels {
            for &b in &levels {
                out.push([r, g, b]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub grid: usize,
    pub patch: usize,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            num_classes: 10,
            grid: 8,
            patch: 4,
            seed: 0,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Shape membership in coordinates normalized by the shape's center and radius.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => au.max(av) <= 1.0,
        1 => u * u + v * v <= 1.0,
        2 => (-1.0..=1.0).contains(&v) && au <= (v + 1.0) / 2.0,
        3 => (au <= 0.35 && av <= 1.0) || (av <= 0.35 && au <= 1.0),
        4 => (0.55..=1.1).contains(&(u * u + v * v).sqrt()),
        5 => av <= 0.4 && au <= 1.3,
        6 => au <= 0.4 && av <= 1.3,
        7 => au + av <= 1.0,
        8 => ((-1.0..=-0.3).contains(&u) && av <= 1.0) || ((0.3..=1.0).contains(&v) && au <= 1.0),
        _ => (au - av).abs() <= 0.35 && au <= 1.0,
    }
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPE_FAMILIES {
            return Err(Error::Config(format!(
                "synthetic dataset supports 1..={SHAPE_FAMILIES} classes, got {}",
                self.num_classes
            )));
        }
        if self.grid < 4 || self.patch == 0 {
            return Err(Error::Config(
                "synthetic grid must be at least 4 cells and patch positive".into(),
            ));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch
    }

    fn rng(&self, class: usize, index: u64, split: Split) -> ChaCha8Rng {
        let tag = match split {
            Split::Train => 0x1111,
            Split::Val => 0x2222,
        };
        let s = splitmix(
            self.seed ^ splitmix(class as u64 ^ (tag << 32)) ^ splitmix(index.wrapping_add(tag)),
        );
        ChaCha8Rng::seed_from_u64(s)
    }

    /// Palette index of every grid cell for sample `(class, index)`.
    pub fn cell_colors(&self, class: usize, index: u64, split: Split) -> Result<Vec<usize>> {
        self.validate()?;
        if class >= self.num_classes {
            return Err(Error::Config(format!("class {class} out of range")));
        }
        let mut rng = self.rng(class, index, split);
        let g = self.grid as f64;
        let cx = rng.gen_range(0.25 * g..0.75 * g);
        let cy = rng.gen_range(0.25 * g..0.75 * g);
        let r = rng.gen_range(0.19 * g..0.375 * g);
        let fg = rng.gen_range(0..PALETTE_SIZE);
        let bg = (fg + rng.gen_range(1..PALETTE_SIZE)) % PALETTE_SIZE;
        let n = self.grid;
        let mut cells: Vec<usize> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                if inside(class, (x - cx) / r, (y - cy) / r) {
                    fg
                } else {
                    bg
                }
            })
            .collect();
        if !cells.contains(&fg) {
            let c = (cy.floor() as usize).min(n - 1) * n + (cx.floor() as usize).min(n - 1);
            cells[c] = fg;
        }
        Ok(cells)
    }

    pub fn image(&self, class: usize, index: u64, split: Split) -> Result<Image> {
        let cells = self.cell_colors(class, index, split)?;
        let pal = palette();
        let (n, p) = (self.grid, self.patch);
        let mut img = Image::new(n * p, n * p);
        for (i, &c) in cells.iter().enumerate() {
            let (gx, gy) = (i % n, i / n);
            for y in 0..p {
                for x in 0..p {
                    img.set_pixel(gx * p + x, gy * p + y, pal[c]);
                }
            }
        }
        Ok(img)
    }

    /// Sample `i` of a split has class `i mod C`.
    pub fn images(&self, split: Split, count: usize) -> Result<Vec<(Image, usize)>> {
        (0..count)
            .map(|i| {
                let class = i % self.num_classes;
                Ok((self.image(class, i as u64, split)?, class))
            })
            .collect()
    }

    pub fn fit_codebook(&self, images: usize, opts: &FitOptions) -> Result<Codebook> {
        let imgs: Vec<Image> = self
            .images(Split::Train, images)?
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        crate::vq::fit_codebook(&imgs, opts)
    }

    pub fn token_maps(
        &self,
        codebook: &Codebook,
        split: Split,
        count: usize,
    ) -> Result<Vec<TokenMap>> {
        self.images(split, count)?
            .iter()
            .map(|(img, c)| tokenize(img, codebook, Some(*c)))
            .collect()
    }
}
