//! Procedurally generated desk-scale datasets.
//!
//! `toy_digits` stands in for an MNIST-like sensitive set (8x8 grey glyphs,
//! 10 classes), `toy_public` for a broader public set (20 glyph classes, the
//! first ten shared with the digits), and `three_gaussians` is a 2-D mixture
//! used by the kernel and voting synthesizers.

use super::{Dataset, SplitManifest};
use crate::rng::SeededRng;

/// Train/val/test fractions used for the bundled fixtures.
pub const FIXTURE_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

// 5x7 bitmaps, one string per row.
const GLYPHS: [[&str; 7]; 20] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
];

fn render(glyph: usize, rng: &mut SeededRng, noise: f64) -> Vec<f64> {
    let mut img = vec![0.0; 64];
    let dr = rng.below(2) as usize;
    let dc = 1 + rng.below(2) as usize;
    let ink = 0.75 + 0.25 * rng.uniform();
    for (r, row) in GLYPHS[glyph].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                img[(r + dr) * 8 + c + dc] = ink;
            }
        }
    }
    for v in &mut img {
        *v = (*v + noise * rng.normal()).clamp(0.0, 1.0);
    }
    img
}

fn glyph_set(n: usize, classes: usize, seed: u64, stream: u64, noise: f64) -> Dataset {
    let mut rng = SeededRng::new(seed, stream);
    let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    rng.shuffle(&mut labels);
    let images: Vec<f32> = labels
        .iter()
        .flat_map(|&l| render(l as usize, &mut rng, noise))
        .map(|v| v as f32)
        .collect();
    Dataset::new(images, [8, 8, 1], labels, classes, SplitManifest::default())
        .expect("generated glyphs are valid")
}

/// 8x8x1 digit glyphs, 10 balanced classes, random shift, ink level and noise.
pub fn toy_digits(n: usize, seed: u64) -> Dataset {
    glyph_set(n, 10, seed, 0xd161_7500, 0.08)
}

/// 8x8x1 glyphs over 20 classes: digits 0-9 then ten letters.
pub fn toy_public(n: usize, seed: u64) -> Dataset {
    glyph_set(n, 20, seed, 0x9ab1_1c00, 0.12)
}

/// Points in `[0,1]^2` from three isotropic Gaussians (std 0.05), labeled by
/// component. Stored as 1x2x1 images.
pub fn three_gaussians(n: usize, seed: u64) -> Dataset {
    const CENTERS: [[f64; 2]; 3] = [[0.2, 0.25], [0.75, 0.3], [0.5, 0.8]];
    let mut rng = SeededRng::new(seed, 0x3_9a55);
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 3;
        for c in CENTERS[k] {
            images.push((c + 0.05 * rng.normal()).clamp(0.0, 1.0) as f32);
        }
        labels.push(k as u32);
    }
    Dataset::new(images, [1, 2, 1], labels, 3, SplitManifest::default()).expect("valid mixture")
}
