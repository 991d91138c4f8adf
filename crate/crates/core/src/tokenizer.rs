//! Frame tokenization: a seeded k-means patch quantizer.
//!
//! Frames are cut into non-overlapping patches; each patch maps to the
//! nearest codebook centroid by squared distance (ties to the lowest
//! index). Fitting runs weighted k-means over the distinct patches with
//! k-means++ initialization and a fixed iteration count, so the same
//! inputs and seed always produce the same codebook.

use crate::envs::Frame;
use crate::error::{Error, Result};
use crate::util::rng_stream;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VPCB";
const VERSION: u32 = 1;

/// Default patch edge: 4x4 patches on 32x32 frames give an 8x8 token grid.
pub const PATCH: usize = 4;
/// Default requested codebook size.
pub const DEFAULT_VOCAB: usize = 64;
/// Lloyd iterations used by `fit_codebook`.
pub const KMEANS_ITERS: usize = 25;

/// Fitted patch codebook.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// Effective vocabulary size (may be smaller than requested).
    pub vocab: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// vocab x (patch_h * patch_w * 3), pixel scale [0,1].
    pub centroids: Vec<f32>,
    pub fit_seed: u64,
    /// Requested V; `shrunk` is set when fewer distinct patches existed.
    pub requested_vocab: usize,
    pub shrunk: bool,
    /// Mean squared reconstruction error on the fitting sample.
    pub fit_mse: f32,
}

/// Discrete token grid for a video plus its task id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// t * z_h * z_w token ids, frame-major then raster order.
    pub tokens: Vec<u16>,
    pub t: usize,
    pub z_h: usize,
    pub z_w: usize,
    pub task_id: u32,
}

impl TokenSequence {
    pub fn tokens_per_frame(&self) -> usize {
        self.z_h * self.z_w
    }

    pub fn frame(&self, t: usize) -> &[u16] {
        let z = self.tokens_per_frame();
        &self.tokens[t * z..(t + 1) * z]
    }

    /// New sequence holding only frames [start, end).
    pub fn slice_frames(&self, start: usize, end: usize) -> TokenSequence {
        let z = self.tokens_per_frame();
        TokenSequence {
            tokens: self.tokens[start * z..end * z].to_vec(),
            t: end - start,
            z_h: self.z_h,
            z_w: self.z_w,
            task_id: self.task_id,
        }
    }
}

impl Codebook {
    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.patch_len()..(i + 1) * self.patch_len()]
    }

    pub fn grid_dims(&self, frame_h: usize, frame_w: usize) -> (usize, usize) {
        (frame_h / self.patch_h, frame_w / self.patch_w)
    }
}

/// Cut a frame into row-major patches, pixel scale [0,1].
fn patches_of(frame: &Frame, ph: usize, pw: usize) -> Result<Vec<Vec<f32>>> {
    if frame.h % ph != 0 || frame.w % pw != 0 {
        return Err(Error::input(format!(
            "frame {}x{} not divisible by patch {}x{}",
            frame.h, frame.w, ph, pw
        )));
    }
    let mut out = Vec::with_capacity((frame.h / ph) * (frame.w / pw));
    for gy in 0..frame.h / ph {
        for gx in 0..frame.w / pw {
            let mut p = Vec::with_capacity(ph * pw * 3);
            for y in 0..ph {
                for x in 0..pw {
                    let c = frame.get(gy * ph + y, gx * pw + x);
                    p.extend(c.iter().map(|&v| v as f32 / 255.0));
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties break to the lowest index.
fn nearest(centroids: &[f32], dim: usize, p: &[f32]) -> (usize, f32) {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Fit a codebook on a sample of frames with weighted k-means.
///
/// If the sample holds fewer distinct patches than `vocab`, the codebook
/// shrinks to that count and `shrunk` is set in the result.
pub fn fit_codebook(frames: &[Frame], vocab: usize, iters: usize, seed: u64) -> Result<Codebook> {
    if vocab < 2 {
        return Err(Error::input("vocab must be >= 2"));
    }
    if frames.is_empty() {
        return Err(Error::input("no frames to fit on"));
    }
    let (ph, pw) = (PATCH, PATCH);
    let dim = ph * pw * 3;

    // weight distinct patches by multiplicity; ordering via bit patterns
    // keeps everything deterministic
    let mut counts: BTreeMap<Vec<u32>, (Vec<f32>, f64)> = BTreeMap::new();
    for frame in frames {
        for p in patches_of(frame, ph, pw)? {
            let key: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
            counts.entry(key).or_insert_with(|| (p, 0.0)).1 += 1.0;
        }
    }
    let points: Vec<Vec<f32>> = counts.values().map(|(p, _)| p.clone()).collect();
    let weights: Vec<f64> = counts.values().map(|(_, w)| *w).collect();
    let distinct = points.len();
    let (k, shrunk) = if distinct < vocab { (distinct, true) } else { (vocab, false) };

    // k-means++ seeding over the weighted points
    let mut rng = rng_stream(seed, "tokenizer.fit");
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let total_w: f64 = weights.iter().sum();
    let first = weighted_pick(&weights, rng.gen::<f64>() * total_w);
    centroids.extend_from_slice(&points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first]) as f64).collect();
    for _ in 1..k {
        let scores: Vec<f64> = d2.iter().zip(&weights).map(|(d, w)| d * w).collect();
        let total: f64 = scores.iter().sum();
        let next = if total > 0.0 {
            weighted_pick(&scores, rng.gen::<f64>() * total)
        } else {
            // all mass on existing centroids; take the first unused point
            d2.iter().position(|&d| d > 0.0).unwrap_or(0)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[next]);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &centroids[start..start + dim]) as f64;
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Lloyd iterations with weighted means; empty clusters grab the point
    // farthest from its assigned centroid
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            assign[i] = nearest(&centroids, dim, p).0;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut mass = vec![0.0f64; k];
        for (i, p) in points.iter().enumerate() {
            mass[assign[i]] += weights[i];
            for (j, &v) in p.iter().enumerate() {
                sums[assign[i] * dim + j] += weights[i] * v as f64;
            }
        }
        for c in 0..k {
            if mass[c] > 0.0 {
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / mass[c]) as f32;
                }
            } else {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], centroid_of(&centroids, dim, assign[a]));
                        let db = sq_dist(&points[b], centroid_of(&centroids, dim, assign[b]));
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[far]);
                assign[far] = c;
            }
        }
    }

    // collapse exactly duplicated centroid rows
    let mut seen: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    let mut kept: Vec<f32> = Vec::new();
    for c in 0..k {
        let row = &centroids[c * dim..(c + 1) * dim];
        let key: Vec<u32> = row.iter().map(|v| v.to_bits()).collect();
        if !seen.contains_key(&key) {
            seen.insert(key, kept.len() / dim);
            kept.extend_from_slice(row);
        }
    }
    let final_k = kept.len() / dim;

    let mut err = 0.0f64;
    let mut n = 0.0f64;
    for (i, p) in points.iter().enumerate() {
        let (_, d) = nearest(&kept, dim, p);
        err += d as f64 * weights[i];
        n += weights[i] * dim as f64;
    }
    Ok(Codebook {
        vocab: final_k,
        patch_h: ph,
        patch_w: pw,
        centroids: kept,
        fit_seed: seed,
        requested_vocab: vocab,
        shrunk: shrunk || final_k < k,
        fit_mse: (err / n) as f32,
    })
}

fn centroid_of<'a>(centroids: &'a [f32], dim: usize, i: usize) -> &'a [f32] {
    &centroids[i * dim..(i + 1) * dim]
}

fn weighted_pick(weights: &[f64], mut u: f64) -> usize {
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Tokenize one frame into its grid row of Z tokens.
pub fn encode(frame: &Frame, cb: &Codebook) -> Result<Vec<u16>> {
    let dim = cb.patch_len();
    let patches = patches_of(frame, cb.patch_h, cb.patch_w)?;
    Ok(patches.iter().map(|p| nearest(&cb.centroids, dim, p).0 as u16).collect())
}

/// Tokenize a frame sequence.
pub fn encode_frames(frames: &[Frame], cb: &Codebook, task_id: u32) -> Result<TokenSequence> {
    let (z_h, z_w) = cb.grid_dims(frames[0].h, frames[0].w);
    let mut tokens = Vec::with_capacity(frames.len() * z_h * z_w);
    for f in frames {
        tokens.extend(encode(f, cb)?);
    }
    Ok(TokenSequence { tokens, t: frames.len(), z_h, z_w, task_id })
}

/// Reconstruct a frame: each token is replaced by its centroid patch.
pub fn decode(tokens: &[u16], cb: &Codebook, frame_h: usize, frame_w: usize) -> Result<Frame> {
    let (z_h, z_w) = cb.grid_dims(frame_h, frame_w);
    if tokens.len() != z_h * z_w {
        return Err(Error::input("token count does not match frame grid"));
    }
    let mut f = Frame::new(frame_h, frame_w);
    for gy in 0..z_h {
        for gx in 0..z_w {
            let tok = tokens[gy * z_w + gx] as usize;
            if tok >= cb.vocab {
                return Err(Error::input(format!("token {tok} >= vocab {}", cb.vocab)));
            }
            let c = cb.centroid(tok);
            for y in 0..cb.patch_h {
                for x in 0..cb.patch_w {
                    let base = (y * cb.patch_w + x) * 3;
                    let rgb = [
                        (c[base] * 255.0).round().clamp(0.0, 255.0) as u8,
                        (c[base + 1] * 255.0).round().clamp(0.0, 255.0) as u8,
                        (c[base + 2] * 255.0).round().clamp(0.0, 255.0) as u8,
                    ];
                    f.put(gy * cb.patch_h + y, gx * cb.patch_w + x, rgb);
                }
            }
        }
    }
    Ok(f)
}

/// Mean squared error between two frames on the [0,1] pixel scale.
pub fn frame_mse(a: &Frame, b: &Frame) -> f32 {
    let n = a.pixels.len();
    let s: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum();
    (s / n as f64) as f32
}

/// Peak signal-to-noise ratio in dB on the [0,1] scale.
pub fn psnr(a: &Frame, b: &Frame) -> f32 {
    let mse = frame_mse(a, b);
    if mse == 0.0 {
        f32::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Token usage fractions over a set of sequences.
pub fn token_histogram(seqs: &[TokenSequence], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0u64; vocab];
    let mut total = 0u64;
    for s in seqs {
        for &t in &s.tokens {
            counts[t as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// A codebook is degenerate when one token covers more than 95% of usage.
pub fn is_degenerate(histogram: &[f64]) -> bool {
    histogram.iter().any(|&f| f > 0.95)
}

/// Write `VPCB` file: magic, version, V, patch dims, centroids (LE f32).
pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    for v in [VERSION, cb.vocab as u32, cb.patch_h as u32, cb.patch_w as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for &x in &cb.centroids {
        f.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::config(format!("{} is not a codebook file", path.display())));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if u(0) != VERSION {
        return Err(Error::config("unsupported codebook version"));
    }
    let (vocab, ph, pw) = (u(1) as usize, u(2) as usize, u(3) as usize);
    let dim = ph * pw * 3;
    let need = 20 + vocab * dim * 4;
    if bytes.len() != need {
        return Err(Error::config("codebook file has wrong length"));
    }
    let centroids: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Codebook {
        vocab,
        patch_h: ph,
        patch_w: pw,
        centroids,
        fit_seed: 0,
        requested_vocab: vocab,
        shrunk: false,
        fit_mse: 0.0,
    })
}
