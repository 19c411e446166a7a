//! Image IO, dataset manifests, preprocessing, and the synthetic corpus.
//!
//! Images travel as binary PPM (P6, maxval 255) scaled to `[0, 1]`;
//! tensors go to disk in a little saved-tensor format (`VTIM`). Datasets
//! are JSONL manifests next to an image directory. The synthetic generator
//! draws simple colored shapes in quadrants and captions them from a
//! closed grammar, so vocabulary and concepts are fully predictable.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------
// PPM

/// Reads a binary P6 PPM with maxval 255 into an `[H, W, 3]` tensor with
/// values in `[0, 1]`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let field = |pos: &mut usize| -> Result<String> {
        // Skip whitespace and '#' comments between header fields.
        loop {
            while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < buf.len() && buf[*pos] == b'#' {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::data("unexpected end of PPM header".to_string()));
        }
        Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
    };
    if field(&mut pos)? != "P6" {
        return Err(bad("not a binary PPM (expected P6)"));
    }
    let width: usize = field(&mut pos)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = field(&mut pos)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = field(&mut pos)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if buf.len() < pos + need {
        return Err(bad("pixel data truncated"));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = buf[pos..pos + need]
        .iter()
        .map(|&b| T::from_f64(b as f64) * scale)
        .collect();
    Tensor::new(vec![height, width, 3], data)
}

/// Writes an `[H, W, 3]` tensor with values in `[0, 1]` as binary PPM.
/// Values are clamped and rounded to bytes.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!(
            "expected an [H, W, 3] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(20 + h * w * 3);
    write!(out, "P6\n{w} {h}\n255\n").expect("write to vec");
    for &v in image.data() {
        let x = (v.to_f64() * 255.0).round().clamp(0.0, 255.0);
        out.push(x as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes an `[H, W]` tensor with values in `[0, 1]` as binary PGM (P5,
/// maxval 255). Values are clamped and rounded to bytes.
pub fn write_pgm<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "expected an [H, W] grayscale map, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(20 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("write to vec");
    for &v in map.data() {
        let x = (v.to_f64() * 255.0).round().clamp(0.0, 255.0);
        out.push(x as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------
// VTIM tensor files

pub const VTIM_MAGIC: &[u8; 4] = b"VTIM";

/// Saves a tensor: magic, u32 rank, u32 dims, little-endian f32 values.
pub fn write_vtim<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(VTIM_MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_vtim<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < 8 || &buf[0..4] != VTIM_MAGIC {
        return Err(Error::data(format!(
            "{} is not a tensor file (bad magic)",
            path.display()
        )));
    }
    let rank = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    let header = 8 + 4 * rank;
    if buf.len() < header {
        return Err(Error::data("tensor file truncated".to_string()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let o = 8 + 4 * i;
        shape.push(u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as usize);
    }
    let numel: usize = shape.iter().product();
    if buf.len() != header + numel * 4 {
        return Err(Error::data(format!(
            "tensor file has {} bytes of data, shape {shape:?} wants {}",
            buf.len() - header,
            numel * 4
        )));
    }
    let data: Vec<T> = buf[header..]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------
// Preprocessing

/// Bilinear resize of an `[H, W, 3]` image.
pub fn resize_bilinear<T: Scalar>(
    image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!(
            "expected an [H, W, 3] image, got {shape:?}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be positive".to_string()));
    }
    let (h, w) = (shape[0], shape[1]);
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        // Align sample centers.
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            for c in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + c].to_f64();
                let top = p(y0, x0) * (1.0 - dx) + p(y0, x1) * dx;
                let bot = p(y1, x0) * (1.0 - dx) + p(y1, x1) * dx;
                out.push(T::from_f64(top * (1.0 - dy) + bot * dy));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}

/// Scales so the shorter side equals `target`, preserving aspect ratio.
pub fn shorter_side_resize<T: Scalar>(image: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("expected [H, W, 3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::shape("degenerate resize".to_string()));
    }
    let (oh, ow) = if h <= w {
        (target, (w * target + h / 2) / h)
    } else {
        ((h * target + w / 2) / w, target)
    };
    resize_bilinear(image, oh.max(1), ow.max(1))
}

pub fn center_crop<T: Scalar>(image: &Tensor<T>, ch: usize, cw: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    let (h, w) = (shape[0], shape[1]);
    if ch > h || cw > w {
        return Err(Error::shape(format!(
            "crop {ch}x{cw} larger than image {h}x{w}"
        )));
    }
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let src = image.data();
    let mut out = Vec::with_capacity(ch * cw * 3);
    for y in 0..ch {
        let row = ((top + y) * w + left) * 3;
        out.extend_from_slice(&src[row..row + cw * 3]);
    }
    Tensor::new(vec![ch, cw, 3], out)
}

/// Resizes the shorter side to the model edge and center-crops square.
pub fn prepare_image<T: Scalar>(image: &Tensor<T>, edge_h: usize, edge_w: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape[0] == edge_h && shape[1] == edge_w {
        return Ok(image.clone());
    }
    let resized = shorter_side_resize(image, edge_h.min(edge_w))?;
    center_crop(&resized, edge_h, edge_w)
}

/// Training-time augmentation: horizontal flip and a mild per-channel
/// brightness scale, both seed-driven.
pub fn augment<T: Scalar>(image: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let shape = image.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let flip = rng.gen::<f64>() < 0.5;
    let gains: [f64; 3] = [
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.9..1.1),
    ];
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            for c in 0..3 {
                let v = src[(y * w + sx) * 3 + c].to_f64() * gains[c];
                out.push(T::from_f64(v.clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path of the image, relative to the manifest's directory.
    pub image: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<(String, f64)>>,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("{}:{}: bad manifest line: {e}", path.display(), i + 1))
        })?;
        if entry.captions.is_empty() {
            return Err(Error::data(format!(
                "{}:{}: entry {:?} has no captions",
                path.display(),
                i + 1,
                entry.image
            )));
        }
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::data(format!("{}: empty manifest", path.display())));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut body = String::new();
    for e in entries {
        body.push_str(
            &serde_json::to_string(e)
                .map_err(|e| Error::data(format!("cannot encode manifest entry: {e}")))?,
        );
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Tag files are TSV: image path (as in the manifest), token, score.
pub fn read_tags_tsv(path: &Path) -> Result<HashMap<String, Vec<(String, f64)>>> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out: HashMap<String, Vec<(String, f64)>> = HashMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (img, tok, score) = (parts.next(), parts.next(), parts.next());
        let (Some(img), Some(tok), Some(score)) = (img, tok, score) else {
            return Err(Error::data(format!(
                "{}:{}: expected image<TAB>token<TAB>score",
                path.display(),
                i + 1
            )));
        };
        let score: f64 = score.parse().map_err(|_| {
            Error::data(format!("{}:{}: bad score {score:?}", path.display(), i + 1))
        })?;
        out.entry(img.to_string())
            .or_default()
            .push((tok.to_string(), score));
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Synthetic scenes

pub const SHAPE_KINDS: [&str; 3] = ["circle", "triangle", "square"];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
const COLOR_VALUES: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 170, 70],
    [50, 80, 220],
    [235, 215, 50],
    [150, 60, 190],
    [240, 140, 40],
];
const BACKGROUND: u8 = 245;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 64,
            seed: 0,
            image_size: 32,
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PlacedShape {
    kind: usize,
    color: usize,
    quadrant: usize, // row-major 2x2
}

fn scene_caption(shapes: &[PlacedShape]) -> String {
    let phrase = |s: &PlacedShape| format!("a {} {}", COLOR_NAMES[s.color], SHAPE_KINDS[s.kind]);
    match shapes {
        [one] => phrase(one),
        [a, b] => {
            let (ar, ac) = (a.quadrant / 2, a.quadrant % 2);
            let (br, bc) = (b.quadrant / 2, b.quadrant % 2);
            let rel = if ar != br {
                if ar < br {
                    "above"
                } else {
                    "below"
                }
            } else if ac < bc {
                "left of"
            } else {
                "right of"
            };
            format!("{} {} {}", phrase(a), rel, phrase(b))
        }
        many => {
            let parts: Vec<String> = many.iter().map(phrase).collect();
            parts.join(" and ")
        }
    }
}

fn render_scene<T: Scalar>(shapes: &[PlacedShape], size: usize) -> Tensor<T> {
    let mut px = vec![BACKGROUND; size * size * 3];
    let q = size / 2;
    let radius = (q as f64) * 0.36;
    for s in shapes {
        let (qr, qc) = (s.quadrant / 2, s.quadrant % 2);
        let cy = (qr * q + q / 2) as f64;
        let cx = (qc * q + q / 2) as f64;
        let color = COLOR_VALUES[s.color];
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let inside = match SHAPE_KINDS[s.kind] {
                    "circle" => dy * dy + dx * dx <= radius * radius,
                    "square" => dy.abs() <= radius && dx.abs() <= radius,
                    _ => {
                        // Upward triangle: apex at cy - radius.
                        dy.abs() <= radius && dx.abs() <= (dy + radius) / 2.0
                    }
                };
                if inside {
                    let o = (y * size + x) * 3;
                    px[o] = color[0];
                    px[o + 1] = color[1];
                    px[o + 2] = color[2];
                }
            }
        }
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = px.iter().map(|&b| T::from_f64(b as f64) * scale).collect();
    Tensor::new(vec![size, size, 3], data).expect("render shape")
}

/// One generated sample, before anything touches disk.
pub struct SynthSample<T> {
    pub name: String,
    pub image: Tensor<T>,
    pub caption: String,
    pub split: Split,
}

/// Deterministic scene sampler: same config, same bytes.
pub fn generate_synthetic<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<SynthSample<T>>> {
    if cfg.count == 0 || cfg.image_size < 8 || cfg.image_size % 2 != 0 {
        return Err(Error::config(format!(
            "need count >= 1 and an even image_size >= 8, got {} and {}",
            cfg.count, cfg.image_size
        )));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::config(format!(
            "val_fraction must lie in [0, 1), got {}",
            cfg.val_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_count = ((cfg.count as f64) * cfg.val_fraction).floor() as usize;
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let n_shapes = rng.gen_range(1..=3usize);
        let mut quadrants: Vec<usize> = (0..4).collect();
        quadrants.shuffle(&mut rng);
        let shapes: Vec<PlacedShape> = (0..n_shapes)
            .map(|j| PlacedShape {
                kind: rng.gen_range(0..SHAPE_KINDS.len()),
                color: rng.gen_range(0..COLOR_NAMES.len()),
                quadrant: quadrants[j],
            })
            .collect();
        let split = if i < cfg.count - val_count {
            Split::Train
        } else {
            Split::Val
        };
        samples.push(SynthSample {
            name: format!("img{i:05}.ppm"),
            image: render_scene(&shapes, cfg.image_size),
            caption: scene_caption(&shapes),
            split,
        });
    }
    Ok(samples)
}

/// Writes images under `<dir>/images/` plus `<dir>/manifest.jsonl`.
pub fn write_synthetic_dataset(dir: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    let samples = generate_synthetic::<f32>(cfg)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        write_ppm(&img_dir.join(&s.name), &s.image)?;
        entries.push(ManifestEntry {
            image: format!("images/{}", s.name),
            captions: vec![s.caption.clone()],
            tags: None,
            split: s.split,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Loads the image behind a manifest entry, resolved against the manifest
/// directory, already resized and cropped for the model.
pub fn load_entry_image<T: Scalar>(
    root: &Path,
    entry: &ManifestEntry,
    edge_h: usize,
    edge_w: usize,
) -> Result<Tensor<T>> {
    let img = read_ppm::<T>(&root.join(&entry.image))?;
    prepare_image(&img, edge_h, edge_w)
}

/// Manifest path's parent, the base for entry-relative image paths.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}
