//! Procedural line-drawing benchmark.
//!
//! Each patent ID is a random composite of boxes, prisms and cylinders with a
//! few surface details. Its views are orthographic projections of that
//! wireframe from different camera angles, rendered with a constant stroke
//! width and a fixed object scale, so views differ by viewpoint only.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{DrawingImage, INK};
use super::manifest::{split_by_id, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};

type P3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_ids: usize,
    pub views_per_id: usize,
    pub image_size: usize,
    pub stroke_width: f64,
    pub seed: u64,
    /// When set, IDs are split into train/val with [`split_by_id`].
    pub val_fraction: Option<f64>,
}

impl SyntheticConfig {
    pub fn new(num_ids: usize, views_per_id: usize, seed: u64) -> Self {
        Self {
            num_ids,
            views_per_id,
            image_size: 64,
            stroke_width: 1.0,
            seed,
            val_fraction: None,
        }
    }

    /// 200 IDs x 5 views at 64x64, a quarter of the IDs held out for validation.
    pub fn toy_benchmark() -> Self {
        Self {
            val_fraction: Some(0.25),
            ..Self::new(200, 5, 7)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.views_per_id < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 ids and 2 views per id, got {} and {}",
                self.num_ids, self.views_per_id
            )));
        }
        if !(self.stroke_width > 0.0) {
            return Err(Error::invalid("stroke width must be positive"));
        }
        if self.image_size < 16 || (self.image_size as f64) < 16.0 * self.stroke_width {
            return Err(Error::invalid(format!(
                "image size {} is too small for stroke width {} (need >= 16 and >= 16 strokes)",
                self.image_size, self.stroke_width
            )));
        }
        Ok(())
    }
}

pub fn patent_id(index: usize) -> String {
    format!("D{index:06}")
}

#[derive(Clone, Debug, Default)]
struct Wireframe {
    segments: Vec<(P3, P3)>,
}

impl Wireframe {
    fn line(&mut self, a: P3, b: P3) {
        self.segments.push((a, b));
    }

    fn polyline_closed(&mut self, pts: &[P3]) {
        for i in 0..pts.len() {
            self.line(pts[i], pts[(i + 1) % pts.len()]);
        }
    }

    fn extend_transformed(&mut self, other: &Wireframe, yaw: f64, offset: P3) {
        let (s, c) = yaw.sin_cos();
        let tf = |p: P3| [p[0] * c + p[2] * s + offset[0], p[1] + offset[1], -p[0] * s + p[2] * c + offset[2]];
        for &(a, b) in &other.segments {
            self.line(tf(a), tf(b));
        }
    }

    /// Centers the bounding box at the origin and scales to unit radius.
    fn normalize(&mut self) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &(a, b) in &self.segments {
            for p in [a, b] {
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let mut radius: f64 = 1e-9;
        for &(a, b) in &self.segments {
            for p in [a, b] {
                let d = (0..3).map(|k| (p[k] - center[k]).powi(2)).sum::<f64>().sqrt();
                radius = radius.max(d);
            }
        }
        for seg in &mut self.segments {
            for p in [&mut seg.0, &mut seg.1] {
                for k in 0..3 {
                    p[k] = (p[k] - center[k]) / radius;
                }
            }
        }
    }
}

/// Axis-aligned box `[0,w]x[0,h]x[0,d]` centered in x/z, sitting on y=0.
fn box_part(rng: &mut ChaCha8Rng, w: f64, h: f64, d: f64) -> Wireframe {
    let mut wf = Wireframe::default();
    let (x0, x1, z0, z1) = (-w / 2.0, w / 2.0, -d / 2.0, d / 2.0);
    let bottom = [[x0, 0.0, z0], [x1, 0.0, z0], [x1, 0.0, z1], [x0, 0.0, z1]];
    let top = bottom.map(|p| [p[0], h, p[2]]);
    wf.polyline_closed(&bottom);
    wf.polyline_closed(&top);
    for i in 0..4 {
        wf.line(bottom[i], top[i]);
    }
    if rng.random_bool(0.5) {
        // inset panel on the front face
        let m = rng.random_range(0.15..0.3);
        let (px0, px1) = (x0 + m * w, x1 - m * w);
        let (py0, py1) = (m * h, h - m * h);
        wf.polyline_closed(&[[px0, py0, z1], [px1, py0, z1], [px1, py1, z1], [px0, py1, z1]]);
    }
    let belts = rng.random_range(0..3);
    for b in 0..belts {
        let y = h * (b + 1) as f64 / (belts + 1) as f64;
        wf.polyline_closed(&[[x0, y, z0], [x1, y, z0], [x1, y, z1], [x0, y, z1]]);
    }
    if rng.random_bool(0.3) {
        // cross on the top face
        wf.line([x0, h, z0], [x1, h, z1]);
        wf.line([x1, h, z0], [x0, h, z1]);
    }
    wf
}

/// Triangular prism extruded along z.
fn prism_part(rng: &mut ChaCha8Rng, w: f64, h: f64, d: f64) -> Wireframe {
    let mut wf = Wireframe::default();
    let apex_x = rng.random_range(-0.4..0.4) * w;
    let front = [[-w / 2.0, 0.0, d / 2.0], [w / 2.0, 0.0, d / 2.0], [apex_x, h, d / 2.0]];
    let back = front.map(|p| [p[0], p[1], -d / 2.0]);
    wf.polyline_closed(&front);
    wf.polyline_closed(&back);
    for i in 0..3 {
        wf.line(front[i], back[i]);
    }
    let ribs = rng.random_range(0..4);
    for r in 0..ribs {
        let z = -d / 2.0 + d * (r + 1) as f64 / (ribs + 1) as f64;
        wf.polyline_closed(&front.map(|p| [p[0], p[1], z]));
    }
    wf
}

/// Vertical cylinder with optional rings and a lid.
fn cylinder_part(rng: &mut ChaCha8Rng, radius: f64, h: f64) -> Wireframe {
    const SEGMENTS: usize = 16;
    let mut wf = Wireframe::default();
    let circle = |y: f64, r: f64| -> Vec<P3> {
        (0..SEGMENTS)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / SEGMENTS as f64;
                [r * a.cos(), y, r * a.sin()]
            })
            .collect()
    };
    let bottom = circle(0.0, radius);
    let top = circle(h, radius);
    wf.polyline_closed(&bottom);
    wf.polyline_closed(&top);
    for i in (0..SEGMENTS).step_by(4) {
        wf.line(bottom[i], top[i]);
    }
    let rings = rng.random_range(0..4);
    for r in 0..rings {
        wf.polyline_closed(&circle(h * (r + 1) as f64 / (rings + 1) as f64, radius));
    }
    if rng.random_bool(0.4) {
        let inner = circle(h, radius * rng.random_range(0.3..0.7));
        wf.polyline_closed(&inner);
    }
    wf
}

fn build_object(rng: &mut ChaCha8Rng) -> Wireframe {
    let mut obj = Wireframe::default();
    let parts = rng.random_range(2..=4);
    let mut y = 0.0;
    let mut base_half = 0.5;
    for i in 0..parts {
        let kind = rng.random_range(0..3);
        let w = rng.random_range(0.35..1.0) * if i == 0 { 1.0 } else { 0.8 };
        let h = rng.random_range(0.2..0.7);
        let d = rng.random_range(0.35..1.0);
        let part = match kind {
            0 => box_part(rng, w, h, d),
            1 => prism_part(rng, w, h, d),
            _ => cylinder_part(rng, 0.5 * w.min(d), h),
        };
        let yaw = if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.0..PI)
        };
        // Either stack on top of the previous part or attach beside it.
        let offset = if i == 0 || rng.random_bool(0.6) {
            let jitter = 0.3 * base_half;
            [rng.random_range(-jitter..=jitter), y, rng.random_range(-jitter..=jitter)]
        } else {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            [side * (base_half + 0.5 * w), 0.0, rng.random_range(-0.2..0.2)]
        };
        obj.extend_transformed(&part, yaw, offset);
        if offset[1] == y {
            y += h;
        }
        base_half = base_half.max(0.5 * w);
    }
    obj.normalize();
    obj
}

/// Camera `(azimuth, elevation)` in radians for view `v` of an object.
fn camera(base_azimuth: f64, view: usize, views: usize) -> (f64, f64) {
    const SPAN: f64 = PI; // views spread over half a turn
    let az = base_azimuth + SPAN * view as f64 / (views - 1).max(1) as f64;
    let el = [20.0f64, 35.0, 10.0][view % 3].to_radians();
    (az, el)
}

fn project(p: P3, az: f64, el: f64) -> (f64, f64) {
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    let x = p[0] * ca + p[2] * sa;
    let z = -p[0] * sa + p[2] * ca;
    let y = p[1] * ce - z * se;
    (x, y)
}

fn draw_segment(px: &mut [u8], size: usize, a: (f64, f64), b: (f64, f64), half: f64) {
    let (minx, maxx) = (a.0.min(b.0) - half, a.0.max(b.0) + half);
    let (miny, maxy) = (a.1.min(b.1) - half, a.1.max(b.1) + half);
    let x0 = minx.floor().max(0.0) as usize;
    let y0 = miny.floor().max(0.0) as usize;
    let x1 = (maxx.ceil() as isize).clamp(0, size as isize - 1) as usize;
    let y1 = (maxy.ceil() as isize).clamp(0, size as isize - 1) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((cx - a.0) * dx + (cy - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (a.0 + t * dx - cx, a.1 + t * dy - cy);
            if ex * ex + ey * ey <= half * half {
                px[y * size + x] = INK;
            }
        }
    }
}

fn id_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders view `view` of synthetic ID `index`.
pub fn render_view(cfg: &SyntheticConfig, index: usize, view: usize) -> Result<DrawingImage> {
    cfg.validate()?;
    let mut rng = id_rng(cfg.seed, index);
    let obj = build_object(&mut rng);
    let base_az = rng.random_range(0.0..2.0 * PI);
    Ok(render(&obj, cfg, base_az, index, view))
}

fn render(obj: &Wireframe, cfg: &SyntheticConfig, base_az: f64, index: usize, view: usize) -> DrawingImage {
    let size = cfg.image_size;
    let (az, el) = camera(base_az, view, cfg.views_per_id);
    let half_extent = 0.42 * size as f64;
    let c = size as f64 / 2.0;
    let mut img = DrawingImage::blank(size, size);
    img.patent_id = patent_id(index);
    img.view_index = view as u32;
    for &(a, b) in &obj.segments {
        let (ax, ay) = project(a, az, el);
        let (bx, by) = project(b, az, el);
        draw_segment(
            &mut img.pixels,
            size,
            (c + ax * half_extent, c - ay * half_extent),
            (c + bx * half_extent, c - by * half_extent),
            cfg.stroke_width / 2.0,
        );
    }
    img
}

/// Renders every view of every ID in memory, ID-major.
pub fn render_all(cfg: &SyntheticConfig) -> Result<Vec<DrawingImage>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_ids * cfg.views_per_id);
    for index in 0..cfg.num_ids {
        let mut rng = id_rng(cfg.seed, index);
        let obj = build_object(&mut rng);
        let base_az = rng.random_range(0.0..2.0 * PI);
        for view in 0..cfg.views_per_id {
            out.push(render(&obj, cfg, base_az, index, view));
        }
    }
    Ok(out)
}

fn manifest_for(cfg: &SyntheticConfig, images: &[DrawingImage], root: &Path) -> Result<DatasetManifest> {
    let entries = images
        .iter()
        .map(|img| ManifestEntry {
            image_path: format!("images/{}_{}.png", img.patent_id, img.view_index),
            patent_id: img.patent_id.clone(),
            view_index: img.view_index,
            split: Split::Train,
        })
        .collect();
    let manifest = DatasetManifest::new(root, entries);
    match cfg.val_fraction {
        Some(frac) => split_by_id(&manifest, frac, cfg.seed),
        None => Ok(manifest),
    }
}

/// Renders in memory and splits exactly as [`generate_synthetic`] would.
/// Returns `(train, val)`; `val` is empty without a `val_fraction`.
pub fn render_split(cfg: &SyntheticConfig) -> Result<(Vec<DrawingImage>, Vec<DrawingImage>)> {
    let images = render_all(cfg)?;
    let manifest = manifest_for(cfg, &images, Path::new(""))?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (img, e) in images.into_iter().zip(&manifest.entries) {
        match e.split {
            Split::Train => train.push(img),
            Split::Val => val.push(img),
        }
    }
    Ok((train, val))
}

/// Writes `images/<id>_<view>.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let images = render_all(cfg)?;
    let manifest = manifest_for(cfg, &images, out_dir)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (img, e) in images.iter().zip(&manifest.entries) {
        img.save_png(&out_dir.join(&e.image_path))?;
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
