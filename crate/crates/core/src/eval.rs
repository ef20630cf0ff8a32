//! Decomposition, IoU, responsibility-trace and latent-export measurements.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Session, SetAutoencoder};
use crate::nn::BatchNormMode;
use crate::scenes::{interpolate_scenes, render, Circle, CircleScene, Dataset};
use crate::tensor::Tensor;

/// Slot activity above which a slot counts as holding an object.
pub const ACTIVITY_THRESHOLD: f32 = 0.1;
/// Pixel threshold for foreground masks.
pub const PIXEL_THRESHOLD: f32 = 0.01;

/// Values of one evaluated batch, detached from the tape.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub recon: Tensor<f32>,
    pub slots: Tensor<f32>,
    pub initial: Tensor<f32>,
    pub latents: Tensor<f32>,
    /// Per refinement step, per item; includes the loss at the final set.
    pub inner_losses: Vec<Vec<f64>>,
}

/// Runs the model in evaluation mode (running batch-norm statistics).
pub fn run_batch(model: &SetAutoencoder, params: &ModelParams<f32>, x: Tensor<f32>) -> Result<BatchOutputs> {
    let mut sess = Session::new(params, BatchNormMode::Eval);
    let xv = sess.tape.constant(x);
    let out = model.forward(&mut sess, xv, true)?;
    Ok(BatchOutputs {
        recon: sess.tape.value(out.recon).clone(),
        slots: sess.tape.value(out.slots).clone(),
        initial: sess.tape.value(out.initial).clone(),
        latents: sess.tape.value(out.latents).clone(),
        inner_losses: out.trace.losses,
    })
}

/// L-infinity norm of each slot image. `slots` is `n x ...`.
pub fn slot_activity(slots: &Tensor<f32>) -> Vec<f32> {
    let n = slots.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Vec::new();
    }
    let per = slots.numel() / n;
    slots.data().chunks(per).map(|c| c.iter().fold(0.0f32, |m, v| m.max(v.abs()))).collect()
}

pub fn count_active(activity: &[f32], threshold: f32) -> usize {
    activity.iter().filter(|&&a| a > threshold).count()
}

/// Success iff the number of active slots equals the number of circles.
pub fn decomposition_success(scene: &CircleScene, slots: &Tensor<f32>, threshold: f32) -> bool {
    count_active(&slot_activity(slots), threshold) == scene.circles.len()
}

fn foreground(image: &[f32], plane: usize, threshold: f32) -> Vec<bool> {
    (0..plane).map(|p| (0..3).any(|c| image[c * plane + p] > threshold)).collect()
}

/// IoU of the any-channel foreground masks of two `3 x H x W` images.
/// Two empty masks have IoU 1.
pub fn iou_overall(pred: &Tensor<f32>, gt: &Tensor<f32>, threshold: f32) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || pred.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "iou_overall needs two 3 x H x W images, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let plane = pred.shape()[1] * pred.shape()[2];
    let a = foreground(pred.data(), plane, threshold);
    let b = foreground(gt.data(), plane, threshold);
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Axis-aligned box `[x0, y0, x1, y1)` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn of_circle(c: &Circle, image_size: usize) -> BBox {
        let [x0, y0, x1, y1] = c.bbox();
        let s = image_size as f64;
        BBox { x0: x0.max(0.0), y0: y0.max(0.0), x1: x1.min(s), y1: y1.min(s) }
    }

    /// Extent of every thresholded pixel of a `3 x H x W` image.
    pub fn of_mask(image: &[f32], h: usize, w: usize, threshold: f32) -> Option<BBox> {
        let mask = foreground(image, h * w, threshold);
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (y, x) = (p / w, p % w);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        b.map(|(x0, y0, x1, y1)| BBox { x0: x0 as f64, y0: y0 as f64, x1: (x1 + 1) as f64, y1: (y1 + 1) as f64 })
    }
}

/// Mean Chamfer-matched box IoU: every active slot is matched to the
/// ground-truth circle box it overlaps most. No predictions score 0 when
/// the scene has circles and 1 when it has none.
pub fn iou_per_object(slots: &Tensor<f32>, scene: &CircleScene, activity_threshold: f32, pixel_threshold: f32) -> f64 {
    let (h, w) = (scene.image_size, scene.image_size);
    let n = slots.shape()[0];
    let per = slots.numel() / n.max(1);
    let activity = slot_activity(slots);
    let preds: Vec<BBox> = (0..n)
        .filter(|&i| activity[i] > activity_threshold)
        .filter_map(|i| BBox::of_mask(&slots.data()[i * per..(i + 1) * per], h, w, pixel_threshold))
        .collect();
    let gts: Vec<BBox> = scene.circles.iter().map(|c| BBox::of_circle(c, scene.image_size)).collect();
    match (preds.is_empty(), gts.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let total: f64 = preds.iter().map(|p| gts.iter().map(|g| p.iou(g)).fold(0.0, f64::max)).sum();
            total / preds.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: usize,
    pub circle_count: usize,
    pub nonempty_slot_count: usize,
    pub success: bool,
    pub mse: f64,
    pub iou_overall: f64,
    pub iou_per_object: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountStats {
    pub images: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub activity_threshold: f32,
    pub pixel_threshold: f32,
    pub images: Vec<ImageResult>,
    pub success_by_count: BTreeMap<usize, CountStats>,
    pub success_rate: f64,
    pub mse: f64,
    pub mean_iou_overall: f64,
    pub mean_iou_per_object: f64,
    /// Mean inner loss at the generator's set and at the refined set.
    pub inner_loss_initial: Option<f64>,
    pub inner_loss_final: Option<f64>,
}

impl DecompositionReport {
    pub fn from_images(
        images: Vec<ImageResult>,
        inner: Option<(f64, f64)>,
        activity_threshold: f32,
        pixel_threshold: f32,
    ) -> Self {
        let mut by: BTreeMap<usize, CountStats> = BTreeMap::new();
        for r in &images {
            let e = by.entry(r.circle_count).or_insert(CountStats { images: 0, successes: 0, rate: 0.0 });
            e.images += 1;
            e.successes += r.success as usize;
        }
        for s in by.values_mut() {
            s.rate = s.successes as f64 / s.images as f64;
        }
        let n = images.len().max(1) as f64;
        let mean = |f: fn(&ImageResult) -> f64| images.iter().map(f).sum::<f64>() / n;
        DecompositionReport {
            activity_threshold,
            pixel_threshold,
            success_rate: images.iter().filter(|r| r.success).count() as f64 / n,
            mse: mean(|r| r.mse),
            mean_iou_overall: mean(|r| r.iou_overall),
            mean_iou_per_object: mean(|r| r.iou_per_object),
            success_by_count: by,
            images,
            inner_loss_initial: inner.map(|p| p.0),
            inner_loss_final: inner.map(|p| p.1),
        }
    }

    pub fn rate_for(&self, count: usize) -> Option<f64> {
        self.success_by_count.get(&count).map(|s| s.rate)
    }

    /// Per-image rows as CSV.
    pub fn images_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.images {
            w.serialize(r).expect("in-memory CSV write");
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV output is UTF-8")
}

/// Evaluates `indices` of `dataset` in batches, in parallel. Results are
/// combined in index order, so the report does not depend on the pool size.
pub fn evaluate_decomposition(
    model: &SetAutoencoder,
    params: &ModelParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<DecompositionReport> {
    if dataset.image_size() != model.config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but the model expects {}px",
            dataset.image_size(),
            model.config.image_size
        )));
    }
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    type Part = (Vec<ImageResult>, Vec<(f64, f64)>);
    let parts: Vec<Result<Part>> = chunks
        .par_iter()
        .map(|idx| {
            let x = dataset.batch(idx);
            let out = run_batch(model, params, x.clone())?;
            let n = model.config.set_size;
            let img = x.numel() / idx.len();
            let per_slot = out.slots.numel() / (idx.len() * n);
            let s = model.config.image_size;
            let mut rows = Vec::with_capacity(idx.len());
            for (b, &id) in idx.iter().enumerate() {
                let scene = &dataset.manifest.scenes[id];
                let slots = Tensor::new(
                    vec![n, 3, s, s],
                    out.slots.data()[b * n * per_slot..(b + 1) * n * per_slot].to_vec(),
                )?;
                let recon = Tensor::new(vec![3, s, s], out.recon.data()[b * img..(b + 1) * img].to_vec())?;
                let gt = Tensor::new(vec![3, s, s], x.data()[b * img..(b + 1) * img].to_vec())?;
                let activity = slot_activity(&slots);
                let active = count_active(&activity, ACTIVITY_THRESHOLD);
                let mse = recon.data().iter().zip(gt.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                    / img as f64;
                rows.push(ImageResult {
                    image_id: id,
                    circle_count: scene.circles.len(),
                    nonempty_slot_count: active,
                    success: active == scene.circles.len(),
                    mse,
                    iou_overall: iou_overall(&recon, &gt, PIXEL_THRESHOLD)?,
                    iou_per_object: iou_per_object(&slots, scene, ACTIVITY_THRESHOLD, PIXEL_THRESHOLD),
                });
            }
            let inner = match (out.inner_losses.first(), out.inner_losses.last()) {
                (Some(a), Some(b)) if out.inner_losses.len() > 1 => a.iter().copied().zip(b.iter().copied()).collect(),
                _ => Vec::new(),
            };
            Ok((rows, inner))
        })
        .collect();
    let mut images = Vec::with_capacity(indices.len());
    let mut inner = Vec::new();
    for p in parts {
        let (rows, i) = p?;
        images.extend(rows);
        inner.extend(i);
    }
    let inner = (!inner.is_empty()).then(|| {
        let n = inner.len() as f64;
        (inner.iter().map(|p| p.0).sum::<f64>() / n, inner.iter().map(|p| p.1).sum::<f64>() / n)
    });
    Ok(DecompositionReport::from_images(images, inner, ACTIVITY_THRESHOLD, PIXEL_THRESHOLD))
}

/// Slot activities along an interpolation between two scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsibilityTrace {
    pub frames: Vec<TraceFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub t: f64,
    pub activity: Vec<f32>,
    pub active_slots: usize,
    pub success: bool,
}

impl ResponsibilityTrace {
    /// Frames where two or more slots are active.
    pub fn handoff_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.active_slots >= 2).count()
    }

    pub fn single_slot_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.active_slots == 1).count()
    }

    pub fn to_csv(&self) -> String {
        let n = self.frames.first().map_or(0, |f| f.activity.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["frame", "t", "active_slots", "success"].map(String::from).to_vec();
        header.extend((0..n).map(|i| format!("slot_{i}")));
        w.write_record(&header).expect("in-memory CSV write");
        for (k, f) in self.frames.iter().enumerate() {
            let mut row = vec![k.to_string(), f.t.to_string(), f.active_slots.to_string(), (f.success as u8).to_string()];
            row.extend(f.activity.iter().map(|a| a.to_string()));
            w.write_record(&row).expect("in-memory CSV write");
        }
        csv_string(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Config(format!("trace CSV record {}: {}", line, what));
        let mut r = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(0, &e.to_string()))?;
        if header.len() < 4 || &header[0] != "frame" || &header[3] != "success" {
            return Err(bad(0, "unexpected header"));
        }
        let mut frames = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(k + 1, &e.to_string()))?;
            let t = rec[1].parse().map_err(|_| bad(k + 1, "bad t"))?;
            let active_slots = rec[2].parse().map_err(|_| bad(k + 1, "bad active_slots"))?;
            let success = &rec[3] == "1";
            let activity = rec
                .iter()
                .skip(4)
                .map(|c| c.parse::<f32>().map_err(|_| bad(k + 1, "bad activity")))
                .collect::<Result<Vec<_>>>()?;
            frames.push(TraceFrame { t, activity, active_slots, success });
        }
        Ok(ResponsibilityTrace { frames })
    }
}

/// Renders `frames` evenly spaced interpolations of `a` to `b` and records
/// slot activity for each.
pub fn responsibility_trace(
    model: &SetAutoencoder,
    params: &ModelParams<f32>,
    a: &CircleScene,
    b: &CircleScene,
    frames: usize,
) -> Result<ResponsibilityTrace> {
    if frames == 0 {
        return Err(Error::Config("a trace needs at least one frame".into()));
    }
    let scenes: Vec<(f64, CircleScene)> = (0..frames)
        .map(|k| {
            let t = if frames == 1 { 0.0 } else { k as f64 / (frames - 1) as f64 };
            interpolate_scenes(a, b, t).map(|s| (t, s))
        })
        .collect::<Result<_>>()?;
    let s = model.config.image_size;
    let n = model.config.set_size;
    let batch = 16;
    let parts: Vec<Result<Vec<TraceFrame>>> = scenes
        .par_chunks(batch)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * 3 * s * s);
            for (_, sc) in chunk {
                data.extend(render(sc).into_data());
            }
            let out = run_batch(model, params, Tensor::new(vec![chunk.len(), 3, s, s], data)?)?;
            let per = n * 3 * s * s;
            chunk
                .iter()
                .enumerate()
                .map(|(i, (t, sc))| {
                    let slots = Tensor::new(vec![n, 3, s, s], out.slots.data()[i * per..(i + 1) * per].to_vec())?;
                    let activity = slot_activity(&slots);
                    let active_slots = count_active(&activity, ACTIVITY_THRESHOLD);
                    Ok(TraceFrame { t: *t, activity, active_slots, success: active_slots == sc.circles.len() })
                })
                .collect()
        })
        .collect();
    let mut frames_out = Vec::with_capacity(frames);
    for p in parts {
        frames_out.extend(p?);
    }
    Ok(ResponsibilityTrace { frames: frames_out })
}

/// Endpoints of a horizontal sweep of one circle across the image.
pub fn horizontal_sweep(image_size: usize, radius: f64, color: [f32; 3]) -> (CircleScene, CircleScene) {
    let s = image_size as f64;
    let at = |cx: f64| CircleScene { image_size, circles: vec![Circle { cx, cy: s / 2.0, radius, color }] };
    (at(radius + 0.5), at(s - radius - 0.5))
}

/// CSV of the active slots of every single-circle image.
pub fn export_latents(
    model: &SetAutoencoder,
    params: &ModelParams<f32>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<String> {
    let d = model.config.elem_dim;
    let n = model.config.set_size;
    let s = model.config.image_size;
    let mut header: Vec<String> =
        ["image_id", "slot_id", "activity", "cx", "cy", "radius", "color_name"].map(String::from).to_vec();
    header.extend((0..d).map(|j| format!("s_{j}")));
    let ids: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.manifest.scenes[i].circles.len() == 1).collect();
    let parts: Vec<Result<Vec<Vec<String>>>> = ids
        .par_chunks(batch_size.max(1))
        .map(|idx| {
            let out_b = run_batch(model, params, dataset.batch(idx))?;
            let per = n * 3 * s * s;
            let mut rows = Vec::new();
            for (b, &id) in idx.iter().enumerate() {
                let slots = Tensor::new(vec![n, 3, s, s], out_b.slots.data()[b * per..(b + 1) * per].to_vec())?;
                let activity = slot_activity(&slots);
                let c = &dataset.manifest.scenes[id].circles[0];
                for (slot, &a) in activity.iter().enumerate().filter(|(_, a)| **a > ACTIVITY_THRESHOLD) {
                    let mut row = vec![
                        id.to_string(),
                        slot.to_string(),
                        a.to_string(),
                        c.cx.to_string(),
                        c.cy.to_string(),
                        c.radius.to_string(),
                        c.color_name(),
                    ];
                    let latent = &out_b.latents.data()[(b * n + slot) * d..(b * n + slot + 1) * d];
                    row.extend(latent.iter().map(|v| v.to_string()));
                    rows.push(row);
                }
            }
            Ok(rows)
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory CSV write");
    for p in parts {
        for row in p? {
            w.write_record(&row).expect("in-memory CSV write");
        }
    }
    Ok(csv_string(w))
}

/// Binary PPM (P6) of a `3 x H x W` image with values clamped to `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape(format!("PPM needs a 3 x H x W image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Width of the white separators between grid panels.
pub const GRID_GAP: usize = 2;

/// Tiles equally sized `3 x H x W` panels row-major, `cols` per row,
/// separated by white lines.
pub fn tile_grid(panels: &[Tensor<f32>], cols: usize) -> Result<Tensor<f32>> {
    let first = panels.first().ok_or_else(|| Error::Shape("grid needs at least one panel".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    if panels.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Shape("grid panels differ in shape".into()));
    }
    let cols = cols.clamp(1, panels.len());
    let rows = panels.len().div_ceil(cols);
    let gh = rows * h + (rows - 1) * GRID_GAP;
    let gw = cols * w + (cols - 1) * GRID_GAP;
    let mut out = Tensor::ones(&[3, gh, gw]);
    let data = out.data_mut();
    for (k, p) in panels.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + GRID_GAP), (k % cols) * (w + GRID_GAP));
        for c in 0..3 {
            for y in 0..h {
                let src = &p.data()[c * h * w + y * w..c * h * w + (y + 1) * w];
                let at = c * gh * gw + (oy + y) * gw + ox;
                data[at..at + w].copy_from_slice(src);
            }
        }
    }
    // Cells past the last panel stay black.
    for k in panels.len()..rows * cols {
        let (oy, ox) = ((k / cols) * (h + GRID_GAP), (k % cols) * (w + GRID_GAP));
        for c in 0..3 {
            for y in 0..h {
                let at = c * gh * gw + (oy + y) * gw + ox;
                data[at..at + w].fill(0.0);
            }
        }
    }
    Ok(out)
}
