//! Epipolar cross-attention visualization and a planted-correspondence probe.

use std::path::Path;

use pairsplat::autodiff::{ParamStore, Tape, Tensor};
use pairsplat::encoder::{EpipolarAttentionRecord, FEATURE_DOWNSAMPLE};
use pairsplat::geometry::Camera;
use pairsplat::model::{Model, PairInput, PreparedPair};
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::io::write_png;
use crate::scene::SceneRenderer;

/// Attention of every epipolar layer application for one pair, view 0 and 1
/// queries interleaved per round.
pub fn attention_records(model: &Model, store: &ParamStore, pair: &PairInput) -> Result<(Vec<EpipolarAttentionRecord>, PreparedPair)> {
    let prepared = model.prepare(pair, &[])?;
    let tape = Tape::new();
    let params = store.bind(&tape);
    let images = [tape.constant(pair.images[0].clone()), tape.constant(pair.images[1].clone())];
    let encoded = model.encode(&params, images, &prepared)?;
    Ok((encoded.records, prepared))
}

fn record(records: &[EpipolarAttentionRecord], view: usize, round: usize) -> Result<&EpipolarAttentionRecord> {
    records
        .iter()
        .find(|r| r.query_view == view && r.round == round)
        .ok_or_else(|| HarnessError::validation(format!("no epipolar attention for view {view} round {round}")))
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleWeight {
    /// Target-image pixel coordinate.
    pub pixel: [f64; 2],
    /// Canonical source-ray depth.
    pub depth: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QueryDump {
    /// Feature-grid query pixel `(column, row)` in view 0.
    pub query: [usize; 2],
    /// `None` when the epipolar segment is empty.
    pub reference_png: Option<String>,
    pub target_png: Option<String>,
    /// Shade 255 corresponds to this weight.
    pub scale: f64,
    pub skipped: Option<String>,
    pub samples: Vec<SampleWeight>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionSidecar {
    pub round: usize,
    pub downsample: usize,
    pub queries: Vec<QueryDump>,
}

fn shade(image: &mut [f64], width: usize, x: f64, y: f64, rgb: [f64; 3]) {
    let height = image.len() / (3 * width);
    let (i, j) = (x.floor() as isize, y.floor() as isize);
    if i < 0 || j < 0 || i as usize >= width || j as usize >= height {
        return;
    }
    let p = 3 * (j as usize * width + i as usize);
    image[p..p + 3].copy_from_slice(&rgb);
}

/// Writes, per query, the reference image with the query marked red and the
/// dimmed target image with epipolar samples shaded by attention weight
/// (normalized so the largest weight is 255), plus `attention.json`.
pub fn dump_attention(
    model: &Model,
    store: &ParamStore,
    pair: &PairInput,
    queries: &[[usize; 2]],
    round: usize,
    out_dir: &Path,
) -> Result<AttentionSidecar> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let (records, prepared) = attention_records(model, store, pair)?;
    let rec = record(&records, 0, round)?;
    let geometry = prepared.geometry.view(0);
    let (fh, fw) = model.encoder().feature_size();
    let s = FEATURE_DOWNSAMPLE as f64;
    let (h, w) = model.image_size();
    let mut dumps = Vec::new();
    for (k, &[qi, qj]) in queries.iter().enumerate() {
        if qi >= fw || qj >= fh {
            return Err(HarnessError::validation(format!("query ({qi}, {qj}) is outside the {fw}x{fh} feature grid")));
        }
        let p = qj * fw + qi;
        let Some((pixels, depths)) = geometry.segment(p) else {
            dumps.push(QueryDump {
                query: [qi, qj],
                reference_png: None,
                target_png: None,
                scale: 0.0,
                skipped: Some("empty epipolar segment".into()),
                samples: Vec::new(),
            });
            continue;
        };
        let l = rec.weights.shape()[1];
        let weights = &rec.weights.data()[p * l..(p + 1) * l];
        let scale = weights.iter().cloned().fold(0.0, f64::max);

        let mut reference = pair.images[0].data().to_vec();
        for dy in 0..FEATURE_DOWNSAMPLE {
            for dx in 0..FEATURE_DOWNSAMPLE {
                shade(&mut reference, w, (qi * FEATURE_DOWNSAMPLE + dx) as f64, (qj * FEATURE_DOWNSAMPLE + dy) as f64, [1.0, 0.0, 0.0]);
            }
        }
        let mut target: Vec<f64> = pair.images[1].data().iter().map(|v| 0.3 * v).collect();
        let mut samples = Vec::with_capacity(l);
        for ((px, &d), &wt) in pixels.iter().zip(depths).zip(weights) {
            let v = if scale > 0.0 { (wt / scale * 255.0).round() / 255.0 } else { 0.0 };
            // Feature-grid coordinates to image pixels.
            shade(&mut target, w, px.x * s, px.y * s, [v, v, 0.0]);
            samples.push(SampleWeight {
                pixel: [px.x * s, px.y * s],
                depth: d,
                weight: wt,
            });
        }
        let rname = format!("query_{k:03}_reference.png");
        let tname = format!("query_{k:03}_target.png");
        write_png(&Tensor::new(&[h, w, 3], reference)?, &out_dir.join(&rname))?;
        write_png(&Tensor::new(&[h, w, 3], target)?, &out_dir.join(&tname))?;
        dumps.push(QueryDump {
            query: [qi, qj],
            reference_png: Some(rname),
            target_png: Some(tname),
            scale,
            skipped: None,
            samples,
        });
    }
    let sidecar = AttentionSidecar {
        round,
        downsample: FEATURE_DOWNSAMPLE,
        queries: dumps,
    };
    let path = out_dir.join("attention.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| HarnessError::io(&path, e))?;
    Ok(sidecar)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CorrespondenceAccuracy {
    pub probed: usize,
    pub hits: usize,
}

impl CorrespondenceAccuracy {
    pub fn fraction(&self) -> f64 {
        if self.probed == 0 {
            0.0
        } else {
            self.hits as f64 / self.probed as f64
        }
    }
}

/// Fraction of view-0 feature pixels whose argmax attention sample lies
/// within `tolerance` samples of the true correspondence. The truth is the
/// sample nearest in disparity to the analytic surface hit; pixels whose hit
/// is missing or falls outside their segment are not probed.
pub fn correspondence_accuracy(
    model: &Model,
    store: &ParamStore,
    renderer: &SceneRenderer,
    pair: &PairInput,
    round: usize,
    tolerance: usize,
) -> Result<CorrespondenceAccuracy> {
    let (records, prepared) = attention_records(model, store, pair)?;
    let rec = record(&records, 0, round)?;
    let geometry = prepared.geometry.view(0);
    let feat: Camera<f64> = pair.cameras[0].downsampled(FEATURE_DOWNSAMPLE)?;
    let unit = prepared.canonical.unit;
    let l = rec.weights.shape()[1];
    let mut out = CorrespondenceAccuracy { probed: 0, hits: 0 };
    for j in 0..feat.height() {
        for i in 0..feat.width() {
            let p = j * feat.width() + i;
            let Some((_, depths)) = geometry.segment(p) else { continue };
            let ray = feat.ray(Camera::pixel_center(i, j))?;
            // Rendering is at unit scale; `scale` maps it into pose units.
            let scale = renderer.spec().scale;
            let Some(t) = renderer.hit_distance(ray.origin.scale(1.0 / scale), ray.direction) else { continue };
            let truth = 1.0 / (t * scale / unit);
            let (lo, hi) = (1.0 / depths[l - 1], 1.0 / depths[0]);
            if truth < lo || truth > hi {
                continue;
            }
            let nearest = (0..l)
                .min_by(|&a, &b| (1.0 / depths[a] - truth).abs().total_cmp(&(1.0 / depths[b] - truth).abs()))
                .expect("segments are non-empty");
            let weights = &rec.weights.data()[p * l..(p + 1) * l];
            let best = (0..l).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).expect("non-empty");
            out.probed += 1;
            if best.abs_diff(nearest) <= tolerance {
                out.hits += 1;
            }
        }
    }
    Ok(out)
}
