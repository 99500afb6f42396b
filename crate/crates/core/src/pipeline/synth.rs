//! Synthetic fundus-like captioning data.
//!
//! Each image carries one lesion blob. Its colour picks the lesion word,
//! its radius the size word and its quadrant the location phrase; the
//! disease picks both the keyword list and the closing phrase. Keywords are
//! a function of the disease alone, so they cannot determine the caption.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ModelConfig, VisualInput};
use super::dataset::ManifestLine;
use crate::error::{Error, Result};
use crate::tensor::{gten, Rng, Tensor};

pub const DISEASES: [(&str, &str); 4] = [
    (
        "diabetic retinopathy",
        "diabetic retinopathy fundus photograph retina screening",
    ),
    (
        "macular degeneration",
        "macular degeneration fundus photograph retina elderly",
    ),
    (
        "retinal vein occlusion",
        "vein occlusion fundus photograph retina venous",
    ),
    (
        "hypertensive retinopathy",
        "hypertensive retinopathy fundus photograph retina arterial",
    ),
];

/// Lesion word and RGB colour.
pub const LESIONS: [(&str, [f64; 3]); 3] = [
    ("hemorrhage", [0.35, 0.02, 0.02]),
    ("exudate", [0.95, 0.9, 0.25]),
    ("drusen", [0.6, 0.75, 0.95]),
];

/// Quadrant phrase and blob centre as a fraction of the image side.
pub const QUADRANTS: [(&str, [f64; 2]); 4] = [
    ("superotemporal", [0.25, 0.25]),
    ("superonasal", [0.25, 0.75]),
    ("inferotemporal", [0.75, 0.25]),
    ("inferonasal", [0.75, 0.75]),
];

pub const SIZES: [(&str, f64); 2] = [("small", 0.1), ("large", 0.2)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub disease: usize,
    pub lesion: usize,
    pub quadrant: usize,
    pub size: usize,
}

impl Plan {
    pub fn keywords(&self) -> &'static str {
        DISEASES[self.disease].1
    }

    pub fn caption(&self) -> String {
        format!(
            "{} {} in the {} quadrant consistent with {}",
            SIZES[self.size].0,
            LESIONS[self.lesion].0,
            QUADRANTS[self.quadrant].0,
            DISEASES[self.disease].0
        )
    }
}

fn draw_plans(n: usize, rng: &mut Rng) -> Vec<Plan> {
    let mut plans: Vec<Plan> = (0..n)
        .map(|_| Plan {
            disease: rng.below(DISEASES.len()),
            lesion: rng.below(LESIONS.len()),
            quadrant: rng.below(QUADRANTS.len()),
            size: rng.below(SIZES.len()),
        })
        .collect();
    if n >= 2 && !is_ambiguous(&plans) {
        plans[1] = Plan {
            disease: plans[0].disease,
            quadrant: (plans[0].quadrant + 1) % QUADRANTS.len(),
            ..plans[1]
        };
    }
    plans
}

/// True when some keyword list is shared by two different captions.
pub fn is_ambiguous(plans: &[Plan]) -> bool {
    let mut by_kw: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for p in plans {
        by_kw.entry(p.keywords()).or_default().push(p.caption());
    }
    by_kw
        .values()
        .any(|caps| caps.iter().any(|c| c != &caps[0]))
}

/// Dim reddish background with noise, plus the planned blob.
pub fn render_image(plan: &Plan, size: usize, rng: &mut Rng) -> Tensor<f32> {
    let s = size as f64;
    let jitter = [
        (rng.uniform() - 0.5) * 0.1 * s,
        (rng.uniform() - 0.5) * 0.1 * s,
    ];
    let c = QUADRANTS[plan.quadrant].1;
    let (cy, cx) = (c[0] * s + jitter[0], c[1] * s + jitter[1]);
    let radius = SIZES[plan.size].1 * s;
    let colour = LESIONS[plan.lesion].1;
    let background = [0.55, 0.22, 0.1];
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let inside = d <= radius;
            for ch in 0..3 {
                let base = if inside { colour[ch] } else { background[ch] };
                let v = base + 0.03 * rng.normal();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("shape matches data")
}

/// Feature-map stand-in: one-hot lesion channels over the quadrant's cells,
/// scaled by size, on low-amplitude noise.
pub fn render_features(plan: &Plan, side: usize, channels: usize, rng: &mut Rng) -> Tensor<f32> {
    let half = side.div_ceil(2);
    let (qy, qx) = (
        (plan.quadrant / 2) * (side - half),
        (plan.quadrant % 2) * (side - half),
    );
    let mut t = rng.gaussian::<f32>(&[side, side, channels], 0.05);
    let amp = 1.0 + plan.size as f32;
    let ch = plan.lesion % channels;
    for y in qy..qy + half {
        for x in qx..qx + half {
            t.data_mut()[(y * side + x) * channels + ch] += amp;
        }
    }
    t
}

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub lines: Vec<ManifestLine>,
}

/// Writes `n` samples (`images/<id>.gten`) and `manifest.jsonl` into `out`.
pub fn generate_synthetic(
    cfg: &ModelConfig,
    n: usize,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<SynthOutput> {
    if n == 0 {
        return Err(Error::config("synth needs n >= 1"));
    }
    cfg.validate()?;
    let out = out.as_ref();
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = Rng::new(seed);
    let plans = draw_plans(n, &mut rng);
    if n >= 2 && !is_ambiguous(&plans) {
        return Err(Error::contract(
            "synthetic set failed the keyword ambiguity check",
        ));
    }
    if n < 2 {
        log::warn!("a single synthetic sample cannot make keywords ambiguous");
    }
    let mut lines = Vec::with_capacity(n);
    let mut text = String::new();
    for (i, plan) in plans.iter().enumerate() {
        let id = format!("syn{seed}-{i:05}");
        let visual = match cfg.visual_input {
            VisualInput::Image => render_image(plan, cfg.image_size, &mut rng),
            VisualInput::Features => {
                render_features(plan, cfg.feature_hw(), cfg.channels, &mut rng)
            }
        };
        let rel = format!("images/{id}.gten");
        gten::write(out.join(&rel), &visual)?;
        let line = ManifestLine {
            id,
            image: rel,
            keywords: plan.keywords().to_string(),
            caption: plan.caption(),
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
        lines.push(line);
    }
    let manifest = out.join("manifest.jsonl");
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(SynthOutput { manifest, lines })
}
