//! WebAssembly bindings behind the static page in `www/`.
//!
//! The plain functions return `Result<_, String>` and are tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use motion_diffusion::control::{combine_part_noise, BodyPart, PartSpec};
use motion_diffusion::diffusion::{q_sample, standard_normal, Schedule};
use motion_diffusion::motion::{render_template, CorpusSpec, Standardizer};
use motion_diffusion::numerics::Matrix;
use motion_diffusion::text::TokenSeq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Frames rendered per class when fitting the demo's statistics.
const STATS_FRAMES: usize = 64;

fn spec() -> CorpusSpec {
    CorpusSpec::default()
}

/// `ᾱ_t` for `t = 0..=steps`.
pub fn alpha_bar_curve(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, String> {
    let s = Schedule::linear(steps, beta_start, beta_end).map_err(|e| e.to_string())?;
    Ok((0..=steps).map(|t| s.alpha_bar(t)).collect())
}

/// Parent index per joint, `-1` for the root.
pub fn skeleton_parents() -> Vec<i32> {
    spec()
        .skeleton
        .parents
        .iter()
        .map(|p| p.map_or(-1, |i| i as i32))
        .collect()
}

pub fn class_prompts() -> Vec<String> {
    spec().templates.iter().map(|t| t.prompt.clone()).collect()
}

fn template_frames(class_id: usize, frames: usize) -> Result<Matrix, String> {
    let spec = spec();
    let t = spec
        .templates
        .get(class_id)
        .ok_or_else(|| format!("class {class_id} outside 0..{}", spec.templates.len()))?;
    Ok(render_template(t, &spec.skeleton, frames, spec.fps))
}

fn demo_stats() -> Result<Standardizer, String> {
    let spec = spec();
    let clean: Vec<Matrix> = spec
        .templates
        .iter()
        .map(|t| render_template(t, &spec.skeleton, STATS_FRAMES, spec.fps))
        .collect();
    Standardizer::fit(clean.iter()).map_err(|e| e.to_string())
}

/// Joint positions (`x, y, z` per joint) of frame `frame` of class
/// `class_id` after forward diffusion to step `t` in standardized space.
/// `t = 0` returns the clean pose.
pub fn noised_pose(
    class_id: usize,
    frame: usize,
    t: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let x0 = template_frames(class_id, frame + 1)?;
    let row = x0.slice(ndarray::s![frame..frame + 1, ..]).to_owned();
    if t == 0 {
        return Ok(row.iter().copied().collect());
    }
    let sched = Schedule::linear(steps, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let stats = demo_stats()?;
    let z = stats.normalize(&row).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(&mut rng, 1, z.ncols());
    let xt = q_sample(&z, t, &eps, &sched).map_err(|e| e.to_string())?;
    let out = stats.denormalize(&xt).map_err(|e| e.to_string())?;
    Ok(out.iter().copied().collect())
}

/// Frame `frame` of a pose whose upper body follows `upper_class` and whose
/// lower body follows `lower_class`, merged by the body-part combiner.
pub fn part_blend(
    upper_class: usize,
    lower_class: usize,
    frame: usize,
) -> Result<Vec<f64>, String> {
    let spec = spec();
    let layout = spec.layout();
    let a = template_frames(upper_class, frame + 1)?;
    let b = template_frames(lower_class, frame + 1)?;
    let part = |joints: &[usize]| BodyPart {
        tokens: TokenSeq::new(vec![1]),
        mask: layout.joint_mask(joints),
    };
    let mut parts = PartSpec::new(vec![part(&spec.skeleton.upper), part(&spec.skeleton.lower)]);
    parts.lambda1 = 0.0;
    let merged = combine_part_noise(&[a, b], &parts).map_err(|e| e.to_string())?;
    Ok(merged.row(frame).iter().copied().collect())
}

#[wasm_bindgen(js_name = alphaBarCurve)]
pub fn alpha_bar_curve_js(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Vec<f64>, JsError> {
    alpha_bar_curve(steps, beta_start, beta_end).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = skeletonParents)]
pub fn skeleton_parents_js() -> Vec<i32> {
    skeleton_parents()
}

#[wasm_bindgen(js_name = classPrompts)]
pub fn class_prompts_js() -> Vec<String> {
    class_prompts()
}

#[wasm_bindgen(js_name = noisedPose)]
pub fn noised_pose_js(
    class_id: usize,
    frame: usize,
    t: usize,
    steps: usize,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    noised_pose(class_id, frame, t, steps, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = partBlend)]
pub fn part_blend_js(
    upper_class: usize,
    lower_class: usize,
    frame: usize,
) -> Result<Vec<f64>, JsError> {
    part_blend(upper_class, lower_class, frame).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_starts_at_one_and_decreases() {
        let c = alpha_bar_curve(4, 0.1, 0.4).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c[0], 1.0);
        assert!((c[4] - 0.3024).abs() < 1e-12);
        assert!(alpha_bar_curve(0, 0.1, 0.4).is_err());
    }

    #[test]
    fn clean_pose_is_the_template() {
        let p = noised_pose(0, 5, 0, 1000, 1).unwrap();
        let t = template_frames(0, 6).unwrap();
        assert_eq!(p, t.row(5).to_vec());
        assert_eq!(p.len(), 3 * skeleton_parents().len());
    }

    #[test]
    fn late_steps_are_mostly_noise() {
        let clean = noised_pose(2, 3, 0, 1000, 1).unwrap();
        let early = noised_pose(2, 3, 1, 1000, 1).unwrap();
        let late = noised_pose(2, 3, 1000, 1000, 1).unwrap();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(dist(&clean, &early) < dist(&clean, &late));
        assert!(noised_pose(9, 0, 0, 1000, 1).is_err());
    }
}
