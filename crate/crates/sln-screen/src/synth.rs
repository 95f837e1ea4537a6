//! Procedural stand-in corpus with a learnable ordinal class signal.
//!
//! Each patch is a light stain-toned background scattered with dark
//! roundish blobs. Blob density and radius grow with the diagnostic
//! category; categories 0/1 and 2/3 overlap heavily by construction while
//! the two clinical groups separate well. Slides carry a color jitter so
//! texture, not palette, carries the signal. Generation is fully
//! deterministic per seed: the per-patch random stream depends only on
//! (seed, slide index, patch index), so the same seed always produces
//! byte-identical image files regardless of split policy or label games.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{
    CaseRecord, Corpus, DiagnosticCategory, LabelMode, PatchRecord, SlideRecord, SlideRole, Split,
    SplitPolicy, PATCHES_PER_SLIDE, PATCH_SIDE, SLIDES_PER_CASE, DEFAULT_SPLIT_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::ppm;
use crate::seeds;

/// Mean blob count per category; 0/1 and 2/3 are close on purpose.
const COUNT_MEAN: [f64; 4] = [10.0, 14.0, 30.0, 36.0];
const COUNT_SIGMA: f64 = 4.0;
/// Mean blob radius (pixels) per category.
const RADIUS_MEAN: [f64; 4] = [2.2, 2.5, 3.0, 3.3];
const RADIUS_SIGMA: f64 = 0.45;
const RADIUS_RANGE: (f64, f64) = (1.3, 5.0);

const BACKGROUND: [f64; 3] = [0.86, 0.80, 0.88];
const SLIDE_JITTER: f64 = 0.035;
const BLOB_COLOR: [f64; 3] = [0.36, 0.26, 0.55];
const BLOB_JITTER: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.015;
const ALPHA_PEAK: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub seed: u64,
    /// Cases per category code 0..3.
    pub category_counts: [usize; 4],
    pub split_fractions: [f64; 3],
    pub policy: SplitPolicy,
    pub label_mode: LabelMode,
    /// When set, case diagnoses are shuffled with this seed after
    /// generation (label-permutation control; images are unaffected).
    pub permute_seed: Option<u64>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            seed: 42,
            category_counts: [10, 6, 8, 10],
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
            policy: SplitPolicy::default(),
            label_mode: LabelMode::Case,
            permute_seed: None,
        }
    }
}

/// Number of blobs for one patch of the given category.
pub fn blob_count(category: DiagnosticCategory, rng: &mut ChaCha8Rng) -> usize {
    let dist = Normal::new(COUNT_MEAN[category.code() as usize], COUNT_SIGMA).unwrap();
    dist.sample(rng).round().max(0.0) as usize
}

fn blob_radius(category: DiagnosticCategory, rng: &mut ChaCha8Rng) -> f64 {
    let dist = Normal::new(RADIUS_MEAN[category.code() as usize], RADIUS_SIGMA).unwrap();
    dist.sample(rng).clamp(RADIUS_RANGE.0, RADIUS_RANGE.1)
}

fn jitter3(rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    [
        rng.gen_range(-amount..amount),
        rng.gen_range(-amount..amount),
        rng.gen_range(-amount..amount),
    ]
}

/// Render one 100x100 patch of the given texture category.
fn render_patch(category: DiagnosticCategory, slide_tint: [f64; 3], patch_seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(patch_seed);
    let side = PATCH_SIDE;
    let mut canvas = vec![0.0f64; side * side * 3];
    for px in canvas.chunks_exact_mut(3) {
        for ((v, bg), t) in px.iter_mut().zip(BACKGROUND).zip(slide_tint) {
            *v = (bg + t).clamp(0.0, 1.0);
        }
    }

    let count = blob_count(category, &mut rng);
    for _ in 0..count {
        let cx = rng.gen_range(0.0..side as f64);
        let cy = rng.gen_range(0.0..side as f64);
        let radius = blob_radius(category, &mut rng);
        let sigma = radius / 1.8;
        let tint = jitter3(&mut rng, BLOB_JITTER);
        let color = [
            (BLOB_COLOR[0] + tint[0]).clamp(0.0, 1.0),
            (BLOB_COLOR[1] + tint[1]).clamp(0.0, 1.0),
            (BLOB_COLOR[2] + tint[2]).clamp(0.0, 1.0),
        ];
        let reach = (3.0 * sigma).ceil() as isize;
        let (icx, icy) = (cx.floor() as isize, cy.floor() as isize);
        for py in (icy - reach).max(0)..=(icy + reach).min(side as isize - 1) {
            for px in (icx - reach).max(0)..=(icx + reach).min(side as isize - 1) {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                let alpha = ALPHA_PEAK * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                if alpha < 0.01 {
                    continue;
                }
                let at = (py as usize * side + px as usize) * 3;
                for ch in 0..3 {
                    canvas[at + ch] = canvas[at + ch] * (1.0 - alpha) + color[ch] * alpha;
                }
            }
        }
    }

    canvas
        .iter()
        .map(|&v| {
            let noisy = v + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Generate image files plus a validated, split-assigned manifest under
/// `out_dir`. Returns the corpus as written to `out_dir/manifest.jsonl`.
pub fn generate(out_dir: &Path, opts: &SynthOptions) -> Result<Corpus> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // layout: cases in category blocks, 2 slides each, 40 patches per slide
    let mut cases = Vec::new();
    let mut slides = Vec::new();
    let mut patches = Vec::new();
    let mut case_no = 0usize;
    for (code, &count) in opts.category_counts.iter().enumerate() {
        let category = DiagnosticCategory::from_code(code as u8).unwrap();
        for _ in 0..count {
            let case_id = format!("case{case_no:02}");
            let mut slide_ids = Vec::with_capacity(SLIDES_PER_CASE);
            for s in 0..SLIDES_PER_CASE {
                let slide_id = format!("{case_id}_s{s}");
                let role = if category.group().is_positive() && s == 0 {
                    SlideRole::Involved
                } else {
                    SlideRole::Uninvolved
                };
                let mut patch_ids = Vec::with_capacity(PATCHES_PER_SLIDE);
                for p in 0..PATCHES_PER_SLIDE {
                    let patch_id = format!("{slide_id}_p{p:02}");
                    let observed_dx = match (opts.label_mode, role) {
                        (LabelMode::Case, _) | (LabelMode::Slide, SlideRole::Involved) => category,
                        (LabelMode::Slide, SlideRole::Uninvolved) => DiagnosticCategory::Negative,
                    };
                    patches.push(PatchRecord {
                        patch_id: patch_id.clone(),
                        slide_id: slide_id.clone(),
                        path: format!("images/{slide_id}/{patch_id}.ppm"),
                        observed_dx,
                        split: Split::Train,
                    });
                    patch_ids.push(patch_id);
                }
                slides.push(SlideRecord {
                    slide_id: slide_id.clone(),
                    case_id: case_id.clone(),
                    role,
                    patch_ids,
                });
                slide_ids.push(slide_id);
            }
            cases.push(CaseRecord {
                case_id,
                diagnosis: category,
                slide_ids,
            });
            case_no += 1;
        }
    }

    let mut corpus = Corpus::new(out_dir.to_path_buf(), cases, slides, patches)?;
    corpus.assign_splits(opts.split_fractions, opts.policy, seeds::mix(opts.seed, 1))?;
    if let Some(permute_seed) = opts.permute_seed {
        corpus = corpus.permute_case_labels(permute_seed);
    }

    // Textures follow the layout category of the case, never the
    // (possibly permuted) label.
    let mut slide_global = 0u64;
    for case_no in 0..corpus.cases().len() {
        let texture = layout_category(&opts.category_counts, case_no);
        let case = &corpus.cases()[case_no];
        for slide_id in case.slide_ids.clone() {
            let slide_seed = seeds::mix(opts.seed, 1000 + slide_global);
            slide_global += 1;
            let mut slide_rng = ChaCha8Rng::seed_from_u64(slide_seed);
            let tint = jitter3(&mut slide_rng, SLIDE_JITTER);

            let dir = out_dir.join("images").join(&slide_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let slide = corpus.slide(&slide_id).unwrap();
            for (p, patch_id) in slide.patch_ids.clone().into_iter().enumerate() {
                let patch_seed = seeds::mix(slide_seed, p as u64);
                let rgb = render_patch(texture, tint, patch_seed);
                let path = dir.join(format!("{patch_id}.ppm"));
                ppm::write(&path, PATCH_SIDE, PATCH_SIDE, &rgb)?;
            }
        }
    }

    corpus.save_manifest(&out_dir.join("manifest.jsonl"))?;
    Ok(corpus)
}

/// Category of the n-th case in the block layout.
fn layout_category(counts: &[usize; 4], case_no: usize) -> DiagnosticCategory {
    let mut at = case_no;
    for (code, &count) in counts.iter().enumerate() {
        if at < count {
            return DiagnosticCategory::from_code(code as u8).unwrap();
        }
        at -= count;
    }
    panic!("case index {case_no} outside layout");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    #[test]
    fn blob_count_mean_strictly_increases_with_category() {
        let mut means = [0.0f64; 4];
        for (code, mean) in means.iter_mut().enumerate() {
            let category = DiagnosticCategory::from_code(code as u8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let total: usize = (0..1000).map(|_| blob_count(category, &mut rng)).sum();
            *mean = total as f64 / 1000.0;
        }
        assert!(
            means[0] < means[1] && means[1] < means[2] && means[2] < means[3],
            "means {means:?}"
        );
    }

    #[test]
    fn small_layout_generates_deterministically() {
        let opts = SynthOptions {
            category_counts: [2, 2, 2, 2],
            split_fractions: [0.75, 0.125, 0.125],
            ..SynthOptions::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let corpus_a = generate(dir_a.path(), &opts).unwrap();
        let _ = generate(dir_b.path(), &opts).unwrap();

        assert_eq!(corpus_a.cases().len(), 8);
        assert_eq!(corpus_a.slides().len(), 16);
        assert_eq!(corpus_a.patches().len(), 640);
        assert_eq!(corpus_a.split_counts(), [480, 80, 80]);

        // identical manifests and identical bytes for a sample of images
        let ma = fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let mb = fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
        for patch in corpus_a.patches().iter().step_by(37) {
            let a = fs::read(dir_a.path().join(&patch.path)).unwrap();
            let b = fs::read(dir_b.path().join(&patch.path)).unwrap();
            assert_eq!(a, b, "patch {}", patch.patch_id);
        }

        // written manifest loads back and validates
        let reloaded = load_manifest(&dir_a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.patches().len(), 640);
    }

    #[test]
    fn permuted_labels_keep_images_and_change_diagnoses() {
        let base = SynthOptions {
            category_counts: [2, 2, 2, 2],
            split_fractions: [0.75, 0.125, 0.125],
            ..SynthOptions::default()
        };
        let permuted_opts = SynthOptions {
            permute_seed: Some(3),
            ..base.clone()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let plain = generate(dir_a.path(), &base).unwrap();
        let permuted = generate(dir_b.path(), &permuted_opts).unwrap();

        let dx = |c: &Corpus| -> Vec<u8> { c.cases().iter().map(|x| x.diagnosis.code()).collect() };
        let mut sorted_plain = dx(&plain);
        let mut sorted_perm = dx(&permuted);
        assert_ne!(dx(&plain), dx(&permuted), "permutation with seed 3 must move labels");
        sorted_plain.sort();
        sorted_perm.sort();
        assert_eq!(sorted_plain, sorted_perm, "permutation preserves label multiset");

        for patch in plain.patches().iter().step_by(53) {
            let a = fs::read(dir_a.path().join(&patch.path)).unwrap();
            let b = fs::read(dir_b.path().join(&patch.path)).unwrap();
            assert_eq!(a, b, "images must not depend on labels");
        }
    }
}
