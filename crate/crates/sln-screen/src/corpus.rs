//! The case -> slide -> patch hierarchy: diagnostic categories, manifest
//! I/O with eager validation, split assignment, vote-set construction,
//! and patch decoding.
//!
//! Labels default to the owning case's diagnosis for every patch, even on
//! the uninvolved slide of a positive case: the classifier is meant to
//! pick up changes in the surrounding tissue, not the tumor itself. A
//! slide-level labeling mode (uninvolved slides marked negative) exists
//! for ablation and validates under the same manifest schema.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm;
use crate::tensor::Tensor;

pub const PATCH_SIDE: usize = 100;
pub const PATCHES_PER_SLIDE: usize = 40;
pub const SLIDES_PER_CASE: usize = 2;
pub const VOTES_PER_SET: usize = 5;

/// Fractions reproducing the canonical 2160/240/320 image split.
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [2160.0 / 2720.0, 240.0 / 2720.0, 320.0 / 2720.0];

/// Four-category diagnosis, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiagnosticCategory {
    /// No metastatic tumor cells.
    Negative,
    /// Isolated tumor cells: up to 200 cells and/or smaller than 0.2 mm.
    IsolatedTumorCells,
    /// Tumor region of at least 200 cells or between 0.2 mm and 2.0 mm.
    Micrometastasis,
    /// Tumor region of at least 2.0 mm.
    Macrometastasis,
}

/// Clinical binary grouping of the four categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryLabel {
    Negative,
    Positive,
}

impl BinaryLabel {
    pub fn is_positive(self) -> bool {
        matches!(self, BinaryLabel::Positive)
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::Negative => "negative",
            BinaryLabel::Positive => "positive",
        }
    }
}

impl DiagnosticCategory {
    pub const COUNT: usize = 4;
    pub const ALL: [DiagnosticCategory; 4] = [
        DiagnosticCategory::Negative,
        DiagnosticCategory::IsolatedTumorCells,
        DiagnosticCategory::Micrometastasis,
        DiagnosticCategory::Macrometastasis,
    ];

    pub fn code(self) -> u8 {
        match self {
            DiagnosticCategory::Negative => 0,
            DiagnosticCategory::IsolatedTumorCells => 1,
            DiagnosticCategory::Micrometastasis => 2,
            DiagnosticCategory::Macrometastasis => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Grouped ranking: codes 0 and 1 are clinically negative, 2 and 3
    /// positive.
    pub fn group(self) -> BinaryLabel {
        match self {
            DiagnosticCategory::Negative | DiagnosticCategory::IsolatedTumorCells => BinaryLabel::Negative,
            DiagnosticCategory::Micrometastasis | DiagnosticCategory::Macrometastasis => BinaryLabel::Positive,
        }
    }

    /// Argmax over per-class scores; ties break toward the lowest code.
    pub fn from_scores<T: PartialOrd + Copy>(scores: &[T]) -> Self {
        assert_eq!(scores.len(), Self::COUNT, "expected 4 class scores");
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        Self::from_code(best as u8).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            DiagnosticCategory::Negative => "Negative",
            DiagnosticCategory::IsolatedTumorCells => "ITC",
            DiagnosticCategory::Micrometastasis => "Micro Met",
            DiagnosticCategory::Macrometastasis => "Macro Met",
        }
    }
}

impl fmt::Display for DiagnosticCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideRole {
    /// Contains the metastatic focus of a positive case.
    Involved,
    Uninvolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub diagnosis: DiagnosticCategory,
    pub slide_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SlideRecord {
    pub slide_id: String,
    pub case_id: String,
    pub role: SlideRole,
    pub patch_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub observed_dx: DiagnosticCategory,
    pub split: Split,
}

/// Five test patches from one slide, voted as a unit.
#[derive(Debug, Clone)]
pub struct VoteSet {
    pub set_id: String,
    pub slide_id: String,
    pub patch_ids: Vec<String>,
    pub observed_dx: DiagnosticCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// All 40 patches of a slide share a split. With `case_coherent`,
    /// both slides of a case stay together as well.
    Slide { case_coherent: bool },
    /// Patches are assigned independently (leakage-prone; for fidelity
    /// experiments only).
    Image,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Slide { case_coherent: true }
    }
}

/// Patch label derivation written into generated manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Every patch inherits the case diagnosis (default).
    Case,
    /// Patches on uninvolved slides are labeled negative (ablation).
    Slide,
}

// Wire format of one manifest line.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestRecord {
    Case {
        case_id: String,
        diagnosis: u8,
        slide_ids: Vec<String>,
    },
    Slide {
        slide_id: String,
        case_id: String,
        role: SlideRole,
        patch_ids: Vec<String>,
    },
    Patch {
        patch_id: String,
        slide_id: String,
        path: String,
        observed_dx: u8,
        split: Split,
    },
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    root: PathBuf,
    cases: Vec<CaseRecord>,
    slides: Vec<SlideRecord>,
    patches: Vec<PatchRecord>,
    case_index: HashMap<String, usize>,
    slide_index: HashMap<String, usize>,
    patch_index: HashMap<String, usize>,
}

fn invalid(kind: &str, id: &str, reason: impl Into<String>) -> Error {
    Error::InvalidRecord {
        kind: kind.to_string(),
        id: id.to_string(),
        reason: reason.into(),
    }
}

impl Corpus {
    /// Assemble and validate a corpus from its records. `root` is the
    /// directory patch paths are relative to.
    pub fn new(
        root: PathBuf,
        cases: Vec<CaseRecord>,
        slides: Vec<SlideRecord>,
        patches: Vec<PatchRecord>,
    ) -> Result<Self> {
        let mut corpus = Corpus {
            root,
            cases,
            slides,
            patches,
            case_index: HashMap::new(),
            slide_index: HashMap::new(),
            patch_index: HashMap::new(),
        };
        corpus.rebuild_indexes()?;
        corpus.validate()?;
        Ok(corpus)
    }

    fn rebuild_indexes(&mut self) -> Result<()> {
        self.case_index.clear();
        self.slide_index.clear();
        self.patch_index.clear();
        for (i, c) in self.cases.iter().enumerate() {
            if self.case_index.insert(c.case_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "case".into(),
                    id: c.case_id.clone(),
                });
            }
        }
        for (i, s) in self.slides.iter().enumerate() {
            if self.slide_index.insert(s.slide_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "slide".into(),
                    id: s.slide_id.clone(),
                });
            }
        }
        for (i, p) in self.patches.iter().enumerate() {
            if self.patch_index.insert(p.patch_id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "patch".into(),
                    id: p.patch_id.clone(),
                });
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for case in &self.cases {
            if case.slide_ids.len() != SLIDES_PER_CASE {
                return Err(invalid(
                    "case",
                    &case.case_id,
                    format!("has {} slides, expected {SLIDES_PER_CASE}", case.slide_ids.len()),
                ));
            }
            let mut involved = 0;
            for sid in &case.slide_ids {
                let slide = self.slide(sid).ok_or_else(|| Error::MissingReference {
                    kind: "case".into(),
                    id: case.case_id.clone(),
                    missing_kind: "slide".into(),
                    missing_id: sid.clone(),
                })?;
                if slide.case_id != case.case_id {
                    return Err(invalid(
                        "slide",
                        sid,
                        format!("belongs to case {}, listed under {}", slide.case_id, case.case_id),
                    ));
                }
                if slide.role == SlideRole::Involved {
                    involved += 1;
                }
            }
            let want_involved = match case.diagnosis.group() {
                BinaryLabel::Positive => 1,
                BinaryLabel::Negative => 0,
            };
            if involved != want_involved {
                return Err(invalid(
                    "case",
                    &case.case_id,
                    format!(
                        "{} case must have {want_involved} involved slide(s), found {involved}",
                        case.diagnosis.group().name()
                    ),
                ));
            }
        }

        for slide in &self.slides {
            if !self.case_index.contains_key(&slide.case_id) {
                return Err(Error::MissingReference {
                    kind: "slide".into(),
                    id: slide.slide_id.clone(),
                    missing_kind: "case".into(),
                    missing_id: slide.case_id.clone(),
                });
            }
            let case = self.case(&slide.case_id).unwrap();
            if !case.slide_ids.contains(&slide.slide_id) {
                return Err(invalid(
                    "slide",
                    &slide.slide_id,
                    format!("not listed by its case {}", slide.case_id),
                ));
            }
            if slide.patch_ids.len() != PATCHES_PER_SLIDE {
                return Err(Error::WrongPatchCount {
                    id: slide.slide_id.clone(),
                    found: slide.patch_ids.len(),
                    expected: PATCHES_PER_SLIDE,
                });
            }
            let mut slide_dx: Option<DiagnosticCategory> = None;
            for pid in &slide.patch_ids {
                let patch = self.patch(pid).ok_or_else(|| Error::MissingReference {
                    kind: "slide".into(),
                    id: slide.slide_id.clone(),
                    missing_kind: "patch".into(),
                    missing_id: pid.clone(),
                })?;
                if patch.slide_id != slide.slide_id {
                    return Err(invalid(
                        "patch",
                        pid,
                        format!("belongs to slide {}, listed under {}", patch.slide_id, slide.slide_id),
                    ));
                }
                match slide_dx {
                    None => slide_dx = Some(patch.observed_dx),
                    Some(dx) if dx != patch.observed_dx => {
                        return Err(invalid(
                            "patch",
                            pid,
                            format!(
                                "observed_dx {} differs from its slide's {}",
                                patch.observed_dx, dx
                            ),
                        ));
                    }
                    _ => {}
                }
            }
            // Case labeling carries the case diagnosis onto every patch;
            // slide labeling marks uninvolved slides negative instead.
            let dx = slide_dx.expect("40 patches checked above");
            let case_dx = case.diagnosis;
            let allowed = match slide.role {
                SlideRole::Involved => dx == case_dx,
                SlideRole::Uninvolved => dx == case_dx || dx == DiagnosticCategory::Negative,
            };
            if !allowed {
                return Err(invalid(
                    "slide",
                    &slide.slide_id,
                    format!(
                        "patches labeled {dx} but case {} is {} ({})",
                        case.case_id,
                        case_dx,
                        slide.role_name()
                    ),
                ));
            }
        }

        for patch in &self.patches {
            if !self.slide_index.contains_key(&patch.slide_id) {
                return Err(Error::MissingReference {
                    kind: "patch".into(),
                    id: patch.patch_id.clone(),
                    missing_kind: "slide".into(),
                    missing_id: patch.slide_id.clone(),
                });
            }
            let slide = self.slide(&patch.slide_id).unwrap();
            if !slide.patch_ids.contains(&patch.patch_id) {
                return Err(invalid(
                    "patch",
                    &patch.patch_id,
                    format!("not listed by its slide {}", patch.slide_id),
                ));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }

    pub fn slides(&self) -> &[SlideRecord] {
        &self.slides
    }

    pub fn patches(&self) -> &[PatchRecord] {
        &self.patches
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.case_index.get(id).map(|&i| &self.cases[i])
    }

    pub fn slide(&self, id: &str) -> Option<&SlideRecord> {
        self.slide_index.get(id).map(|&i| &self.slides[i])
    }

    pub fn patch(&self, id: &str) -> Option<&PatchRecord> {
        self.patch_index.get(id).map(|&i| &self.patches[i])
    }

    pub fn case_of_patch(&self, patch: &PatchRecord) -> &CaseRecord {
        let slide = self.slide(&patch.slide_id).expect("validated");
        self.case(&slide.case_id).expect("validated")
    }

    /// Patches of one split, ordered by patch id.
    pub fn split_patches(&self, split: Split) -> Vec<&PatchRecord> {
        let mut out: Vec<&PatchRecord> = self.patches.iter().filter(|p| p.split == split).collect();
        out.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        out
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for p in &self.patches {
            match p.split {
                Split::Train => counts[0] += 1,
                Split::Val => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        counts
    }

    /// Assign splits. The default slide policy keeps all 40 patches of a
    /// slide together; fractions must land on whole slides (or whole
    /// cases when coherent), otherwise the nearest achievable counts are
    /// reported in the error.
    pub fn assign_splits(&mut self, fractions: [f64; 3], policy: SplitPolicy, seed: u64) -> Result<()> {
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions { sum });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match policy {
            SplitPolicy::Slide { case_coherent: true } => {
                let counts = exact_counts(fractions, self.cases.len(), "case")?;
                let mut order: Vec<usize> = (0..self.cases.len()).collect();
                order.shuffle(&mut rng);
                let assignment = deal(&order, counts);
                for (case_idx, split) in assignment {
                    let slide_ids = self.cases[case_idx].slide_ids.clone();
                    for sid in &slide_ids {
                        self.set_slide_split(sid, split);
                    }
                }
            }
            SplitPolicy::Slide { case_coherent: false } => {
                let counts = exact_counts(fractions, self.slides.len(), "slide")?;
                let mut order: Vec<usize> = (0..self.slides.len()).collect();
                order.shuffle(&mut rng);
                let assignment = deal(&order, counts);
                for (slide_idx, split) in assignment {
                    let sid = self.slides[slide_idx].slide_id.clone();
                    self.set_slide_split(&sid, split);
                }
            }
            SplitPolicy::Image => {
                let counts = exact_counts(fractions, self.patches.len(), "image")?;
                let mut order: Vec<usize> = (0..self.patches.len()).collect();
                order.shuffle(&mut rng);
                for (patch_idx, split) in deal(&order, counts) {
                    self.patches[patch_idx].split = split;
                }
            }
        }
        Ok(())
    }

    fn set_slide_split(&mut self, slide_id: &str, split: Split) {
        let ids = self.slide(slide_id).expect("validated").patch_ids.clone();
        for pid in ids {
            let idx = self.patch_index[&pid];
            self.patches[idx].split = split;
        }
    }

    /// Chunk each test slide's patches (by patch id) into sets of 5.
    pub fn build_vote_sets(&self) -> Result<Vec<VoteSet>> {
        let mut sets = Vec::new();
        for slide in &self.slides {
            let mut pids: Vec<&PatchRecord> = slide
                .patch_ids
                .iter()
                .map(|pid| self.patch(pid).expect("validated"))
                .filter(|p| p.split == Split::Test)
                .collect();
            if pids.is_empty() {
                continue;
            }
            pids.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
            if pids.len() % VOTES_PER_SET != 0 {
                return Err(Error::VoteSetRemainder {
                    slide_id: slide.slide_id.clone(),
                    count: pids.len(),
                });
            }
            for (n, chunk) in pids.chunks(VOTES_PER_SET).enumerate() {
                sets.push(VoteSet {
                    set_id: format!("{}_v{n}", slide.slide_id),
                    slide_id: slide.slide_id.clone(),
                    patch_ids: chunk.iter().map(|p| p.patch_id.clone()).collect(),
                    observed_dx: chunk[0].observed_dx,
                });
            }
        }
        Ok(sets)
    }

    /// Shuffle case diagnoses among cases (label-permutation control).
    /// Slide roles are re-derived for the new diagnosis and every patch
    /// is relabeled with its case's new diagnosis; images are untouched.
    pub fn permute_case_labels(&self, seed: u64) -> Corpus {
        let mut out = self.clone();
        let mut diagnoses: Vec<DiagnosticCategory> = out.cases.iter().map(|c| c.diagnosis).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        diagnoses.shuffle(&mut rng);
        for (case, dx) in out.cases.iter_mut().zip(diagnoses) {
            case.diagnosis = dx;
        }
        for case_idx in 0..out.cases.len() {
            let dx = out.cases[case_idx].diagnosis;
            let slide_ids = out.cases[case_idx].slide_ids.clone();
            for (i, sid) in slide_ids.iter().enumerate() {
                let role = if dx.group().is_positive() && i == 0 {
                    SlideRole::Involved
                } else {
                    SlideRole::Uninvolved
                };
                let sidx = out.slide_index[sid];
                out.slides[sidx].role = role;
                let pids = out.slides[sidx].patch_ids.clone();
                for pid in pids {
                    let pidx = out.patch_index[&pid];
                    out.patches[pidx].observed_dx = dx;
                }
            }
        }
        out
    }

    /// Decode a patch image to a [0,1]-scaled 100x100x3 tensor.
    pub fn load_patch_image(&self, patch: &PatchRecord) -> Result<Tensor<f32>> {
        let rgb = self.load_patch_rgb(patch)?;
        Ok(tensor_from_rgb(&rgb))
    }

    /// Decode a patch image to raw interleaved RGB bytes.
    pub fn load_patch_rgb(&self, patch: &PatchRecord) -> Result<Vec<u8>> {
        let path = self.root.join(&patch.path);
        let img = ppm::read(&path)?;
        if img.width != PATCH_SIDE || img.height != PATCH_SIDE {
            return Err(Error::WrongImageSize {
                path,
                found_w: img.width,
                found_h: img.height,
                want_w: PATCH_SIDE,
                want_h: PATCH_SIDE,
            });
        }
        Ok(img.rgb)
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        for c in &self.cases {
            let rec = ManifestRecord::Case {
                case_id: c.case_id.clone(),
                diagnosis: c.diagnosis.code(),
                slide_ids: c.slide_ids.clone(),
            };
            buf.push_str(&serde_json::to_string(&rec).expect("serialize"));
            buf.push('\n');
        }
        for s in &self.slides {
            let rec = ManifestRecord::Slide {
                slide_id: s.slide_id.clone(),
                case_id: s.case_id.clone(),
                role: s.role,
                patch_ids: s.patch_ids.clone(),
            };
            buf.push_str(&serde_json::to_string(&rec).expect("serialize"));
            buf.push('\n');
        }
        for p in &self.patches {
            let rec = ManifestRecord::Patch {
                patch_id: p.patch_id.clone(),
                slide_id: p.slide_id.clone(),
                path: p.path.clone(),
                observed_dx: p.observed_dx.code(),
                split: p.split,
            };
            buf.push_str(&serde_json::to_string(&rec).expect("serialize"));
            buf.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl SlideRecord {
    fn role_name(&self) -> &'static str {
        match self.role {
            SlideRole::Involved => "involved",
            SlideRole::Uninvolved => "uninvolved",
        }
    }
}

pub fn tensor_from_rgb(rgb: &[u8]) -> Tensor<f32> {
    assert_eq!(rgb.len(), PATCH_SIDE * PATCH_SIDE * 3);
    Tensor::from_fn(&[PATCH_SIDE, PATCH_SIDE, 3], |i| rgb[i] as f32 / 255.0)
}

fn category_of(kind: &str, id: &str, code: u8) -> Result<DiagnosticCategory> {
    DiagnosticCategory::from_code(code).ok_or_else(|| Error::UnknownCategory {
        kind: kind.to_string(),
        id: id.to_string(),
        code: code as i64,
    })
}

/// Load and validate a JSON Lines manifest; patch paths resolve relative
/// to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut cases = Vec::new();
    let mut slides = Vec::new();
    let mut patches = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        match record {
            ManifestRecord::Case {
                case_id,
                diagnosis,
                slide_ids,
            } => {
                let diagnosis = category_of("case", &case_id, diagnosis)?;
                cases.push(CaseRecord {
                    case_id,
                    diagnosis,
                    slide_ids,
                });
            }
            ManifestRecord::Slide {
                slide_id,
                case_id,
                role,
                patch_ids,
            } => slides.push(SlideRecord {
                slide_id,
                case_id,
                role,
                patch_ids,
            }),
            ManifestRecord::Patch {
                patch_id,
                slide_id,
                path,
                observed_dx,
                split,
            } => {
                let observed_dx = category_of("patch", &patch_id, observed_dx)?;
                patches.push(PatchRecord {
                    patch_id,
                    slide_id,
                    path,
                    observed_dx,
                    split,
                });
            }
        }
    }
    Corpus::new(root, cases, slides, patches)
}

/// Integer split counts for `total` units, or an error carrying the
/// nearest achievable counts (largest-remainder apportionment).
fn exact_counts(fractions: [f64; 3], total: usize, granularity: &str) -> Result<[usize; 3]> {
    let mut counts = [0usize; 3];
    let mut ok = true;
    for (c, &f) in counts.iter_mut().zip(&fractions) {
        let ideal = f * total as f64;
        let rounded = ideal.round();
        if (ideal - rounded).abs() > 1e-6 {
            ok = false;
        }
        *c = rounded as usize;
    }
    if !ok || counts.iter().sum::<usize>() != total {
        return Err(Error::UnachievableSplit {
            requested: fractions.to_vec(),
            granularity: granularity.to_string(),
            nearest: largest_remainder(fractions, total).to_vec(),
        });
    }
    Ok(counts)
}

fn largest_remainder(fractions: [f64; 3], total: usize) -> [usize; 3] {
    let ideals: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = ideals.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = ideals[a] - ideals[a].floor();
        let rb = ideals[b] - ideals[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

fn deal(order: &[usize], counts: [usize; 3]) -> Vec<(usize, Split)> {
    let mut out = Vec::with_capacity(order.len());
    let mut it = order.iter();
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for _ in 0..count {
            out.push((*it.next().expect("counts sum to total"), *split));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_is_exhaustive() {
        assert_eq!(DiagnosticCategory::Negative.group(), BinaryLabel::Negative);
        assert_eq!(DiagnosticCategory::IsolatedTumorCells.group(), BinaryLabel::Negative);
        assert_eq!(DiagnosticCategory::Micrometastasis.group(), BinaryLabel::Positive);
        assert_eq!(DiagnosticCategory::Macrometastasis.group(), BinaryLabel::Positive);
    }

    #[test]
    fn category_codes_round_trip() {
        for cat in DiagnosticCategory::ALL {
            assert_eq!(DiagnosticCategory::from_code(cat.code()), Some(cat));
        }
        assert_eq!(DiagnosticCategory::from_code(4), None);
    }
}
