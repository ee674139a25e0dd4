//! HPatches-style evaluation: datasets, corner-error AUC reports and curve
//! export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{decode_pnm, Image};
use crate::geometry::{auc, corner_error_opt, ransac_homography, Correspondence, Homography, Point2, RansacConfig};
use crate::model::Matcher;
use crate::synth::{stream_seed, synthetic_pair, Manifest, SynthConfig};

pub const AUC_THRESHOLDS: [f64; 4] = [1.0, 3.0, 5.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceTag {
    Illumination,
    Viewpoint,
    Synthetic,
}

impl SequenceTag {
    fn from_name(name: &str) -> Self {
        if name.starts_with("i_") {
            Self::Illumination
        } else if name.starts_with("v_") {
            Self::Viewpoint
        } else {
            Self::Synthetic
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairSource {
    /// Two image files and the ground truth mapping the first onto the second.
    Files {
        path0: PathBuf,
        path1: PathBuf,
        h_gt: Homography,
    },
    /// Item of a manifest, generated on demand.
    Manifest { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub seq: String,
    pub pair: String,
    pub tag: SequenceTag,
    pub source: PairSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub pairs: Vec<EvalPair>,
    /// Entries dropped while loading (missing or malformed files).
    pub skipped: usize,
    manifest: Option<Manifest>,
}

const IMAGE_EXTS: [&str; 2] = ["ppm", "pgm"];

fn find_image(dir: &Path, k: usize) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|e| dir.join(format!("{k}.{e}")))
        .find(|p| p.is_file())
}

/// Reads a directory of sequences, each holding images `1..=6` and
/// `H_1_k` files. Image 1 is the reference of every pair.
pub fn load_hpatches_dir(root: &Path) -> Result<Dataset> {
    let mut seqs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seqs.sort();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for dir in seqs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Some(reference) = find_image(&dir, 1) else {
            warn!("{}: no reference image, sequence skipped", dir.display());
            skipped += 1;
            continue;
        };
        for k in 2..=6 {
            let target = find_image(&dir, k);
            let h_path = dir.join(format!("H_1_{k}"));
            if target.is_none() && !h_path.exists() {
                continue;
            }
            let h = Homography::load(&h_path);
            match (target, h) {
                (Some(path1), Ok(h_gt)) => pairs.push(EvalPair {
                    seq: name.clone(),
                    pair: format!("1-{k}"),
                    tag: SequenceTag::from_name(&name),
                    source: PairSource::Files {
                        path0: reference.clone(),
                        path1,
                        h_gt,
                    },
                }),
                (target, h) => {
                    let why = match (target, h) {
                        (None, _) => "missing image".to_string(),
                        (_, Err(e)) => e.to_string(),
                        _ => unreachable!(),
                    };
                    warn!("{name} pair 1-{k} skipped: {why}");
                    skipped += 1;
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no valid sequences under {}", root.display())));
    }
    Ok(Dataset {
        name: root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        pairs,
        skipped,
        manifest: None,
    })
}

impl Dataset {
    pub fn from_manifest(name: &str, manifest: Manifest) -> Self {
        let pairs = (0..manifest.len())
            .map(|index| EvalPair {
                seq: "synthetic".into(),
                pair: format!("{index:04}"),
                tag: SequenceTag::Synthetic,
                source: PairSource::Manifest { index },
            })
            .collect();
        Self {
            name: name.into(),
            pairs,
            skipped: 0,
            manifest: Some(manifest),
        }
    }

    pub fn synthetic(n: usize, master_seed: u64) -> Self {
        Self::from_manifest(
            &format!("synthetic-{n}-{master_seed}"),
            Manifest::Synthetic { n, master_seed },
        )
    }

    /// A directory is read as HPatches; a file as a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            load_hpatches_dir(path)
        } else {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Self::from_manifest(&name, Manifest::load(path)?))
        }
    }
}

/// Pixel-center-aligned scaling by `s` as a homography.
fn scale_matrix(s: f64) -> Matrix3<f64> {
    let t = 0.5 * s - 0.5;
    Matrix3::new(s, 0.0, t, 0.0, s, t, 0.0, 0.0, 1.0)
}

/// Shrinks so the shorter side is at most `cap`; returns the scale applied.
fn shrink(img: Image, cap: usize) -> (Image, f64) {
    let short = img.orig_width.min(img.orig_height);
    if cap == 0 || short <= cap {
        return (img, 1.0);
    }
    let s = cap as f64 / short as f64;
    let w = ((img.orig_width as f64 * s).round() as usize).max(1);
    let h = ((img.orig_height as f64 * s).round() as usize).max(1);
    // The exact per-axis factors differ from `s` by the rounding; use the x one.
    let sx = w as f64 / img.orig_width as f64;
    (img.resized(w, h), sx)
}

/// A loaded pair in the frame the matcher sees.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub image0: Image,
    pub image1: Image,
    pub id0: String,
    pub id1: String,
    pub h_gt: Homography,
}

fn image_id(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(seq) => format!("{}_{stem}", seq.to_string_lossy()),
        None => stem,
    }
}

impl Dataset {
    pub fn load_pair(&self, k: usize, synth: &SynthConfig, max_short_side: usize) -> Result<LoadedPair> {
        let item = &self.pairs[k];
        match &item.source {
            PairSource::Files { path0, path1, h_gt } => {
                let (i0, s0) = shrink(decode_pnm(&fs::read(path0)?)?, max_short_side);
                let (i1, s1) = shrink(decode_pnm(&fs::read(path1)?)?, max_short_side);
                let m = scale_matrix(s1) * h_gt.matrix() * scale_matrix(1.0 / s0);
                Ok(LoadedPair {
                    image0: i0.padded_to(8),
                    image1: i1.padded_to(8),
                    id0: image_id(path0),
                    id1: image_id(path1),
                    h_gt: Homography::new(m)?,
                })
            }
            PairSource::Manifest { index } => {
                let manifest = self.manifest.as_ref().expect("manifest-backed dataset");
                let p = match manifest {
                    Manifest::Synthetic { master_seed, .. } => synthetic_pair(*master_seed, *index as u64, synth)?,
                    m => m.pair(*index, synth)?,
                };
                Ok(LoadedPair {
                    image0: p.image0,
                    image1: p.image1,
                    id0: format!("{index:06}_0"),
                    id1: format!("{index:06}_1"),
                    h_gt: p.h_gt,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub ransac: RansacConfig,
    /// Images are shrunk so the shorter side is at most this (0 = never).
    pub max_short_side: usize,
    pub synth: SynthConfig,
    /// Feed the ground truth as the estimate (checks the metric path).
    pub bypass: bool,
    /// Adds per-pair wall-clock times, which makes reports non-reproducible.
    pub timing: bool,
    pub threads: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            ransac: RansacConfig::default(),
            max_short_side: 128,
            synth: SynthConfig::default(),
            bypass: false,
            timing: false,
            threads: std::env::var("SEMMATCH_THREADS").ok().and_then(|v| v.parse().ok()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub seq: String,
    pub pair: String,
    /// `null` when estimation failed.
    pub error_px: Option<f64>,
    pub matches: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    #[serde(rename = "1")]
    pub at1: f64,
    #[serde(rename = "3")]
    pub at3: f64,
    #[serde(rename = "5")]
    pub at5: f64,
    #[serde(rename = "10")]
    pub at10: f64,
}

impl AucTable {
    /// Percentages at 1, 3, 5 and 10 px; failures count as infinite error.
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        let a = |t| auc(errors, t).map(|v| 100.0 * v);
        Ok(Self {
            at1: a(1.0)?,
            at3: a(3.0)?,
            at5: a(5.0)?,
            at10: a(10.0)?,
        })
    }

    pub fn values(&self) -> [f64; 4] {
        [self.at1, self.at3, self.at5, self.at10]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub config_hash: String,
    pub per_pair: Vec<PairResult>,
    pub auc: AucTable,
    pub failures: usize,
    pub pairs_total: usize,
    pub pairs_succeeded: usize,
    pub pairs_failed: usize,
    pub skipped_on_load: usize,
}

impl EvalReport {
    pub fn errors(&self) -> Vec<f64> {
        self.per_pair
            .iter()
            .map(|p| p.error_px.unwrap_or(f64::INFINITY))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Hash of everything that determines the numbers in a report.
pub fn config_hash(matcher: &Matcher, opts: &EvalOptions) -> Result<String> {
    let cfg = serde_json::json!({
        "model": matcher.model.config,
        "variant": matcher.variant,
        "match": {
            "temperature": matcher.config.temperature,
            "coarse_threshold": matcher.config.coarse_threshold,
            "window": matcher.config.window,
            "fine_temperature": matcher.config.fine_temperature,
            "fine_threshold": matcher.config.fine_threshold,
        },
        "semantic_dim": matcher.provider.dim(),
        "seed": opts.seed,
        "ransac": [opts.ransac.inlier_threshold, opts.ransac.max_iters as f64, opts.ransac.confidence],
        "max_short_side": opts.max_short_side,
        "synth": opts.synth,
        "bypass": opts.bypass,
    });
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg)?);
    for t in matcher.model.store.tensors() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    }))
}

fn eval_pair(matcher: &Matcher, ds: &Dataset, k: usize, opts: &EvalOptions) -> Result<PairResult> {
    let start = Instant::now();
    let lp = ds.load_pair(k, &opts.synth, opts.max_short_side)?;
    let (est, matches) = if opts.bypass {
        (Some(lp.h_gt), 0)
    } else {
        let out = matcher.match_pair(&lp.image0, &lp.id0, &lp.image1, &lp.id1)?;
        let corrs: Vec<Correspondence> = out
            .fine
            .iter()
            .map(|m| Correspondence::new(Point2::new(m.p0.0, m.p0.1), Point2::new(m.p1.0, m.p1.1)))
            .collect();
        let ransac = RansacConfig {
            seed: stream_seed(opts.seed, k as u64),
            ..opts.ransac
        };
        (
            ransac_homography(&corrs, &ransac).ok().map(|r| r.homography),
            corrs.len(),
        )
    };
    let err = corner_error_opt(
        est.as_ref(),
        &lp.h_gt,
        lp.image0.orig_width as f64,
        lp.image0.orig_height as f64,
    );
    let item = &ds.pairs[k];
    Ok(PairResult {
        seq: item.seq.clone(),
        pair: item.pair.clone(),
        error_px: err.is_finite().then_some(err),
        matches,
        time_ms: opts.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    })
}

/// Runs every pair (in parallel) and pools the errors in dataset order.
pub fn evaluate(matcher: &Matcher, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let run = || -> Result<Vec<PairResult>> {
        (0..ds.pairs.len())
            .into_par_iter()
            .map(|k| eval_pair(matcher, ds, k, opts))
            .collect()
    };
    let per_pair = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let errors: Vec<f64> = per_pair.iter().map(|p| p.error_px.unwrap_or(f64::INFINITY)).collect();
    let failed = per_pair.iter().filter(|p| p.error_px.is_none()).count();
    Ok(EvalReport {
        dataset: ds.name.clone(),
        config_hash: config_hash(matcher, opts)?,
        auc: AucTable::from_errors(&errors)?,
        failures: failed,
        pairs_total: per_pair.len(),
        pairs_succeeded: per_pair.len() - failed,
        pairs_failed: failed,
        skipped_on_load: ds.skipped,
        per_pair,
    })
}

/// Points of the cumulative error curve as `error_px,recall` CSV; the curve
/// is sampled at every finite error and at 0.1 px steps up to `max_px`.
pub fn curve_csv(report: &EvalReport, max_px: f64) -> String {
    let mut errors = report.errors();
    errors.sort_by(f64::total_cmp);
    let n = errors.len().max(1) as f64;
    let recall = |e: f64| errors.partition_point(|&x| x <= e) as f64 / n;
    let mut xs: Vec<f64> = (0..=(max_px * 10.0).round() as usize)
        .map(|k| k as f64 / 10.0)
        .collect();
    xs.extend(errors.iter().copied().filter(|e| *e <= max_px));
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut s = String::from("error_px,recall\n");
    for x in xs {
        writeln!(s, "{x},{}", recall(x)).expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{save_pgm, SemanticProvider, ToySemantic};
    use crate::matching::MatchConfig;
    use crate::model::{Model, ModelConfig, Variant};

    fn matcher() -> Matcher {
        Matcher::new(
            Model::new(ModelConfig::default()),
            SemanticProvider::Toy(ToySemantic::new(24, 0)),
            Variant::default(),
            MatchConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn auc_two_errors() {
        for t in AUC_THRESHOLDS {
            let a = AucTable::from_errors(&[0.0, t / 2.0]).unwrap();
            let v = a.values()[AUC_THRESHOLDS.iter().position(|&x| x == t).unwrap()];
            assert!((v - 75.0).abs() < 1e-9, "{t}: {v}");
        }
    }

    #[test]
    fn bypass_is_perfect() {
        let ds = Dataset::synthetic(5, 3);
        let opts = EvalOptions {
            bypass: true,
            threads: Some(2),
            ..EvalOptions::default()
        };
        let r = evaluate(&matcher(), &ds, &opts).unwrap();
        assert_eq!(r.auc.values(), [100.0; 4]);
        assert_eq!(r.pairs_total, r.pairs_succeeded + r.pairs_failed);
    }

    fn write_seq(dir: &Path, hs: &[(usize, &str)]) {
        fs::create_dir_all(dir).unwrap();
        let img = Image::from_fn(40, 24, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        save_pgm(&img, &dir.join("1.pgm")).unwrap();
        for (k, h) in hs {
            save_pgm(&img, &dir.join(format!("{k}.pgm"))).unwrap();
            fs::write(dir.join(format!("H_1_{k}")), h).unwrap();
        }
    }

    #[test]
    fn hpatches_layout() {
        let root = tempfile::tempdir().unwrap();
        let id = "1 0 0\n0 1 0\n0 0 1\n";
        write_seq(
            &root.path().join("v_a"),
            &[(2, id), (3, id), (4, "1 0 0 0 1 0 0 0 1"), (5, id), (6, id)],
        );
        write_seq(&root.path().join("i_b"), &[(2, id), (3, "garbage"), (5, id)]);
        let ds = load_hpatches_dir(root.path()).unwrap();
        let v: Vec<_> = ds.pairs.iter().filter(|p| p.seq == "v_a").collect();
        assert_eq!(v.len(), 5);
        assert_eq!(v[0].tag, SequenceTag::Viewpoint);
        assert_eq!(ds.pairs.iter().filter(|p| p.seq == "i_b").count(), 2);
        assert_eq!(ds.skipped, 1);
        let lp = ds.load_pair(0, &SynthConfig::default(), 128).unwrap();
        assert_eq!(lp.h_gt.distance(&Homography::identity()), 0.0);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_hpatches_dir(empty.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn resizing_rescales_ground_truth() {
        let root = tempfile::tempdir().unwrap();
        let seq = root.path().join("v_t");
        fs::create_dir_all(&seq).unwrap();
        let img = Image::from_fn(64, 32, |x, y| ((x + y) % 9) as f32 / 8.0);
        save_pgm(&img, &seq.join("1.pgm")).unwrap();
        save_pgm(&img, &seq.join("2.pgm")).unwrap();
        fs::write(seq.join("H_1_2"), "1 0 4\n0 1 0\n0 0 1\n").unwrap();
        let ds = load_hpatches_dir(root.path()).unwrap();
        let lp = ds.load_pair(0, &SynthConfig::default(), 16).unwrap();
        assert_eq!((lp.image0.orig_width, lp.image0.orig_height), (32, 16));
        // A 4 px shift at full size is 2 px at half size.
        let q = lp.h_gt.warp_point(Point2::new(3.0, 5.0)).unwrap();
        assert!((q.x - 5.0).abs() < 1e-12 && (q.y - 5.0).abs() < 1e-12);
    }

    #[test]
    fn report_roundtrip_and_curve() {
        let ds = Dataset::synthetic(4, 1);
        let opts = EvalOptions {
            threads: Some(2),
            ..EvalOptions::default()
        };
        let m = matcher();
        let a = evaluate(&m, &ds, &opts).unwrap();
        let b = evaluate(&m, &ds, &opts).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back: EvalReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let aucs = a.auc.values();
        assert!(aucs.windows(2).all(|w| w[0] <= w[1]));
        let csv = curve_csv(&a, 10.0);
        assert!(csv.starts_with("error_px,recall\n0,"));
    }
}
