use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semmatch::features::{semantic_from_file, SemanticProvider, ToySemantic};
use semmatch::matching::MatchConfig;
use semmatch::model::{Matcher, Model, ModelConfig, Variant};
use semmatch::synth::{procedural_texture, synthetic_pair, SynthConfig};
use semmatch::tensor::{read_blob, write_blob_to};
use semmatch::training::{load_checkpoint, save_checkpoint};

fn golden() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden.srmt"))
}

// golden.srmt comes from tests/data/make_golden.py (Python struct module).
#[test]
fn reads_blob_written_by_python() {
    let t = read_blob(golden()).unwrap();
    assert_eq!(t.shape(), &[2, 3, 2]);
    let want: Vec<f32> = (0..12).map(|k| k as f32 / 4.0 - 1.0).collect();
    assert_eq!(t.data(), want.as_slice());

    let mut buf = Vec::new();
    write_blob_to(&mut buf, &t).unwrap();
    assert_eq!(buf, std::fs::read(golden()).unwrap());
}

#[test]
fn semantic_file_on_native_grid_is_unchanged() {
    let dir = golden().parent().unwrap();
    let s = semantic_from_file(dir, "golden", 2, 3).unwrap();
    assert_eq!((s.grid_h, s.grid_w, s.channels), (2, 3, 2));
    assert_eq!(s.at(1, 2), &[1.5, 1.75]);
    assert_eq!(s.at(0, 1), &[-0.5, -0.25]);

    // Doubling the grid with half-cell centers keeps each channel mean.
    let up = semantic_from_file(dir, "golden", 4, 6).unwrap();
    assert_eq!((up.grid_h, up.grid_w), (4, 6));
    for c in 0..2 {
        let mean = |m: &semmatch::features::FeatureMap| {
            (0..m.num_tokens()).map(|i| m.token(i)[c] as f64).sum::<f64>() / m.num_tokens() as f64
        };
        assert!((mean(&up) - mean(&s)).abs() < 1e-6);
    }
    assert!(semantic_from_file(dir, "missing", 2, 3).is_err());
}

fn matcher(model: Model) -> Matcher {
    Matcher::new(
        model,
        SemanticProvider::Toy(ToySemantic::new(24, 0)),
        Variant::default(),
        MatchConfig::default(),
    )
    .unwrap()
}

#[test]
fn checkpoint_reload_reproduces_forward_pass() {
    let model = Model::new(ModelConfig {
        init_seed: 9,
        ..ModelConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let (a, b) = (matcher(model), matcher(load_checkpoint(dir.path()).unwrap()));

    let pair = synthetic_pair(3, 0, &SynthConfig::default()).unwrap();
    let ra = a.match_pair(&pair.image0, "a", &pair.image1, "b").unwrap();
    let rb = b.match_pair(&pair.image0, "a", &pair.image1, "b").unwrap();
    assert_eq!(ra.coarse0, rb.coarse0);
    assert_eq!(ra.coarse1, rb.coarse1);
    assert_eq!(ra.p_coarse, rb.p_coarse);
    assert_eq!(ra.fine, rb.fine);
}

#[test]
fn mismatched_image_sizes_match() {
    let img0 = procedural_texture(&mut ChaCha8Rng::seed_from_u64(1), 72, 56);
    let img1 = img0.resized(56, 72);
    let out = matcher(Model::new(ModelConfig::default()))
        .match_pair(&img0, "0", &img1, "1")
        .unwrap();
    let p = out.p_coarse.unwrap();
    assert_eq!((p.rows, p.cols), (7 * 9, 9 * 7));
}
