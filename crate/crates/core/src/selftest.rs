//! Fast oracle checks run by `semmatch selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{evaluate, AucTable, Dataset, EvalOptions};
use crate::features::{SemanticProvider, ToySemantic};
use crate::geometry::{corner_error, fit_dlt, ransac_homography, Correspondence, Homography, Point2, RansacConfig};
use crate::matching::{dual_softmax, mnn_select, MatchConfig, Matrix};
use crate::model::{Matcher, Model, ModelConfig, Variant};
use crate::tensor::{finite_diff_check, read_blob_from, write_blob_to, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_h(rng: &mut ChaCha8Rng) -> Homography {
    let mut v = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for (k, x) in v.iter_mut().enumerate().take(8) {
        *x += match k {
            2 | 5 => rng.random_range(-10.0..10.0),
            6 | 7 => rng.random_range(-1e-3..1e-3),
            _ => rng.random_range(-0.2..0.2),
        };
    }
    Homography::from_row_slice(&v).expect("finite")
}

fn dlt_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = random_h(&mut rng);
        let corrs: Vec<Correspondence> = (0..8)
            .map(|_| {
                let p = Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                Correspondence::new(p, h.warp_point(p).expect("finite"))
            })
            .collect();
        worst = worst.max(fit_dlt(&corrs).map_or(f64::INFINITY, |e| corner_error(&e, &h, 64.0, 64.0)));
    }
    Check {
        name: "dlt planted homographies",
        passed: worst < 1e-6,
        detail: format!("max corner error {worst:.2e} px"),
    }
}

fn ransac_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = random_h(&mut rng);
    let mut corrs = Vec::new();
    for k in 0..100 {
        let p = Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
        let q = if k % 2 == 0 {
            h.warp_point(p).expect("finite")
        } else {
            Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))
        };
        corrs.push(Correspondence::new(p, q));
    }
    let err = ransac_homography(&corrs, &RansacConfig::default())
        .map_or(f64::INFINITY, |r| corner_error(&r.homography, &h, 64.0, 64.0));
    Check {
        name: "ransac with 50% outliers",
        passed: err < 1e-6,
        detail: format!("corner error {err:.2e} px"),
    }
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut t = |r, c| Tensor::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0));
    let (a, b) = (t(3, 4), t(4, 2));
    let report = finite_diff_check(
        |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            let s = tape.softmax(m, 1)?;
            let n = tape.layer_norm(s, 1e-5)?;
            let e = tape.elu(n)?;
            tape.sum(e)
        },
        &[a, b],
        1e-6,
        None,
    );
    match report {
        Ok(r) => Check {
            name: "finite-difference gradients",
            passed: r.max_rel_error < 1e-4,
            detail: format!("max relative error {:.2e} over {} probes", r.max_rel_error, r.probes),
        },
        Err(e) => Check {
            name: "finite-difference gradients",
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn mnn_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut bad = 0;
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let s = Matrix {
            rows: r,
            cols: c,
            data: (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let Ok(p) = dual_softmax(&s) else {
            bad += 1;
            continue;
        };
        let got: Vec<(usize, usize)> = mnn_select(&p, 0.0).iter().map(|m| (m.i, m.j)).collect();
        let at = |i: usize, j: usize| p.data[i * c + j];
        let mut want = Vec::new();
        for i in 0..r {
            for j in 0..c {
                let row_best = (0..c).all(|k| at(i, k) < at(i, j) || (at(i, k) == at(i, j) && k >= j));
                let col_best = (0..r).all(|k| at(k, j) < at(i, j) || (at(k, j) == at(i, j) && k >= i));
                if row_best && col_best && at(i, j) > 0.0 {
                    want.push((i, j));
                }
            }
        }
        if got != want {
            bad += 1;
        }
    }
    Check {
        name: "dual-softmax mutual nearest neighbours",
        passed: bad == 0,
        detail: format!("{bad} disagreements in 200 matrices"),
    }
}

fn blob_check() -> Check {
    let t = Tensor::from_fn(&[2, 3, 4], |k| k as f32 * 0.25 - 1.0);
    let mut buf = Vec::new();
    let ok = write_blob_to(&mut buf, &t).is_ok() && read_blob_from(&mut buf.as_slice()).ok() == Some(t);
    Check {
        name: "SRMT blob round trip",
        passed: ok,
        detail: String::new(),
    }
}

fn metric_check() -> Check {
    let half = AucTable::from_errors(&[0.0, 1.5]).map(|a| a.at3);
    let matcher = Matcher::new(
        Model::new(ModelConfig::default()),
        SemanticProvider::Toy(ToySemantic::new(24, 0)),
        Variant::default(),
        MatchConfig::default(),
    );
    let bypass = matcher.and_then(|m| {
        evaluate(
            &m,
            &Dataset::synthetic(3, 0),
            &EvalOptions {
                bypass: true,
                ..EvalOptions::default()
            },
        )
    });
    let (half, bypass) = (half.unwrap_or(f64::NAN), bypass.map(|r| r.auc.values()));
    Check {
        name: "corner-error AUC",
        passed: (half - 75.0).abs() < 1e-9 && bypass.as_ref().is_ok_and(|v| *v == [100.0; 4]),
        detail: format!("AUC@3 of {{0, 1.5}} = {half}, bypass = {bypass:?}"),
    }
}

pub fn run() -> Vec<Check> {
    vec![
        dlt_check(),
        ransac_check(),
        gradient_check(),
        mnn_check(),
        blob_check(),
        metric_check(),
    ]
}
