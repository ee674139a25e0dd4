//! Losses, the toy training loop and checkpoints.

mod checkpoint;
mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{cell_validity, FeatureMap, SemanticProvider};
use crate::fusion::FusionMode;
use crate::model::Model;
use crate::nn::Bound;
use crate::synth::{
    gt_matches, stream_seed, window_cells, Grid, GtSet, Manifest, PixelMask, SynthConfig, SyntheticPair,
};
use crate::tensor::{AdamConfig, AdamState, Real, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{
    loss_coarse, loss_fine, mask_bias, pooled_nll, tape_dual_softmax, GtSlice, SkipSample, CONFIDENCE_FLOOR, MASK_BIAS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub fine_temperature: f64,
    pub window: usize,
    /// `Some(γ)` multiplies each term by `(1 − P)^γ`.
    pub focal_gamma: Option<u32>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            fine_temperature: 0.1,
            window: 5,
            focal_gamma: None,
        }
    }
}

/// A synthetic pair with its frozen semantic maps.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub pair: SyntheticPair,
    pub sem0: FeatureMap,
    pub sem1: FeatureMap,
    pub seed: u64,
}

impl TrainItem {
    pub fn new(pair: SyntheticPair, provider: &SemanticProvider, id: &str, seed: u64) -> Result<Self> {
        let sem0 = provider.semantic(&pair.image0, &format!("{id}_0"))?;
        let sem1 = provider.semantic(&pair.image1, &format!("{id}_1"))?;
        Ok(Self { pair, sem0, sem1, seed })
    }

    pub fn ground_truth(&self, window: usize) -> GtSet {
        let (a, b) = (&self.pair.image0, &self.pair.image1);
        let mask = PixelMask {
            width: b.orig_width,
            height: b.orig_height,
            valid: &self.pair.mask,
        };
        gt_matches(
            &self.pair.h_gt,
            Grid::new(a.height / 8, a.width / 8, 8),
            Grid::new(b.height / 8, b.width / 8, 8),
            Grid::new(a.height / 2, a.width / 2, 2),
            Grid::new(b.height / 2, b.width / 2, 2),
            window,
            Some(&mask),
        )
    }
}

/// Tape handles of one pair's loss.
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub total: Var,
    pub coarse: Var,
    /// `None` when no window held a fine GT pair; `L_f` is then zero.
    pub fine: Option<Var>,
    pub n_coarse: usize,
    pub n_fine: usize,
}

/// Rows of `x` (`N×C`) picked by `cells`; `None` rows are zero.
fn gather_rows<T: Real>(tape: &mut Tape<T>, x: Var, cells: &[Option<usize>]) -> Result<Var, TensorError> {
    let c = tape.value(x).dims2("gather_rows")?.1;
    let index = cells
        .iter()
        .flat_map(|cell| (0..c).map(move |k| cell.map(|i| i * c + k)))
        .collect();
    tape.gather(x, index, vec![cells.len(), c])
}

fn similarity<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, temperature: f64) -> Result<Var, TensorError> {
    let bt = tape.transpose(b)?;
    let s = tape.matmul(a, bt)?;
    tape.scale(s, T::lit(1.0 / temperature))
}

/// `L_c + L_f` for one pair; skips pairs without coarse ground truth.
pub fn pair_loss<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    p: &Bound,
    item: &TrainItem,
    fusion: FusionMode,
    cfg: &LossConfig,
) -> Result<Result<PairLoss, SkipSample>> {
    let gt = item.ground_truth(cfg.window);
    if gt.coarse.is_empty() {
        return Ok(Err(SkipSample));
    }
    let (img0, img1) = (&item.pair.image0, &item.pair.image1);
    let enc = model.encode(tape, p, img0, img1, &item.sem0, &item.sem1, fusion)?;

    let s = similarity(tape, enc.coarse0, enc.coarse1, cfg.temperature)?;
    let v0 = cell_validity(img0, enc.coarse_hw0.0, enc.coarse_hw0.1, 8);
    let v1 = cell_validity(img1, enc.coarse_hw1.0, enc.coarse_hw1.1, 8);
    let pc = tape_dual_softmax(tape, s, Some(mask_bias(&v0, &v1)))?;
    let coarse = loss_coarse(tape, pc, &gt.coarse, cfg.focal_gamma)?.expect("non-empty coarse GT");

    let fv0 = cell_validity(img0, enc.fine_hw0.0, enc.fine_hw0.1, 2);
    let fv1 = cell_validity(img1, enc.fine_hw1.0, enc.fine_hw1.1, 2);
    let fg0 = Grid::new(enc.fine_hw0.0, enc.fine_hw0.1, 2);
    let fg1 = Grid::new(enc.fine_hw1.0, enc.fine_hw1.1, 2);
    let mut windows = Vec::with_capacity(gt.fine.len());
    for w in &gt.fine {
        let (i, j) = gt.coarse[w.coarse];
        let keep = |valid: &[bool], cells: Vec<Option<usize>>| -> Vec<Option<usize>> {
            cells.into_iter().map(|c| c.filter(|&k| valid[k])).collect()
        };
        let c0 = keep(&fv0, window_cells(fg0, i, enc.coarse_hw0.1, cfg.window));
        let c1 = keep(&fv1, window_cells(fg1, j, enc.coarse_hw1.1, cfg.window));
        let f0 = gather_rows(tape, enc.fine0, &c0)?;
        let f1 = gather_rows(tape, enc.fine1, &c1)?;
        let s = similarity(tape, f0, f1, cfg.fine_temperature)?;
        let m0: Vec<bool> = c0.iter().map(Option::is_some).collect();
        let m1: Vec<bool> = c1.iter().map(Option::is_some).collect();
        let pf = tape_dual_softmax(tape, s, Some(mask_bias(&m0, &m1)))?;
        windows.push((pf, w.pairs.as_slice()));
    }
    let fine = loss_fine(tape, &windows, cfg.focal_gamma)?.ok();
    let total = match fine {
        Some(f) => tape.add(coarse, f)?,
        None => coarse,
    };
    Ok(Ok(PairLoss {
        total,
        coarse,
        fine,
        n_coarse: gt.coarse.len(),
        n_fine: gt.num_fine(),
    }))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs whose gradients are averaged per optimizer step.
    pub accumulate: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub synth: SynthConfig,
    pub fusion: FusionMode,
    /// Checkpoint directory and period in epochs.
    pub checkpoint: Option<(PathBuf, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            accumulate: 4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            synth: SynthConfig::default(),
            fusion: FusionMode::Full,
            checkpoint: None,
        }
    }
}

/// One optimizer step: losses averaged over the pairs that contributed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_f: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_c: f64,
    pub l_f: f64,
    pub l_total: f64,
    pub pairs: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochReport>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,L_c,L_f,L_total\n");
        for r in &self.steps {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.l_c, r.l_f, r.l_total).expect("string write");
        }
        s
    }
}

/// Seed identifying manifest entry `index` (used in diagnostics).
pub fn item_seed(manifest: &Manifest, index: usize) -> u64 {
    match manifest {
        Manifest::Synthetic { master_seed, .. } => stream_seed(*master_seed, index as u64),
        Manifest::Images(items) => items[index].1,
    }
}

/// Generates every pair of the manifest with its semantic maps.
pub fn prepare_items(manifest: &Manifest, synth: &SynthConfig, provider: &SemanticProvider) -> Result<Vec<TrainItem>> {
    (0..manifest.len())
        .into_par_iter()
        .map(|k| {
            let pair = manifest.pair(k, synth)?;
            TrainItem::new(pair, provider, &format!("{k:06}"), item_seed(manifest, k))
        })
        .collect()
}

struct PairGrad {
    grads: Vec<Option<Tensor<f32>>>,
    l_c: f64,
    l_f: f64,
    l_total: f64,
}

fn pair_grad(
    model: &Model,
    item: &TrainItem,
    cfg: &TrainConfig,
) -> std::result::Result<Option<PairGrad>, TensorErrorOr> {
    let mut tape = Tape::<f32>::new();
    let p = model.store.bind(&mut tape, true);
    let loss = match pair_loss(model, &mut tape, &p, item, cfg.fusion, &cfg.loss) {
        Ok(Ok(l)) => l,
        Ok(Err(SkipSample)) => return Ok(None),
        Err(Error::Tensor(e)) => return Err(TensorErrorOr::Tensor(e)),
        Err(e) => return Err(TensorErrorOr::Other(e)),
    };
    let value = |v: Var| tape.value(v).data()[0] as f64;
    let (l_c, l_total) = (value(loss.coarse), value(loss.total));
    let l_f = loss.fine.map_or(0.0, value);
    let mut g = tape.backward(loss.total).map_err(TensorErrorOr::Tensor)?;
    let grads: Vec<Option<Tensor<f32>>> = p.vars().iter().map(|&v| g.take(v)).collect();
    if !grads.iter().flatten().all(Tensor::is_finite) {
        return Err(TensorErrorOr::Tensor(TensorError::NonFinite { op: "backward" }));
    }
    Ok(Some(PairGrad {
        grads,
        l_c,
        l_f,
        l_total,
    }))
}

enum TensorErrorOr {
    Tensor(TensorError),
    Other(Error),
}

/// Adam over `L_c + L_f`, one pair per forward pass and `accumulate` pairs
/// per step. Pair order follows `items`; the result does not depend on the
/// thread count.
pub fn train_toy(model: &mut Model, items: &[TrainItem], cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.accumulate == 0 {
        return Err(Error::Config("accumulate must be at least 1".into()));
    }
    let mut adam = AdamState::new(model.store.tensors());
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut sum_c, mut sum_f, mut sum_t, mut pairs, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (chunk_idx, chunk) in items.chunks(cfg.accumulate).enumerate() {
            let results: Vec<_> = chunk.par_iter().map(|item| pair_grad(model, item, cfg)).collect();
            let mut acc: Option<Vec<Option<Tensor<f32>>>> = None;
            let (mut c, mut f, mut t, mut n) = (0.0, 0.0, 0.0, 0usize);
            for (k, r) in results.into_iter().enumerate() {
                let g = match r {
                    Ok(Some(g)) => g,
                    Ok(None) => {
                        skipped += 1;
                        continue;
                    }
                    Err(TensorErrorOr::Tensor(source)) => {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            step,
                            pair: chunk_idx * cfg.accumulate + k,
                            seed: chunk[k].seed,
                            source,
                        })
                    }
                    Err(TensorErrorOr::Other(e)) => return Err(e),
                };
                c += g.l_c;
                f += g.l_f;
                t += g.l_total;
                n += 1;
                acc = Some(match acc {
                    None => g.grads,
                    Some(mut a) => {
                        for (dst, src) in a.iter_mut().zip(g.grads) {
                            match (dst.as_mut(), src) {
                                (Some(d), Some(s)) => d.data_mut().iter_mut().zip(s.data()).for_each(|(x, y)| *x += y),
                                (None, Some(s)) => *dst = Some(s),
                                _ => {}
                            }
                        }
                        a
                    }
                });
            }
            let Some(mut grads) = acc else { continue };
            let inv = 1.0 / n as f32;
            grads
                .iter_mut()
                .flatten()
                .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            adam.step(model.store.tensors_mut(), &grads, &cfg.adam)?;
            let nf = n as f64;
            log.steps.push(StepLog {
                epoch,
                step,
                l_c: c / nf,
                l_f: f / nf,
                l_total: t / nf,
            });
            debug!("epoch {epoch} step {step}: L_total {:.4}", t / nf);
            step += 1;
            sum_c += c;
            sum_f += f;
            sum_t += t;
            pairs += n;
        }
        let np = pairs.max(1) as f64;
        let report = EpochReport {
            epoch,
            l_c: sum_c / np,
            l_f: sum_f / np,
            l_total: sum_t / np,
            pairs,
            skipped,
        };
        info!(
            "epoch {epoch}: L_c {:.4} L_f {:.4} L_total {:.4} ({pairs} pairs, {skipped} skipped)",
            report.l_c, report.l_f, report.l_total
        );
        log.epochs.push(report);
        if let Some((dir, every)) = &cfg.checkpoint {
            if *every > 0 && ((epoch + 1) % every == 0 || epoch + 1 == cfg.epochs) {
                save_checkpoint(model, dir)?;
            }
        }
    }
    Ok(log)
}

pub fn write_loss_csv(log: &TrainLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv())?;
    Ok(())
}
