//! LIME-style local surrogate explanations over a regular grid of regions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::teacher_cnn::TeacherCnn;
use crate::tensor_nn::{RngState, Tensor};
use crate::vit_lora::VitModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimeConfig {
    /// Regions per side.
    pub grid: usize,
    pub num_samples: usize,
    pub keep_prob: f64,
    pub kernel_width: f64,
    pub ridge_penalty: f64,
    /// Fill value for masked regions.
    pub baseline: f64,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            num_samples: 1000,
            keep_prob: 0.5,
            kernel_width: 0.25,
            ridge_penalty: 1.0,
            baseline: 0.5,
            seed: 42,
            top_k: 8,
        }
    }
}

impl LimeConfig {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid < 2 {
            return fail(format!("lime.grid must be at least 2, got {}", self.grid));
        }
        if self.num_samples < self.regions() {
            return fail(format!("lime.num_samples {} is below grid² = {}", self.num_samples, self.regions()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return fail(format!("lime.keep_prob {} outside (0, 1)", self.keep_prob));
        }
        if !(self.kernel_width > 0.0) || !(self.ridge_penalty >= 0.0) {
            return fail("lime.kernel_width must be positive and lime.ridge_penalty non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.baseline) {
            return fail(format!("lime.baseline {} outside [0, 1]", self.baseline));
        }
        Ok(())
    }
}

/// Region id per pixel, row-major ids `row·g + col`. Cell boundaries sit at
/// `⌊k·S/g⌋`, so areas differ by at most one row or column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    pub grid: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<usize>,
}

impl RegionMap {
    pub fn region_pixels(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().enumerate().filter(move |(_, &r)| r == id).map(|(p, _)| p)
    }

    /// Pixel rows spanned by grid row `row`.
    pub fn rows_of(&self, row: usize) -> std::ops::Range<usize> {
        row * self.height / self.grid..(row + 1) * self.height / self.grid
    }
}

pub fn segment_grid(height: usize, width: usize, grid: usize) -> Result<RegionMap> {
    if grid == 0 || grid > height || grid > width {
        return Err(Error::Config(format!("a {grid}×{grid} grid does not fit a {height}×{width} image")));
    }
    let cell = |i: usize, n: usize| (i * grid / n).min(grid - 1);
    let ids = (0..height).flat_map(|i| (0..width).map(move |j| cell(i, height) * grid + cell(j, width))).collect();
    Ok(RegionMap { grid, height, width, ids })
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::dim(format!("explanations need a [1×H×W] image, got {:?}", image.shape()))),
    }
}

/// Renders `mask` (1 = keep) over `image`; dropped regions take `baseline`.
pub fn apply_mask(image: &Tensor<f32>, map: &RegionMap, mask: &[bool], baseline: f32) -> Tensor<f32> {
    let mut out = image.clone();
    for (v, &r) in out.data_mut().iter_mut().zip(&map.ids) {
        if !mask[r] {
            *v = baseline;
        }
    }
    out
}

/// Bernoulli(keep_prob) masks; the first is all ones, i.e. the original.
pub fn perturb_batch(
    image: &Tensor<f32>,
    map: &RegionMap,
    cfg: &LimeConfig,
    rng: &mut RngState,
) -> (Vec<Vec<bool>>, Vec<Tensor<f32>>) {
    let d = cfg.regions();
    let mut masks = vec![vec![true; d]];
    for _ in 1..cfg.num_samples {
        masks.push((0..d).map(|_| rng.bernoulli(cfg.keep_prob)).collect());
    }
    let images = masks.iter().map(|m| apply_mask(image, map, m, cfg.baseline as f32)).collect();
    (masks, images)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    /// `[g×g]` signed importances for the morph score.
    pub weights: Tensor<f64>,
    pub intercept: f64,
    pub local_fidelity_r2: f64,
}

impl Attribution {
    /// Up to `k` regions with positive weight as `(row, col, weight)`, largest
    /// first; ties go to the lower region id.
    pub fn top_regions(&self, k: usize) -> Vec<(usize, usize, f64)> {
        let g = self.weights.shape()[0];
        let mut ranked: Vec<(usize, f64)> =
            self.weights.data().iter().copied().enumerate().filter(|(_, w)| *w > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(k).map(|(id, w)| (id / g, id % g, w)).collect()
    }

    pub fn to_csv(&self) -> String {
        let g = self.weights.shape()[0];
        let mut out = String::from("region_row,region_col,weight\n");
        for (id, w) in self.weights.data().iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", id / g, id % g, w));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn kernel_weights(masks: &[Vec<bool>], kernel_width: f64) -> Vec<f64> {
    let d = masks[0].len() as f64;
    masks
        .iter()
        .map(|m| {
            let kept = m.iter().filter(|&&b| b).count() as f64;
            // Cosine distance to the all-ones mask; an empty mask is maximally far.
            let dist = if kept == 0.0 { 1.0 } else { 1.0 - (kept / d).sqrt() };
            (-(dist * dist) / (kernel_width * kernel_width)).exp()
        })
        .collect()
}

/// Weighted ridge on the masks with an unpenalised intercept (solved by
/// weighted centring), plus weighted R² on the perturbation set.
pub fn fit_local_surrogate(masks: &[Vec<bool>], scores: &[f64], cfg: &LimeConfig) -> Result<Attribution> {
    fit_weighted(masks, scores, &kernel_weights(masks, cfg.kernel_width), cfg.ridge_penalty)
}

fn fit_weighted(masks: &[Vec<bool>], scores: &[f64], pi: &[f64], ridge: f64) -> Result<Attribution> {
    if masks.len() != scores.len() || masks.is_empty() {
        return Err(Error::dim(format!("{} masks for {} scores", masks.len(), scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("surrogate fit received non-finite model scores".into()));
    }
    let (n, d) = (masks.len(), masks[0].len());
    let g = (d as f64).sqrt().round() as usize;
    // Mean-one normalisation makes the fit invariant to rescaling π, which
    // the ridge term would otherwise break.
    let mean = pi.iter().sum::<f64>() / n as f64;
    let pi: Vec<f64> = pi.iter().map(|p| p / mean).collect();
    let total = n as f64;
    let z = DMatrix::from_fn(n, d, |i, j| f64::from(u8::from(masks[i][j])));
    let zbar = DVector::from_fn(d, |j, _| (0..n).map(|i| pi[i] * z[(i, j)]).sum::<f64>() / total);
    let ybar = (0..n).map(|i| pi[i] * scores[i]).sum::<f64>() / total;
    let xc = DMatrix::from_fn(n, d, |i, j| z[(i, j)] - zbar[j]);
    let weighted = DMatrix::from_fn(n, d, |i, j| pi[i] * xc[(i, j)]);
    let yc = DVector::from_fn(n, |i, _| scores[i] - ybar);
    let mut gram = weighted.transpose() * &xc;
    for k in 0..d {
        gram[(k, k)] += ridge;
    }
    let rhs = weighted.transpose() * &yc;
    let w = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Evaluation(format!("surrogate system is singular: {e}")))?,
    };
    let intercept = ybar - zbar.dot(&w);
    let pred = &z * &w;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        ss_res += pi[i] * (scores[i] - intercept - pred[i]).powi(2);
        ss_tot += pi[i] * (scores[i] - ybar).powi(2);
    }
    let constant = scores.iter().all(|&s| s == scores[0]);
    let r2 = if constant { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(Attribution { weights: Tensor::new([g, g], w.iter().copied().collect())?, intercept, local_fidelity_r2: r2 })
}

/// Anything producing morph-class scores for a `[n×1×H×W]` batch.
pub trait Scorer: Sync {
    fn image_size(&self) -> Option<usize> {
        None
    }
    fn score(&self, images: &Tensor<f32>) -> Result<Vec<f64>>;
}

impl Scorer for VitModel<f32> {
    fn image_size(&self) -> Option<usize> {
        Some(self.config().image_size)
    }
    fn score(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        self.attack_scores(images)
    }
}

impl Scorer for TeacherCnn<f32> {
    fn image_size(&self) -> Option<usize> {
        Some(self.config().image_size)
    }
    fn score(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        self.attack_scores(images)
    }
}

/// Wraps a closure as a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&Tensor<f32>) -> Result<Vec<f64>> + Sync> Scorer for FnScorer<F> {
    fn score(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        (self.0)(images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub attribution: Attribution,
    pub map: RegionMap,
    pub overlay: Tensor<f32>,
}

const SCORE_CHUNK: usize = 64;

/// Segment, perturb, score and fit. The fit does not depend on how the
/// scoring work is chunked.
pub fn explain<S: Scorer + ?Sized>(model: &S, image: &Tensor<f32>, cfg: &LimeConfig) -> Result<Explanation> {
    cfg.validate()?;
    let (h, w) = image_dims(image)?;
    if let Some(s) = model.image_size() {
        if s != h || s != w {
            return Err(Error::dim(format!("model expects {s}×{s} images, got {h}×{w}")));
        }
    }
    let map = segment_grid(h, w, cfg.grid)?;
    let mut rng = RngState::new(cfg.seed).stream("lime");
    let (masks, images) = perturb_batch(image, &map, cfg, &mut rng);
    let chunks: Vec<Vec<f64>> =
        images.par_chunks(SCORE_CHUNK).map(|c| model.score(&Tensor::stack(c)?)).collect::<Result<_>>()?;
    let scores: Vec<f64> = chunks.concat();
    let attribution = fit_local_surrogate(&masks, &scores, cfg)?;
    let overlay = render_overlay(image, &map, &attribution, cfg.top_k);
    Ok(Explanation { attribution, map, overlay })
}

/// Dims everything outside the top-k positive regions and brightens the
/// boundary pixels of those regions.
pub fn render_overlay(image: &Tensor<f32>, map: &RegionMap, attribution: &Attribution, k: usize) -> Tensor<f32> {
    let g = map.grid;
    let top: Vec<usize> = attribution.top_regions(k).iter().map(|&(r, c, _)| r * g + c).collect();
    let (h, w) = (map.height, map.width);
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let r = map.ids[p];
            if !top.contains(&r) {
                dst[p] = 0.5 * src[p];
                continue;
            }
            let edge = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)]
                .iter()
                .any(|&(y, x)| y >= h || x >= w || map.ids[y * w + x] != r);
            if edge {
                dst[p] = 1.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(grid: usize) -> LimeConfig {
        LimeConfig { grid, num_samples: 4 * grid * grid, ..LimeConfig::default() }
    }

    fn random_masks(n: usize, d: usize, rng: &mut RngState) -> Vec<Vec<bool>> {
        let mut m: Vec<Vec<bool>> = (0..n).map(|_| (0..d).map(|_| rng.bernoulli(0.5)).collect()).collect();
        m[0] = vec![true; d];
        m
    }

    #[test]
    fn grid_partition() {
        let m = segment_grid(32, 32, 8).unwrap();
        for id in 0..64 {
            assert_eq!(m.region_pixels(id).count(), 16);
        }
        assert_eq!(m.ids.len(), 1024);
        let odd = segment_grid(30, 29, 8).unwrap();
        let areas: Vec<usize> = (0..8).map(|r| odd.rows_of(r).len()).collect();
        assert!(areas.iter().max().unwrap() - areas.iter().min().unwrap() <= 1);
        assert!(odd.ids.iter().all(|&r| r < 64));
        assert_eq!((0..64).map(|id| odd.region_pixels(id).count()).sum::<usize>(), 30 * 29);
    }

    #[test]
    fn masks_render_as_expected() {
        let img = Tensor::<f32>::from_f64([1, 8, 8], &(0..64).map(|v| v as f64 / 64.0).collect::<Vec<_>>()).unwrap();
        let m = segment_grid(8, 8, 2).unwrap();
        assert_eq!(apply_mask(&img, &m, &[true; 4], 0.5), img);
        assert!(apply_mask(&img, &m, &[false; 4], 0.5).data().iter().all(|&v| v == 0.5));
        let c = LimeConfig { grid: 2, num_samples: 4000, ..LimeConfig::default() };
        let (masks, images) = perturb_batch(&img, &m, &c, &mut RngState::new(7));
        assert_eq!(images[0], img);
        assert!(masks[0].iter().all(|&b| b));
        let kept = masks[1..].iter().flatten().filter(|&&b| b).count() as f64 / (4.0 * 3999.0);
        assert!((kept - 0.5).abs() < 0.05, "{kept}");
    }

    #[test]
    fn constant_model_gives_zero_weights() {
        let mut rng = RngState::new(1);
        let masks = random_masks(256, 16, &mut rng);
        let a = fit_local_surrogate(&masks, &vec![0.37; 256], &cfg(4)).unwrap();
        assert!(a.weights.data().iter().all(|w| w.abs() < 1e-8));
        assert!((a.intercept - 0.37).abs() < 1e-12);
        assert_eq!(a.local_fidelity_r2, 1.0);
    }

    #[test]
    fn planted_linear_model_is_recovered() {
        let mut rng = RngState::new(2);
        let masks = random_masks(4 * 64, 64, &mut rng);
        let coef: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let f: Vec<f64> = masks
            .iter()
            .map(|m| 0.3 + m.iter().zip(&coef).map(|(&b, c)| if b { *c } else { 0.0 }).sum::<f64>())
            .collect();
        let c = LimeConfig { ridge_penalty: 1e-6, ..cfg(8) };
        let a = fit_local_surrogate(&masks, &f, &c).unwrap();
        for (w, c) in a.weights.data().iter().zip(&coef) {
            assert!((w - c).abs() < 1e-3);
        }
        assert!((a.local_fidelity_r2 - 1.0).abs() < 1e-6);
        let single: Vec<f64> = masks.iter().map(|m| 2.0 * f64::from(u8::from(m[5]))).collect();
        let a = fit_local_surrogate(&masks, &single, &c).unwrap();
        for (k, w) in a.weights.data().iter().enumerate() {
            assert!((w - if k == 5 { 2.0 } else { 0.0 }).abs() < 1e-3);
        }
    }

    #[test]
    fn rescaled_kernel_weights_leave_the_fit_unchanged() {
        let mut rng = RngState::new(3);
        let masks = random_masks(100, 9, &mut rng);
        let f: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let pi = kernel_weights(&masks, 0.25);
        let a = fit_weighted(&masks, &f, &pi, 1.0).unwrap();
        let doubled: Vec<f64> = pi.iter().map(|p| 2.0 * p).collect();
        assert_eq!(fit_weighted(&masks, &f, &doubled, 1.0).unwrap(), a);
        let tripled: Vec<f64> = pi.iter().map(|p| 3.0 * p).collect();
        let b = fit_weighted(&masks, &f, &tripled, 1.0).unwrap();
        assert!(b.weights.max_abs_diff(&a.weights).unwrap() < 1e-12);
        assert!(fit_local_surrogate(
            &masks,
            &{
                let mut g = f.clone();
                g[3] = f64::NAN;
                g
            },
            &cfg(3)
        )
        .is_err());
    }

    #[test]
    fn blind_spot_region_gets_no_weight() {
        let img = Tensor::<f32>::from_f64(
            [1, 16, 16],
            &(0..256).map(|v| ((v * 37) % 100) as f64 / 100.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let map = segment_grid(16, 16, 4).unwrap();
        let blind = 6;
        let mut rng = RngState::new(4);
        let coef: Vec<f32> =
            (0..256).map(|p| if map.ids[p] == blind { 0.0 } else { rng.normal() as f32 * 0.05 }).collect();
        let scorer = FnScorer(move |b: &Tensor<f32>| {
            Ok(b.data()
                .chunks(256)
                .map(|x| {
                    let z: f32 = x.iter().zip(&coef).map(|(v, c)| v * c).sum();
                    1.0 / (1.0 + (-z as f64).exp())
                })
                .collect())
        });
        let c = LimeConfig { grid: 4, num_samples: 1000, ..LimeConfig::default() };
        let e = explain(&scorer, &img, &c).unwrap();
        assert!(e.attribution.weights.data()[blind].abs() < 1e-3, "{}", e.attribution.weights.data()[blind]);
        assert_eq!(explain(&scorer, &img, &c).unwrap(), e);
    }

    #[test]
    fn csv_and_overlay() {
        let a = Attribution {
            weights: Tensor::from_f64([2, 2], &[0.5, -0.1, 0.2, 0.0]).unwrap(),
            intercept: 0.0,
            local_fidelity_r2: 1.0,
        };
        assert_eq!(a.to_csv(), "region_row,region_col,weight\n0,0,0.5\n0,1,-0.1\n1,0,0.2\n1,1,0\n");
        assert_eq!(a.top_regions(8), vec![(0, 0, 0.5), (1, 0, 0.2)]);
        let img = Tensor::<f32>::full([1, 4, 4], 0.6);
        let o = render_overlay(&img, &segment_grid(4, 4, 2).unwrap(), &a, 1);
        // Region (0,0) is 2×2, all boundary; the rest is dimmed.
        assert_eq!(o.data()[0], 1.0);
        assert_eq!(o.data()[15], 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn fit_ignores_sample_order(seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let masks = random_masks(60, 4, &mut rng);
            let f: Vec<f64> = (0..60).map(|_| rng.uniform()).collect();
            let a = fit_local_surrogate(&masks, &f, &cfg(2)).unwrap();
            let mut order: Vec<usize> = (0..60).collect();
            rng.shuffle(&mut order);
            let m2: Vec<_> = order.iter().map(|&i| masks[i].clone()).collect();
            let f2: Vec<_> = order.iter().map(|&i| f[i]).collect();
            let b = fit_local_surrogate(&m2, &f2, &cfg(2)).unwrap();
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
