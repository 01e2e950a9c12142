use std::f64::consts::PI;

use super::{Label, LabeledSample, Technique};
use crate::tensor_nn::{RngState, Tensor};
use crate::{Error, Result};

const NOISE_SIGMA: f64 = 0.03;
const JITTER_SHIFT_PX: f64 = 0.5;
const JITTER_ROT_DEG: f64 = 2.0;
const GHOST_OPACITY: f32 = 0.1;
const GHOST_SHIFT_PX: usize = 4;
/// Per-subject landmark offset, as a fraction of the side.
const POSITION_JITTER: f64 = 0.025;

/// `(row, col, sigma)` as fractions of the image side: two eyes, mouth,
/// then the optional nose and cheek.
const LANDMARKS: [(f64, f64, f64); 5] =
    [(0.43, 0.32, 0.06), (0.43, 0.68, 0.06), (0.74, 0.5, 0.1), (0.6, 0.5, 0.07), (0.62, 0.25, 0.12)];

/// Rows `[start, end)` holding the ghosting band of landmark morphs. The band
/// sits where eyes would be in an aligned face crop.
pub fn ghost_band_rows(size: usize) -> (usize, usize) {
    let start = size * 5 / 16;
    (start, (start + size / 4).max(start + 1))
}

/// Deterministic synthetic faces. Prototypes depend only on the root seed
/// and the subject id; per-sample randomness comes from the caller's stream.
#[derive(Clone, Debug)]
pub struct Generator {
    size: usize,
    root: RngState,
}

impl Generator {
    pub fn new(size: usize, root: &RngState) -> Result<Self> {
        if size < 4 {
            return Err(Error::Config(format!("image size {size} is below the 4 px minimum")));
        }
        Ok(Self { size, root: root.stream("prototype") })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Three to five Gaussian blobs over a low-frequency sinusoid, min-max
    /// normalised to `[0, 1]`. Blobs are jittered around canonical eye, mouth,
    /// nose and cheek positions, mimicking aligned face crops.
    pub fn prototype(&self, subject: u64) -> Tensor<f32> {
        let s = self.size as f64;
        let mut rng = self.root.substream(subject);
        let extra = rng.below(3);
        let blobs: Vec<[f64; 4]> = LANDMARKS[..3 + extra]
            .iter()
            .map(|&(cy, cx, sigma)| {
                [
                    (cy + rng.uniform_range(-POSITION_JITTER, POSITION_JITTER)) * s,
                    (cx + rng.uniform_range(-POSITION_JITTER, POSITION_JITTER)) * s,
                    sigma * rng.uniform_range(0.9, 1.1) * s,
                    rng.uniform_range(0.75, 1.0),
                ]
            })
            .collect();
        let (fx, fy) = (rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5));
        let (amp, phase) = (rng.uniform_range(0.03, 0.08), rng.uniform_range(0.0, 2.0 * PI));
        let mut v = Vec::with_capacity(self.size * self.size);
        for i in 0..self.size {
            for j in 0..self.size {
                let (y, x) = (i as f64, j as f64);
                let mut p = amp * (2.0 * PI * (fx * x + fy * y) / s + phase).sin();
                for &[cy, cx, sigma, a] in &blobs {
                    p += a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
                }
                v.push(p);
            }
        }
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &p| (l.min(p), h.max(p)));
        let span = (hi - lo).max(1e-12);
        let data = v.iter().map(|p| ((p - lo) / span) as f32).collect();
        Tensor::new([1, self.size, self.size], data).expect("prototype geometry")
    }

    /// Small affine jitter plus Gaussian pixel noise, clamped.
    fn capture(&self, image: &Tensor<f32>, rng: &mut RngState) -> Tensor<f32> {
        let angle = rng.uniform_range(-JITTER_ROT_DEG, JITTER_ROT_DEG).to_radians();
        let t = [
            rng.uniform_range(-JITTER_SHIFT_PX, JITTER_SHIFT_PX),
            rng.uniform_range(-JITTER_SHIFT_PX, JITTER_SHIFT_PX),
        ];
        let mut out = warp(image, angle, 1.0, t);
        for p in out.data_mut() {
            *p = (*p + (NOISE_SIGMA * rng.normal()) as f32).clamp(0.0, 1.0);
        }
        out
    }

    pub fn bonafide(&self, subject: u64, rng: &mut RngState) -> LabeledSample {
        let image = self.capture(&self.prototype(subject), rng);
        LabeledSample { image, label: Label::Bonafide, subjects: vec![subject], technique: None }
    }

    pub fn morph(&self, a: u64, b: u64, technique: Technique, rng: &mut RngState) -> Result<LabeledSample> {
        if a == b {
            return Err(Error::Data(format!("a morph needs two distinct subjects, got {a} twice")));
        }
        let beta = rng.uniform_range(0.4, 0.6) as f32;
        let blend = self.prototype(a).zip_map(&self.prototype(b), |x, y| beta * x + (1.0 - beta) * y)?;
        let blend = match technique {
            Technique::Landmark => ghost(&blend, rng),
            Technique::Generative => regenerate(&blend, rng),
            Technique::BlendOnly => blend,
        };
        let image = self.capture(&blend, rng);
        Ok(LabeledSample { image, label: Label::Morph, subjects: vec![a, b], technique: Some(technique) })
    }
}

/// Double-edge ghosting: inside the band a horizontally shifted copy is
/// blended in at low opacity, the way misaligned landmarks double contours.
fn ghost(image: &Tensor<f32>, rng: &mut RngState) -> Tensor<f32> {
    let s = image.shape()[1];
    let (r0, r1) = ghost_band_rows(s);
    let shift = GHOST_SHIFT_PX * s / 32 + rng.below(2);
    let src = image.data();
    let mut out = image.clone();
    let dst = out.data_mut();
    for i in r0..r1.min(s) {
        for j in 0..s {
            let k = j.saturating_sub(shift);
            let edge = (src[i * s + j] - src[i * s + k]).abs();
            dst[i * s + j] =
                ((1.0 - GHOST_OPACITY) * src[i * s + j] + GHOST_OPACITY * src[i * s + k] + GHOST_OPACITY * edge)
                    .clamp(0.0, 1.0);
        }
    }
    out
}

/// Generator-style artifacts: a mild low-pass followed by mid-frequency texture.
fn regenerate(image: &Tensor<f32>, rng: &mut RngState) -> Tensor<f32> {
    let s = image.shape()[1];
    let src = image.data();
    let freq = rng.uniform_range(5.0, 8.0);
    let theta = rng.uniform_range(0.0, PI);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let (cx, cy) = (theta.cos() * freq, theta.sin() * freq);
    let mut out = image.clone();
    let dst = out.data_mut();
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            let mut n = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (y, x) = (i as i64 + di, j as i64 + dj);
                    if (0..s as i64).contains(&y) && (0..s as i64).contains(&x) {
                        acc += src[y as usize * s + x as usize];
                        n += 1.0;
                    }
                }
            }
            let smooth = 0.5 * src[i * s + j] + 0.5 * acc / n;
            let tex = 0.04 * (2.0 * PI * (cx * j as f64 + cy * i as f64) / s as f64 + phase).sin();
            dst[i * s + j] = (smooth + tex as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// Rotation by `angle` and scaling by `zoom` about the centre, then a
/// translation, with bilinear sampling and edge clamping.
pub(super) fn warp(image: &Tensor<f32>, angle: f64, zoom: f64, t: [f64; 2]) -> Tensor<f32> {
    let s = image.shape()[1];
    let c = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = image.clone();
    let dst = out.data_mut();
    for i in 0..s {
        for j in 0..s {
            let (y, x) = (i as f64 - c - t[0], j as f64 - c - t[1]);
            let sy = (cos * y - sin * x) / zoom + c;
            let sx = (sin * y + cos * x) / zoom + c;
            dst[i * s + j] = bilinear(image.data(), s, sy, sx);
        }
    }
    out
}

pub(super) fn bilinear(src: &[f32], s: usize, y: f64, x: f64) -> f32 {
    let max = (s - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = src[y0 * s + x0] * (1.0 - fx) + src[y0 * s + x1] * fx;
    let bottom = src[y1 * s + x0] * (1.0 - fx) + src[y1 * s + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator() -> Generator {
        Generator::new(32, &RngState::new(7)).unwrap()
    }

    fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
    }

    fn correlation(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum();
        let va: f64 = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn prototypes_are_deterministic_normalised_and_distinct() {
        let g = generator();
        assert_eq!(g.prototype(3), g.prototype(3));
        assert_eq!(Generator::new(32, &RngState::new(7)).unwrap().prototype(3), g.prototype(3));
        for id in 0..100u64 {
            let p = g.prototype(2 * id);
            assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(mean_abs_diff(&p, &g.prototype(2 * id + 1)) > 0.02, "pair {id}");
        }
    }

    #[test]
    fn bonafide_contract_and_correlation() {
        let g = generator();
        let mut rng = RngState::new(7).stream("samples");
        for id in 0..20 {
            let a = g.bonafide(id, &mut rng);
            let b = g.bonafide(id, &mut rng);
            a.validate().unwrap();
            assert_eq!((a.label, a.subjects.as_slice()), (Label::Bonafide, &[id][..]));
            assert_ne!(a.image, b.image);
            assert!(correlation(a.image.data(), b.image.data()) > 0.9);
        }
    }

    #[test]
    fn morph_contract() {
        let g = generator();
        let mut rng = RngState::new(7);
        for t in Technique::ALL {
            let m = g.morph(1, 2, t, &mut rng).unwrap();
            m.validate().unwrap();
            assert_eq!((m.label, m.subjects.clone(), m.technique), (Label::Morph, vec![1, 2], Some(t)));
        }
        assert!(matches!(g.morph(4, 4, Technique::Landmark, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn even_blend_stays_within_pair_range() {
        let g = generator();
        let (a, b) = (g.prototype(10), g.prototype(11));
        let blend = a.zip_map(&b, |x, y| 0.5 * x + 0.5 * y).unwrap();
        for ((m, x), y) in blend.data().iter().zip(a.data()).zip(b.data()) {
            assert!(*m >= x.min(*y) && *m <= x.max(*y));
        }
    }

    /// Nearest class centroid in raw pixel space. Centroids come from a
    /// 1000-per-class reference set so they approximate the class means;
    /// 200 fresh samples are then classified.
    fn centroid_accuracy(technique: Technique) -> f64 {
        let g = generator();
        let mut rng = RngState::new(7).stream(technique.as_str());
        let d = 32 * 32;
        let reference = 1000u64;
        let mut centroid = [vec![0.0f64; d], vec![0.0f64; d]];
        for k in 0..reference {
            let b = g.bonafide(10_000 + k, &mut rng);
            let m = g.morph(20_000 + 2 * k, 20_001 + 2 * k, technique, &mut rng).unwrap();
            for s in [b, m] {
                for (c, &v) in centroid[s.label.index()].iter_mut().zip(s.image.data()) {
                    *c += v as f64 / reference as f64;
                }
            }
        }
        let dist = |c: &[f64], x: &[f32]| c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
        let mut hits = 0;
        for k in 0..100u64 {
            let b = g.bonafide(50_000 + k, &mut rng);
            let m = g.morph(60_000 + 2 * k, 60_001 + 2 * k, technique, &mut rng).unwrap();
            for s in [b, m] {
                let guess = usize::from(dist(&centroid[1], s.image.data()) < dist(&centroid[0], s.image.data()));
                hits += usize::from(guess == s.label.index());
            }
        }
        hits as f64 / 200.0
    }

    #[test]
    fn blend_only_is_the_hardest_technique() {
        let landmark = centroid_accuracy(Technique::Landmark);
        let blend = centroid_accuracy(Technique::BlendOnly);
        assert!(landmark >= 0.8, "landmark accuracy {landmark}");
        assert!(blend <= landmark, "blend-only {blend} vs landmark {landmark}");
    }

    #[test]
    fn ghost_band_is_localised() {
        let g = generator();
        let (r0, r1) = ghost_band_rows(32);
        assert_eq!((r0, r1), (10, 18));
        let base = g.prototype(5).zip_map(&g.prototype(6), |x, y| 0.5 * (x + y)).unwrap();
        let ghosted = ghost(&base, &mut RngState::new(1));
        for i in 0..32 {
            let same = base.data()[i * 32..(i + 1) * 32] == ghosted.data()[i * 32..(i + 1) * 32];
            assert_eq!(same, !(r0..r1).contains(&i), "row {i}");
        }
    }
}
